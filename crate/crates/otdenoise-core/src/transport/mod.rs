//! Exact discrete optimal transport and moment-constrained couplings.
//!
//! `solve_ot` handles the transportation problem (both marginals prescribed)
//! with a network simplex; `solve_constrained_coupling` handles the relaxed
//! problem where columns are pinned only through moment equalities, via a
//! two-phase revised simplex. Both return basic optimal solutions with dual
//! certificates. No entropic regularization anywhere: the barycentric
//! projection semantics require sharp couplings.

mod network_simplex;
mod simplex;

use crate::gmodel::DiscreteDistribution;
use crate::linalg;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense cost matrices beyond this many entries are refused; callers are
/// expected to thin their grids (the CLI exposes `--max_dense_entries`).
pub const MAX_DENSE_ENTRIES: usize = 2_000_000;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("marginals are not balanced: rows sum to {row_sum}, columns to {col_sum}")]
    InfeasibleMarginals { row_sum: f64, col_sum: f64 },
    #[error("simplex anti-cycling budget exhausted after {pivots} pivots")]
    CycleLimit { pivots: usize },
    #[error(
        "constrained coupling is infeasible on this grid{}; phase-1 objective {phase1_objective:e}",
        constraint.map(|c| format!(" (constraint {c})")).unwrap_or_default()
    )]
    Infeasible {
        constraint: Option<usize>,
        phase1_objective: f64,
    },
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("coupling row {0} carries no mass")]
    EmptyRow(usize),
    #[error("dense problem of {entries} entries exceeds the cap of {cap}")]
    TooLarge { entries: usize, cap: usize },
    #[error("invalid transport input: {0}")]
    BadInput(String),
}

/// Dense nonnegative cost matrix.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TransportError> {
        if data.len() != rows * cols {
            return Err(TransportError::BadInput(format!(
                "cost buffer of {} entries does not match {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TransportError::BadInput(
                "cost entries must be finite".into(),
            ));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    /// Squared Euclidean distances between two stacked point sets.
    pub fn squared_distances(a: &[f64], b: &[f64], m: usize) -> Self {
        let rows = a.len() / m;
        let cols = b.len() / m;
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            let ai = &a[i * m..(i + 1) * m];
            for j in 0..cols {
                let bj = &b[j * m..(j + 1) * m];
                data[i * cols + j] = ai
                    .iter()
                    .zip(bj)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>();
            }
        }
        CostMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Nonnegative mass matrix in sparse triplet form, with the marginals and
/// dual certificates of the solve that produced it.
#[derive(Debug, Clone)]
pub struct Coupling {
    pub rows: usize,
    pub cols: usize,
    /// (row, col, mass), sorted by (row, col); basic solutions carry at most
    /// rows + cols - 1 strictly positive entries for pure transport.
    pub entries: Vec<(usize, usize, f64)>,
    pub row_marginal: Vec<f64>,
    /// Realized column sums.
    pub col_marginal: Vec<f64>,
    pub objective: f64,
    pub dual_row: Vec<f64>,
    /// Column potentials for pure transport; moment-constraint multipliers
    /// for constrained couplings.
    pub dual_col: Vec<f64>,
    /// Signed residuals of the moment constraints (empty for pure transport).
    pub constraint_residuals: Vec<f64>,
    pub iterations: usize,
}

/// Serialized form: sparse triplets for debugging.
#[derive(Debug, Serialize, Deserialize)]
pub struct CouplingJson {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl Coupling {
    pub fn total_mass(&self) -> f64 {
        let terms: Vec<f64> = self.entries.iter().map(|e| e.2).collect();
        linalg::pairwise_sum(&terms)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for &(i, _, mass) in &self.entries {
            out[i] += mass;
        }
        out
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for &(_, j, mass) in &self.entries {
            out[j] += mass;
        }
        out
    }

    pub fn to_json(&self) -> CouplingJson {
        CouplingJson {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.clone(),
        }
    }
}

/// Optimal transportation plan between prescribed marginals under the given
/// cost, with dual feasibility certified at the solution.
pub fn solve_ot(
    cost: &CostMatrix,
    row_w: &[f64],
    col_w: &[f64],
) -> Result<Coupling, TransportError> {
    solve_ot_capped(cost, row_w, col_w, MAX_DENSE_ENTRIES)
}

pub fn solve_ot_capped(
    cost: &CostMatrix,
    row_w: &[f64],
    col_w: &[f64],
    cap: usize,
) -> Result<Coupling, TransportError> {
    if cost.rows != row_w.len() || cost.cols != col_w.len() {
        return Err(TransportError::BadInput(
            "marginal lengths do not match the cost matrix".into(),
        ));
    }
    let entries = cost.rows * cost.cols;
    if entries > cap {
        return Err(TransportError::TooLarge { entries, cap });
    }
    let result = network_simplex::solve(&cost.data, row_w, col_w)?;
    let mut coupling = Coupling {
        rows: cost.rows,
        cols: cost.cols,
        entries: result.entries,
        row_marginal: row_w.to_vec(),
        col_marginal: Vec::new(),
        objective: result.objective,
        dual_row: result.dual_row,
        dual_col: result.dual_col,
        constraint_residuals: Vec::new(),
        iterations: result.iterations,
    };
    coupling.col_marginal = coupling.column_sums();
    Ok(coupling)
}

// ---------------------------------------------------------------------------
// Constraint functions

/// Functions whose expectations are pinned by the constrained coupling.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConstraintFn {
    /// eta -> prod_d eta_d^powers_d, total degree at most 4.
    Monomial { powers: Vec<u32> },
    /// Euclidean distance to an axis-aligned box (None = unbounded side).
    SupportBox {
        lower: Vec<Option<f64>>,
        upper: Vec<Option<f64>>,
    },
    /// Distance to the half-space { theta : normal . theta <= offset }.
    SupportHalfSpace { normal: Vec<f64>, offset: f64 },
}

impl ConstraintFn {
    pub fn validate(&self, m: usize) -> Result<(), TransportError> {
        match self {
            ConstraintFn::Monomial { powers } => {
                if powers.len() != m {
                    return Err(TransportError::BadInput(format!(
                        "monomial exponent vector has length {}, expected {m}",
                        powers.len()
                    )));
                }
                let degree: u32 = powers.iter().sum();
                if degree > 4 {
                    return Err(TransportError::BadInput(format!(
                        "monomial total degree {degree} exceeds 4"
                    )));
                }
            }
            ConstraintFn::SupportBox { lower, upper } => {
                if lower.len() != m || upper.len() != m {
                    return Err(TransportError::BadInput(
                        "support box bounds must match the dimension".into(),
                    ));
                }
            }
            ConstraintFn::SupportHalfSpace { normal, .. } => {
                if normal.len() != m || normal.iter().all(|v| *v == 0.0) {
                    return Err(TransportError::BadInput(
                        "half-space normal must be a nonzero m-vector".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, eta: &[f64]) -> f64 {
        match self {
            ConstraintFn::Monomial { powers } => eta
                .iter()
                .zip(powers)
                .map(|(x, &p)| x.powi(p as i32))
                .product(),
            ConstraintFn::SupportBox { lower, upper } => {
                let mut d2 = 0.0;
                for (d, x) in eta.iter().enumerate() {
                    let mut gap: f64 = 0.0;
                    if let Some(lo) = lower[d] {
                        gap = gap.max(lo - x);
                    }
                    if let Some(hi) = upper[d] {
                        gap = gap.max(x - hi);
                    }
                    d2 += gap * gap;
                }
                d2.sqrt()
            }
            ConstraintFn::SupportHalfSpace { normal, offset } => {
                let dot: f64 = eta.iter().zip(normal).map(|(x, a)| x * a).sum();
                let norm: f64 = normal.iter().map(|a| a * a).sum::<f64>().sqrt();
                ((dot - offset) / norm).max(0.0)
            }
        }
    }
}

/// A set of constraint functions together with their target expectations.
#[derive(Debug, Clone)]
pub struct ConstraintSpec {
    pub functions: Vec<ConstraintFn>,
    pub targets: Vec<f64>,
}

impl ConstraintSpec {
    pub fn new(functions: Vec<ConstraintFn>, targets: Vec<f64>) -> Result<Self, TransportError> {
        if functions.is_empty() || functions.len() != targets.len() {
            return Err(TransportError::BadInput(
                "constraint functions and targets must be nonempty and equal in number".into(),
            ));
        }
        Ok(ConstraintSpec { functions, targets })
    }

    /// Targets taken as the prior expectations of the constraint functions.
    pub fn with_targets_from(
        functions: Vec<ConstraintFn>,
        prior: &DiscreteDistribution,
    ) -> Result<Self, TransportError> {
        for f in &functions {
            f.validate(prior.m())?;
        }
        let targets = functions
            .iter()
            .map(|f| {
                let terms: Vec<f64> = (0..prior.len())
                    .map(|j| prior.weights()[j] * f.eval(prior.atom(j)))
                    .collect();
                linalg::pairwise_sum(&terms)
            })
            .collect();
        ConstraintSpec::new(functions, targets)
    }

    pub fn k(&self) -> usize {
        self.functions.len()
    }
}

/// Minimum-cost coupling whose rows are pinned to `row_w` and whose columns
/// satisfy the moment constraints `sum_j psi_l(grid_j) mass_.j = t_l`.
pub fn solve_constrained_coupling(
    cost: &CostMatrix,
    row_w: &[f64],
    constraints: &ConstraintSpec,
    grid_atoms: &[f64],
    m: usize,
) -> Result<Coupling, TransportError> {
    solve_constrained_coupling_capped(cost, row_w, constraints, grid_atoms, m, MAX_DENSE_ENTRIES)
}

pub fn solve_constrained_coupling_capped(
    cost: &CostMatrix,
    row_w: &[f64],
    constraints: &ConstraintSpec,
    grid_atoms: &[f64],
    m: usize,
    cap: usize,
) -> Result<Coupling, TransportError> {
    let n = cost.rows;
    let g = cost.cols;
    if row_w.len() != n {
        return Err(TransportError::BadInput(
            "row marginal length does not match the cost matrix".into(),
        ));
    }
    if grid_atoms.len() != g * m {
        return Err(TransportError::BadInput(
            "grid atom buffer does not match the cost matrix columns".into(),
        ));
    }
    if n * g > cap {
        return Err(TransportError::TooLarge {
            entries: n * g,
            cap,
        });
    }
    let k = constraints.k();
    for f in &constraints.functions {
        f.validate(m)?;
    }
    let mut psi = vec![0.0; k * g];
    for (l, f) in constraints.functions.iter().enumerate() {
        for j in 0..g {
            let v = f.eval(&grid_atoms[j * m..(j + 1) * m]);
            if !v.is_finite() {
                return Err(TransportError::BadInput(format!(
                    "constraint {l} is not finite at grid atom {j}"
                )));
            }
            psi[l * g + j] = v;
        }
    }

    let lp = simplex::MomentLp {
        n,
        g,
        k,
        cost: &cost.data,
        row_w,
        psi: &psi,
        targets: &constraints.targets,
    };
    let result = lp.solve()?;
    let mut coupling = Coupling {
        rows: n,
        cols: g,
        entries: result.entries,
        row_marginal: row_w.to_vec(),
        col_marginal: Vec::new(),
        objective: result.objective,
        dual_row: result.dual_row,
        dual_col: result.dual_constraint,
        constraint_residuals: result.residuals[n..].to_vec(),
        iterations: result.iterations,
    };
    coupling.col_marginal = coupling.column_sums();
    Ok(coupling)
}

/// Conditional mean of the column atom given the row:
/// row i maps to sum_j mass_ij atom_j / sum_j mass_ij.
pub fn barycentric_projection(
    pi: &Coupling,
    atoms: &[f64],
    m: usize,
) -> Result<Vec<f64>, TransportError> {
    if atoms.len() != pi.cols * m {
        return Err(TransportError::BadInput(
            "atom buffer does not match the coupling columns".into(),
        ));
    }
    let mut out = vec![0.0; pi.rows * m];
    let mut mass = vec![0.0; pi.rows];
    for &(i, j, w) in &pi.entries {
        mass[i] += w;
        for d in 0..m {
            out[i * m + d] += w * atoms[j * m + d];
        }
    }
    for i in 0..pi.rows {
        if mass[i] <= 0.0 {
            return Err(TransportError::EmptyRow(i));
        }
        for d in 0..m {
            out[i * m + d] /= mass[i];
        }
    }
    Ok(out)
}

/// Squared 2-Wasserstein distance between discrete distributions.
pub fn w2_sq(a: &DiscreteDistribution, b: &DiscreteDistribution) -> Result<f64, TransportError> {
    if a.m() != b.m() {
        return Err(TransportError::BadInput(
            "distributions live in different dimensions".into(),
        ));
    }
    let cost = CostMatrix::squared_distances(a.atoms(), b.atoms(), a.m());
    let coupling = solve_ot(&cost, a.weights(), b.weights())?;
    Ok(coupling.objective)
}

/// Worst complementary-slackness violation of a coupling: for every carried
/// entry, the reduced cost should vanish.
pub fn complementary_slackness_gap(cost: &CostMatrix, coupling: &Coupling) -> f64 {
    let mut worst: f64 = 0.0;
    for &(i, j, mass) in &coupling.entries {
        if mass > 1e-12 {
            let rc = cost.get(i, j) - coupling.dual_row[i] - coupling.dual_col[j];
            worst = worst.max(rc.abs());
        }
    }
    worst
}

/// Most negative reduced cost over all cells (dual feasibility check).
pub fn dual_feasibility_gap(cost: &CostMatrix, coupling: &Coupling) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..coupling.rows {
        for j in 0..coupling.cols {
            let rc = cost.get(i, j) - coupling.dual_row[i] - coupling.dual_col[j];
            worst = worst.min(rc);
        }
    }
    worst
}
