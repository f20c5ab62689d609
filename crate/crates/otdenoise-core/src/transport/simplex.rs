//! Two-phase revised simplex for the moment-constrained coupling LP:
//!
//! ```text
//! minimize    sum_ij c_ij x_ij
//! subject to  sum_j x_ij            = a_i        (one row per observation)
//!             sum_ij psi_l(eta_j) x_ij = t_l     (one row per constraint)
//!             x >= 0
//! ```
//!
//! Columns have at most 1 + k nonzeros (the observation row plus the k
//! constraint rows), which keeps pricing cheap; the basis inverse is dense
//! and refreshed periodically. The final basic solution and duals are
//! recomputed from a fresh LU factorization of the basis so the reported
//! constraint residuals reflect the actual solution, not accumulated pivot
//! drift.

use super::TransportError;
use crate::linalg;

pub(crate) struct LpResult {
    /// Basic structural variables (row, col, mass), sorted by (row, col).
    pub entries: Vec<(usize, usize, f64)>,
    pub objective: f64,
    /// Duals for the observation rows.
    pub dual_row: Vec<f64>,
    /// Duals for the moment-constraint rows.
    pub dual_constraint: Vec<f64>,
    /// Signed residuals of every constraint row, observation rows first.
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

pub(crate) struct MomentLp<'a> {
    pub n: usize,
    pub g: usize,
    pub k: usize,
    /// n x g cost.
    pub cost: &'a [f64],
    /// Row marginals (length n).
    pub row_w: &'a [f64],
    /// k x g constraint function values on the grid.
    pub psi: &'a [f64],
    /// Constraint targets (length k).
    pub targets: &'a [f64],
}

struct Basis {
    m: usize,
    /// Basic variable per row; structural vars are < n*g, artificial p is
    /// n*g + p.
    vars: Vec<usize>,
    inv: Vec<f64>,
    x: Vec<f64>,
}

impl<'a> MomentLp<'a> {
    fn nvars(&self) -> usize {
        self.n * self.g
    }

    fn rhs(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.n + self.k);
        b.extend_from_slice(self.row_w);
        b.extend_from_slice(self.targets);
        b
    }

    /// Sparse column of a structural variable: (rows, coefficients).
    fn column(&self, var: usize, rows: &mut Vec<usize>, coefs: &mut Vec<f64>) {
        rows.clear();
        coefs.clear();
        let (i, j) = (var / self.g, var % self.g);
        rows.push(i);
        coefs.push(1.0);
        for l in 0..self.k {
            let v = self.psi[l * self.g + j];
            if v != 0.0 {
                rows.push(self.n + l);
                coefs.push(v);
            }
        }
    }

    fn artificial_sign(&self, p: usize, b: &[f64]) -> f64 {
        if b[p] >= 0.0 {
            1.0
        } else {
            -1.0
        }
    }

    pub(crate) fn solve(&self) -> Result<LpResult, TransportError> {
        let m = self.n + self.k;
        let nvars = self.nvars();
        let b = self.rhs();
        let mut basis = Basis {
            m,
            vars: (0..m).map(|p| nvars + p).collect(),
            inv: {
                let mut inv = vec![0.0; m * m];
                for p in 0..m {
                    inv[p * m + p] = self.artificial_sign(p, &b);
                }
                inv
            },
            x: b.iter().map(|v| v.abs()).collect(),
        };

        let scale_b = 1.0 + b.iter().map(|v| v.abs()).sum::<f64>();
        let mut iterations = 0usize;

        // Phase 1: minimize the sum of artificials.
        let phase1_cost = |var: usize| if var >= nvars { 1.0 } else { 0.0 };
        self.run_phase(&mut basis, &b, &phase1_cost, &mut iterations)?;
        let phase1_obj: f64 = basis
            .vars
            .iter()
            .zip(&basis.x)
            .filter(|(v, _)| **v >= nvars)
            .map(|(_, x)| x.abs())
            .sum();
        if phase1_obj > 1e-9 * scale_b {
            let constraint = basis
                .vars
                .iter()
                .zip(&basis.x)
                .filter(|(v, _)| **v >= nvars)
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                .map(|(v, _)| v - nvars)
                .filter(|&p| p >= self.n)
                .map(|p| p - self.n);
            return Err(TransportError::Infeasible {
                constraint,
                phase1_objective: phase1_obj,
            });
        }

        // Phase 2: minimize the true cost; artificials may not re-enter.
        let phase2_cost = |var: usize| {
            if var >= nvars {
                0.0
            } else {
                self.cost[var]
            }
        };
        self.run_phase(&mut basis, &b, &phase2_cost, &mut iterations)?;

        // Polish: recompute the basic solution and duals from a fresh LU
        // factorization of the basis matrix.
        let mut bm = vec![0.0; m * m];
        let mut rows = Vec::new();
        let mut coefs = Vec::new();
        for (p, &var) in basis.vars.iter().enumerate() {
            if var >= nvars {
                bm[(var - nvars) * m + p] = self.artificial_sign(var - nvars, &b);
            } else {
                self.column(var, &mut rows, &mut coefs);
                for (&row, &c) in rows.iter().zip(&coefs) {
                    bm[row * m + p] = c;
                }
            }
        }
        let (lu, perm) = linalg::lu_factor(m, &bm).ok_or(TransportError::Unbounded)?;
        let xb = linalg::lu_solve(m, &lu, &perm, &b);
        let cb: Vec<f64> = basis.vars.iter().map(|&v| phase2_cost(v)).collect();
        let y = linalg::lu_solve_transpose(m, &lu, &perm, &cb);

        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        let mut objective_terms = Vec::new();
        let mut residuals = vec![0.0; m];
        for p in 0..m {
            residuals[p] -= b[p];
        }
        for (p, &var) in basis.vars.iter().enumerate() {
            let mass = xb[p];
            if var < nvars {
                if mass < -1e-9 * scale_b {
                    // Should not survive the ratio test; report as a cycle
                    // failure rather than emit a negative mass.
                    return Err(TransportError::CycleLimit { pivots: iterations });
                }
                let mass = mass.max(0.0);
                if mass > 0.0 {
                    entries.push((var / self.g, var % self.g, mass));
                    objective_terms.push(self.cost[var] * mass);
                }
                self.column(var, &mut rows, &mut coefs);
                for (&row, &c) in rows.iter().zip(&coefs) {
                    residuals[row] += c * mass;
                }
            } else {
                residuals[var - nvars] += self.artificial_sign(var - nvars, &b) * mass;
            }
        }
        entries.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));

        Ok(LpResult {
            entries,
            objective: linalg::pairwise_sum(&objective_terms),
            dual_row: y[..self.n].to_vec(),
            dual_constraint: y[self.n..].to_vec(),
            residuals,
            iterations,
        })
    }

    fn run_phase(
        &self,
        basis: &mut Basis,
        b: &[f64],
        cost_of: &dyn Fn(usize) -> f64,
        iterations: &mut usize,
    ) -> Result<(), TransportError> {
        let m = basis.m;
        let nvars = self.nvars();
        let max_cost = (0..nvars)
            .map(|v| cost_of(v).abs())
            .fold(0.0f64, f64::max)
            .max(1.0);
        let enter_tol = 1e-10 * max_cost;
        let stall_limit = 50 * (m + self.g);
        let pivot_limit = 20_000 + 400 * m + 4 * nvars;

        let mut is_basic = vec![false; nvars];
        for &v in &basis.vars {
            if v < nvars {
                is_basic[v] = true;
            }
        }

        let mut stalled = 0usize;
        let mut bland = false;
        let mut pivots_in_phase = 0usize;
        let mut since_refactor = 0usize;
        let mut d = vec![0.0; m];
        let mut s = vec![0.0; self.g];

        loop {
            // Duals y = c_B B^{-1}.
            let mut y = vec![0.0; m];
            for (p, &var) in basis.vars.iter().enumerate() {
                let c = cost_of(var);
                if c != 0.0 {
                    for q in 0..m {
                        y[q] += c * basis.inv[p * m + q];
                    }
                }
            }
            // Per-grid-column constraint contribution to the reduced cost.
            for (j, slot) in s.iter_mut().enumerate() {
                let mut acc = 0.0;
                for l in 0..self.k {
                    acc += y[self.n + l] * self.psi[l * self.g + j];
                }
                *slot = acc;
            }

            let mut entering = usize::MAX;
            let mut best = -enter_tol;
            'scan: for i in 0..self.n {
                let yi = y[i];
                let base = i * self.g;
                for j in 0..self.g {
                    let var = base + j;
                    if is_basic[var] {
                        continue;
                    }
                    let rc = cost_of(var) - yi - s[j];
                    if bland {
                        if rc < -enter_tol {
                            entering = var;
                            break 'scan;
                        }
                    } else if rc < best {
                        best = rc;
                        entering = var;
                    }
                }
            }
            if entering == usize::MAX {
                return Ok(());
            }

            *iterations += 1;
            pivots_in_phase += 1;
            if pivots_in_phase > pivot_limit {
                return Err(TransportError::CycleLimit {
                    pivots: *iterations,
                });
            }

            // d = B^{-1} A_q using the sparse column.
            let mut rows = Vec::new();
            let mut coefs = Vec::new();
            self.column(entering, &mut rows, &mut coefs);
            for p in 0..m {
                let mut acc = 0.0;
                for (&row, &c) in rows.iter().zip(&coefs) {
                    acc += basis.inv[p * m + row] * c;
                }
                d[p] = acc;
            }

            // Ratio test. Basic artificials at zero level leave first so
            // feasibility is preserved; otherwise standard minimum ratio with
            // lowest-variable tie break.
            let mut leave = usize::MAX;
            let mut theta = f64::INFINITY;
            for (p, &var) in basis.vars.iter().enumerate() {
                if var >= nvars && d[p].abs() > 1e-9 && basis.x[p].abs() <= 1e-11 {
                    leave = p;
                    theta = 0.0;
                    break;
                }
            }
            if leave == usize::MAX {
                for p in 0..m {
                    if d[p] > 1e-11 {
                        let ratio = basis.x[p] / d[p];
                        if ratio < theta - 1e-15 * (1.0 + theta.abs())
                            || (ratio <= theta + 1e-15 * (1.0 + theta.abs())
                                && (leave == usize::MAX || basis.vars[p] < basis.vars[leave]))
                        {
                            theta = ratio;
                            leave = p;
                        }
                    }
                }
            }
            if leave == usize::MAX {
                return Err(TransportError::Unbounded);
            }
            let theta = theta.max(0.0);

            if theta == 0.0 {
                stalled += 1;
                if stalled > stall_limit {
                    bland = true;
                }
            } else {
                stalled = 0;
            }

            // Pivot: update x_B and B^{-1}.
            let pivot = d[leave];
            for p in 0..m {
                if p != leave {
                    basis.x[p] -= theta * d[p];
                    if basis.x[p] < 0.0 {
                        basis.x[p] = 0.0;
                    }
                }
            }
            basis.x[leave] = theta;
            let inv_pivot = 1.0 / pivot;
            for q in 0..m {
                basis.inv[leave * m + q] *= inv_pivot;
            }
            for p in 0..m {
                if p == leave {
                    continue;
                }
                let f = d[p];
                if f != 0.0 {
                    for q in 0..m {
                        basis.inv[p * m + q] -= f * basis.inv[leave * m + q];
                    }
                }
            }
            let old = basis.vars[leave];
            if old < nvars {
                is_basic[old] = false;
            }
            basis.vars[leave] = entering;
            is_basic[entering] = true;

            since_refactor += 1;
            if since_refactor >= 256 {
                since_refactor = 0;
                self.refactor(basis, b)?;
            }
        }
    }

    /// Rebuild B^{-1} and x_B from scratch to shed accumulated pivot error.
    fn refactor(&self, basis: &mut Basis, b: &[f64]) -> Result<(), TransportError> {
        let m = basis.m;
        let nvars = self.nvars();
        let mut bm = vec![0.0; m * m];
        let mut rows = Vec::new();
        let mut coefs = Vec::new();
        for (p, &var) in basis.vars.iter().enumerate() {
            if var >= nvars {
                bm[(var - nvars) * m + p] = self.artificial_sign(var - nvars, b);
            } else {
                self.column(var, &mut rows, &mut coefs);
                for (&row, &c) in rows.iter().zip(&coefs) {
                    bm[row * m + p] = c;
                }
            }
        }
        let (lu, perm) = linalg::lu_factor(m, &bm).ok_or(TransportError::Unbounded)?;
        let mut inv = vec![0.0; m * m];
        let mut e = vec![0.0; m];
        for col in 0..m {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[col] = 1.0;
            let sol = linalg::lu_solve(m, &lu, &perm, &e);
            for p in 0..m {
                inv[p * m + col] = sol[p];
            }
        }
        basis.inv = inv;
        let xb = linalg::lu_solve(m, &lu, &perm, b);
        basis.x = xb.iter().map(|v| v.max(0.0)).collect();
        Ok(())
    }
}
