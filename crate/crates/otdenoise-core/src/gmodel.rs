//! Nonparametric prior estimation and posterior computation.
//!
//! The NPMLE over a fixed atom grid is fit by multiplicative (EM fixed-point)
//! updates on the weight simplex, stopped by a first-order optimality
//! certificate: at the returned weights the per-atom gradient
//! `(1/n) sum_i p_j(Z_i) / fhat(Z_i)` never exceeds `1 + kkt_tol`. An
//! active-set heuristic drops atoms whose weight has collapsed, but the final
//! certificate is always evaluated over the full grid (dropped atoms are
//! reinstated if they turn out to violate it).

use crate::bures::SpdMatrix;
use crate::linalg::{self, Matrix};
use crate::models::{Dataset, DensityCache, LikelihoodModel, ModelError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GmodelError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("grid of {requested} atoms exceeds the configured cap of {cap}")]
    GridTooLarge { requested: usize, cap: usize },
    #[error("observation row {row} has zero likelihood under every atom")]
    AllAtomsZeroLikelihood { row: usize },
    #[error("NPMLE did not reach the optimality certificate: KKT gap {kkt_gap:e} after {iterations} iterations")]
    NonConvergence { kkt_gap: f64, iterations: usize },
    #[error("invalid discrete distribution: {0}")]
    InvalidDistribution(String),
}

/// Weighted atoms in R^m.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    m: usize,
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(m: usize, atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self, GmodelError> {
        if m == 0 || atoms.len() != weights.len() * m {
            return Err(GmodelError::InvalidDistribution(format!(
                "atom buffer of length {} does not match {} weights in dimension {}",
                atoms.len(),
                weights.len(),
                m
            )));
        }
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(GmodelError::InvalidDistribution(
                "weights must be nonnegative and finite".into(),
            ));
        }
        let total = linalg::pairwise_sum(&weights);
        if (total - 1.0).abs() > 1e-10 {
            return Err(GmodelError::InvalidDistribution(format!(
                "weights sum to {total}, not 1"
            )));
        }
        Ok(DiscreteDistribution { m, atoms, weights })
    }

    pub fn point_mass(atom: Vec<f64>) -> Self {
        let m = atom.len();
        DiscreteDistribution {
            m,
            atoms: atom,
            weights: vec![1.0],
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn atom(&self, j: usize) -> &[f64] {
        &self.atoms[j * self.m..(j + 1) * self.m]
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Drops atoms with weight below `threshold` and renormalizes.
    pub fn pruned(&self, threshold: f64) -> DiscreteDistribution {
        let mut atoms = Vec::new();
        let mut weights = Vec::new();
        for j in 0..self.len() {
            if self.weights[j] > threshold {
                atoms.extend_from_slice(self.atom(j));
                weights.push(self.weights[j]);
            }
        }
        let total: f64 = linalg::pairwise_sum(&weights);
        for w in weights.iter_mut() {
            *w /= total;
        }
        DiscreteDistribution {
            m: self.m,
            atoms,
            weights,
        }
    }
}

/// Gaussian-mixture prior with a common component covariance: the discrete
/// base measure convolved with N(0, kernel_cov).
#[derive(Debug, Clone)]
pub struct SmoothPrior {
    pub base: DiscreteDistribution,
    pub kernel_cov: SpdMatrix,
}

/// Either form of fitted prior accepted by the posterior machinery.
#[derive(Debug, Clone)]
pub enum Prior {
    Discrete(DiscreteDistribution),
    Smooth(SmoothPrior),
}

impl Prior {
    pub fn m(&self) -> usize {
        match self {
            Prior::Discrete(d) => d.m(),
            Prior::Smooth(s) => s.base.m(),
        }
    }

    pub fn base(&self) -> &DiscreteDistribution {
        match self {
            Prior::Discrete(d) => d,
            Prior::Smooth(s) => &s.base,
        }
    }

    pub fn kernel_cov(&self) -> Option<&SpdMatrix> {
        match self {
            Prior::Discrete(_) => None,
            Prior::Smooth(s) => Some(&s.kernel_cov),
        }
    }
}

/// JSON wire format for fitted priors.
#[derive(Debug, Serialize, Deserialize)]
pub struct PriorJson {
    pub atoms: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_cov: Option<Vec<Vec<f64>>>,
}

impl Prior {
    pub fn to_json(&self) -> PriorJson {
        let base = self.base();
        PriorJson {
            atoms: (0..base.len()).map(|j| base.atom(j).to_vec()).collect(),
            weights: base.weights().to_vec(),
            kernel_cov: self.kernel_cov().map(|k| {
                (0..k.dim())
                    .map(|i| (0..k.dim()).map(|j| k.get(i, j)).collect())
                    .collect()
            }),
        }
    }

    pub fn from_json(json: PriorJson) -> Result<Self, GmodelError> {
        let r = json.weights.len();
        if json.atoms.len() != r || r == 0 {
            return Err(GmodelError::InvalidDistribution(
                "atom and weight counts differ or are empty".into(),
            ));
        }
        let m = json.atoms[0].len();
        let mut flat = Vec::with_capacity(r * m);
        for a in &json.atoms {
            if a.len() != m {
                return Err(GmodelError::InvalidDistribution("ragged atoms".into()));
            }
            flat.extend_from_slice(a);
        }
        let base = DiscreteDistribution::new(m, flat, json.weights)?;
        match json.kernel_cov {
            None => Ok(Prior::Discrete(base)),
            Some(rows) => {
                let mut data = Vec::with_capacity(m * m);
                for row in &rows {
                    data.extend_from_slice(row);
                }
                let k = SpdMatrix::new(m, data).map_err(|e| {
                    GmodelError::InvalidDistribution(format!("bad kernel covariance: {e}"))
                })?;
                Ok(Prior::Smooth(SmoothPrior {
                    base,
                    kernel_cov: k,
                }))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Grid construction

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "strategy")]
pub enum GridStrategy {
    /// Atoms are the standardized observations themselves.
    Exemplar,
    /// Equispaced lattice over the bounding box of the standardized data.
    Lattice { points_per_axis: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridOptions {
    #[serde(flatten)]
    pub strategy: GridStrategy,
    #[serde(default = "default_grid_cap")]
    pub cap: usize,
}

fn default_grid_cap() -> usize {
    100_000
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            strategy: GridStrategy::Exemplar,
            cap: default_grid_cap(),
        }
    }
}

impl GridOptions {
    pub fn lattice(points_per_axis: usize) -> Self {
        GridOptions {
            strategy: GridStrategy::Lattice { points_per_axis },
            cap: default_grid_cap(),
        }
    }
}

/// Builds the atom grid for prior fitting (flat, row-major, dimension m).
pub fn build_grid(
    data: &Dataset,
    model: &LikelihoodModel,
    opts: &GridOptions,
) -> Result<Vec<f64>, GmodelError> {
    let m = data.m();
    let std = crate::models::standardize(data, model);
    let clip_nonneg = !model.is_gaussian();
    match &opts.strategy {
        GridStrategy::Exemplar => {
            // Exact duplicates are redundant atoms; keep first occurrence.
            let mut out: Vec<f64> = Vec::with_capacity(std.len());
            let mut seen: std::collections::HashSet<Vec<u64>> = std::collections::HashSet::new();
            for i in 0..data.n() {
                let mut row: Vec<f64> = std[i * m..(i + 1) * m].to_vec();
                if clip_nonneg {
                    for v in row.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
                let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
                if seen.insert(key) {
                    out.extend_from_slice(&row);
                }
            }
            if out.len() / m > opts.cap {
                return Err(GmodelError::GridTooLarge {
                    requested: out.len() / m,
                    cap: opts.cap,
                });
            }
            Ok(out)
        }
        GridStrategy::Lattice { points_per_axis } => {
            let k = (*points_per_axis).max(1);
            let total = k.checked_pow(m as u32).unwrap_or(usize::MAX);
            if total > opts.cap {
                return Err(GmodelError::GridTooLarge {
                    requested: total,
                    cap: opts.cap,
                });
            }
            let mut lo = vec![f64::INFINITY; m];
            let mut hi = vec![f64::NEG_INFINITY; m];
            for i in 0..data.n() {
                for d in 0..m {
                    let v = std[i * m + d];
                    lo[d] = lo[d].min(v);
                    hi[d] = hi[d].max(v);
                }
            }
            if clip_nonneg {
                for v in lo.iter_mut() {
                    *v = v.max(0.0);
                }
                for v in hi.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            let mut out = Vec::with_capacity(total * m);
            let mut index = vec![0usize; m];
            loop {
                for d in 0..m {
                    let frac = if k == 1 {
                        0.5
                    } else {
                        index[d] as f64 / (k - 1) as f64
                    };
                    out.push(lo[d] + frac * (hi[d] - lo[d]));
                }
                let mut d = m;
                loop {
                    if d == 0 {
                        return Ok(out);
                    }
                    d -= 1;
                    index[d] += 1;
                    if index[d] < k {
                        break;
                    }
                    index[d] = 0;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// NPMLE weight fitting

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    /// Relative log-likelihood gain below which the fit is a convergence
    /// candidate.
    pub tol: f64,
    pub max_iter: usize,
    /// First-order optimality certificate: the maximal per-atom gradient may
    /// exceed 1 by at most this much.
    pub kkt_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-9,
            max_iter: 5000,
            kkt_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitDiagnostics {
    pub log_likelihood: f64,
    pub kkt_gap: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct NpmleFit {
    pub prior: DiscreteDistribution,
    pub diagnostics: FitDiagnostics,
}

/// Atoms with weight below this after fitting are dropped from the returned
/// distribution (the certificate is computed before dropping).
const WEIGHT_PRUNE: f64 = 1e-10;

struct ShiftedLikelihood {
    n: usize,
    r: usize,
    /// exp(loglik - rowmax), row-major n x r.
    dens: Vec<f64>,
    rowmax: Vec<f64>,
}

fn shifted_likelihood(
    atoms: &[f64],
    m: usize,
    data: &Dataset,
    cache: &DensityCache,
) -> Result<ShiftedLikelihood, GmodelError> {
    let n = data.n();
    let r = atoms.len() / m;
    let mut dens = vec![0.0; n * r];
    let mut rowmax = vec![0.0; n];
    let row_results: Vec<Result<f64, usize>> = dens
        .par_chunks_mut(r)
        .enumerate()
        .map(|(i, row)| {
            let z = data.row(i);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..r {
                let ll = cache.log_density(i, z, &atoms[j * m..(j + 1) * m]);
                row[j] = ll;
                mx = mx.max(ll);
            }
            if !mx.is_finite() {
                return Err(i);
            }
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
            }
            Ok(mx)
        })
        .collect();
    for (i, res) in row_results.into_iter().enumerate() {
        match res {
            Ok(mx) => rowmax[i] = mx,
            Err(row) => return Err(GmodelError::AllAtomsZeroLikelihood { row }),
        }
    }
    Ok(ShiftedLikelihood { n, r, dens, rowmax })
}

impl ShiftedLikelihood {
    /// Mixture density per row (shifted scale) for weights w.
    fn mixture(&self, w: &[f64], active: &[usize], f: &mut [f64]) {
        for i in 0..self.n {
            let row = &self.dens[i * self.r..(i + 1) * self.r];
            let mut acc = 0.0;
            for &j in active {
                acc += w[j] * row[j];
            }
            f[i] = acc;
        }
    }

    /// Average log-likelihood (unshifted) given mixture values f.
    fn objective(&self, f: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.n).map(|i| f[i].ln() + self.rowmax[i]).collect();
        linalg::pairwise_sum(&terms) / self.n as f64
    }

    /// Gradient of a single column: (1/n) sum_i dens_ij / f_i.
    fn column_gradient(&self, f: &[f64], j: usize) -> f64 {
        let mut acc = 0.0;
        for (i, fi) in f.iter().enumerate() {
            acc += self.dens[i * self.r + j] / fi;
        }
        acc / self.n as f64
    }

    /// Gradient over the given columns: g_j = (1/n) sum_i dens_ij / f_i.
    /// Rows are accumulated in fixed-size blocks combined pairwise.
    fn gradient(&self, f: &[f64], columns: &[usize], out: &mut [f64]) {
        const BLOCK: usize = 256;
        let nblocks = self.n.div_ceil(BLOCK);
        let mut partials = vec![vec![0.0; columns.len()]; nblocks];
        for (b, partial) in partials.iter_mut().enumerate() {
            let lo = b * BLOCK;
            let hi = (lo + BLOCK).min(self.n);
            for i in lo..hi {
                let row = &self.dens[i * self.r..(i + 1) * self.r];
                let coef = 1.0 / (self.n as f64 * f[i]);
                for (slot, &j) in partial.iter_mut().zip(columns) {
                    *slot += coef * row[j];
                }
            }
        }
        // Pairwise tree combine over blocks.
        let mut step = 1;
        while step < nblocks {
            let mut i = 0;
            while i + step < nblocks {
                let (head, tail) = partials.split_at_mut(i + step);
                let dst = &mut head[i];
                let src = &tail[0];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
                i += 2 * step;
            }
            step *= 2;
        }
        out.copy_from_slice(&partials[0]);
    }
}

/// Maximizes the mixture log-likelihood over the weight simplex for a fixed
/// atom grid.
pub fn fit_weights(
    atoms: &[f64],
    data: &Dataset,
    model: &LikelihoodModel,
    opts: &FitOptions,
) -> Result<NpmleFit, GmodelError> {
    fit_weights_with(atoms, data, model, None, opts)
}

pub(crate) fn fit_weights_with(
    atoms: &[f64],
    data: &Dataset,
    model: &LikelihoodModel,
    inflate: Option<&SpdMatrix>,
    opts: &FitOptions,
) -> Result<NpmleFit, GmodelError> {
    model.validate(data)?;
    let m = data.m();
    assert!(
        !atoms.is_empty() && atoms.len() % m == 0,
        "atom buffer must hold a positive multiple of m entries"
    );
    let cache = DensityCache::new(model, inflate)?;
    let lik = shifted_likelihood(atoms, m, data, &cache)?;
    let (n, r) = (lik.n, lik.r);

    // Columns that maximize some row's likelihood are never pruned: they
    // keep every mixture density bounded away from zero.
    let mut protected = vec![false; r];
    for i in 0..n {
        let row = &lik.dens[i * r..(i + 1) * r];
        let mut best = 0;
        for j in 1..r {
            if row[j] > row[best] {
                best = j;
            }
        }
        protected[best] = true;
    }

    let mut w = vec![1.0 / r as f64; r];
    let mut active: Vec<usize> = (0..r).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; r];
    let mut prev_obj = f64::NEG_INFINITY;
    let mut support_ops = 0usize;
    let mut since_check = 0usize;
    let mut cert_obj = f64::NEG_INFINITY;
    let mut cert_iters = 0usize;
    let all_columns: Vec<usize> = (0..r).collect();

    let mut iterations = 0usize;
    loop {
        lik.mixture(&w, &active, &mut f);
        if let Some(i) = f.iter().position(|&v| v == 0.0) {
            // Active set lost the support of row i; inject its best atom.
            let row = &lik.dens[i * r..(i + 1) * r];
            let mut best = 0;
            for j in 1..r {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if w[best] > 0.0 || support_ops >= MAX_SUPPORT_OPS {
                return Err(GmodelError::AllAtomsZeroLikelihood { row: i });
            }
            inject_mass(&lik, &mut w, &mut active, &f, best);
            support_ops += 1;
            prev_obj = f64::NEG_INFINITY;
            continue;
        }
        let obj = lik.objective(&f);
        let converged = iterations > 0 && obj - prev_obj < opts.tol * (1.0 + obj.abs());
        prev_obj = obj;

        let check_interval = if active.len() > 256 { 16 } else { 64 };
        if converged || since_check >= check_interval || iterations >= opts.max_iter {
            since_check = 0;
            // Settled if the per-iteration gain averaged over the stretch
            // since the previous certificate is below tolerance.
            let stretch = (iterations - cert_iters).max(1) as f64;
            let settled = converged
                || obj - cert_obj < opts.tol * (1.0 + obj.abs()) * stretch;
            cert_obj = obj;
            cert_iters = iterations;
            // Full-grid certificate: no atom may price above 1 + kkt_tol,
            // and every carried atom must price within the band.
            lik.gradient(&f, &all_columns, &mut g);
            let mut best = 0usize;
            for j in 1..r {
                if g[j] > g[best] {
                    best = j;
                }
            }
            let full_gap = g[best] - 1.0;
            let lower_violated =
                active.iter().any(|&j| w[j] > 1e-8 && g[j] < 1.0 - opts.kkt_tol);
            let certified = full_gap <= opts.kkt_tol && !lower_violated;
            if trace_enabled() {
                eprintln!(
                    "npmle: iter={iterations} gap={full_gap:.3e} lower={lower_violated} active={} ops={support_ops}",
                    active.len()
                );
            }
            if certified && (settled || iterations >= opts.max_iter) {
                return Ok(finish_fit(atoms, m, &w, obj, full_gap, iterations));
            }
            if iterations >= opts.max_iter || support_ops >= MAX_SUPPORT_OPS {
                if certified {
                    return Ok(finish_fit(atoms, m, &w, obj, full_gap, iterations));
                }
                return Err(GmodelError::NonConvergence {
                    kkt_gap: full_gap,
                    iterations,
                });
            }
            if !certified {
                repair_support(&lik, &mut w, &mut active, &mut f, best, opts, &mut support_ops);
                prev_obj = f64::NEG_INFINITY;
                continue;
            }
            // Certified but the objective is still moving: keep iterating.
        }

        iterations += 1;
        since_check += 1;
        let mut grad_active = vec![0.0; active.len()];
        lik.gradient(&f, &active, &mut grad_active);

        // SQUAREM cycle: two multiplicative (EM fixed-point) updates and a
        // monotonicity-safeguarded extrapolation. Clusters of neighboring
        // atoms make the plain update converge at a rate arbitrarily close
        // to one; the extrapolation squares through that.
        let w0: Vec<f64> = active.iter().map(|&j| w[j]).collect();
        let mut w1 = vec![0.0; active.len()];
        let mut total = 0.0;
        for (k, (&wk, gk)) in w0.iter().zip(&grad_active).enumerate() {
            w1[k] = wk * gk;
            total += w1[k];
        }
        w1.iter_mut().for_each(|v| *v /= total);

        let assign = |w: &mut [f64], values: &[f64], active: &[usize]| {
            for (&j, &v) in active.iter().zip(values) {
                w[j] = v;
            }
        };
        assign(&mut w, &w1, &active);
        lik.mixture(&w, &active, &mut f);
        if f.iter().any(|&v| v == 0.0) {
            continue; // top-of-loop repair handles the lost row
        }
        lik.gradient(&f, &active, &mut grad_active);
        let mut w2 = vec![0.0; active.len()];
        let mut total = 0.0;
        for (k, (&wk, gk)) in w1.iter().zip(&grad_active).enumerate() {
            w2[k] = wk * gk;
            total += w2[k];
        }
        w2.iter_mut().for_each(|v| *v /= total);
        iterations += 1;
        since_check += 1;

        let mut r2 = 0.0;
        let mut v2 = 0.0;
        for k in 0..active.len() {
            let rk = w1[k] - w0[k];
            let vk = w2[k] - 2.0 * w1[k] + w0[k];
            r2 += rk * rk;
            v2 += vk * vk;
        }
        let alpha = if v2 > 0.0 { -(r2 / v2).sqrt().max(1.0) } else { -1.0 };
        if alpha < -1.0 {
            let mut we = vec![0.0; active.len()];
            let mut total = 0.0;
            for k in 0..active.len() {
                let rk = w1[k] - w0[k];
                let vk = w2[k] - 2.0 * w1[k] + w0[k];
                we[k] = (w0[k] - 2.0 * alpha * rk + alpha * alpha * vk).max(0.0);
                total += we[k];
            }
            if total > 0.0 {
                we.iter_mut().for_each(|v| *v /= total);
                assign(&mut w, &we, &active);
                lik.mixture(&w, &active, &mut f);
                let ok = f.iter().all(|&v| v > 0.0);
                let obj_e = if ok { lik.objective(&f) } else { f64::NEG_INFINITY };
                assign(&mut w, &w2, &active);
                lik.mixture(&w, &active, &mut f);
                let obj_2 = lik.objective(&f);
                if obj_e > obj_2 {
                    assign(&mut w, &we, &active);
                }
            } else {
                assign(&mut w, &w2, &active);
            }
        } else {
            assign(&mut w, &w2, &active);
        }

        if iterations % 16 == 0 && active.len() > 8 {
            let before = active.len();
            let mut removed = false;
            active.retain(|&j| {
                let keep = protected[j] || w[j] >= 1e-16;
                if !keep {
                    w[j] = 0.0;
                    removed = true;
                }
                keep
            });
            if removed && active.len() < before {
                let total: f64 = active.iter().map(|&j| w[j]).sum();
                for &j in &active {
                    w[j] /= total;
                }
            }
        }
    }
}

const MAX_SUPPORT_OPS: usize = 32_768;

/// Verbose fitting trace, enabled by setting OTD_TRACE in the environment.
fn trace_enabled() -> bool {
    static FLAG: std::sync::OnceLock<bool> = std::sync::OnceLock::new();
    *FLAG.get_or_init(|| std::env::var_os("OTD_TRACE").is_some())
}

/// Support repair pass between EM stretches, working on active-set
/// gradients (a full-grid pass happens only in the caller's certificate).
/// Each round prices the active atoms once and then spends the information
/// on two kinds of ascent moves:
///
/// - a burst of disjoint pairwise transfers, pairing the highest-priced
///   candidates (including the full-grid champion) with the lowest-priced
///   carriers, each step from an exact concave line search;
/// - a burst of drains that shrink the below-band stragglers along the
///   zero-out direction, the fraction again from a line search.
///
/// Both moves never decrease the likelihood, and both can evict an atom
/// outright, which is what the multiplicative update cannot do in any
/// reasonable number of iterations.
fn repair_support(
    lik: &ShiftedLikelihood,
    w: &mut [f64],
    active: &mut Vec<usize>,
    f: &mut [f64],
    full_best: usize,
    opts: &FitOptions,
    support_ops: &mut usize,
) {
    for _ in 0..64 {
        if *support_ops >= MAX_SUPPORT_OPS {
            return;
        }
        let mut ga = vec![0.0; active.len()];
        lik.gradient(f, active, &mut ga);
        let mut priced: Vec<(f64, usize)> = active
            .iter()
            .zip(ga.iter())
            .map(|(&j, &gj)| (gj, j))
            .collect();
        // The certificate's champion may not be active yet.
        if !active.contains(&full_best) {
            priced.push((lik.column_gradient(f, full_best), full_best));
        }
        let upper_violated = priced.iter().any(|&(gj, _)| gj - 1.0 > opts.kkt_tol);
        let lower_violated = priced
            .iter()
            .any(|&(gj, j)| w[j] > 1e-8 && gj < 1.0 - opts.kkt_tol);
        if !upper_violated && !lower_violated {
            return;
        }

        // Ranked transfer burst on the (now slightly stale) prices. Pair the
        // k-th most overpriced atom with the k-th cheapest carrier; each
        // line search re-checks against staying put.
        let mut receivers = priced.clone();
        receivers.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut donors: Vec<(f64, usize)> = priced
            .iter()
            .filter(|&&(_, j)| w[j] > 0.0)
            .cloned()
            .collect();
        donors.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut moved = false;
        for (k, (&(to_g, to), &(from_g, from))) in
            receivers.iter().zip(donors.iter()).enumerate()
        {
            if k >= 8 || *support_ops >= MAX_SUPPORT_OPS {
                break;
            }
            let serves_gap =
                to_g - 1.0 > opts.kkt_tol || (w[from] > 1e-8 && from_g < 1.0 - opts.kkt_tol);
            if to == from || to_g <= from_g || !serves_gap || w[from] == 0.0 {
                break;
            }
            transfer_mass(lik, w, active, f, to, from);
            *support_ops += 1;
            moved = true;
        }

        // Drain burst: walk the below-band stragglers lightest-first in
        // small bites so a full drain is usually optimal.
        let mut order: Vec<usize> = priced
            .iter()
            .filter(|&&(gj, j)| w[j] > 0.0 && gj < 1.0 - opts.kkt_tol)
            .map(|&(_, j)| j)
            .collect();
        order.sort_by(|&a, &b| w[a].partial_cmp(&w[b]).unwrap().then(a.cmp(&b)));
        let mut cursor = 0;
        for _ in 0..32 {
            if cursor >= order.len() || *support_ops >= MAX_SUPPORT_OPS {
                break;
            }
            let mut mass = 0.0;
            let mut chunk = Vec::new();
            while cursor < order.len() {
                let j = order[cursor];
                if w[j] > 0.0 {
                    if mass + w[j] > 5e-3 && !chunk.is_empty() {
                        break;
                    }
                    mass += w[j];
                    chunk.push(j);
                }
                cursor += 1;
            }
            if chunk.is_empty() {
                break;
            }
            if drain_mass(lik, w, active, f, &chunk) {
                *support_ops += 1;
                moved = true;
            } else {
                break;
            }
        }

        if !moved {
            return;
        }
    }
}

/// Shrinks the atoms in `set` by a common factor 1 - t, redistributing the
/// freed mass proportionally to everything else. The fraction t maximizes
/// the log-likelihood over a grid refined by golden section, always
/// including t = 0, so the move never descends. Returns false for t = 0.
/// `f` is updated in place; fully drained atoms leave `active`.
fn drain_mass(
    lik: &ShiftedLikelihood,
    w: &mut [f64],
    active: &mut Vec<usize>,
    f: &mut [f64],
    set: &[usize],
) -> bool {
    let n = lik.n;
    let r = lik.r;
    let mass: f64 = set.iter().map(|&j| w[j]).sum();
    if !(mass > 0.0) || mass >= 1.0 {
        return false;
    }
    let mut delta = vec![0.0; n];
    for (i, d) in delta.iter_mut().enumerate() {
        let mut acc = 0.0;
        for &j in set {
            acc += w[j] * lik.dens[i * r + j];
        }
        *d = acc;
    }
    let obj_at = |t: f64| -> f64 {
        let z = 1.0 - t * mass;
        let mut acc = 0.0;
        for i in 0..n {
            acc += ((f[i] - t * delta[i]).max(1e-300) / z).ln();
        }
        acc / n as f64
    };
    let mut best_t = 0.0;
    let mut best_obj = obj_at(0.0);
    for k in 0..=8 {
        let t = k as f64 / 8.0;
        let o = obj_at(t);
        if o > best_obj {
            best_obj = o;
            best_t = t;
        }
    }
    let (mut lo, mut hi) = ((best_t - 1.0 / 8.0).max(0.0), (best_t + 1.0 / 8.0).min(1.0));
    for _ in 0..16 {
        let m1 = lo + 0.382 * (hi - lo);
        let m2 = lo + 0.618 * (hi - lo);
        if obj_at(m1) >= obj_at(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let refined = 0.5 * (lo + hi);
    if obj_at(refined) > best_obj {
        best_t = refined;
    }
    if best_t <= 0.0 {
        return false;
    }
    let t = if best_t > 1.0 - 1e-9 { 1.0 } else { best_t };
    let z = 1.0 - t * mass;
    for &j in set {
        w[j] *= 1.0 - t;
    }
    for &j in active.iter() {
        w[j] /= z;
    }
    if t >= 1.0 {
        for &j in set {
            w[j] = 0.0;
        }
    }
    // Weights ground down to nothing carry no information; let them go.
    for &j in set {
        if w[j] < 1e-16 {
            w[j] = 0.0;
        }
    }
    active.retain(|&j| w[j] > 0.0);
    for i in 0..n {
        f[i] = ((f[i] - t * delta[i]) / z).max(0.0);
    }
    if trace_enabled() {
        eprintln!("npmle: drained {} atoms at t={t:.3}", set.len());
    }
    true
}

/// Pairwise support move: shift mass from atom `from` to atom `to`. The
/// mixture log-likelihood is concave along the move, so the optimal step is
/// found exactly by bisecting its derivative; a full step removes `from`
/// from the support. `f` is updated in place.
fn transfer_mass(
    lik: &ShiftedLikelihood,
    w: &mut [f64],
    active: &mut Vec<usize>,
    f: &mut [f64],
    to: usize,
    from: usize,
) {
    let n = lik.n;
    let r = lik.r;
    let upper = w[from];
    debug_assert!(upper > 0.0 && to != from);
    // The objective along the move is concave, so its derivative
    // sum_i D_i / (f_i + delta D_i) is decreasing: the optimal step is found
    // by bisection on the derivative sign, with no transcendentals.
    let deriv = |delta: f64| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            let d = lik.dens[i * r + to] - lik.dens[i * r + from];
            acc += d / (f[i] + delta * d).max(1e-300);
        }
        acc
    };
    if deriv(0.0) <= 0.0 {
        return;
    }
    let mut delta = upper;
    if deriv(upper) < 0.0 {
        let (mut lo, mut hi) = (0.0, upper);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if deriv(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        delta = 0.5 * (lo + hi);
    }
    if delta <= 0.0 {
        return;
    }
    for i in 0..n {
        f[i] = (f[i] + delta * (lik.dens[i * r + to] - lik.dens[i * r + from])).max(0.0);
    }
    w[from] -= delta;
    if w[from] < 1e-300 || delta >= upper {
        w[from] = 0.0;
        active.retain(|&j| j != from);
    }
    if w[to] == 0.0 && !active.contains(&to) {
        active.push(to);
        active.sort_unstable();
    }
    w[to] += delta;
}

/// Frank-Wolfe style support move: w <- (1 - alpha) w + alpha e_j with alpha
/// chosen by a grid-plus-bisection line search on the (concave) mixture
/// log-likelihood. Never decreases the objective when atom j prices above 1.
fn inject_mass(
    lik: &ShiftedLikelihood,
    w: &mut [f64],
    active: &mut Vec<usize>,
    f: &[f64],
    j: usize,
) {
    let n = lik.n;
    let obj_at = |alpha: f64| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            let fi = (1.0 - alpha) * f[i] + alpha * lik.dens[i * lik.r + j];
            acc += fi.max(1e-300).ln();
        }
        acc / n as f64
    };
    let mut best_alpha = 0.0;
    let mut best_obj = obj_at(0.0);
    for k in 0..24 {
        let alpha = 0.9_f64 * 0.5_f64.powi(k);
        let o = obj_at(alpha);
        if o > best_obj {
            best_obj = o;
            best_alpha = alpha;
        }
    }
    // A few rounds of golden-section refinement around the best grid point.
    let (mut lo, mut hi) = (best_alpha * 0.5, (best_alpha * 2.0).min(0.95));
    for _ in 0..20 {
        let m1 = lo + 0.382 * (hi - lo);
        let m2 = lo + 0.618 * (hi - lo);
        if obj_at(m1) >= obj_at(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let refined = 0.5 * (lo + hi);
    if obj_at(refined) > best_obj {
        best_alpha = refined;
    }
    let alpha = if best_alpha > 0.0 { best_alpha } else { 1e-6 };
    for v in w.iter_mut() {
        *v *= 1.0 - alpha;
    }
    w[j] += alpha;
    if !active.contains(&j) {
        active.push(j);
        active.sort_unstable();
    }
}

fn finish_fit(
    atoms: &[f64],
    m: usize,
    w: &[f64],
    log_likelihood: f64,
    kkt_gap: f64,
    iterations: usize,
) -> NpmleFit {
    let full = DiscreteDistribution {
        m,
        atoms: atoms.to_vec(),
        weights: w.to_vec(),
    };
    NpmleFit {
        prior: full.pruned(WEIGHT_PRUNE),
        diagnostics: FitDiagnostics {
            log_likelihood,
            kkt_gap,
            iterations,
        },
    }
}

// ---------------------------------------------------------------------------
// Joint EM refinement of atoms and weights

/// Relative atom-merge radius after refinement, as a fraction of the data
/// diameter.
const MERGE_RADIUS_REL: f64 = 1e-6;

pub fn em_refine(
    mix: &DiscreteDistribution,
    data: &Dataset,
    model: &LikelihoodModel,
    opts: &FitOptions,
) -> Result<NpmleFit, GmodelError> {
    model.validate(data)?;
    let m = data.m();
    let n = data.n();
    let cache = DensityCache::new(model, None)?;
    let std = crate::models::standardize(data, model);

    let mut atoms = mix.atoms().to_vec();
    let mut w = mix.weights().to_vec();
    let r = w.len();
    let mut prev_obj = f64::NEG_INFINITY;
    let mut obj = prev_obj;
    let mut iterations = 0;

    // Per-row precision matrices for the Gaussian heteroscedastic M-step.
    let precisions: Option<Vec<Vec<f64>>> = match model {
        LikelihoodModel::GaussianHeteroscedastic { noise_covs } => Some(
            noise_covs
                .iter()
                .map(|c| invert_spd(c))
                .collect::<Result<_, _>>()?,
        ),
        _ => None,
    };

    while iterations < opts.max_iter {
        iterations += 1;
        let lik = shifted_likelihood(&atoms, m, data, &cache)?;
        let mut f = vec![0.0; n];
        let cols: Vec<usize> = (0..r).collect();
        lik.mixture(&w, &cols, &mut f);
        if let Some(i) = f.iter().position(|&v| v == 0.0) {
            return Err(GmodelError::AllAtomsZeroLikelihood { row: i });
        }
        obj = lik.objective(&f);
        assert!(
            obj >= prev_obj - 1e-8 * (1.0 + obj.abs()),
            "EM refinement decreased the log-likelihood: {prev_obj} -> {obj}"
        );
        let gain = obj - prev_obj;
        prev_obj = obj;
        if gain < opts.tol * (1.0 + obj.abs()) && iterations > 1 {
            break;
        }

        // E-step responsibilities and M-step accumulators in one pass.
        let mut resp_sum = vec![0.0; r];
        let mut num = vec![0.0; r * m];
        let mut denom: Vec<f64> = match model {
            LikelihoodModel::GaussianHeteroscedastic { .. } => vec![0.0; r * m * m],
            LikelihoodModel::PoissonExposure { .. } => vec![0.0; r * m],
            _ => Vec::new(),
        };
        for i in 0..n {
            let row = &lik.dens[i * r..(i + 1) * r];
            let fi = f[i];
            let zi = &std[i * m..(i + 1) * m];
            for j in 0..r {
                let resp = w[j] * row[j] / fi;
                if resp == 0.0 {
                    continue;
                }
                resp_sum[j] += resp;
                match (model, &precisions) {
                    (LikelihoodModel::GaussianHeteroscedastic { .. }, Some(precs)) => {
                        let p = &precs[i];
                        for a in 0..m {
                            let mut s = 0.0;
                            for b in 0..m {
                                s += p[a * m + b] * zi[b];
                                denom[j * m * m + a * m + b] += resp * p[a * m + b];
                            }
                            num[j * m + a] += resp * s;
                        }
                    }
                    (LikelihoodModel::PoissonExposure { m: pm, exposures }, _) => {
                        let lam = &exposures[i * pm..(i + 1) * pm];
                        let raw = data.row(i);
                        for d in 0..m {
                            num[j * m + d] += resp * raw[d];
                            denom[j * m + d] += resp * lam[d];
                        }
                    }
                    _ => {
                        for d in 0..m {
                            num[j * m + d] += resp * zi[d];
                        }
                    }
                }
            }
        }

        for j in 0..r {
            if resp_sum[j] <= 1e-300 {
                w[j] = 0.0;
                continue;
            }
            match model {
                LikelihoodModel::GaussianHomoscedastic { .. } => {
                    for d in 0..m {
                        atoms[j * m + d] = num[j * m + d] / resp_sum[j];
                    }
                }
                LikelihoodModel::GaussianHeteroscedastic { .. } => {
                    let block = &denom[j * m * m..(j + 1) * m * m];
                    if let Some(chol) = linalg::cholesky(m, block) {
                        let sol = linalg::cholesky_solve(m, &chol, &num[j * m..(j + 1) * m]);
                        atoms[j * m..(j + 1) * m].copy_from_slice(&sol);
                    }
                }
                LikelihoodModel::PoissonExposure { .. } => {
                    for d in 0..m {
                        let den = denom[j * m + d];
                        atoms[j * m + d] = if den > 0.0 {
                            (num[j * m + d] / den).max(crate::models::POISSON_THETA_FLOOR)
                        } else {
                            atoms[j * m + d]
                        };
                    }
                }
            }
            w[j] = resp_sum[j] / n as f64;
        }
        let total = linalg::pairwise_sum(&w);
        for wj in w.iter_mut() {
            *wj /= total;
        }
    }

    // Merge near-duplicate atoms (weights summed, positions averaged by
    // weight) to avoid degenerate duplicate columns downstream.
    let radius = MERGE_RADIUS_REL * data_diameter(&std, n, m);
    let (atoms, w) = merge_atoms(&atoms, &w, m, radius);

    // Final certificate at the merged solution.
    let lik = shifted_likelihood(&atoms, m, data, &cache)?;
    let cols: Vec<usize> = (0..w.len()).collect();
    let mut f = vec![0.0; n];
    lik.mixture(&w, &cols, &mut f);
    let final_obj = lik.objective(&f);
    let mut g = vec![0.0; w.len()];
    lik.gradient(&f, &cols, &mut g);
    let gap = g.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - 1.0;
    debug_assert!(final_obj >= obj - 1e-8 * (1.0 + obj.abs()));

    Ok(finish_fit(&atoms, m, &w, final_obj, gap, iterations))
}

fn invert_spd(cov: &SpdMatrix) -> Result<Vec<f64>, ModelError> {
    let m = cov.dim();
    let chol =
        linalg::cholesky(m, cov.as_slice()).ok_or(ModelError::SingularCovariance { row: None })?;
    let mut inv = vec![0.0; m * m];
    for j in 0..m {
        let mut e = vec![0.0; m];
        e[j] = 1.0;
        let col = linalg::cholesky_solve(m, &chol, &e);
        for i in 0..m {
            inv[i * m + j] = col[i];
        }
    }
    Ok(inv)
}

fn data_diameter(values: &[f64], n: usize, m: usize) -> f64 {
    let mut lo = vec![f64::INFINITY; m];
    let mut hi = vec![f64::NEG_INFINITY; m];
    for i in 0..n {
        for d in 0..m {
            lo[d] = lo[d].min(values[i * m + d]);
            hi[d] = hi[d].max(values[i * m + d]);
        }
    }
    (0..m)
        .map(|d| (hi[d] - lo[d]).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn merge_atoms(atoms: &[f64], weights: &[f64], m: usize, radius: f64) -> (Vec<f64>, Vec<f64>) {
    let r = weights.len();
    let mut out_atoms: Vec<f64> = Vec::new();
    let mut out_w: Vec<f64> = Vec::new();
    for j in 0..r {
        if weights[j] == 0.0 {
            continue;
        }
        let a = &atoms[j * m..(j + 1) * m];
        let mut merged = false;
        for k in 0..out_w.len() {
            let b = &out_atoms[k * m..(k + 1) * m];
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            if d2.sqrt() <= radius {
                let wa = weights[j];
                let wb = out_w[k];
                for d in 0..m {
                    out_atoms[k * m + d] = (wb * out_atoms[k * m + d] + wa * a[d]) / (wa + wb);
                }
                out_w[k] += wa;
                merged = true;
                break;
            }
        }
        if !merged {
            out_atoms.extend_from_slice(a);
            out_w.push(weights[j]);
        }
    }
    (out_atoms, out_w)
}

// ---------------------------------------------------------------------------
// Smooth NPMLE

/// Fits the Gaussian-mixture NPMLE whose components all carry covariance
/// `kernel_cov`, by fitting a discrete base measure under the noise
/// covariance inflated by the kernel. Gaussian likelihoods only.
pub fn smooth_npmle(
    data: &Dataset,
    model: &LikelihoodModel,
    kernel_cov: SpdMatrix,
    grid_opts: &GridOptions,
    fit_opts: &FitOptions,
) -> Result<(SmoothPrior, FitDiagnostics), GmodelError> {
    if !model.is_gaussian() {
        return Err(GmodelError::Model(ModelError::DomainError(
            "smooth NPMLE requires a Gaussian likelihood".into(),
        )));
    }
    let atoms = build_grid(data, model, grid_opts)?;
    let fit = fit_weights_with(&atoms, data, model, Some(&kernel_cov), fit_opts)?;
    Ok((
        SmoothPrior {
            base: fit.prior,
            kernel_cov,
        },
        fit.diagnostics,
    ))
}

// ---------------------------------------------------------------------------
// Posterior table and Bayes denoiser

/// Row-stochastic responsibilities linking observations to prior atoms, plus
/// whatever is needed to evaluate posterior means exactly (the smooth prior
/// contributes an affine per-row correction).
#[derive(Debug, Clone)]
pub struct PosteriorTable {
    n: usize,
    r: usize,
    m: usize,
    resp: Vec<f64>,
    atoms: Vec<f64>,
    adjust: Option<SmoothAdjust>,
}

#[derive(Debug, Clone)]
struct SmoothAdjust {
    /// I - K (K + Sigma_i)^{-1}, one matrix per row (or a single shared one).
    complement: Vec<Matrix>,
    /// K (K + Sigma_i)^{-1} z_i per row.
    offset: Vec<f64>,
}

impl PosteriorTable {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn resp(&self, i: usize) -> &[f64] {
        &self.resp[i * self.r..(i + 1) * self.r]
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }
}

pub fn posterior_table(
    prior: &Prior,
    data: &Dataset,
    model: &LikelihoodModel,
) -> Result<PosteriorTable, GmodelError> {
    model.validate(data)?;
    let base = prior.base();
    let m = data.m();
    let n = data.n();
    let r = base.len();
    if base.m() != m {
        return Err(GmodelError::InvalidDistribution(format!(
            "prior dimension {} does not match data dimension {m}",
            base.m()
        )));
    }
    let cache = DensityCache::new(model, prior.kernel_cov())?;
    let log_w: Vec<f64> = base.weights().iter().map(|w| w.max(1e-300).ln()).collect();

    let mut resp = vec![0.0; n * r];
    let failures: Vec<usize> = resp
        .par_chunks_mut(r)
        .enumerate()
        .filter_map(|(i, row)| {
            let z = data.row(i);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..r {
                let v = log_w[j] + cache.log_density(i, z, base.atom(j));
                row[j] = v;
                mx = mx.max(v);
            }
            if !mx.is_finite() {
                return Some(i);
            }
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
            None
        })
        .collect();
    if let Some(&row) = failures.first() {
        return Err(GmodelError::AllAtomsZeroLikelihood { row });
    }

    let adjust = match prior {
        Prior::Discrete(_) => None,
        Prior::Smooth(s) => Some(smooth_adjust(&s.kernel_cov, data, model)?),
    };

    Ok(PosteriorTable {
        n,
        r,
        m,
        resp,
        atoms: base.atoms().to_vec(),
        adjust,
    })
}

fn smooth_adjust(
    kernel: &SpdMatrix,
    data: &Dataset,
    model: &LikelihoodModel,
) -> Result<SmoothAdjust, GmodelError> {
    let m = data.m();
    let n = data.n();
    // C = K (K + Sigma)^{-1}; complement = I - C.
    let build = |sigma: &SpdMatrix| -> Result<(Matrix, Matrix), GmodelError> {
        let sum = kernel.add(sigma);
        let chol = linalg::cholesky(m, sum.as_slice())
            .ok_or(GmodelError::Model(ModelError::SingularCovariance {
                row: None,
            }))?;
        let mut c = Matrix::zeros(m, m);
        // Columns of (K + Sigma)^{-1} K^T = (K + Sigma)^{-1} K.
        for j in 0..m {
            let col: Vec<f64> = (0..m).map(|i| kernel.get(i, j)).collect();
            let sol = linalg::cholesky_solve(m, &chol, &col);
            for i in 0..m {
                c.set(i, j, sol[i]);
            }
        }
        // c currently holds (K+Sigma)^{-1} K; we need K (K+Sigma)^{-1},
        // which is its transpose by symmetry of both factors.
        let c = c.transpose();
        let complement = Matrix::identity(m).sub(&c);
        Ok((c, complement))
    };

    match model {
        LikelihoodModel::GaussianHomoscedastic { noise_cov } => {
            let (c, complement) = build(noise_cov)?;
            let mut offset = vec![0.0; n * m];
            for i in 0..n {
                let v = c.matvec(data.row(i));
                offset[i * m..(i + 1) * m].copy_from_slice(&v);
            }
            Ok(SmoothAdjust {
                complement: vec![complement],
                offset,
            })
        }
        LikelihoodModel::GaussianHeteroscedastic { noise_covs } => {
            let mut complements = Vec::with_capacity(n);
            let mut offset = vec![0.0; n * m];
            for i in 0..n {
                let (c, complement) = build(&noise_covs[i])?;
                let v = c.matvec(data.row(i));
                offset[i * m..(i + 1) * m].copy_from_slice(&v);
                complements.push(complement);
            }
            Ok(SmoothAdjust {
                complement: complements,
                offset,
            })
        }
        LikelihoodModel::PoissonExposure { .. } => Err(GmodelError::Model(
            ModelError::DomainError("smooth priors require a Gaussian likelihood".into()),
        )),
    }
}

/// Posterior means, one m-vector per observation.
pub fn bayes_denoise(table: &PosteriorTable) -> Vec<f64> {
    let (n, r, m) = (table.n, table.r, table.m);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let resp = table.resp(i);
        let base = &mut out[i * m..(i + 1) * m];
        for j in 0..r {
            let w = resp[j];
            if w == 0.0 {
                continue;
            }
            for d in 0..m {
                base[d] += w * table.atoms[j * m + d];
            }
        }
    }
    if let Some(adj) = &table.adjust {
        for i in 0..n {
            let comp = if adj.complement.len() == 1 {
                &adj.complement[0]
            } else {
                &adj.complement[i]
            };
            let mixed = comp.matvec(&out[i * m..(i + 1) * m]);
            for d in 0..m {
                out[i * m + d] = mixed[d] + adj.offset[i * m + d];
            }
        }
    }
    out
}

/// Exact mean and covariance of the prior; the smooth prior adds its kernel
/// covariance.
pub fn prior_moments(prior: &Prior) -> (Vec<f64>, SpdMatrix) {
    let base = prior.base();
    let m = base.m();
    let r = base.len();
    let mut mean = vec![0.0; m];
    let mut scratch = vec![0.0; r];
    for d in 0..m {
        for j in 0..r {
            scratch[j] = base.weights()[j] * base.atom(j)[d];
        }
        mean[d] = linalg::pairwise_sum(&scratch);
    }
    let mut cov = vec![0.0; m * m];
    for a in 0..m {
        for b in a..m {
            for j in 0..r {
                scratch[j] =
                    base.weights()[j] * (base.atom(j)[a] - mean[a]) * (base.atom(j)[b] - mean[b]);
            }
            let v = linalg::pairwise_sum(&scratch);
            cov[a * m + b] = v;
            cov[b * m + a] = v;
        }
    }
    let mut cov = SpdMatrix::new(m, cov).expect("prior covariance is PSD by construction");
    if let Some(k) = prior.kernel_cov() {
        cov = cov.add(k);
    }
    (mean, cov)
}
