//! Shared helpers and independent oracles for the acceptance suite.

use otdenoise_core::bures::SpdMatrix;
use otdenoise_core::gmodel::DiscreteDistribution;
use otdenoise_core::linalg;
use otdenoise_core::rng::SeedStream;
use otdenoise_core::transport::CostMatrix;

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
}

/// Random strictly positive definite matrix with O(1) spectrum.
pub fn random_spd(rng: &mut SeedStream, dim: usize) -> SpdMatrix {
    let mut b = vec![0.0; dim * dim];
    for v in b.iter_mut() {
        *v = 0.6 * rng.normal();
    }
    let mut p = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            let mut s = 0.0;
            for k in 0..dim {
                s += b[i * dim + k] * b[j * dim + k];
            }
            p[i * dim + j] = s;
        }
    }
    for i in 0..dim {
        p[i * dim + i] += 0.4;
    }
    SpdMatrix::new(dim, p).unwrap()
}

/// Random discrete prior with spread-out atoms.
pub fn random_prior(rng: &mut SeedStream, m: usize, atoms: usize) -> DiscreteDistribution {
    let mut flat = Vec::with_capacity(atoms * m);
    for _ in 0..atoms * m {
        flat.push(3.0 * rng.normal());
    }
    let mut w: Vec<f64> = (0..atoms).map(|_| rng.uniform() + 0.2).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    DiscreteDistribution::new(m, flat, w).unwrap()
}

/// Least-squares slope of y on x.
pub fn regression_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let mx = linalg::sample_mean(x, n, 1)[0];
    let my = linalg::sample_mean(y, n, 1)[0];
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        sxy += (xi - mx) * (yi - my);
        sxx += (xi - mx) * (xi - mx);
    }
    sxy / sxx
}

pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = linalg::sample_mean(values, n, 1)[0];
    let var = linalg::sample_cov(values, n, 1)[0];
    (mean, (var / n as f64).sqrt())
}

/// Transportation optimum by exhaustive enumeration of spanning bases
/// (independent of the network simplex): every vertex of the transportation
/// polytope is the unique flow on some spanning tree of the bipartite graph.
pub fn brute_force_ot(cost: &CostMatrix, a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let r = b.len();
    let cells: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..r).map(move |j| (i, j)))
        .collect();
    let basis = n + r - 1;
    let mut best = f64::INFINITY;
    let mut chosen = vec![0usize; basis];
    enumerate_subsets(cells.len(), 0, 0, &mut chosen, &mut |subset| {
        let arcs: Vec<(usize, usize)> = subset.iter().map(|&c| cells[c]).collect();
        if let Some(obj) = tree_objective(cost, a, b, &arcs) {
            if obj < best {
                best = obj;
            }
        }
    });
    best
}

fn enumerate_subsets(
    total: usize,
    start: usize,
    depth: usize,
    chosen: &mut Vec<usize>,
    visit: &mut impl FnMut(&[usize]),
) {
    if depth == chosen.len() {
        visit(chosen);
        return;
    }
    for c in start..total {
        chosen[depth] = c;
        enumerate_subsets(total, c + 1, depth + 1, chosen, visit);
    }
}

/// Unique flow on a candidate spanning set via leaf elimination; None if the
/// set has a cycle, disconnects, or forces negative flow.
fn tree_objective(
    cost: &CostMatrix,
    a: &[f64],
    b: &[f64],
    arcs: &[(usize, usize)],
) -> Option<f64> {
    let mut res_a = a.to_vec();
    let mut res_b = b.to_vec();
    let mut used = vec![false; arcs.len()];
    let mut flow = vec![0.0; arcs.len()];
    loop {
        let mut progressed = false;
        for idx in 0..arcs.len() {
            if used[idx] {
                continue;
            }
            let (i, j) = arcs[idx];
            let deg_i = arcs
                .iter()
                .enumerate()
                .filter(|(x, &(ii, _))| !used[*x] && ii == i)
                .count();
            let deg_j = arcs
                .iter()
                .enumerate()
                .filter(|(x, &(_, jj))| !used[*x] && jj == j)
                .count();
            if deg_i == 1 {
                flow[idx] = res_a[i];
                res_a[i] = 0.0;
                res_b[j] -= flow[idx];
                used[idx] = true;
                progressed = true;
            } else if deg_j == 1 {
                flow[idx] = res_b[j];
                res_b[j] = 0.0;
                res_a[i] -= flow[idx];
                used[idx] = true;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    if !used.iter().all(|&u| u) {
        return None;
    }
    if res_a.iter().chain(&res_b).any(|v| v.abs() > 1e-9) {
        return None;
    }
    if flow.iter().any(|&f| f < -1e-12) {
        return None;
    }
    Some(
        arcs.iter()
            .zip(&flow)
            .map(|(&(i, j), &f)| cost.get(i, j) * f)
            .sum(),
    )
}
