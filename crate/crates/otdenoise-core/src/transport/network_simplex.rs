//! Network simplex for the dense transportation problem.
//!
//! Minimizes `sum c_ij x_ij` subject to row sums `a_i`, column sums `b_j`,
//! and `x >= 0`. The basis is a spanning tree over the n + r bipartite nodes,
//! seeded by the northwest-corner rule. Pricing is blockwise Dantzig with a
//! Bland fallback after a stall, and the final flows are re-derived exactly
//! from the marginals by leaf elimination so the returned coupling satisfies
//! the marginal equations to machine precision.

use super::TransportError;
use std::collections::HashMap;

pub(crate) struct NetworkSimplexResult {
    /// Basic arcs with positive mass, sorted by (row, col).
    pub entries: Vec<(usize, usize, f64)>,
    pub objective: f64,
    pub dual_row: Vec<f64>,
    pub dual_col: Vec<f64>,
    pub iterations: usize,
}

struct Tree {
    n: usize,
    nodes: usize,
    adj: Vec<Vec<(usize, usize)>>, // (neighbor, arc id)
    parent: Vec<usize>,
    parent_arc: Vec<usize>,
    depth: Vec<usize>,
    flow: Vec<f64>, // flow on parent arc, indexed by child node
    pot: Vec<f64>,  // node potentials
}

const NO_NODE: usize = usize::MAX;

impl Tree {
    fn arc_endpoints(&self, arc: usize, r: usize) -> (usize, usize) {
        (arc / r, self.n + arc % r)
    }

    /// Rebuild parent pointers, depths, potentials and per-child flows from
    /// the adjacency structure and an arc -> flow map.
    fn rebuild(&mut self, r: usize, cost: &[f64], flows: &HashMap<usize, f64>) {
        let v = self.nodes;
        self.parent.iter_mut().for_each(|p| *p = NO_NODE);
        self.parent_arc.iter_mut().for_each(|p| *p = usize::MAX);
        self.depth.iter_mut().for_each(|d| *d = 0);
        self.pot[0] = 0.0;
        let mut stack = vec![0usize];
        let mut seen = vec![false; v];
        seen[0] = true;
        while let Some(x) = stack.pop() {
            for &(y, arc) in &self.adj[x] {
                if seen[y] {
                    continue;
                }
                seen[y] = true;
                self.parent[y] = x;
                self.parent_arc[y] = arc;
                self.depth[y] = self.depth[x] + 1;
                self.flow[y] = flows.get(&arc).copied().unwrap_or(0.0);
                let (s, t) = self.arc_endpoints(arc, r);
                // Tree arcs satisfy pot[s] + pot[t] = c on (source, sink).
                self.pot[y] = if y == t {
                    cost[arc] - self.pot[s]
                } else {
                    cost[arc] - self.pot[t]
                };
                stack.push(y);
            }
        }
        debug_assert!(seen.iter().all(|&s| s), "basis is not a spanning tree");
    }
}

pub(crate) fn solve(
    cost: &[f64],
    a: &[f64],
    b: &[f64],
) -> Result<NetworkSimplexResult, TransportError> {
    let n = a.len();
    let r = b.len();
    assert_eq!(cost.len(), n * r);
    let sum_a: f64 = a.iter().sum();
    let sum_b: f64 = b.iter().sum();
    if a.iter().any(|v| *v < 0.0) || b.iter().any(|v| *v < 0.0) {
        return Err(TransportError::InfeasibleMarginals {
            row_sum: sum_a,
            col_sum: sum_b,
        });
    }
    if (sum_a - sum_b).abs() > 1e-12 * sum_a.abs().max(1.0) {
        return Err(TransportError::InfeasibleMarginals {
            row_sum: sum_a,
            col_sum: sum_b,
        });
    }
    // Balance exactly so leaf elimination closes to machine precision.
    let b: Vec<f64> = if sum_b > 0.0 {
        b.iter().map(|v| v * (sum_a / sum_b)).collect()
    } else {
        b.to_vec()
    };

    let nodes = n + r;
    let mut tree = Tree {
        n,
        nodes,
        adj: vec![Vec::new(); nodes],
        parent: vec![NO_NODE; nodes],
        parent_arc: vec![usize::MAX; nodes],
        depth: vec![0; nodes],
        flow: vec![0.0; nodes],
        pot: vec![0.0; nodes],
    };

    // Northwest-corner initial basis: exactly n + r - 1 arcs forming a tree.
    let mut flows: HashMap<usize, f64> = HashMap::with_capacity(2 * nodes);
    {
        let (mut i, mut j) = (0usize, 0usize);
        let mut rem_a = a[0];
        let mut rem_b = b[0];
        loop {
            let t = rem_a.min(rem_b).max(0.0);
            let arc = i * r + j;
            flows.insert(arc, t);
            tree.adj[i].push((n + j, arc));
            tree.adj[n + j].push((i, arc));
            rem_a -= t;
            rem_b -= t;
            if i == n - 1 && j == r - 1 {
                break;
            }
            if (rem_a <= rem_b && i + 1 < n) || j + 1 >= r {
                i += 1;
                rem_a = a[i];
            } else {
                j += 1;
                rem_b = b[j];
            }
        }
    }
    tree.rebuild(r, cost, &flows);

    let max_cost = cost.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let enter_tol = 1e-11 * (1.0 + max_cost);
    let stall_limit = 50 * nodes;
    let pivot_limit = 10_000 + 500 * nodes;

    let narcs = n * r;
    let block = (narcs / 32).clamp(256, 8192).min(narcs.max(1));
    let mut cursor = 0usize;
    let mut pivots = 0usize;
    let mut stalled = 0usize;
    let mut bland = false;

    loop {
        // --- pricing ---
        let mut entering = usize::MAX;
        if bland {
            for arc in 0..narcs {
                let rc = cost[arc] - tree.pot[arc / r] - tree.pot[n + arc % r];
                if rc < -enter_tol {
                    entering = arc;
                    break;
                }
            }
        } else {
            let mut scanned = 0usize;
            while scanned < narcs {
                let hi = (cursor + block).min(narcs);
                let mut best_rc = -enter_tol;
                for arc in cursor..hi {
                    let rc = cost[arc] - tree.pot[arc / r] - tree.pot[n + arc % r];
                    if rc < best_rc {
                        best_rc = rc;
                        entering = arc;
                    }
                }
                scanned += hi - cursor;
                cursor = if hi == narcs { 0 } else { hi };
                if entering != usize::MAX {
                    break;
                }
            }
        }
        if entering == usize::MAX {
            break; // dual feasible: optimal
        }

        pivots += 1;
        if pivots > pivot_limit {
            return Err(TransportError::CycleLimit { pivots });
        }

        // --- cycle between the entering arc's endpoints ---
        let ei = entering / r;
        let ej_node = n + entering % r;
        // Path arcs recorded as (child, forward) where forward means the
        // pivot pushes flow with the arc's shipping direction.
        let mut path: Vec<(usize, bool)> = Vec::new();
        let (mut x, mut y) = (ei, ej_node);
        while tree.depth[x] > tree.depth[y] {
            let arc = tree.parent_arc[x];
            let (_, t) = tree.arc_endpoints(arc, r);
            path.push((x, x == t));
            x = tree.parent[x];
        }
        while tree.depth[y] > tree.depth[x] {
            let arc = tree.parent_arc[y];
            let (s, _) = tree.arc_endpoints(arc, r);
            path.push((y, y == s));
            y = tree.parent[y];
        }
        while x != y {
            let arc = tree.parent_arc[x];
            let (_, t) = tree.arc_endpoints(arc, r);
            path.push((x, x == t));
            x = tree.parent[x];
            let arc = tree.parent_arc[y];
            let (s, _) = tree.arc_endpoints(arc, r);
            path.push((y, y == s));
            y = tree.parent[y];
        }

        // Leaving arc: minimum flow among backward arcs, lowest arc id on
        // ties for determinism.
        let mut theta = f64::INFINITY;
        let mut leave_child = NO_NODE;
        let mut leave_arc = usize::MAX;
        for &(child, forward) in &path {
            if !forward {
                let fl = tree.flow[child];
                let arc = tree.parent_arc[child];
                if fl < theta || (fl == theta && arc < leave_arc) {
                    theta = fl;
                    leave_child = child;
                    leave_arc = arc;
                }
            }
        }
        if leave_child == NO_NODE {
            // Alternating bipartite cycles always contain a backward arc.
            return Err(TransportError::CycleLimit { pivots });
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

        // --- apply flow change and swap the tree arc ---
        flows.clear();
        for v in 0..nodes {
            if tree.parent[v] != NO_NODE {
                flows.insert(tree.parent_arc[v], tree.flow[v]);
            }
        }
        for &(child, forward) in &path {
            let arc = tree.parent_arc[child];
            let e = flows.get_mut(&arc).expect("path arc is basic");
            *e += if forward { theta } else { -theta };
            if *e < 0.0 {
                *e = 0.0;
            }
        }
        flows.remove(&leave_arc);
        flows.insert(entering, theta);

        let detach = |adj: &mut Vec<(usize, usize)>, node: usize, arc: usize| {
            if let Some(pos) = adj.iter().position(|&(nb, ac)| nb == node && ac == arc) {
                adj.swap_remove(pos);
            }
        };
        let (ls, lt) = tree.arc_endpoints(leave_arc, r);
        detach(&mut tree.adj[ls], lt, leave_arc);
        detach(&mut tree.adj[lt], ls, leave_arc);
        tree.adj[ei].push((ej_node, entering));
        tree.adj[ej_node].push((ei, entering));
        tree.rebuild(r, cost, &flows);
    }

    // Exact flows from the marginals by leaf elimination over the final tree.
    let mut residual = vec![0.0; nodes];
    residual[..n].copy_from_slice(a);
    for j in 0..r {
        residual[n + j] = -b[j];
    }
    let mut order: Vec<usize> = (1..nodes).collect();
    order.sort_by(|&u, &v| tree.depth[v].cmp(&tree.depth[u]).then(u.cmp(&v)));
    let mut exact = vec![0.0f64; nodes];
    for &v in &order {
        let arc = tree.parent_arc[v];
        let (s, t) = tree.arc_endpoints(arc, r);
        let x = if v == s { residual[v] } else { -residual[v] };
        let x = x.max(0.0);
        exact[v] = x;
        if v == s {
            residual[v] = 0.0;
            residual[t] += x;
        } else {
            residual[v] = 0.0;
            residual[s] -= x;
        }
    }

    let mut entries: Vec<(usize, usize, f64)> = Vec::with_capacity(nodes);
    let mut objective_terms = Vec::with_capacity(nodes);
    for v in 1..nodes {
        let arc = tree.parent_arc[v];
        let mass = exact[v];
        if mass > 0.0 {
            entries.push((arc / r, arc % r, mass));
            objective_terms.push(cost[arc] * mass);
        }
    }
    entries.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
    let objective = crate::linalg::pairwise_sum(&objective_terms);

    Ok(NetworkSimplexResult {
        entries,
        objective,
        dual_row: tree.pot[..n].to_vec(),
        dual_col: tree.pot[n..].to_vec(),
        iterations: pivots,
    })
}
