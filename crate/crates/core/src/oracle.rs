//! Brute-force solvers for tiny transport instances.
//!
//! These are the ground truth for the projection and distance tests, so each
//! quantity has two independent routes: transport distances by basis
//! enumeration and by successive-shortest-path min-cost flow; projections by
//! augmented-Lagrangian descent over the plan and (for `n ≤ 3`) by dense grid
//! search over the projected distribution.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Largest instance the oracle accepts.
pub const MAX_PIXELS: usize = 16;

const MASS_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyInstance {
    /// Original distribution (sums to one).
    pub x: Vec<f64>,
    /// Point to project.
    pub w: Vec<f64>,
    /// Dense row-major `n × n` cost; `+∞` marks forbidden pairs.
    pub cost: Vec<f64>,
    pub epsilon: f64,
    /// Per-pixel cap on the projected distribution.
    pub r: f64,
}

impl TinyInstance {
    pub fn new(x: Vec<f64>, w: Vec<f64>, cost: Vec<f64>, epsilon: f64, r: f64) -> Result<Self> {
        let n = x.len();
        check_size(n)?;
        if w.len() != n || cost.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: format!("w of length {n} and {n}×{n} cost"),
                actual: format!("w of length {}, cost of length {}", w.len(), cost.len()),
            });
        }
        check_distribution("x", &x)?;
        if x.iter().any(|&v| v > r + MASS_TOL) {
            return Err(Error::invalid("r", "every x_j must be at most r"));
        }
        if !(epsilon > 0.0) {
            return Err(Error::invalid("epsilon", "must be positive"));
        }
        Ok(TinyInstance { x, w, cost, epsilon, r })
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }
}

fn check_size(n: usize) -> Result<()> {
    if n > MAX_PIXELS {
        Err(Error::InstanceTooLarge { n, max: MAX_PIXELS })
    } else if n == 0 {
        Err(Error::invalid("n", "instance is empty"))
    } else {
        Ok(())
    }
}

fn check_distribution(name: &'static str, v: &[f64]) -> Result<()> {
    let s: f64 = v.iter().sum();
    if v.iter().any(|&p| p < 0.0 || !p.is_finite()) || (s - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(name, format!("must be a probability vector (sum {s})")));
    }
    Ok(())
}

/// Minimum of `⟨Π,C⟩` over plans with marginals `a` and `b`.
///
/// Basis enumeration for `n ≤ 4`, min-cost flow above that. Returns `+∞`
/// when the finite entries of `cost` admit no feasible plan.
pub fn exact_ot_distance(a: &[f64], b: &[f64], cost: &[f64]) -> Result<f64> {
    let n = a.len();
    check_size(n)?;
    if b.len() != n || cost.len() != n * n {
        return Err(Error::DimensionMismatch {
            expected: format!("two length-{n} vectors and a {n}×{n} cost"),
            actual: format!("lengths {}, {}", b.len(), cost.len()),
        });
    }
    check_distribution("a", a)?;
    check_distribution("b", b)?;
    if n <= 4 {
        Ok(ot_by_basis_enumeration(a, b, cost))
    } else {
        Ok(ot_by_min_cost_flow(a, b, cost))
    }
}

/// Enumerates every spanning forest of the support graph with the right
/// number of edges, solves its (unique) flow by leaf peeling and keeps the
/// cheapest non-negative one. Exponential; intended for `n ≤ 4`.
pub fn ot_by_basis_enumeration(a: &[f64], b: &[f64], cost: &[f64]) -> f64 {
    let n = a.len();
    let cells: Vec<(usize, usize)> =
        (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| cost[i * n + j].is_finite()).collect();
    let components = count_components(n, &cells);
    let basis_size = 2 * n - components;
    if cells.len() < basis_size {
        return f64::INFINITY;
    }
    let mut best = f64::INFINITY;
    let mut pick: Vec<usize> = (0..basis_size).collect();
    loop {
        if let Some(c) = solve_basis(a, b, cost, &cells, &pick) {
            best = best.min(c);
        }
        // Next combination in lexicographic order.
        let mut k = basis_size;
        loop {
            if k == 0 {
                return best;
            }
            k -= 1;
            if pick[k] < cells.len() - basis_size + k {
                break;
            }
        }
        pick[k] += 1;
        for t in k + 1..basis_size {
            pick[t] = pick[t - 1] + 1;
        }
    }
}

fn find(parent: &mut [usize], mut v: usize) -> usize {
    while parent[v] != v {
        parent[v] = parent[parent[v]];
        v = parent[v];
    }
    v
}

fn count_components(n: usize, cells: &[(usize, usize)]) -> usize {
    let mut parent: Vec<usize> = (0..2 * n).collect();
    let mut comps = 2 * n;
    for &(i, j) in cells {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, n + j));
        if ri != rj {
            parent[ri] = rj;
            comps -= 1;
        }
    }
    comps
}

fn solve_basis(a: &[f64], b: &[f64], cost: &[f64], cells: &[(usize, usize)], pick: &[usize]) -> Option<f64> {
    let n = a.len();
    let mut parent: Vec<usize> = (0..2 * n).collect();
    for &p in pick {
        let (i, j) = cells[p];
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, n + j));
        if ri == rj {
            return None;
        }
        parent[ri] = rj;
    }
    let mut residual: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut degree = vec![0usize; 2 * n];
    for &p in pick {
        let (i, j) = cells[p];
        degree[i] += 1;
        degree[n + j] += 1;
    }
    let mut alive = vec![true; pick.len()];
    let mut total = 0.0;
    for _ in 0..pick.len() {
        // Find an alive edge with a leaf endpoint.
        let (e, leaf, other) = pick.iter().enumerate().filter(|(e, _)| alive[*e]).find_map(|(e, &p)| {
            let (i, j) = cells[p];
            if degree[i] == 1 {
                Some((e, i, n + j))
            } else if degree[n + j] == 1 {
                Some((e, n + j, i))
            } else {
                None
            }
        })?;
        let flow = residual[leaf];
        if flow < -1e-12 {
            return None;
        }
        residual[leaf] = 0.0;
        residual[other] -= flow;
        degree[leaf] -= 1;
        degree[other] -= 1;
        alive[e] = false;
        let (i, j) = cells[pick[e]];
        total += flow.max(0.0) * cost[i * n + j];
    }
    if residual.iter().any(|r| r.abs() > 1e-9) {
        return None;
    }
    Some(total)
}

/// Successive shortest augmenting paths on the bipartite transport network.
pub fn ot_by_min_cost_flow(a: &[f64], b: &[f64], cost: &[f64]) -> f64 {
    let n = a.len();
    let (src, sink) = (2 * n, 2 * n + 1);
    let nodes = 2 * n + 2;
    // Edge list with paired reverse edges at index ^ 1.
    let mut to = Vec::new();
    let mut cap = Vec::new();
    let mut w = Vec::new();
    let mut adj = vec![Vec::new(); nodes];
    let mut add = |u: usize, v: usize, c: f64, k: f64, adj: &mut Vec<Vec<usize>>| {
        adj[u].push(to.len());
        to.push(v);
        cap.push(c);
        w.push(k);
        adj[v].push(to.len());
        to.push(u);
        cap.push(0.0);
        w.push(-k);
    };
    for i in 0..n {
        add(src, i, a[i], 0.0, &mut adj);
        add(n + i, sink, b[i], 0.0, &mut adj);
        for j in 0..n {
            let c = cost[i * n + j];
            if c.is_finite() {
                add(i, n + j, f64::INFINITY, c, &mut adj);
            }
        }
    }
    const EPS: f64 = 1e-15;
    let mut remaining: f64 = a.iter().sum::<f64>().min(b.iter().sum());
    let mut total = 0.0;
    // Node potentials keep reduced costs non-negative, so each shortest path
    // is a plain O(V²) Dijkstra; all costs start non-negative.
    let mut potential = vec![0.0; nodes];
    while remaining > 1e-13 {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut via = vec![usize::MAX; nodes];
        let mut done = vec![false; nodes];
        dist[src] = 0.0;
        loop {
            let mut u = usize::MAX;
            for v in 0..nodes {
                if !done[v] && dist[v] < f64::INFINITY && (u == usize::MAX || dist[v] < dist[u]) {
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            for &e in &adj[u] {
                let v = to[e];
                if cap[e] > EPS && !done[v] {
                    let reduced = (w[e] + potential[u] - potential[v]).max(0.0);
                    if dist[u] + reduced < dist[v] {
                        dist[v] = dist[u] + reduced;
                        via[v] = e;
                    }
                }
            }
        }
        if dist[sink] == f64::INFINITY {
            return f64::INFINITY;
        }
        for v in 0..nodes {
            potential[v] += dist[v].min(dist[sink]);
        }
        let mut push = remaining;
        let mut path_cost = 0.0;
        let mut v = sink;
        while v != src {
            let e = via[v];
            push = push.min(cap[e]);
            path_cost += w[e];
            v = to[e ^ 1];
        }
        let mut v = sink;
        while v != src {
            let e = via[v];
            cap[e] -= push;
            cap[e ^ 1] += push;
            v = to[e ^ 1];
        }
        total += push * path_cost;
        remaining -= push;
    }
    total
}

/// Exact Euclidean projection of `w` onto
/// `{z : ∃Π ≥ 0, Π1 = x, Πᵀ1 = z, ⟨Π,C⟩ ≤ ε, z ≤ r}`.
///
/// Augmented-Lagrangian outer loop on the budget and cap constraints; the
/// inner problem (rows of `Π` on scaled simplices) is solved by restarted
/// accelerated projected gradient. A final repair step blends the plan toward
/// the zero-cost plan `diag(x)` so the returned point is exactly feasible.
pub fn exact_project(instance: &TinyInstance) -> Result<Vec<f64>> {
    Ok(exact_project_plan(instance)?.1)
}

/// Like [`exact_project`], also returning the row-major plan.
pub fn exact_project_plan(instance: &TinyInstance) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = instance.n();
    check_size(n)?;
    let TinyInstance { x, w, cost, epsilon, r } = instance;
    let support: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| cost[i * n + j].is_finite()).collect()).collect();
    let c = |i: usize, j: usize| if cost[i * n + j].is_finite() { cost[i * n + j] } else { 0.0 };

    // Start from the identity plan, which is feasible.
    let mut plan = vec![0.0; n * n];
    for i in 0..n {
        plan[i * n + i] = x[i];
    }
    let cost_sq: f64 = (0..n).flat_map(|i| support[i].iter().map(move |&j| (i, j))).map(|(i, j)| c(i, j).powi(2)).sum();
    let rho = 50.0;
    let lipschitz = n as f64 + rho * (n as f64 + cost_sq);
    let step = 1.0 / lipschitz;
    let mut mu_budget = 0.0;
    let mut mu_cap = vec![0.0; n];

    let colsum = |p: &[f64]| -> Vec<f64> { (0..n).map(|j| (0..n).map(|i| p[i * n + j]).sum()).collect() };
    let plan_cost = |p: &[f64]| -> f64 {
        (0..n).flat_map(|i| support[i].iter().map(move |&j| (i, j))).map(|(i, j)| c(i, j) * p[i * n + j]).sum()
    };

    let gradient = |p: &[f64], mu_b: f64, mu_c: &[f64], g: &mut [f64]| {
        let z = colsum(p);
        let mb = (mu_b + rho * (plan_cost(p) - epsilon)).max(0.0);
        for i in 0..n {
            for &j in &support[i] {
                let mc = (mu_c[j] + rho * (z[j] - r)).max(0.0);
                g[i * n + j] = (z[j] - w[j]) + mb * c(i, j) + mc;
            }
        }
    };
    let objective = |p: &[f64], mu_b: f64, mu_c: &[f64]| -> f64 {
        let z = colsum(p);
        let mut v: f64 = z.iter().zip(w).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum();
        let hb = plan_cost(p) - epsilon;
        v += ((mu_b + rho * hb).max(0.0).powi(2) - mu_b * mu_b) / (2.0 * rho);
        for j in 0..n {
            let hc = z[j] - r;
            v += ((mu_c[j] + rho * hc).max(0.0).powi(2) - mu_c[j] * mu_c[j]) / (2.0 * rho);
        }
        v
    };

    let mut grad = vec![0.0; n * n];
    let mut y = plan.clone();
    let mut prev = plan.clone();
    let mut buf = Vec::with_capacity(n);
    for _outer in 0..200 {
        // Restarted FISTA on the augmented Lagrangian.
        let mut t = 1.0f64;
        y.copy_from_slice(&plan);
        let mut f_prev = objective(&plan, mu_budget, &mu_cap);
        let mut moved = f64::INFINITY;
        for _inner in 0..20_000 {
            gradient(&y, mu_budget, &mu_cap, &mut grad);
            prev.copy_from_slice(&plan);
            for i in 0..n {
                buf.clear();
                buf.extend(support[i].iter().map(|&j| y[i * n + j] - step * grad[i * n + j]));
                project_simplex(&mut buf, x[i]);
                for (k, &j) in support[i].iter().enumerate() {
                    plan[i * n + j] = buf[k];
                }
            }
            let f_new = objective(&plan, mu_budget, &mu_cap);
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            if f_new > f_prev {
                // Adaptive restart: drop momentum.
                t = 1.0;
                y.copy_from_slice(&plan);
            } else {
                let beta = (t - 1.0) / t_next;
                for k in 0..n * n {
                    y[k] = plan[k] + beta * (plan[k] - prev[k]);
                }
                t = t_next;
            }
            f_prev = f_new;
            moved = plan.iter().zip(&prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if moved < 1e-13 {
                break;
            }
        }
        let z = colsum(&plan);
        let hb = plan_cost(&plan) - epsilon;
        mu_budget = (mu_budget + rho * hb).max(0.0);
        let mut violation = hb.max(0.0);
        for j in 0..n {
            let hc = z[j] - r;
            mu_cap[j] = (mu_cap[j] + rho * hc).max(0.0);
            violation = violation.max(hc);
        }
        if violation < 1e-11 && moved < 1e-12 {
            break;
        }
    }

    // Feasibility repair toward diag(x).
    let z = colsum(&plan);
    let pc = plan_cost(&plan);
    let mut t: f64 = 0.0;
    if pc > *epsilon {
        t = t.max(1.0 - epsilon / pc);
    }
    for j in 0..n {
        if z[j] > *r && z[j] > x[j] {
            t = t.max((z[j] - r) / (z[j] - x[j]));
        }
    }
    if t > 0.0 {
        for i in 0..n {
            for j in 0..n {
                plan[i * n + j] *= 1.0 - t;
            }
            plan[i * n + i] += t * x[i];
        }
    }
    let z = colsum(&plan);
    Ok((plan, z))
}

/// Euclidean projection onto `{p ≥ 0, Σp = total}`.
fn project_simplex(v: &mut [f64], total: f64) {
    if v.is_empty() {
        return;
    }
    if total <= 0.0 {
        v.fill(0.0);
        return;
    }
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &s) in sorted.iter().enumerate() {
        cum += s;
        let candidate = (cum - total) / (k + 1) as f64;
        if s - candidate > 0.0 {
            theta = candidate;
        }
    }
    for p in v.iter_mut() {
        *p = (*p - theta).max(0.0);
    }
}

/// Projection by exhaustive search over the simplex grid with spacing
/// `resolution` (`n ≤ 3` only). Independent of [`exact_project`]: it checks
/// feasibility of each grid point with the min-cost-flow distance.
pub fn grid_project(instance: &TinyInstance, resolution: f64) -> Result<Vec<f64>> {
    let n = instance.n();
    if n > 3 {
        return Err(Error::InstanceTooLarge { n, max: 3 });
    }
    let steps = (1.0 / resolution).round() as usize;
    let h = 1.0 / steps as f64;
    let dist2 = |z: &[f64]| -> f64 { z.iter().zip(&instance.w).map(|(a, b)| (a - b) * (a - b)).sum() };
    let feasible = |z: &[f64]| -> bool {
        z.iter().all(|&v| v <= instance.r + 1e-12)
            && ot_by_min_cost_flow(&instance.x, z, &instance.cost) <= instance.epsilon + 1e-12
    };
    let mut best = instance.x.clone();
    let mut best_d = dist2(&best);
    let mut z = vec![0.0; n];
    let mut consider = |z: &[f64]| {
        let d = dist2(z);
        if d < best_d && feasible(z) {
            best_d = d;
            best = z.to_vec();
        }
    };
    match n {
        1 => consider(&[1.0]),
        2 => {
            for k in 0..=steps {
                z[0] = k as f64 * h;
                z[1] = 1.0 - z[0];
                consider(&z);
            }
        }
        _ => {
            for k0 in 0..=steps {
                for k1 in 0..=steps - k0 {
                    z[0] = k0 as f64 * h;
                    z[1] = k1 as f64 * h;
                    z[2] = ((steps - k0 - k1) as f64 * h).max(0.0);
                    consider(&z);
                }
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line_cost(n: usize) -> Vec<f64> {
        (0..n * n).map(|k| ((k / n) as f64 - (k % n) as f64).abs()).collect()
    }

    fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0f64).powi(2)).collect();
        let s: f64 = v.iter().sum();
        v.iter().map(|p| p / s).collect()
    }

    #[test]
    fn distances_on_small_lines() {
        assert_eq!(exact_ot_distance(&[0.3, 0.7], &[0.3, 0.7], &line_cost(2)).unwrap(), 0.0);
        let d = exact_ot_distance(&[1.0, 0.0], &[0.0, 1.0], &line_cost(2)).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        let d = exact_ot_distance(&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0], &line_cost(3)).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
    }

    #[test]
    fn enumeration_and_flow_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 2..=4 {
            for _ in 0..50 {
                let a = random_distribution(&mut rng, n);
                let b = random_distribution(&mut rng, n);
                let cost: Vec<f64> = (0..n * n)
                    .map(|k| if k / n == k % n { 0.0 } else { rng.gen_range(0.1..3.0) })
                    .collect();
                let e = ot_by_basis_enumeration(&a, &b, &cost);
                let f = ot_by_min_cost_flow(&a, &b, &cost);
                assert!((e - f).abs() < 1e-9, "n={n}: {e} vs {f}");
            }
        }
    }

    #[test]
    fn triangle_inequality_on_random_lines() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cost = line_cost(4);
        for _ in 0..200 {
            let a = random_distribution(&mut rng, 4);
            let b = random_distribution(&mut rng, 4);
            let c = random_distribution(&mut rng, 4);
            let ab = exact_ot_distance(&a, &b, &cost).unwrap();
            let bc = exact_ot_distance(&b, &c, &cost).unwrap();
            let ac = exact_ot_distance(&a, &c, &cost).unwrap();
            assert!(ac <= ab + bc + 1e-6);
        }
    }

    #[test]
    fn forbidden_pairs_are_respected() {
        let inf = f64::INFINITY;
        let cost = vec![0.0, 1.0, inf, 1.0, 0.0, 1.0, inf, 1.0, 0.0];
        let d = exact_ot_distance(&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0], &cost).unwrap();
        assert_eq!(d, inf);
        let d = ot_by_min_cost_flow(&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0], &cost);
        assert_eq!(d, inf);
    }

    #[test]
    fn size_limit() {
        let a = vec![1.0 / 17.0; 17];
        assert!(matches!(
            exact_ot_distance(&a, &a, &vec![0.0; 17 * 17]),
            Err(Error::InstanceTooLarge { n: 17, .. })
        ));
    }

    #[test]
    fn projection_closed_forms() {
        let inst = TinyInstance::new(vec![1.0, 0.0], vec![0.0, 1.0], line_cost(2), 0.5, 1.0).unwrap();
        let z = exact_project(&inst).unwrap();
        assert!((z[0] - 0.5).abs() < 1e-7 && (z[1] - 0.5).abs() < 1e-7, "{z:?}");

        let inst = TinyInstance::new(vec![1.0, 0.0], vec![0.0, 1.0], line_cost(2), 2.0, 1.0).unwrap();
        let z = exact_project(&inst).unwrap();
        assert!((z[0]).abs() < 1e-7 && (z[1] - 1.0).abs() < 1e-7, "{z:?}");

        let x = vec![0.2, 0.5, 0.3];
        let inst = TinyInstance::new(x.clone(), x.clone(), line_cost(3), 0.1, 0.6).unwrap();
        let z = exact_project(&inst).unwrap();
        for (a, b) in z.iter().zip(&x) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn projection_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [2usize, 3] {
            for _ in 0..6 {
                let x = random_distribution(&mut rng, n);
                let w: Vec<f64> = random_distribution(&mut rng, n).iter().map(|v| v * 1.2 - 0.05).collect();
                let r = x.iter().copied().fold(0.0, f64::max) + rng.gen_range(0.0..0.5);
                let eps = rng.gen_range(0.02..0.6);
                let inst = TinyInstance::new(x, w, line_cost(n), eps, r).unwrap();
                let z = exact_project(&inst).unwrap();
                let g = grid_project(&inst, 1e-3).unwrap();
                let d: f64 = z.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                assert!(d < 3e-3, "n={n} {inst:?}: descent {z:?} grid {g:?}");
                // Feasibility of the descent answer.
                assert!(z.iter().all(|&v| v <= inst.r + 1e-9 && v >= -1e-12));
                assert!(ot_by_min_cost_flow(&inst.x, &z, &inst.cost) <= inst.epsilon + 1e-7);
            }
        }
    }
}
