use serde::{Deserialize, Serialize};

use super::{normalize, CostMatrix, Image};
use crate::{oracle, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DistanceMode {
    /// Exact optimal transport on the cost support: brute force up to 16
    /// pixels per channel, min-cost flow over the massed pixels above that.
    Exact,
    /// Transport cost of the plan minimizing `⟨Π,C⟩ − H(Π)/λ`.
    Entropic { lambda: f64 },
}

/// Audits measure the exact distance: at image scale the entropic estimate
/// cannot be converged cheaply enough to resolve a 1% budget allowance.
impl Default for DistanceMode {
    fn default() -> Self {
        DistanceMode::Exact
    }
}

/// Sum over channels of the transport distance between the normalized
/// channels of `a` and `b`.
pub fn wasserstein_distance(a: &Image, b: &Image, cost: &CostMatrix, mode: DistanceMode) -> Result<f64> {
    a.check_same_shape(b)?;
    if cost.n() != a.pixel_count() || cost.height() != a.height() {
        return Err(Error::DimensionMismatch {
            expected: format!("cost matrix for {}×{}", a.height(), a.width()),
            actual: format!("{}×{}", cost.height(), cost.width()),
        });
    }
    let na = normalize(a)?;
    let nb = normalize(b)?;
    let small = a.pixel_count() <= oracle::MAX_PIXELS;
    let dense = (small && mode == DistanceMode::Exact).then(|| cost.dense());
    let mut total = 0.0;
    for c in 0..a.channels() {
        let (p, q) = (na.distribution(c), nb.distribution(c));
        total += match mode {
            DistanceMode::Exact => match &dense {
                Some(d) => oracle::exact_ot_distance(p, q, d)?,
                None => sparse_transport_distance(p, q, cost)?,
            },
            DistanceMode::Entropic { lambda } => entropic_transport_cost(p, q, cost, lambda)?,
        };
    }
    Ok(total)
}

/// Transport cost of the entropy-regularized optimal plan between two
/// distributions on the support of `cost`, after rounding the plan onto the
/// exact marginals (leftover mass is coupled at its true grid distance).
///
/// Runs log-domain Sinkhorn restricted to the pixels that carry mass, with
/// λ annealed geometrically up to the target and each stage warm-started from
/// the previous potentials. Returns `+∞` when the support admits no feasible
/// plan.
pub fn entropic_transport_cost(a: &[f64], b: &[f64], cost: &CostMatrix, lambda: f64) -> Result<f64> {
    let n = cost.n();
    if a.len() != n || b.len() != n {
        return Err(Error::DimensionMismatch {
            expected: format!("{n} entries"),
            actual: format!("{} and {}", a.len(), b.len()),
        });
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("lambda", format!("must be positive, got {lambda}")));
    }
    let support = Support::new(a, b, cost);
    let Some((exact, mut f, mut g)) = support.min_cost_flow() else {
        return Ok(f64::INFINITY);
    };
    let log_a: Vec<f64> = support.row_mass.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = support.col_mass.iter().map(|v| v.ln()).collect();
    // Start from optimal unregularized potentials; at large λ the
    // regularized ones are a small correction.
    // Small supports can afford to converge fully.
    let sweeps = (SINKHORN_WORK / support.row_edges.len().max(1)).clamp(SINKHORN_SWEEPS, 50 * SINKHORN_SWEEPS);
    for it in 0..sweeps {
        if !support.update(&mut f, &g, &log_a, lambda, Side::Rows) || !support.update(&mut g, &f, &log_b, lambda, Side::Cols)
        {
            return Ok(f64::INFINITY);
        }
        if it % 5 == 4 && support.row_error(&f, &g, &support.row_mass, lambda) < 1e-9 {
            break;
        }
    }
    if !support.update(&mut f, &g, &log_a, lambda, Side::Rows) {
        return Ok(f64::INFINITY);
    }
    Ok(support.rounded_cost(&f, &g, lambda, cost).max(exact))
}

/// Exact transport distance on the support of `cost` (`+∞` if infeasible),
/// by min-cost flow over the pixels that carry mass.
pub fn sparse_transport_distance(a: &[f64], b: &[f64], cost: &CostMatrix) -> Result<f64> {
    let n = cost.n();
    if a.len() != n || b.len() != n {
        return Err(Error::DimensionMismatch {
            expected: format!("{n} entries"),
            actual: format!("{} and {}", a.len(), b.len()),
        });
    }
    Ok(Support::new(a, b, cost).min_cost_flow().map_or(f64::INFINITY, |r| r.0))
}

const SINKHORN_SWEEPS: usize = 500;
const SINKHORN_WORK: usize = 2_000_000;

#[derive(Clone, Copy)]
enum Side {
    Rows,
    Cols,
}

/// The transport problem restricted to pixels with mass: rows are source
/// pixels, columns destination pixels, edges the window pairs between them.
struct Support {
    row_pixel: Vec<usize>,
    col_pixel: Vec<usize>,
    row_mass: Vec<f64>,
    col_mass: Vec<f64>,
    row_ptr: Vec<usize>,
    /// `(column, cost)` per edge, grouped by row.
    row_edges: Vec<(usize, f64)>,
    col_ptr: Vec<usize>,
    /// `(row, cost)` per edge, grouped by column.
    col_edges: Vec<(usize, f64)>,
    /// Row-grouped index of each column-grouped edge.
    col_edge_index: Vec<usize>,
    /// Row of each row-grouped edge.
    edge_row: Vec<usize>,
}

/// Min-heap entry keyed on distance.
struct HeapEntry(f64, usize);

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl Support {
    fn new(a: &[f64], b: &[f64], cost: &CostMatrix) -> Self {
        let n = cost.n();
        let mut col_index = vec![usize::MAX; n];
        let mut col_pixel = Vec::new();
        for (j, &v) in b.iter().enumerate() {
            if v > 0.0 {
                col_index[j] = col_pixel.len();
                col_pixel.push(j);
            }
        }
        let row_pixel: Vec<usize> = (0..n).filter(|&i| a[i] > 0.0).collect();
        let mut row_ptr = vec![0];
        let mut row_edges = Vec::new();
        let mut col_count = vec![0usize; col_pixel.len()];
        for &i in &row_pixel {
            for k in cost.row_range(i) {
                let c = col_index[cost.cols()[k]];
                if c != usize::MAX {
                    row_edges.push((c, cost.costs()[k]));
                    col_count[c] += 1;
                }
            }
            row_ptr.push(row_edges.len());
        }
        let mut col_ptr = vec![0];
        for c in &col_count {
            col_ptr.push(col_ptr.last().unwrap() + c);
        }
        let mut fill = col_ptr[..col_pixel.len()].to_vec();
        let mut col_edges = vec![(0, 0.0); row_edges.len()];
        let mut col_edge_index = vec![0; row_edges.len()];
        let mut edge_row = vec![0; row_edges.len()];
        for r in 0..row_pixel.len() {
            for k in row_ptr[r]..row_ptr[r + 1] {
                let (c, w) = row_edges[k];
                col_edges[fill[c]] = (r, w);
                col_edge_index[fill[c]] = k;
                edge_row[k] = r;
                fill[c] += 1;
            }
        }
        Support {
            row_mass: row_pixel.iter().map(|&i| a[i]).collect(),
            col_mass: col_pixel.iter().map(|&j| b[j]).collect(),
            row_pixel,
            col_pixel,
            row_ptr,
            row_edges,
            col_ptr,
            col_edges,
            col_edge_index,
            edge_row,
        }
    }

    /// Successive shortest paths with Dijkstra on reduced costs. Returns the
    /// optimal cost and dual potentials `(f, g)` with `f_i + g_j ≤ C_ij`,
    /// tight on every edge that carries flow.
    fn min_cost_flow(&self) -> Option<(f64, Vec<f64>, Vec<f64>)> {
        const TINY: f64 = 1e-15;
        let (nr, nc) = (self.row_mass.len(), self.col_mass.len());
        if nr == 0 || nc == 0 {
            return None;
        }
        let mut flow = vec![0.0; self.row_edges.len()];
        let mut supply = self.row_mass.clone();
        let mut demand = self.col_mass.clone();
        // Potentials: rows then columns.
        let mut pot = vec![0.0; nr + nc];
        let mut remaining: f64 = supply.iter().sum::<f64>().min(demand.iter().sum());
        let mut total = 0.0;
        let mut dist = vec![f64::INFINITY; nr + nc];
        // Predecessor: for a column, the edge it was reached by (forward);
        // for a row, the edge it was reached by backwards (usize::MAX = source).
        let mut via = vec![usize::MAX; nr + nc];
        let mut done = vec![false; nr + nc];
        let mut heap = std::collections::BinaryHeap::new();
        while remaining > 1e-12 {
            dist.fill(f64::INFINITY);
            via.fill(usize::MAX);
            done.fill(false);
            heap.clear();
            for r in 0..nr {
                if supply[r] > TINY {
                    dist[r] = 0.0;
                    heap.push(HeapEntry(0.0, r));
                }
            }
            let mut sink = None;
            while let Some(HeapEntry(d, v)) = heap.pop() {
                if done[v] || d > dist[v] {
                    continue;
                }
                done[v] = true;
                if v < nr {
                    for k in self.row_ptr[v]..self.row_ptr[v + 1] {
                        let (c, w) = self.row_edges[k];
                        let u = nr + c;
                        let nd = d + (w + pot[v] - pot[u]).max(0.0);
                        if nd < dist[u] {
                            dist[u] = nd;
                            via[u] = k;
                            heap.push(HeapEntry(nd, u));
                        }
                    }
                } else {
                    let c = v - nr;
                    if demand[c] > TINY {
                        sink = Some(v);
                        break;
                    }
                    for e in self.col_ptr[c]..self.col_ptr[c + 1] {
                        let k = self.col_edge_index[e];
                        if flow[k] <= TINY {
                            continue;
                        }
                        let (r, w) = self.col_edges[e];
                        let nd = d + (pot[v] - pot[r] - w).max(0.0);
                        if nd < dist[r] {
                            dist[r] = nd;
                            via[r] = k;
                            heap.push(HeapEntry(nd, r));
                        }
                    }
                }
            }
            let Some(sink) = sink else {
                // Round-off strands a sliver of mass; anything larger means
                // the window admits no feasible plan.
                if remaining < 1e-9 {
                    break;
                }
                return None;
            };
            let reach = dist[sink];
            for v in 0..nr + nc {
                pot[v] += if done[v] { dist[v] } else { reach };
            }
            // Bottleneck along the path.
            let mut push = demand[sink - nr];
            let mut v = sink;
            loop {
                if v >= nr {
                    let k = via[v];
                    v = self.edge_row[k];
                } else if via[v] == usize::MAX {
                    push = push.min(supply[v]);
                    break;
                } else {
                    let k = via[v];
                    push = push.min(flow[k]);
                    v = nr + self.row_edges[k].0;
                }
            }
            let mut v = sink;
            demand[sink - nr] -= push;
            loop {
                if v >= nr {
                    let k = via[v];
                    flow[k] += push;
                    total += push * self.row_edges[k].1;
                    v = self.edge_row[k];
                } else if via[v] == usize::MAX {
                    supply[v] -= push;
                    break;
                } else {
                    let k = via[v];
                    flow[k] -= push;
                    total -= push * self.row_edges[k].1;
                    v = nr + self.row_edges[k].0;
                }
            }
            remaining -= push;
        }
        // pot_c − pot_r ≤ C on every edge, so f = −pot_r, g = pot_c.
        let f = pot[..nr].iter().map(|p| -p).collect();
        let g = pot[nr..].to_vec();
        Some((total.max(0.0), f, g))
    }

    /// Exact marginal update of one potential given the other. Returns
    /// `false` if some pixel with mass has no reachable partner with mass.
    fn update(&self, target: &mut [f64], other: &[f64], log_marginal: &[f64], lam: f64, side: Side) -> bool {
        let (ptr, edges) = match side {
            Side::Rows => (&self.row_ptr, &self.row_edges),
            Side::Cols => (&self.col_ptr, &self.col_edges),
        };
        for (t, out) in target.iter_mut().enumerate() {
            let es = &edges[ptr[t]..ptr[t + 1]];
            if es.is_empty() {
                return false;
            }
            let mut m = f64::NEG_INFINITY;
            for &(o, c) in es {
                m = m.max(other[o] - c);
            }
            let s: f64 = es.iter().map(|&(o, c)| (lam * (other[o] - c - m)).exp()).sum();
            *out = (log_marginal[t] - s.ln()) / lam - m;
        }
        true
    }

    fn row_error(&self, f: &[f64], g: &[f64], a: &[f64], lam: f64) -> f64 {
        (0..f.len())
            .map(|r| {
                let row: f64 = self.row_edges[self.row_ptr[r]..self.row_ptr[r + 1]]
                    .iter()
                    .map(|&(c, w)| (lam * (f[r] + g[c] - w)).exp())
                    .sum();
                (row - a[r]).abs()
            })
            .sum()
    }

    /// Cost of a nearby feasible plan: scale down over-full columns and rows,
    /// then couple the leftover row and column mass directly. This is the
    /// cost of an exact coupling of the two marginals, hence an upper bound
    /// on their transport distance even when Sinkhorn stopped short.
    fn rounded_cost(&self, f: &[f64], g: &[f64], lam: f64, cost: &CostMatrix) -> f64 {
        let mut plan: Vec<f64> = Vec::with_capacity(self.row_edges.len());
        for r in 0..f.len() {
            for &(c, w) in &self.row_edges[self.row_ptr[r]..self.row_ptr[r + 1]] {
                plan.push((lam * (f[r] + g[c] - w)).exp());
            }
        }
        let mut col_sum = vec![0.0; g.len()];
        for (k, &(c, _)) in self.row_edges.iter().enumerate() {
            col_sum[c] += plan[k];
        }
        let col_scale: Vec<f64> =
            col_sum.iter().zip(&self.col_mass).map(|(&s, &t)| if s > t { t / s } else { 1.0 }).collect();
        let mut row_left = vec![0.0; f.len()];
        let mut col_left = self.col_mass.clone();
        let mut total = 0.0;
        for r in 0..f.len() {
            let range = self.row_ptr[r]..self.row_ptr[r + 1];
            let row: f64 = range.clone().map(|k| plan[k] * col_scale[self.row_edges[k].0]).sum();
            let row_scale = if row > self.row_mass[r] { self.row_mass[r] / row } else { 1.0 };
            let mut kept = 0.0;
            for k in range {
                let (c, w) = self.row_edges[k];
                let v = plan[k] * col_scale[c] * row_scale;
                kept += v;
                col_left[c] -= v;
                total += w * v;
            }
            row_left[r] = (self.row_mass[r] - kept).max(0.0);
        }
        // Couple the leftovers greedily, nearest pairs first.
        let w = cost.width();
        let p = cost.metric_order();
        let rows: Vec<usize> = (0..row_left.len()).filter(|&r| row_left[r] > 1e-15).collect();
        let cols: Vec<usize> = (0..col_left.len()).filter(|&c| col_left[c] > 1e-15).collect();
        let mut pairs = Vec::with_capacity(rows.len() * cols.len());
        for &r in &rows {
            let i = self.row_pixel[r];
            for &c in &cols {
                let j = self.col_pixel[c];
                let dy = (i / w).abs_diff(j / w) as f64;
                let dx = (i % w).abs_diff(j % w) as f64;
                pairs.push(((dy * dy + dx * dx).powf(p / 2.0), r, c));
            }
        }
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        for (d, r, c) in pairs {
            let m = row_left[r].min(col_left[c]);
            if m > 0.0 {
                total += m * d;
                row_left[r] -= m;
                col_left[c] -= m;
            }
        }
        // Whatever round-off remains travels the full diagonal.
        let stray: f64 = row_left.iter().sum();
        total += stray * ((cost.height().pow(2) + w * w) as f64).powf(p / 2.0);
        total
    }
}

/// Parameters of the constrained Wasserstein ball used by audits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallSpec {
    /// Radius in normalized-mass · pixel-distance units.
    pub epsilon: f64,
    /// Relative over-budget allowance: the distance may reach `ε (1 + tol)`.
    pub wasserstein_tolerance: f64,
    /// Allowed per-channel mass deviation, as a fraction of the original mass.
    pub l1_tolerance: f64,
}

impl BallSpec {
    pub fn new(epsilon: f64, wasserstein_tolerance: f64, l1_tolerance: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid("epsilon", format!("must be positive, got {epsilon}")));
        }
        if !(wasserstein_tolerance >= 0.0 && l1_tolerance >= 0.0) {
            return Err(Error::invalid("tolerance", "tolerances must be non-negative"));
        }
        Ok(BallSpec { epsilon, wasserstein_tolerance, l1_tolerance })
    }

    /// Attack-mode thresholds: 1% over-budget and 1% mass deviation.
    pub fn attack(epsilon: f64) -> Self {
        BallSpec { epsilon, wasserstein_tolerance: 0.01, l1_tolerance: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipReport {
    /// Wasserstein distance estimate (`+∞` if the candidate has an empty channel).
    pub distance: f64,
    /// `ε (1 + wasserstein_tolerance)`.
    pub distance_limit: f64,
    pub within_radius: bool,
    /// Per channel `|‖x_c‖₁ − ‖x'_c‖₁| / ‖x_c‖₁`.
    pub l1_deviation: Vec<f64>,
    pub l1_ok: bool,
    pub range_ok: bool,
    pub passes: bool,
}

impl MembershipReport {
    /// Fraction of the radius consumed.
    pub fn budget_used(&self, epsilon: f64) -> f64 {
        self.distance / epsilon
    }
}

/// Checks `candidate` against the constrained Wasserstein ball around
/// `original`, measuring the distance with the audit mode.
pub fn ball_membership(
    original: &Image,
    candidate: &Image,
    spec: &BallSpec,
    cost: &CostMatrix,
) -> Result<MembershipReport> {
    ball_membership_with(original, candidate, spec, cost, DistanceMode::default())
}

pub fn ball_membership_with(
    original: &Image,
    candidate: &Image,
    spec: &BallSpec,
    cost: &CostMatrix,
    mode: DistanceMode,
) -> Result<MembershipReport> {
    original.check_same_shape(candidate)?;
    let l1_deviation: Vec<f64> = (0..original.channels())
        .map(|c| {
            let a = original.channel_l1(c);
            (a - candidate.channel_l1(c)).abs() / a
        })
        .collect();
    let distance = match wasserstein_distance(original, candidate, cost, mode) {
        Ok(d) => d,
        Err(Error::ZeroMassChannel { .. }) if (0..original.channels()).all(|c| original.channel_l1(c) > 0.0) => {
            f64::INFINITY
        }
        Err(e) => return Err(e),
    };
    let distance_limit = spec.epsilon * (1.0 + spec.wasserstein_tolerance);
    let within_radius = distance <= distance_limit;
    let l1_ok = l1_deviation.iter().all(|&d| d <= spec.l1_tolerance);
    let range_ok = candidate.pixels().iter().all(|v| (0.0..=1.0).contains(v));
    Ok(MembershipReport {
        distance,
        distance_limit,
        within_radius,
        l1_deviation,
        l1_ok,
        range_ok,
        passes: within_radius && l1_ok && range_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::{build_cost_matrix, dim, Locality};

    fn two_pixel(a: [f64; 2]) -> Image {
        Image::gray(1, 2, a.to_vec()).unwrap()
    }

    #[test]
    fn identical_images_are_at_distance_zero() {
        let img = Image::gray(3, 3, vec![0.1, 0.5, 0.0, 0.9, 0.2, 0.3, 0.0, 0.0, 0.4]).unwrap();
        let cost = build_cost_matrix(3, 3, 1.0, Locality::Global).unwrap();
        assert!(wasserstein_distance(&img, &img, &cost, DistanceMode::Exact).unwrap().abs() < 1e-12);
        assert!(wasserstein_distance(&img, &img, &cost, DistanceMode::default()).unwrap().abs() < 1e-9);
    }

    #[test]
    fn dimmed_image_is_at_distance_zero() {
        let img = Image::gray(3, 3, vec![0.1, 0.5, 0.0, 0.9, 0.2, 0.3, 0.0, 0.0, 0.4]).unwrap();
        let cost = build_cost_matrix(3, 3, 1.0, Locality::Global).unwrap();
        let d = dim(&img, 30.0).unwrap();
        assert!(wasserstein_distance(&img, &d, &cost, DistanceMode::Exact).unwrap().abs() < 1e-9);
    }

    #[test]
    fn two_pixel_full_move_costs_one() {
        let cost = build_cost_matrix(1, 2, 1.0, Locality::Global).unwrap();
        let d = wasserstein_distance(&two_pixel([1.0, 0.0]), &two_pixel([0.0, 1.0]), &cost, DistanceMode::Exact)
            .unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        let e = wasserstein_distance(&two_pixel([1.0, 0.0]), &two_pixel([0.0, 1.0]), &cost, DistanceMode::default())
            .unwrap();
        assert!((e - 1.0).abs() < 1e-9);
    }

    #[test]
    fn membership_verdicts() {
        let cost = build_cost_matrix(1, 2, 1.0, Locality::Global).unwrap();
        let x = two_pixel([1.0, 0.0]);
        let same = ball_membership(&x, &x, &BallSpec::attack(0.5), &cost).unwrap();
        assert!(same.passes);
        assert!(same.distance.abs() < 1e-12);

        let half = ball_membership_with(
            &x,
            &two_pixel([0.5, 0.5]),
            &BallSpec::new(0.5, 0.0, 0.0).unwrap(),
            &cost,
            DistanceMode::Exact,
        )
        .unwrap();
        assert!(half.passes);
        assert!((half.budget_used(0.5) - 1.0).abs() < 1e-12);

        let dimmed = ball_membership(&x, &dim(&x, 30.0).unwrap(), &BallSpec::attack(0.5), &cost).unwrap();
        assert!(dimmed.within_radius);
        assert!(!dimmed.l1_ok);
        assert!(!dimmed.passes);
    }

    #[test]
    fn empty_candidate_channel_fails_instead_of_erroring() {
        let cost = build_cost_matrix(1, 2, 1.0, Locality::Global).unwrap();
        let r = ball_membership(&two_pixel([1.0, 0.0]), &two_pixel([0.0, 0.0]), &BallSpec::attack(1.0), &cost)
            .unwrap();
        assert!(!r.passes);
        assert_eq!(r.distance, f64::INFINITY);
    }

    #[test]
    fn infeasible_support_reports_infinity() {
        let cost = build_cost_matrix(1, 5, 1.0, Locality::Window(3)).unwrap();
        let a = [1.0, 0.0, 0.0, 0.0, 0.0];
        let b = [0.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(entropic_transport_cost(&a, &b, &cost, 100.0).unwrap(), f64::INFINITY);
    }

    fn random_distribution(rng: &mut rand_chacha::ChaCha8Rng, n: usize, sparsity: f64) -> Vec<f64> {
        use rand::Rng;
        let mut v: Vec<f64> = (0..n).map(|_| if rng.gen_bool(sparsity) { 0.0 } else { rng.gen_range(0.01..1.0) }).collect();
        if v.iter().all(|&x| x == 0.0) {
            v[0] = 1.0;
        }
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    }

    #[test]
    fn min_cost_flow_matches_brute_force() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for locality in [Locality::Global, Locality::Window(3)] {
            let cost = build_cost_matrix(4, 4, 1.0, locality).unwrap();
            let dense = cost.dense();
            for _ in 0..40 {
                let a = random_distribution(&mut rng, 16, 0.4);
                let b = random_distribution(&mut rng, 16, 0.4);
                let flow = sparse_transport_distance(&a, &b, &cost).unwrap();
                let brute = oracle::ot_by_min_cost_flow(&a, &b, &dense);
                if brute.is_infinite() {
                    assert!(flow.is_infinite());
                } else {
                    assert!((flow - brute).abs() < 1e-9, "{flow} vs {brute}");
                }
            }
        }
    }

    #[test]
    fn entropic_estimate_bounds_exact_from_above_and_tightens() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let cost = build_cost_matrix(4, 4, 1.0, Locality::Global).unwrap();
        for _ in 0..20 {
            let a = random_distribution(&mut rng, 16, 0.2);
            let b = random_distribution(&mut rng, 16, 0.2);
            let exact = sparse_transport_distance(&a, &b, &cost).unwrap();
            let mut last = f64::INFINITY;
            for lambda in [10.0, 100.0, 1000.0] {
                let e = entropic_transport_cost(&a, &b, &cost, lambda).unwrap();
                assert!(e >= exact - 1e-12);
                assert!(e <= last + 1e-9, "gap grew at λ = {lambda}: {e} > {last} (exact {exact})");
                last = e;
            }
        }
    }

    #[test]
    fn translated_mnist_like_blob_costs_the_shift() {
        let mut a = vec![0.0; 64];
        let mut b = vec![0.0; 64];
        for (y, x) in [(2, 1), (3, 1), (3, 2), (4, 2)] {
            a[y * 8 + x] = 0.25;
            b[y * 8 + x + 3] = 0.25;
        }
        let cost = build_cost_matrix(8, 8, 1.0, Locality::Window(7)).unwrap();
        assert!((sparse_transport_distance(&a, &b, &cost).unwrap() - 3.0).abs() < 1e-12);
        let narrow = build_cost_matrix(8, 8, 1.0, Locality::Window(5)).unwrap();
        assert_eq!(sparse_transport_distance(&a, &b, &narrow).unwrap(), f64::INFINITY);
    }
}
