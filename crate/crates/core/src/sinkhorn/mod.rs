//! Constrained entropy-regularized Sinkhorn projection.
//!
//! Projects a perturbed distribution `w` onto
//!
//! ```text
//! { z : ∃Π ≥ 0, Π1 = x, Πᵀ1 = z, ⟨Π,C⟩ ≤ ε, z ≤ r }
//! ```
//!
//! by block coordinate ascent on the dual of
//! `λ/2 ‖w − z‖² + Σ Π log Π` with multipliers `α` (source marginal),
//! `β` (destination marginal), `ψ ≥ 0` (transport budget) and `φ ≥ 0`
//! (pixel cap). The cap multiplier keeps every recovered pixel inside the
//! valid range, so no clamping is needed after un-normalization.
//!
//! All kernel reductions run in the log domain. Multi-channel images are
//! handled as a block-diagonal problem: each channel keeps its own marginals
//! and cap while a single `ψ` prices the budget summed over channels.

mod lambert;

pub use lambert::{back_substitution_error, lambert_w, lambert_w_extended, lambert_w_of_exp};

use serde::{Deserialize, Serialize};

use crate::imagecore::CostMatrix;
use crate::numeric::{change, ln_or_neg_inf, log_sum_exp};
use crate::{Error, Result};

/// Default regularization for attacks.
pub const ATTACK_LAMBDA: f64 = 3000.0;
/// Default regularization for adversarial training.
pub const TRAINING_LAMBDA: f64 = 1000.0;

/// Finite stand-in for `log 0`, used for `α_i` where `x_i = 0`.
pub const LOG_ZERO: f64 = -1e300;

/// Ratio between consecutive `λ` values of the cold-start continuation.
pub const CONTINUATION_FACTOR: f64 = 4.0;

const PSI_CAP: f64 = 1e6;
const CURVATURE_FLOOR: f64 = -1e-12;

/// One projection instance. Vectors hold `channels · n` entries, channel-major.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionProblem<'a> {
    w: &'a [f64],
    x: &'a [f64],
    cost: &'a CostMatrix,
    epsilon: f64,
    lambda: f64,
    r: &'a [f64],
}

impl<'a> ProjectionProblem<'a> {
    /// `r` holds one cap per channel (`1 / ‖x_c‖₁` for a raw image).
    pub fn new(
        w: &'a [f64],
        x: &'a [f64],
        cost: &'a CostMatrix,
        epsilon: f64,
        lambda: f64,
        r: &'a [f64],
    ) -> Result<Self> {
        let n = cost.n();
        let channels = r.len();
        if channels == 0 || x.len() != n * channels || w.len() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{channels} channel(s) of {n} entries"),
                actual: format!("x: {}, w: {}", x.len(), w.len()),
            });
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid("epsilon", format!("must be positive, got {epsilon}")));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid("lambda", format!("must be positive, got {lambda}")));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("w", "entries must be finite"));
        }
        for (c, &cap) in r.iter().enumerate() {
            if !(cap > 0.0 && cap.is_finite()) {
                return Err(Error::invalid("r", format!("cap must be positive, got {cap}")));
            }
            let block = &x[c * n..(c + 1) * n];
            let s: f64 = block.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::invalid("x", format!("channel {c} sums to {s}, not 1")));
            }
            if block.iter().any(|&v| !(v >= 0.0) || v > cap * (1.0 + 1e-9)) {
                return Err(Error::invalid("x", format!("channel {c} has entries outside [0, r]")));
            }
        }
        Ok(ProjectionProblem { w, x, cost, epsilon, lambda, r })
    }

    pub fn w(&self) -> &[f64] {
        self.w
    }

    pub fn x(&self) -> &[f64] {
        self.x
    }

    pub fn cost(&self) -> &CostMatrix {
        self.cost
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn caps(&self) -> &[f64] {
        self.r
    }

    pub fn channels(&self) -> usize {
        self.r.len()
    }

    fn n(&self) -> usize {
        self.cost.n()
    }
}

/// Dual variables of the projection; also the warm-start carrier between
/// consecutive PGD steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    /// Source-marginal multipliers. [`LOG_ZERO`] where `x_i = 0`.
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub psi: f64,
    pub phi: Vec<f64>,
}

impl DualState {
    /// The generic starting point: `α = β = log(1/n)`, `ψ = φ = 1`.
    pub fn cold(len: usize, n: usize) -> Self {
        let l = (1.0 / n as f64).ln();
        DualState { alpha: vec![l; len], beta: vec![l; len], psi: 1.0, phi: vec![1.0; len] }
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// Largest absolute change across all dual variables.
    pub fn max_change(&self, other: &DualState) -> f64 {
        let mut m = change(self.psi, other.psi);
        for (a, b) in self.alpha.iter().zip(&other.alpha) {
            m = m.max(change(*a, *b));
        }
        for (a, b) in self.beta.iter().zip(&other.beta) {
            m = m.max(change(*a, *b));
        }
        for (a, b) in self.phi.iter().zip(&other.phi) {
            m = m.max(change(*a, *b));
        }
        m
    }

    /// Scales the multipliers that grow linearly with `λ`.
    fn rescale(&mut self, s: f64) {
        if s == 1.0 {
            return;
        }
        self.psi *= s;
        self.beta.iter_mut().for_each(|b| *b *= s);
        self.phi.iter_mut().for_each(|p| *p *= s);
    }

    fn is_valid(&self) -> bool {
        self.psi.is_finite()
            && self.psi >= 0.0
            && self.alpha.iter().all(|a| a.is_finite())
            && self.beta.iter().all(|b| b.is_finite())
            && self.phi.iter().all(|p| p.is_finite() && *p >= 0.0)
    }

    /// Euclidean norms of `(α over finite entries, β, φ)`.
    pub fn norms(&self) -> (f64, f64, f64) {
        let n2 = |v: &[f64]| v.iter().filter(|a| **a > LOG_ZERO).map(|a| a * a).sum::<f64>().sqrt();
        (n2(&self.alpha), n2(&self.beta), n2(&self.phi))
    }
}

/// Iteration budget and termination thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornLimits {
    /// Hard cap on sweeps.
    pub max_sweeps: usize,
    /// Dual-change threshold between sweeps for convergence.
    pub tolerance: f64,
    /// Over-budget allowance as a fraction of ε.
    pub w_over_rel: f64,
    /// Allowed `|1 − Σ z|` per channel.
    pub l1_threshold: f64,
}

impl SinkhornLimits {
    /// Strict thresholds for attacks: `W_over ≤ 0.01 ε`, `Δℓ1 ≤ 0.01`.
    pub fn attack() -> Self {
        SinkhornLimits { max_sweeps: 400, tolerance: 1e-4, w_over_rel: 0.01, l1_threshold: 0.01 }
    }

    /// Lenient thresholds for adversarial training: `W_over ≤ 0.1 ε`, `Δℓ1 ≤ 0.1`.
    pub fn training() -> Self {
        SinkhornLimits { max_sweeps: 50, tolerance: 1e-4, w_over_rel: 0.1, l1_threshold: 0.1 }
    }

    pub fn w_over_threshold(&self, epsilon: f64) -> f64 {
        self.w_over_rel * epsilon
    }
}

impl Default for SinkhornLimits {
    fn default() -> Self {
        SinkhornLimits::attack()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplianceReport {
    /// `⟨Π,C⟩ − ε` for the plan recovered from the final duals.
    pub w_over: f64,
    /// `|1 − Σ_j z_j|`, worst channel.
    pub delta_l1: f64,
    /// `0 ≤ z_j ≤ r (1 + 1e-6)` everywhere.
    pub range_ok: bool,
    pub iterations: usize,
    pub converged: bool,
}

impl ComplianceReport {
    /// Both budget thresholds and the range check hold.
    pub fn within(&self, epsilon: f64, limits: &SinkhornLimits) -> bool {
        self.w_over <= limits.w_over_threshold(epsilon) && self.delta_l1 <= limits.l1_threshold && self.range_ok
    }
}

/// Transport plan on the locality support, one block of `cost.nnz()` values
/// per channel in the cost matrix's row order.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    n: usize,
    channels: usize,
    values: Vec<f64>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    costs: Vec<f64>,
}

impl TransportPlan {
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Mass moved from pixel `i` to pixel `j` within channel `c`.
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        let nnz = self.cols.len();
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        match self.cols[a..b].binary_search(&j) {
            Ok(k) => self.values[c * nnz + a + k],
            Err(_) => 0.0,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let nnz = self.cols.len();
        let mut out = vec![0.0; self.n * self.channels];
        for c in 0..self.channels {
            for i in 0..self.n {
                out[c * self.n + i] = (self.row_ptr[i]..self.row_ptr[i + 1]).map(|k| self.values[c * nnz + k]).sum();
            }
        }
        out
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let nnz = self.cols.len();
        let mut out = vec![0.0; self.n * self.channels];
        for c in 0..self.channels {
            for i in 0..self.n {
                for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                    out[c * self.n + self.cols[k]] += self.values[c * nnz + k];
                }
            }
        }
        out
    }

    /// `⟨Π, C⟩` summed over channels.
    pub fn transport_cost(&self) -> f64 {
        let nnz = self.cols.len();
        self.values.iter().enumerate().map(|(k, v)| v * self.costs[k % nnz]).sum()
    }

    /// Dense `n × n` matrix for one channel.
    pub fn dense(&self, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        let nnz = self.cols.len();
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                out[i * self.n + self.cols[k]] = self.values[c * nnz + k];
            }
        }
        out
    }
}

/// Result of [`project`].
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub z: Vec<f64>,
    pub duals: DualState,
    pub report: ComplianceReport,
    /// `true` when a supplied warm start overflowed and the run was redone
    /// from the cold start.
    pub fell_back_to_cold: bool,
}

/// Projects `problem.w` onto the constrained Wasserstein ball around `problem.x`.
///
/// Sweeps until the duals change by less than `limits.tolerance` *and* both
/// compliance thresholds hold, or until `limits.max_sweeps`; in the latter
/// case the report says `converged = false` and the caller decides what to do.
/// A warm start that overflows is retried once from the cold start.
pub fn project(
    problem: &ProjectionProblem<'_>,
    warm: Option<&DualState>,
    limits: &SinkhornLimits,
) -> Result<Projection> {
    let len = problem.x.len();
    if let Some(w) = warm {
        if w.alpha.len() != len || w.beta.len() != len || w.phi.len() != len {
            return Err(Error::DimensionMismatch {
                expected: format!("warm start of length {len}"),
                actual: format!("length {}", w.len()),
            });
        }
    }
    let solver = Solver::new(problem);
    match warm {
        Some(w) => match solver.run(w.clone(), limits) {
            Ok(p) => Ok(p),
            Err(Error::NumericalOverflow { .. }) => {
                let mut p = run_cold(problem, limits)?;
                p.fell_back_to_cold = true;
                Ok(p)
            }
            Err(e) => Err(e),
        },
        None => run_cold(problem, limits),
    }
}

/// Cold start with continuation in `λ`: solve at `λ = 1`, then repeatedly
/// multiply `λ` by [`CONTINUATION_FACTOR`], rescaling `β`, `φ` and `ψ` (which
/// all grow linearly with `λ` at the optimum) before resuming. A plain cold
/// start at large `λ` needs on the order of `λ` sweeps because each `ψ` step
/// moves the log-plan by O(1).
fn run_cold(problem: &ProjectionProblem<'_>, limits: &SinkhornLimits) -> Result<Projection> {
    let target = problem.lambda;
    let mut ladder = vec![target];
    while *ladder.last().unwrap() / CONTINUATION_FACTOR > 1.0 {
        let next = ladder.last().unwrap() / CONTINUATION_FACTOR;
        ladder.push(next);
    }
    ladder.reverse();
    let stages = ladder.len();
    let per_stage = limits.max_sweeps / (2 * stages);
    if per_stage == 0 {
        return Solver::new(problem).run(DualState::cold(problem.x.len(), problem.n()), limits);
    }
    let mut duals = DualState::cold(problem.x.len(), problem.n());
    let mut used = 0;
    let mut prev_lambda = ladder[0];
    for &lambda in &ladder[..stages - 1] {
        let scale = lambda / prev_lambda;
        duals.rescale(scale);
        let stage_problem = ProjectionProblem { lambda, ..*problem };
        let stage_limits = SinkhornLimits { max_sweeps: per_stage.min(limits.max_sweeps - used), ..*limits };
        let out = Solver::new(&stage_problem).run(duals, &stage_limits)?;
        used += out.report.iterations;
        duals = out.duals;
        prev_lambda = lambda;
    }
    duals.rescale(target / prev_lambda);
    let final_limits = SinkhornLimits { max_sweeps: limits.max_sweeps - used, ..*limits };
    let mut out = Solver::new(problem).run(duals, &final_limits)?;
    out.report.iterations += used;
    Ok(out)
}

/// `z = w − (β + φ) / λ`, the primal distribution implied by the duals.
pub fn recover_z(problem: &ProjectionProblem<'_>, duals: &DualState) -> Vec<f64> {
    let lambda = problem.lambda;
    problem.w.iter().zip(&duals.beta).zip(&duals.phi).map(|((w, b), p)| w - (b + p) / lambda).collect()
}

/// `Π_ij = exp(α_i − ψ C_ij − 1 + β_j)` on the locality support.
pub fn recover_plan(problem: &ProjectionProblem<'_>, duals: &DualState) -> TransportPlan {
    let cost = problem.cost;
    let n = cost.n();
    let nnz = cost.nnz();
    let channels = problem.channels();
    let cols = cost.cols();
    let costs = cost.costs();
    let mut values = vec![0.0; nnz * channels];
    for c in 0..channels {
        let off = c * n;
        for i in 0..n {
            let a = duals.alpha[off + i];
            if a <= LOG_ZERO {
                continue;
            }
            for k in cost.row_range(i) {
                values[c * nnz + k] = (a - duals.psi * costs[k] - 1.0 + duals.beta[off + cols[k]]).exp();
            }
        }
    }
    let row_ptr = (0..=n).map(|i| if i == n { nnz } else { cost.row_range(i).start }).collect();
    TransportPlan { n, channels, values, row_ptr, cols: cols.to_vec(), costs: costs.to_vec() }
}

/// Budget and mass compliance of `z` and the plan implied by `duals`.
/// `iterations` and `converged` are left at zero/false.
pub fn compliance(problem: &ProjectionProblem<'_>, duals: &DualState, z: &[f64]) -> ComplianceReport {
    let n = problem.n();
    let plan_cost = plan_transport_cost(problem, duals);
    let mut delta_l1 = 0.0f64;
    let mut range_ok = true;
    for (c, &cap) in problem.r.iter().enumerate() {
        let block = &z[c * n..(c + 1) * n];
        delta_l1 = delta_l1.max((1.0 - block.iter().sum::<f64>()).abs());
        range_ok &= block.iter().all(|&v| v >= -1e-12 && v <= cap * (1.0 + 1e-6));
    }
    ComplianceReport { w_over: plan_cost - problem.epsilon, delta_l1, range_ok, iterations: 0, converged: false }
}

fn plan_transport_cost(problem: &ProjectionProblem<'_>, duals: &DualState) -> f64 {
    let cost = problem.cost;
    let n = cost.n();
    let cols = cost.cols();
    let costs = cost.costs();
    let mut total = 0.0;
    for c in 0..problem.channels() {
        let off = c * n;
        for i in 0..n {
            let a = duals.alpha[off + i];
            if a <= LOG_ZERO {
                continue;
            }
            for k in cost.row_range(i) {
                if costs[k] > 0.0 {
                    total += costs[k] * (a - duals.psi * costs[k] - 1.0 + duals.beta[off + cols[k]]).exp();
                }
            }
        }
    }
    total
}

/// The dual objective
///
/// ```text
/// g = −‖β+φ‖²/(2λ) − ψε + αᵀx + βᵀw + φᵀw − r Σφ − Σ_ij exp(α_i − ψC_ij − 1 + β_j)
/// ```
///
/// Terms `α_i x_i` with `x_i = 0` are taken as zero.
pub fn dual_objective(problem: &ProjectionProblem<'_>, duals: &DualState) -> f64 {
    let n = problem.n();
    let lambda = problem.lambda;
    let mut g = -duals.psi * problem.epsilon;
    for k in 0..problem.x.len() {
        let (b, p) = (duals.beta[k], duals.phi[k]);
        let cap = problem.r[k / n];
        g += -(b + p) * (b + p) / (2.0 * lambda) + (b + p) * problem.w[k] - cap * p;
        if problem.x[k] > 0.0 {
            g += duals.alpha[k] * problem.x[k];
        }
    }
    g - plan_mass(problem, duals, duals.psi)
}

/// `Σ_ij exp(α_i − ψ C_ij − 1 + β_j)` at an arbitrary `ψ`.
fn plan_mass(problem: &ProjectionProblem<'_>, duals: &DualState, psi: f64) -> f64 {
    let cost = problem.cost;
    let n = cost.n();
    let cols = cost.cols();
    let costs = cost.costs();
    let mut total = 0.0;
    for c in 0..problem.channels() {
        let off = c * n;
        for i in 0..n {
            let a = duals.alpha[off + i];
            if a <= LOG_ZERO {
                continue;
            }
            for k in cost.row_range(i) {
                total += (a - psi * costs[k] - 1.0 + duals.beta[off + cols[k]]).exp();
            }
        }
    }
    total
}

/// A block of dual variables, for [`coordinate_step`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Alpha,
    BetaPhi,
    MassShift,
    Psi,
}

struct Solver<'p, 'a> {
    p: &'p ProjectionProblem<'a>,
    log_x: Vec<f64>,
    log_r: Vec<f64>,
    log_lambda: f64,
}

impl<'p, 'a> Solver<'p, 'a> {
    fn new(p: &'p ProjectionProblem<'a>) -> Self {
        Solver {
            p,
            log_x: p.x.iter().map(|&v| ln_or_neg_inf(v)).collect(),
            log_r: p.r.iter().map(|r| r.ln()).collect(),
            log_lambda: p.lambda.ln(),
        }
    }

    fn run(&self, mut duals: DualState, limits: &SinkhornLimits) -> Result<Projection> {
        let mut scratch = Vec::with_capacity(64);
        let mut log_kernel = vec![0.0; self.p.cost.nnz()];
        let mut sweeps = 0;
        let mut converged = false;
        while sweeps < limits.max_sweeps {
            let before = duals.clone();
            self.sweep(&mut duals, &mut log_kernel, &mut scratch);
            sweeps += 1;
            if !duals.is_valid() {
                return Err(Error::NumericalOverflow { sweeps });
            }
            if duals.max_change(&before) < limits.tolerance {
                let z = recover_z(self.p, &duals);
                if compliance(self.p, &duals, &z).within(self.p.epsilon, limits) {
                    converged = true;
                    break;
                }
            }
        }
        self.polish(&mut duals, &mut log_kernel, &mut scratch);
        if !duals.is_valid() {
            return Err(Error::NumericalOverflow { sweeps });
        }
        let z = recover_z(self.p, &duals);
        let mut report = compliance(self.p, &duals, &z);
        report.iterations = sweeps;
        report.converged = converged;
        Ok(Projection { z, duals, report, fell_back_to_cold: false })
    }

    fn sweep(&self, duals: &mut DualState, log_kernel: &mut [f64], scratch: &mut Vec<f64>) {
        self.fill_kernel(duals.psi, log_kernel);
        self.update_alpha(duals, log_kernel, scratch);
        self.update_beta_phi(duals, log_kernel, scratch);
        self.update_mass_shift(duals);
        self.update_psi(duals, log_kernel);
    }

    /// Rebalances rows and columns at the current `ψ`. With the column block
    /// last, every `z_j` is either the cap or a Lambert W root, so the
    /// recovered `z` sits in `[0, r]`.
    fn polish(&self, duals: &mut DualState, log_kernel: &mut [f64], scratch: &mut Vec<f64>) {
        self.fill_kernel(duals.psi, log_kernel);
        self.update_alpha(duals, log_kernel, scratch);
        self.update_beta_phi(duals, log_kernel, scratch);
    }

    fn fill_kernel(&self, psi: f64, log_kernel: &mut [f64]) {
        for (lk, c) in log_kernel.iter_mut().zip(self.p.cost.costs()) {
            *lk = -psi * c - 1.0;
        }
    }

    fn step(&self, duals: &mut DualState, block: Block) {
        let mut scratch = Vec::new();
        let log_kernel: Vec<f64> = self.p.cost.costs().iter().map(|c| -duals.psi * c - 1.0).collect();
        match block {
            Block::Alpha => self.update_alpha(duals, &log_kernel, &mut scratch),
            Block::BetaPhi => self.update_beta_phi(duals, &log_kernel, &mut scratch),
            Block::MassShift => self.update_mass_shift(duals),
            Block::Psi => self.update_psi(duals, &log_kernel),
        }
    }

    /// `α_i = log x_i − log Σ_j K_ij exp(β_j)`.
    fn update_alpha(&self, duals: &mut DualState, log_kernel: &[f64], scratch: &mut Vec<f64>) {
        let cost = self.p.cost;
        let n = cost.n();
        let cols = cost.cols();
        for c in 0..self.p.channels() {
            let off = c * n;
            for i in 0..n {
                let lx = self.log_x[off + i];
                if lx == f64::NEG_INFINITY {
                    duals.alpha[off + i] = LOG_ZERO;
                    continue;
                }
                scratch.clear();
                scratch.extend(cost.row_range(i).map(|k| log_kernel[k] + duals.beta[off + cols[k]]));
                duals.alpha[off + i] = lx - log_sum_exp(scratch);
            }
        }
    }

    /// Joint maximization over `(β_j, φ_j ≥ 0)`: first assume the cap binds
    /// (column mass exactly `r`); if that needs a negative `φ_j`, drop the cap
    /// and solve the unconstrained `β_j` through Lambert W.
    fn update_beta_phi(&self, duals: &mut DualState, log_kernel: &[f64], scratch: &mut Vec<f64>) {
        let cost = self.p.cost;
        let n = cost.n();
        let cols = cost.cols();
        let lambda = self.p.lambda;
        for c in 0..self.p.channels() {
            let off = c * n;
            let (cap, log_cap) = (self.p.r[c], self.log_r[c]);
            for j in 0..n {
                // Support is symmetric: row j lists the sources that reach j.
                scratch.clear();
                scratch.extend(
                    cost.row_range(j)
                        .filter(|&k| duals.alpha[off + cols[k]] > LOG_ZERO)
                        .map(|k| duals.alpha[off + cols[k]] + log_kernel[k]),
                );
                let log_col = log_sum_exp(scratch);
                let wj = self.p.w[off + j];
                if log_col == f64::NEG_INFINITY {
                    // Nothing can reach j: z_j = 0.
                    duals.beta[off + j] = lambda * wj;
                    duals.phi[off + j] = 0.0;
                    continue;
                }
                let beta_cap = log_cap - log_col;
                let phi_cap = lambda * (wj - cap) - beta_cap;
                if phi_cap >= 0.0 {
                    duals.beta[off + j] = beta_cap;
                    duals.phi[off + j] = phi_cap;
                } else {
                    let l = self.log_lambda + lambda * wj + log_col;
                    duals.beta[off + j] = lambda * wj - lambert_w_of_exp(l);
                    duals.phi[off + j] = 0.0;
                }
            }
        }
    }

    /// Exact ascent along `(α − c, β + c)` per channel, with `φ − c` on capped
    /// pixels so their `z_j` stays at the cap. The plan is unchanged by this
    /// move and the optimum restores `Σ z = 1`. Without it the common offset
    /// of `α` and `β` drifts toward its optimum at a rate of order `1/λ`.
    fn update_mass_shift(&self, duals: &mut DualState) {
        let n = self.p.n();
        let lambda = self.p.lambda;
        for (c, &cap) in self.p.r.iter().enumerate() {
            let range = c * n..(c + 1) * n;
            let mut free = 0usize;
            let mut free_sum = 0.0;
            let mut capped_mass = 0.0;
            let mut max_shift = f64::INFINITY;
            for k in range.clone() {
                if duals.phi[k] > 0.0 {
                    capped_mass += cap;
                    max_shift = max_shift.min(duals.phi[k]);
                } else {
                    free += 1;
                    free_sum += self.p.w[k] - duals.beta[k] / lambda;
                }
            }
            if free == 0 {
                continue;
            }
            let shift = (lambda * (free_sum + capped_mass - 1.0) / free as f64).min(max_shift);
            if shift == 0.0 || !shift.is_finite() {
                continue;
            }
            for k in range {
                if duals.alpha[k] > LOG_ZERO {
                    duals.alpha[k] -= shift;
                }
                duals.beta[k] += shift;
                if duals.phi[k] > 0.0 {
                    duals.phi[k] = (duals.phi[k] - shift).max(0.0);
                }
            }
        }
    }

    /// Newton step on `ψ`, kept non-negative.
    ///
    /// The step moves each uncapped `β_j` along with `ψ` at the rate that keeps
    /// column `j` balanced against `z_j` (first order), so the curvature seen
    /// is that of the budget with `β` re-optimized. With `β` held fixed the
    /// column update undoes most of a `ψ` change and progress per sweep is of
    /// order `1/λ`. Steps are backtracked until the dual objective does not
    /// decrease; flat curvature falls back to doubling/halving `ψ`.
    fn update_psi(&self, duals: &mut DualState, log_kernel: &[f64]) {
        let cost = self.p.cost;
        let n = cost.n();
        let cols = cost.cols();
        let costs = cost.costs();
        let lambda = self.p.lambda;
        let eps = self.p.epsilon;
        let len = self.p.x.len();
        let mut rate = vec![0.0; len];
        let mut slope = -eps;
        let mut curvature = 0.0;
        let mut total_mass = 0.0;
        for c in 0..self.p.channels() {
            let off = c * n;
            for j in 0..n {
                let (mut mass, mut first, mut second) = (0.0, 0.0, 0.0);
                for k in cost.row_range(j) {
                    let a = duals.alpha[off + cols[k]];
                    if a <= LOG_ZERO {
                        continue;
                    }
                    let pi = (a + log_kernel[k] + duals.beta[off + j]).exp();
                    mass += pi;
                    first += costs[k] * pi;
                    second += costs[k] * costs[k] * pi;
                }
                let kj = if duals.phi[off + j] > 0.0 { 0.0 } else { first / (mass + 1.0 / lambda) };
                let z = self.p.w[off + j] - (duals.beta[off + j] + duals.phi[off + j]) / lambda;
                rate[off + j] = kj;
                total_mass += mass;
                slope += first + kj * (z - mass);
                curvature -= kj * kj / lambda + kj * kj * mass - 2.0 * kj * first + second;
            }
        }
        let psi = duals.psi;
        let mut step = if curvature >= CURVATURE_FLOOR {
            if slope > 0.0 {
                psi.max(1.0)
            } else {
                -0.5 * psi
            }
        } else {
            -slope / curvature
        };
        step = step.max(-psi).min(PSI_CAP - psi);
        if step == 0.0 || !step.is_finite() {
            return;
        }
        let base = self.budget_base(duals, total_mass);
        for _ in 0..60 {
            if self.budget_objective(duals, &rate, step) >= base {
                duals.psi = (psi + step).max(0.0);
                for (b, k) in duals.beta.iter_mut().zip(&rate) {
                    *b += step * k;
                }
                return;
            }
            step *= 0.5;
        }
    }

    /// [`Self::budget_objective`] at `t = 0`, given the plan mass.
    fn budget_base(&self, duals: &DualState, total_mass: f64) -> f64 {
        let lambda = self.p.lambda;
        let mut val = -duals.psi * self.p.epsilon - total_mass;
        for k in 0..duals.beta.len() {
            let bp = duals.beta[k] + duals.phi[k];
            val += -bp * bp / (2.0 * lambda) + duals.beta[k] * self.p.w[k];
        }
        val
    }

    /// The terms of the dual objective that change when `ψ` moves by `t` and
    /// each `β_j` by `t · rate_j`.
    fn budget_objective(&self, duals: &DualState, rate: &[f64], t: f64) -> f64 {
        let cost = self.p.cost;
        let n = cost.n();
        let cols = cost.cols();
        let costs = cost.costs();
        let lambda = self.p.lambda;
        let psi = duals.psi + t;
        let mut val = -psi * self.p.epsilon;
        for k in 0..duals.beta.len() {
            let b = duals.beta[k] + t * rate[k];
            let bp = b + duals.phi[k];
            val += -bp * bp / (2.0 * lambda) + b * self.p.w[k];
        }
        for c in 0..self.p.channels() {
            let off = c * n;
            for i in 0..n {
                let a = duals.alpha[off + i];
                if a <= LOG_ZERO {
                    continue;
                }
                for k in cost.row_range(i) {
                    let j = off + cols[k];
                    val -= (a - psi * costs[k] - 1.0 + duals.beta[j] + t * rate[j]).exp();
                }
            }
        }
        val
    }
}

/// Applies one block update of the sweep in isolation.
pub fn coordinate_step(problem: &ProjectionProblem<'_>, duals: &mut DualState, block: Block) {
    Solver::new(problem).step(duals, block);
}

#[cfg(test)]
mod tests;
