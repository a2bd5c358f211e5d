//! Projected gradient descent under ℓ∞, ℓ2 and Wasserstein threat models.
//!
//! Wasserstein attacks run in normalized distribution space: the pixel
//! gradient is pulled back through the (fixed) channel norms, the step is
//! taken on the distributions, and each candidate is projected with
//! [`sinkhorn::project`], warm-started from the previous step's duals.
//! Projected iterates are never clamped into range; every returned image is
//! audited and an over-budget result is rolled back to the latest iterate
//! that passes.

use serde::{Deserialize, Serialize};

use crate::dataio::LabeledDataset;
use crate::imagecore::{
    ball_membership, build_cost_matrix, normalize, BallSpec, CostMatrix, Image, Locality, MembershipReport,
    NormalizedImage,
};
use crate::model::Model;
use crate::par::Exec;
use crate::sinkhorn::{self, ComplianceReport, DualState, ProjectionProblem, SinkhornLimits};
use crate::{Error, Result};

/// Default step size, in distribution units for Wasserstein attacks.
pub const DEFAULT_ALPHA: f64 = 0.06;
pub const DEFAULT_MAX_STEPS: usize = 200;

/// Relative slack for projected values that land a hair above the pixel cap
/// or below zero; matches the range check of the projection's own report.
const MATERIALIZE_SLACK: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreatKind {
    Linf,
    L2,
    Wasserstein,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    /// `α · sign(g)`.
    LinfSign,
    /// `g` rescaled so its largest entry has magnitude `α`.
    L2Steepest,
}

/// What the attack checks before accepting an iterate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditMode {
    /// Independent [`ball_membership`] audit of the materialized image.
    Full,
    /// Trust the projection's own compliance report (cheap; used in training).
    ProjectionReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WassersteinSettings {
    pub metric_order: f64,
    pub locality: Locality,
    pub lambda: f64,
    pub limits: SinkhornLimits,
    pub warm_start: bool,
    pub audit: AuditMode,
}

impl WassersteinSettings {
    pub fn attack() -> Self {
        WassersteinSettings {
            metric_order: 1.0,
            locality: Locality::default(),
            lambda: sinkhorn::ATTACK_LAMBDA,
            limits: SinkhornLimits::attack(),
            warm_start: true,
            audit: AuditMode::Full,
        }
    }

    pub fn training() -> Self {
        WassersteinSettings {
            lambda: sinkhorn::TRAINING_LAMBDA,
            limits: SinkhornLimits::training(),
            audit: AuditMode::ProjectionReport,
            ..WassersteinSettings::attack()
        }
    }

    /// Ball thresholds matching the Sinkhorn limits.
    pub fn ball(&self, epsilon: f64) -> BallSpec {
        BallSpec { epsilon, wasserstein_tolerance: self.limits.w_over_rel, l1_tolerance: self.limits.l1_threshold }
    }

    pub fn cost_matrix(&self, height: usize, width: usize) -> Result<CostMatrix> {
        build_cost_matrix(height, width, self.metric_order, self.locality)
    }
}

impl Default for WassersteinSettings {
    fn default() -> Self {
        WassersteinSettings::attack()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThreatModel {
    pub kind: ThreatKind,
    /// Pixel units for ℓp, normalized-mass units for Wasserstein.
    pub epsilon: f64,
    pub step_kind: StepKind,
    pub alpha: f64,
    pub max_steps: usize,
    /// `Some(t)`: succeed when the prediction becomes `t`.
    pub target: Option<usize>,
    /// Stop at the first successful (and compliant) iterate.
    pub early_stop: bool,
    pub wasserstein: WassersteinSettings,
}

impl ThreatModel {
    pub fn wasserstein(epsilon: f64) -> Self {
        ThreatModel {
            kind: ThreatKind::Wasserstein,
            epsilon,
            step_kind: StepKind::L2Steepest,
            alpha: DEFAULT_ALPHA,
            max_steps: DEFAULT_MAX_STEPS,
            target: None,
            early_stop: true,
            wasserstein: WassersteinSettings::attack(),
        }
    }

    pub fn linf(epsilon: f64) -> Self {
        ThreatModel {
            kind: ThreatKind::Linf,
            step_kind: StepKind::LinfSign,
            alpha: epsilon / 4.0,
            ..ThreatModel::wasserstein(epsilon)
        }
    }

    pub fn l2(epsilon: f64) -> Self {
        ThreatModel { kind: ThreatKind::L2, alpha: epsilon / 4.0, ..ThreatModel::wasserstein(epsilon) }
    }

    pub fn with_step(self, step_kind: StepKind) -> Self {
        ThreatModel { step_kind, ..self }
    }

    pub fn with_alpha(self, alpha: f64) -> Self {
        ThreatModel { alpha, ..self }
    }

    pub fn with_max_steps(self, max_steps: usize) -> Self {
        ThreatModel { max_steps, ..self }
    }

    pub fn with_epsilon(self, epsilon: f64) -> Self {
        ThreatModel { epsilon, ..self }
    }

    pub fn targeted(self, target: usize) -> Self {
        ThreatModel { target: Some(target), ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("epsilon", format!("must be positive, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha", format!("must be positive, got {}", self.alpha)));
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("max_steps", "must be at least 1"));
        }
        if self.kind == ThreatKind::Wasserstein {
            let s = &self.wasserstein;
            if !(s.lambda > 0.0 && s.lambda.is_finite()) {
                return Err(Error::invalid("lambda", format!("must be positive, got {}", s.lambda)));
            }
            if s.limits.max_sweeps == 0 {
                return Err(Error::invalid("max_sweeps", "must be at least 1"));
            }
        }
        Ok(())
    }

    /// Step size actually used for this radius.
    pub fn step_size(&self) -> f64 {
        match self.kind {
            ThreatKind::Wasserstein => effective_step_size(self.epsilon, self.alpha),
            _ => self.alpha,
        }
    }
}

pub fn step_linf_sign(gradient: &[f64], alpha: f64) -> Vec<f64> {
    gradient.iter().map(|&g| if g > 0.0 { alpha } else if g < 0.0 { -alpha } else { 0.0 }).collect()
}

pub fn step_l2_matched(gradient: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let peak = gradient.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    if peak == 0.0 {
        return Err(Error::ZeroGradient);
    }
    let scale = alpha / peak;
    Ok(gradient
        .iter()
        .map(|&g| if g.abs() == peak { alpha.copysign(g) } else { g * scale })
        .collect())
}

pub fn step(kind: StepKind, gradient: &[f64], alpha: f64) -> Result<Vec<f64>> {
    match kind {
        StepKind::LinfSign => Ok(step_linf_sign(gradient, alpha)),
        StepKind::L2Steepest => step_l2_matched(gradient, alpha),
    }
}

/// `min(ε / 2, α)`: a full step should not exceed half the radius.
pub fn effective_step_size(epsilon: f64, alpha: f64) -> f64 {
    (epsilon / 2.0).min(alpha)
}

/// ℓ∞ box or ℓ2 radial projection followed by the `[0, 1]` clamp.
pub fn project_lp(candidate: &Image, original: &Image, kind: ThreatKind, epsilon: f64) -> Result<Image> {
    original.check_same_shape(candidate)?;
    let (c, o) = (candidate.pixels(), original.pixels());
    let pixels: Vec<f64> = match kind {
        ThreatKind::Linf => c.iter().zip(o).map(|(v, x)| v.clamp(x - epsilon, x + epsilon)).collect(),
        ThreatKind::L2 => {
            let d = candidate.l2_distance(original)?;
            if d <= epsilon {
                c.to_vec()
            } else {
                let s = epsilon / d;
                c.iter().zip(o).map(|(v, x)| x + (v - x) * s).collect()
            }
        }
        ThreatKind::Wasserstein => return Err(Error::invalid("kind", "use project_wasserstein")),
    };
    Ok(original.with_clamped(pixels))
}

/// Projects the distributions `candidate` onto the ball around `original`.
pub fn project_wasserstein(
    candidate: &[f64],
    original: &NormalizedImage,
    epsilon: f64,
    settings: &WassersteinSettings,
    cost: &CostMatrix,
    warm: Option<&DualState>,
) -> Result<sinkhorn::Projection> {
    let caps = original.pixel_caps();
    let problem =
        ProjectionProblem::new(candidate, original.distributions(), cost, epsilon, settings.lambda, &caps)?;
    sinkhorn::project(&problem, warm, &settings.limits)
}

/// Projection onto the threat model's ball, returning an image.
pub fn project_ball(candidate: &Image, original: &Image, threat: &ThreatModel, cost: Option<&CostMatrix>) -> Result<Image> {
    threat.validate()?;
    match threat.kind {
        ThreatKind::Linf | ThreatKind::L2 => project_lp(candidate, original, threat.kind, threat.epsilon),
        ThreatKind::Wasserstein => {
            original.check_same_shape(candidate)?;
            let built;
            let cost = match cost {
                Some(c) => c,
                None => {
                    built = threat.wasserstein.cost_matrix(original.height(), original.width())?;
                    &built
                }
            };
            let x = normalize(original)?;
            let w = to_distribution_space(candidate.pixels(), &x);
            let p = project_wasserstein(&w, &x, threat.epsilon, &threat.wasserstein, cost, None)?;
            materialize(&p.z, &x)
        }
    }
}

fn to_distribution_space(pixels: &[f64], reference: &NormalizedImage) -> Vec<f64> {
    let n = reference.pixel_count();
    pixels.iter().enumerate().map(|(k, v)| v / reference.l1_norms()[k / n]).collect()
}

/// Multiplies distributions back into pixels. Values within a relative
/// `1e-6` of the range (projection round-off) are snapped in; anything
/// further out is a [`Error::RangeViolation`].
pub fn materialize(z: &[f64], reference: &NormalizedImage) -> Result<Image> {
    let n = reference.pixel_count();
    let mut bad = Vec::new();
    let pixels: Vec<f64> = z
        .iter()
        .enumerate()
        .map(|(k, &d)| {
            let v = d * reference.l1_norms()[k / n];
            if v > 1.0 + MATERIALIZE_SLACK || v < -MATERIALIZE_SLACK || !v.is_finite() {
                bad.push((k, if v > 1.0 { v - 1.0 } else { -v }));
            }
            v.clamp(0.0, 1.0)
        })
        .collect();
    if !bad.is_empty() {
        let worst = bad.iter().map(|b| b.1).fold(0.0, f64::max);
        return Err(Error::RangeViolation { pixels: bad, worst });
    }
    Image::new(reference.height(), reference.width(), reference.channels(), pixels)
}

/// Outcome of one attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub adversarial: Image,
    pub success: bool,
    pub prediction: usize,
    pub steps_used: usize,
    /// Distance to the original divided by ε.
    pub budget_used: f64,
    /// Audit of the returned image.
    pub compliance: MembershipReport,
    /// Projection report of the step that produced the returned image
    /// (Wasserstein only; `None` when the original is returned).
    pub projection: Option<ComplianceReport>,
    /// Sinkhorn sweeps of every projection, in step order.
    pub sinkhorn_sweeps: Vec<usize>,
    /// Whether the final iterate failed its audit and an earlier one is returned.
    pub rolled_back: bool,
}

pub fn pgd_attack<M: Model + ?Sized>(model: &M, image: &Image, label: usize, threat: &ThreatModel) -> Result<AttackResult> {
    pgd_attack_with(model, image, label, threat, None, None)
}

/// [`pgd_attack`] with an optional prebuilt cost matrix and an optional
/// starting iterate (which must already lie in the ball).
pub fn pgd_attack_with<M: Model + ?Sized>(
    model: &M,
    image: &Image,
    label: usize,
    threat: &ThreatModel,
    cost: Option<&CostMatrix>,
    start: Option<&Image>,
) -> Result<AttackResult> {
    threat.validate()?;
    if let Some(s) = start {
        image.check_same_shape(s)?;
    }
    if label >= model.num_classes() || threat.target.is_some_and(|t| t >= model.num_classes()) {
        return Err(Error::invalid("label", format!("must be below {} classes", model.num_classes())));
    }
    match threat.kind {
        ThreatKind::Wasserstein => {
            let built;
            let cost = match cost {
                Some(c) => c,
                None => {
                    built = threat.wasserstein.cost_matrix(image.height(), image.width())?;
                    &built
                }
            };
            WassersteinRun::new(model, image, label, threat, cost)?.run(start)
        }
        _ => lp_attack(model, image, label, threat, start),
    }
}

fn succeeded(threat: &ThreatModel, label: usize, prediction: usize) -> bool {
    match threat.target {
        Some(t) => prediction == t,
        None => prediction != label,
    }
}

/// Ascent direction: the loss gradient, or its negation towards a target.
fn attack_gradient<M: Model + ?Sized>(model: &M, image: &Image, label: usize, threat: &ThreatModel) -> Result<Vec<f64>> {
    match threat.target {
        Some(t) => Ok(model.loss_and_input_gradient(image, t)?.1.into_iter().map(|g| -g).collect()),
        None => Ok(model.loss_and_input_gradient(image, label)?.1),
    }
}

fn lp_membership(original: &Image, candidate: &Image, threat: &ThreatModel) -> Result<MembershipReport> {
    let distance = match threat.kind {
        ThreatKind::Linf => candidate.linf_distance(original)?,
        _ => candidate.l2_distance(original)?,
    };
    let l1_deviation = (0..original.channels())
        .map(|c| {
            let a = original.channel_l1(c);
            if a > 0.0 {
                (a - candidate.channel_l1(c)).abs() / a
            } else {
                0.0
            }
        })
        .collect();
    let distance_limit = threat.epsilon * (1.0 + 1e-9);
    let range_ok = candidate.pixels().iter().all(|v| (0.0..=1.0).contains(v));
    Ok(MembershipReport {
        distance,
        distance_limit,
        within_radius: distance <= distance_limit,
        l1_deviation,
        l1_ok: true,
        range_ok,
        passes: distance <= distance_limit && range_ok,
    })
}

fn lp_attack<M: Model + ?Sized>(
    model: &M,
    image: &Image,
    label: usize,
    threat: &ThreatModel,
    start: Option<&Image>,
) -> Result<AttackResult> {
    let mut current = match start {
        Some(s) => project_lp(s, image, threat.kind, threat.epsilon)?,
        None => image.clone(),
    };
    let mut prediction = model.predict(&current)?;
    let mut steps = 0;
    while steps < threat.max_steps && !(threat.early_stop && succeeded(threat, label, prediction)) {
        let g = attack_gradient(model, &current, label, threat)?;
        let s = match step(threat.step_kind, &g, threat.step_size()) {
            Ok(s) => s,
            Err(Error::ZeroGradient) => break,
            Err(e) => return Err(e),
        };
        let candidate = current.with_clamped(current.pixels().iter().zip(&s).map(|(v, d)| v + d).collect());
        current = project_lp(&candidate, image, threat.kind, threat.epsilon)?;
        prediction = model.predict(&current)?;
        steps += 1;
    }
    let compliance = lp_membership(image, &current, threat)?;
    Ok(AttackResult {
        budget_used: compliance.distance / threat.epsilon,
        success: succeeded(threat, label, prediction),
        adversarial: current,
        prediction,
        steps_used: steps,
        compliance,
        projection: None,
        sinkhorn_sweeps: Vec::new(),
        rolled_back: false,
    })
}

struct Iterate {
    image: Image,
    prediction: usize,
    step: usize,
    projection: Option<ComplianceReport>,
    /// Audit already performed while stepping.
    membership: Option<MembershipReport>,
}

struct WassersteinRun<'a, M: ?Sized> {
    model: &'a M,
    image: &'a Image,
    label: usize,
    threat: &'a ThreatModel,
    cost: &'a CostMatrix,
    x: NormalizedImage,
}

impl<'a, M: Model + ?Sized> WassersteinRun<'a, M> {
    fn new(model: &'a M, image: &'a Image, label: usize, threat: &'a ThreatModel, cost: &'a CostMatrix) -> Result<Self> {
        if cost.height() != image.height() || cost.width() != image.width() {
            return Err(Error::DimensionMismatch {
                expected: format!("cost matrix for {}×{}", image.height(), image.width()),
                actual: format!("{}×{}", cost.height(), cost.width()),
            });
        }
        let x = normalize(image)?;
        Ok(WassersteinRun { model, image, label, threat, cost, x })
    }

    fn audit(&self, it: &Iterate) -> Result<(bool, MembershipReport)> {
        if let Some(m) = &it.membership {
            return Ok((m.passes, m.clone()));
        }
        let eps = self.threat.epsilon;
        let settings = &self.threat.wasserstein;
        match (settings.audit, &it.projection) {
            (AuditMode::ProjectionReport, Some(p)) => {
                let report = MembershipReport {
                    distance: eps + p.w_over,
                    distance_limit: eps * (1.0 + settings.limits.w_over_rel),
                    within_radius: p.w_over <= settings.limits.w_over_threshold(eps),
                    l1_deviation: vec![p.delta_l1],
                    l1_ok: p.delta_l1 <= settings.limits.l1_threshold,
                    range_ok: p.range_ok,
                    passes: p.within(eps, &settings.limits),
                };
                Ok((report.passes, report))
            }
            _ => {
                let report = ball_membership(self.image, &it.image, &settings.ball(eps), self.cost)?;
                Ok((report.passes, report))
            }
        }
    }

    /// Audits a projected iterate. An unconverged projection can land a little
    /// outside the radius; it is then pulled toward the original along the
    /// segment by `ε / W`, which convexity of the transport cost keeps inside
    /// the ball while preserving mass and pixel range.
    fn audited(&self, image: Image) -> Result<Option<(Image, Option<MembershipReport>)>> {
        let spec = self.threat.wasserstein.ball(self.threat.epsilon);
        let report = ball_membership(self.image, &image, &spec, self.cost)?;
        if report.passes {
            return Ok(Some((image, Some(report))));
        }
        if !(report.l1_ok && report.range_ok && report.distance.is_finite()) {
            return Ok(None);
        }
        let t = self.threat.epsilon / report.distance;
        let pixels: Vec<f64> = self.image.pixels().iter().zip(image.pixels()).map(|(a, b)| a + t * (b - a)).collect();
        let Ok(pulled) = image.with_pixels(pixels) else {
            return Ok(None);
        };
        let report = ball_membership(self.image, &pulled, &spec, self.cost)?;
        Ok(report.passes.then_some((pulled, Some(report))))
    }

    fn run(&self, start: Option<&Image>) -> Result<AttackResult> {
        let threat = self.threat;
        let settings = &threat.wasserstein;
        let alpha = threat.step_size();
        let n = self.x.pixel_count();
        let norms = self.x.l1_norms().to_vec();

        let first = match start {
            Some(s) => s.clone(),
            None => self.image.clone(),
        };
        let mut z = to_distribution_space(first.pixels(), &self.x);
        let mut history =
            vec![Iterate { prediction: self.model.predict(&first)?, image: first, step: 0, projection: None, membership: None }];
        let mut duals: Option<DualState> = None;
        let mut previous_candidate = Vec::new();
        let mut sweeps = Vec::new();
        let mut accepted: Option<(usize, MembershipReport)> = None;

        let early = |it: &Iterate| threat.early_stop && succeeded(threat, self.label, it.prediction);
        if early(&history[0]) {
            let (ok, report) = self.audit(&history[0])?;
            if ok {
                accepted = Some((0, report));
            }
        }

        let mut step_index = 0;
        while accepted.is_none() && step_index < threat.max_steps {
            let current = &history.last().expect("non-empty").image;
            let pixel_grad = attack_gradient(self.model, current, self.label, threat)?;
            // pixel = z · norm, so ∂/∂z = norm · ∂/∂pixel.
            let grad: Vec<f64> = pixel_grad.iter().enumerate().map(|(k, g)| g * norms[k / n]).collect();
            let s = match step(threat.step_kind, &grad, alpha) {
                Ok(s) => s,
                Err(Error::ZeroGradient) => break,
                Err(e) => return Err(e),
            };
            let candidate: Vec<f64> = z.iter().zip(&s).map(|(a, b)| a + b).collect();
            // Shift β with the candidate so the warm start reproduces the
            // previous z rather than the raw step.
            let warm = match (&duals, settings.warm_start) {
                (Some(d), true) => {
                    let mut d = d.clone();
                    for ((b, new), old) in d.beta.iter_mut().zip(&candidate).zip(&previous_candidate) {
                        *b += settings.lambda * (new - old);
                    }
                    Some(d)
                }
                _ => None,
            };
            let p = project_wasserstein(&candidate, &self.x, threat.epsilon, settings, self.cost, warm.as_ref())?;
            sweeps.push(p.report.iterations);
            step_index += 1;
            let image = match materialize(&p.z, &self.x) {
                Ok(im) => im,
                // A range miss this far out means the projection did not
                // finish; keep walking from the last good iterate.
                Err(Error::RangeViolation { .. }) => {
                    duals = None;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let (image, membership) = match settings.audit {
                AuditMode::Full => match self.audited(image)? {
                    Some(pair) => pair,
                    None => {
                        duals = None;
                        continue;
                    }
                },
                AuditMode::ProjectionReport => (image, None),
            };
            z = to_distribution_space(image.pixels(), &self.x);
            duals = Some(p.duals);
            previous_candidate = candidate;
            let it = Iterate {
                prediction: self.model.predict(&image)?,
                image,
                step: step_index,
                projection: Some(p.report),
                membership,
            };
            let stop = early(&it);
            history.push(it);
            if stop {
                let (ok, report) = self.audit(history.last().expect("non-empty"))?;
                if ok {
                    accepted = Some((history.len() - 1, report));
                }
            }
        }

        let mut rolled_back = false;
        let (index, compliance) = match accepted {
            Some(a) => a,
            None => {
                let mut found = None;
                for k in (0..history.len()).rev() {
                    if k == 0 && start.is_none() {
                        found = Some((0, self.audit(&history[0])?.1));
                        break;
                    }
                    let (ok, report) = self.audit(&history[k])?;
                    if ok {
                        found = Some((k, report));
                        break;
                    }
                    rolled_back = true;
                }
                match found {
                    Some(f) => f,
                    None => {
                        // Even the supplied start fails; fall back to the original.
                        let it = Iterate {
                            image: self.image.clone(),
                            prediction: self.model.predict(self.image)?,
                            step: 0,
                            projection: None,
                            membership: None,
                        };
                        let report = self.audit(&it)?;
                        history.push(it);
                        (history.len() - 1, report.1)
                    }
                }
            }
        };
        let chosen = history.swap_remove(index);
        Ok(AttackResult {
            budget_used: compliance.distance / threat.epsilon,
            success: succeeded(threat, self.label, chosen.prediction),
            prediction: chosen.prediction,
            steps_used: chosen.step,
            adversarial: chosen.image,
            compliance,
            projection: chosen.projection,
            sinkhorn_sweeps: sweeps,
            rolled_back,
        })
    }
}

/// One attack outcome inside an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub index: usize,
    pub epsilon: f64,
    /// Still correctly classified after the attack.
    pub correct: bool,
    pub steps_used: usize,
    pub budget_used: f64,
    pub passes: bool,
    pub rolled_back: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epsilon: f64,
    /// `ε · n_pixel`, the customary reporting unit.
    pub epsilon_scaled: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackCurve {
    pub points: Vec<CurvePoint>,
    /// Per image, per radius, in dataset order then grid order.
    pub records: Vec<AttackRecord>,
}

impl AttackCurve {
    pub fn pairs(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.epsilon_scaled, p.accuracy)).collect()
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.points.iter().map(|p| p.accuracy).sum::<f64>() / self.points.len() as f64
    }

    pub fn compliance_failures(&self) -> usize {
        self.records.iter().filter(|r| !r.passes).count()
    }
}

/// Accuracy under attack at every radius of an ascending grid (normalized
/// units; `0` means clean accuracy). Radii are nested: an image fooled at a
/// smaller radius counts as fooled at every larger one, and each attack
/// resumes from the previous radius's iterate.
pub fn evaluate_attack<M: Model + ?Sized>(
    model: &M,
    data: &LabeledDataset,
    threat: &ThreatModel,
    epsilon_grid: &[f64],
    exec: Exec,
) -> Result<AttackCurve> {
    if data.is_empty() {
        return Err(Error::invalid("dataset", "empty"));
    }
    if epsilon_grid.is_empty() || epsilon_grid.windows(2).any(|w| w[1] <= w[0]) || epsilon_grid[0] < 0.0 {
        return Err(Error::invalid("epsilon_grid", "must be non-empty, non-negative and strictly increasing"));
    }
    let (h, w) = data.image_shape().map(|(_, h, w)| (h, w)).ok_or_else(|| Error::invalid("dataset", "empty"))?;
    let cost = match threat.kind {
        ThreatKind::Wasserstein => Some(threat.wasserstein.cost_matrix(h, w)?),
        _ => None,
    };
    let n_pixel = (h * w) as f64;
    let per_image = exec.try_map(data.images(), |i, image| -> Result<Vec<AttackRecord>> {
        let label = data.labels()[i];
        let clean_correct = model.predict(image)? == label;
        let mut out = Vec::with_capacity(epsilon_grid.len());
        let mut previous: Option<Image> = None;
        let mut fooled = !clean_correct;
        for &eps in epsilon_grid {
            let mut record =
                AttackRecord { index: i, epsilon: eps, correct: !fooled, steps_used: 0, budget_used: 0.0, passes: true, rolled_back: false };
            if !fooled && eps > 0.0 {
                let t = ThreatModel { epsilon: eps, target: None, ..threat.clone() };
                let r = pgd_attack_with(model, image, label, &t, cost.as_ref(), previous.as_ref())?;
                fooled = r.success;
                record = AttackRecord {
                    correct: !r.success,
                    steps_used: r.steps_used,
                    budget_used: r.budget_used,
                    passes: r.compliance.passes,
                    rolled_back: r.rolled_back,
                    ..record
                };
                previous = Some(r.adversarial);
            }
            out.push(record);
        }
        Ok(out)
    })?;
    let points = epsilon_grid
        .iter()
        .enumerate()
        .map(|(g, &eps)| CurvePoint {
            epsilon: eps,
            epsilon_scaled: eps * n_pixel,
            accuracy: per_image.iter().filter(|r| r[g].correct).count() as f64 / data.len() as f64,
        })
        .collect();
    Ok(AttackCurve { points, records: per_image.into_iter().flatten().collect() })
}
