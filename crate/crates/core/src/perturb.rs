//! Translation, rotation and blur, plus dataset-level distance and accuracy
//! tables for them.

use serde::{Deserialize, Serialize};

use crate::dataio::LabeledDataset;
use crate::imagecore::{build_cost_matrix, wasserstein_distance, CostMatrix, DistanceMode, Image, Locality};
use crate::model::Model;
use crate::par::Exec;
use crate::{Error, Result};

/// Transport window for measuring perturbations: mass may move up to five
/// pixels per axis, enough for a 20% shift of a 28-pixel image.
pub const MEASUREMENT_LOCALITY: Locality = Locality::Window(11);
pub const MEASUREMENT_LAMBDA: f64 = 3000.0;

/// Shifts right by `⌊fraction · width⌋` pixels; vacated columns are zero.
pub fn translate(image: &Image, fraction: f64) -> Result<Image> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid("fraction", format!("must lie in [0, 1), got {fraction}")));
    }
    let shift = translation_pixels(image.width(), fraction);
    Ok(Image::from_fn(image.height(), image.width(), image.channels(), |c, y, x| {
        if x >= shift {
            image.get(c, y, x - shift)
        } else {
            0.0
        }
    }))
}

pub fn translation_pixels(width: usize, fraction: f64) -> usize {
    // Guard against 0.1 · 30 = 2.9999999999999996.
    (fraction * width as f64 + 1e-9).floor() as usize
}

/// Rotation about the image center with bilinear sampling; samples outside
/// the image read as zero.
pub fn rotate(image: &Image, degrees: f64) -> Result<Image> {
    if !(degrees.abs() <= 180.0) {
        return Err(Error::invalid("degrees", format!("must lie in [-180, 180], got {degrees}")));
    }
    let (h, w) = (image.height(), image.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let sample = |c: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            image.get(c, y as usize, x as usize)
        }
    };
    Ok(Image::from_fn(h, w, image.channels(), |c, y, x| {
        // Inverse map: where does output (y, x) come from?
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let v = (1.0 - fy) * ((1.0 - fx) * sample(c, y0, x0) + fx * sample(c, y0, x0 + 1))
            + fy * ((1.0 - fx) * sample(c, y0 + 1, x0) + fx * sample(c, y0 + 1, x0 + 1));
        v.clamp(0.0, 1.0)
    }))
}

/// Normalized Gaussian kernel of odd `width` with `σ = width / 6`.
pub fn gaussian_kernel(width: usize) -> Result<Vec<f64>> {
    if width % 2 == 0 {
        return Err(Error::invalid("kernel_width", format!("must be odd, got {width}")));
    }
    if width == 1 {
        return Ok(vec![1.0]);
    }
    let sigma = width as f64 / 6.0;
    let r = (width / 2) as f64;
    let k: Vec<f64> = (0..width).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    Ok(k.into_iter().map(|v| v / s).collect())
}

/// Half-sample symmetric reflection of `i` into `0..n` (`… 1 0 | 0 1 … n−1 | n−1 …`).
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian blur with symmetric borders. Because the kernel is
/// symmetric, every pixel's mass is fully redistributed inside the image, so
/// channel sums are preserved; at width 3 the borders coincide with
/// replicate padding.
pub fn gaussian_blur(image: &Image, kernel_width: usize) -> Result<Image> {
    let k = gaussian_kernel(kernel_width)?;
    let r = (kernel_width / 2) as isize;
    let (h, w) = (image.height(), image.width());
    let rows = Image::from_fn(h, w, image.channels(), |c, y, x| {
        k.iter().enumerate().map(|(t, kv)| kv * image.get(c, y, reflect(x as isize + t as isize - r, w))).sum()
    });
    Ok(Image::from_fn(h, w, image.channels(), |c, y, x| {
        let v: f64 = k.iter().enumerate().map(|(t, kv)| kv * rows.get(c, reflect(y as isize + t as isize - r, h), x)).sum();
        v.clamp(0.0, 1.0)
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    Translate,
    Rotate,
    Blur,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    /// Fraction of the width, degrees, or kernel width in pixels.
    pub magnitude: f64,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind, magnitude: f64) -> Result<Self> {
        let spec = PerturbationSpec { kind, magnitude };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.magnitude >= 0.0 && self.magnitude.is_finite()) {
            return Err(Error::invalid("magnitude", format!("must be non-negative, got {}", self.magnitude)));
        }
        if self.kind == PerturbationKind::Blur && (self.magnitude.fract() != 0.0 || self.magnitude as usize % 2 == 0) {
            return Err(Error::invalid("magnitude", format!("blur width must be an odd integer, got {}", self.magnitude)));
        }
        Ok(())
    }

    pub fn apply(&self, image: &Image) -> Result<Image> {
        self.validate()?;
        match self.kind {
            PerturbationKind::Translate => translate(image, self.magnitude),
            PerturbationKind::Rotate => rotate(image, self.magnitude),
            PerturbationKind::Blur => gaussian_blur(image, self.magnitude as usize),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    L2,
    Wasserstein,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub kind: PerturbationKind,
    pub magnitude: f64,
    pub metric: DistanceMetric,
    pub mean: f64,
    /// Images whose transport did not fit the window (mass pushed off the
    /// edge must travel further) and were measured with global support.
    pub widened: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub kind: PerturbationKind,
    pub magnitude: f64,
    pub accuracy: f64,
}

/// Mean distance between each image and its perturbed copy, per spec and
/// metric. Wasserstein distances are entropic estimates in pixel units on
/// the normalized images.
pub fn distance_table(
    data: &LabeledDataset,
    specs: &[PerturbationSpec],
    metrics: &[DistanceMetric],
    exec: Exec,
) -> Result<Vec<DistanceRow>> {
    let (_, h, w) = data.image_shape().ok_or_else(|| Error::invalid("dataset", "empty"))?;
    let cost = build_cost_matrix(h, w, 1.0, MEASUREMENT_LOCALITY)?;
    distance_table_with(data, specs, metrics, &cost, MEASUREMENT_LAMBDA, exec)
}

pub fn distance_table_with(
    data: &LabeledDataset,
    specs: &[PerturbationSpec],
    metrics: &[DistanceMetric],
    cost: &CostMatrix,
    lambda: f64,
    exec: Exec,
) -> Result<Vec<DistanceRow>> {
    if data.is_empty() {
        return Err(Error::invalid("dataset", "empty"));
    }
    let global = build_cost_matrix(cost.height(), cost.width(), cost.metric_order(), Locality::Global)?;
    let mut rows = Vec::with_capacity(specs.len() * metrics.len());
    for spec in specs {
        let per_image = exec.try_map(data.images(), |_, im| -> Result<Vec<(f64, bool)>> {
            let moved = spec.apply(im)?;
            metrics
                .iter()
                .map(|m| match m {
                    DistanceMetric::L2 => Ok((im.l2_distance(&moved)?, false)),
                    DistanceMetric::Wasserstein => {
                        if moved == *im {
                            return Ok((0.0, false));
                        }
                        let mode = DistanceMode::Entropic { lambda };
                        let d = wasserstein_distance(im, &moved, cost, mode)?;
                        if d.is_finite() {
                            Ok((d, false))
                        } else {
                            Ok((wasserstein_distance(im, &moved, &global, mode)?, true))
                        }
                    }
                })
                .collect()
        })?;
        for (k, &metric) in metrics.iter().enumerate() {
            let mean = per_image.iter().map(|d| d[k].0).sum::<f64>() / data.len() as f64;
            let widened = per_image.iter().filter(|d| d[k].1).count();
            rows.push(DistanceRow { kind: spec.kind, magnitude: spec.magnitude, metric, mean, widened });
        }
    }
    Ok(rows)
}

pub fn accuracy_under_perturbation<M: Model + ?Sized>(
    model: &M,
    data: &LabeledDataset,
    specs: &[PerturbationSpec],
    exec: Exec,
) -> Result<Vec<AccuracyRow>> {
    if data.is_empty() {
        return Err(Error::invalid("dataset", "empty"));
    }
    specs
        .iter()
        .map(|spec| {
            let hits = exec.try_map(data.images(), |i, im| -> Result<bool> {
                Ok(model.predict(&spec.apply(im)?)? == data.labels()[i])
            })?;
            Ok(AccuracyRow {
                kind: spec.kind,
                magnitude: spec.magnitude,
                accuracy: hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synthetic_digits;
    use crate::imagecore::build_cost_matrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, 1, |_, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn zero_translation_is_identity() {
        let im = random_image(1, 6, 6);
        assert_eq!(translate(&im, 0.0).unwrap(), im);
    }

    #[test]
    fn translation_pixel_counts() {
        assert_eq!(translation_pixels(28, 0.05), 1);
        assert_eq!(translation_pixels(28, 0.10), 2);
        assert_eq!(translation_pixels(28, 0.20), 5);
        assert_eq!(translation_pixels(30, 0.10), 3);
    }

    #[test]
    fn shifted_single_pixel_moves_one_unit() {
        let mut px = vec![0.0; 25];
        px[12] = 0.8;
        let im = Image::gray(5, 5, px).unwrap();
        let moved = translate(&im, 0.2).unwrap();
        assert_eq!(moved.get(0, 2, 3), 0.8);
        let cost = build_cost_matrix(5, 5, 1.0, Locality::Window(11)).unwrap();
        let d = wasserstein_distance(&im, &moved, &cost, DistanceMode::Exact).unwrap();
        assert!((d - 1.0).abs() < 1e-9);
    }

    #[test]
    fn translation_loses_exactly_the_vacated_mass() {
        let im = random_image(2, 4, 10);
        let moved = translate(&im, 0.25).unwrap();
        let lost: f64 = (0..4).map(|y| im.get(0, y, 8) + im.get(0, y, 9)).sum();
        assert!((im.channel_l1(0) - moved.channel_l1(0) - lost).abs() < 1e-12);
    }

    #[test]
    fn zero_and_full_turn_rotations_are_identity() {
        let im = random_image(3, 7, 7);
        assert_eq!(rotate(&im, 0.0).unwrap(), im);
        let back = rotate(&rotate(&im, 180.0).unwrap(), 180.0).unwrap();
        assert!(back.linf_distance(&im).unwrap() < 1e-3);
    }

    /// Mean absolute round-trip error over the inscribed disc, whose pixels
    /// never sample outside the image.
    fn round_trip_error(im: &Image, degrees: f64) -> f64 {
        let back = rotate(&rotate(im, degrees).unwrap(), -degrees).unwrap();
        let c = (im.width() as f64 - 1.0) / 2.0;
        let radius = c - 1.0;
        let mut err = 0.0;
        let mut count = 0;
        for y in 0..im.height() {
            for x in 0..im.width() {
                if ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt() <= radius {
                    err += (back.get(0, y, x) - im.get(0, y, x)).abs();
                    count += 1;
                }
            }
        }
        err / count as f64
    }

    #[test]
    fn rotation_round_trip_recovers_the_interior() {
        let data = synthetic_digits(20, 28, 28, 4).unwrap();
        for deg in [5.0, 10.0, 20.0] {
            let mean = data.images().iter().map(|im| round_trip_error(im, deg)).sum::<f64>() / data.len() as f64;
            assert!(mean < 0.05, "{deg}°: {mean}");
        }
    }

    #[test]
    fn blur_basics() {
        let im = random_image(5, 6, 6);
        assert_eq!(gaussian_blur(&im, 1).unwrap(), im);
        let flat = Image::gray(5, 5, vec![0.3; 25]).unwrap();
        assert!(gaussian_blur(&flat, 5).unwrap().linf_distance(&flat).unwrap() < 1e-12);
        assert!(gaussian_blur(&im, 4).is_err());
    }

    #[test]
    fn width_three_borders_match_replicate_padding() {
        let im = random_image(6, 5, 5);
        let b = gaussian_blur(&im, 3).unwrap();
        let k = gaussian_kernel(3).unwrap();
        let clampi = |i: isize| i.clamp(0, 4) as usize;
        for y in 0..5isize {
            for x in 0..5isize {
                let mut v = 0.0;
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        v += k[(dy + 1) as usize] * k[(dx + 1) as usize] * im.get(0, clampi(y + dy), clampi(x + dx));
                    }
                }
                assert!((v - b.get(0, y as usize, x as usize)).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn blur_preserves_mass(seed in 0u64..1000, width in prop::sample::select(vec![3usize, 5, 7, 9])) {
            let im = random_image(seed, 9, 8);
            let b = gaussian_blur(&im, width).unwrap();
            prop_assert!((b.channel_l1(0) - im.channel_l1(0)).abs() < 1e-6);
        }

        #[test]
        fn perturbations_stay_in_range(seed in 0u64..1000, deg in -180.0f64..180.0, frac in 0.0f64..0.99) {
            let im = random_image(seed, 6, 7);
            for out in [rotate(&im, deg).unwrap(), translate(&im, frac).unwrap(), gaussian_blur(&im, 5).unwrap()] {
                prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn identity_specs_measure_zero() {
        let data = synthetic_digits(5, 12, 12, 1).unwrap();
        let specs = [
            PerturbationSpec::new(PerturbationKind::Translate, 0.0).unwrap(),
            PerturbationSpec::new(PerturbationKind::Blur, 1.0).unwrap(),
        ];
        let rows = distance_table(&data, &specs, &[DistanceMetric::L2, DistanceMetric::Wasserstein], Exec::Sequential).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.mean == 0.0));
    }

    #[test]
    fn translation_distance_grows_with_the_shift() {
        let data = synthetic_digits(4, 20, 20, 2).unwrap();
        let cost = build_cost_matrix(20, 20, 1.0, MEASUREMENT_LOCALITY).unwrap();
        for im in data.images() {
            let mut last = 0.0;
            for frac in [0.05, 0.1, 0.2] {
                let d = wasserstein_distance(im, &translate(im, frac).unwrap(), &cost, DistanceMode::Entropic { lambda: 3000.0 }).unwrap();
                assert!(d >= last - 1e-6);
                last = d;
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(PerturbationSpec::new(PerturbationKind::Blur, 4.0).is_err());
        assert!(PerturbationSpec::new(PerturbationKind::Rotate, -1.0).is_err());
        assert!(translate(&random_image(1, 3, 3), 1.0).is_err());
        assert!(rotate(&random_image(1, 3, 3), 200.0).is_err());
    }
}
