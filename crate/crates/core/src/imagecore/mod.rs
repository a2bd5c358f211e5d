//! Images, per-channel normalization, transport costs and threat-model audits.
//!
//! Pixels are stored channel-major: flat index `c * height * width + y * width + x`.
//! Wasserstein distances are always measured channel by channel on the
//! normalized distributions and summed; mass never moves between channels.

mod cost;
mod distance;

pub use cost::{build_cost_matrix, CostMatrix, Locality};
pub use distance::{sparse_transport_distance, 
    ball_membership, ball_membership_with, entropic_transport_cost, wasserstein_distance, BallSpec,
    DistanceMode, MembershipReport,
};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Absolute slack used when deciding whether a computed pixel left `[0, 1]`.
///
/// Values inside the slack are floating-point round-off and are snapped back
/// into range; anything beyond it is a genuine range violation.
pub const PIXEL_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        let expected = height * width * channels;
        if expected == 0 {
            return Err(Error::invalid("dimensions", "height·width·channels must be positive"));
        }
        if pixels.len() != expected {
            return Err(Error::DimensionMismatch {
                expected: format!("{expected} pixels ({channels}×{height}×{width})"),
                actual: format!("{} pixels", pixels.len()),
            });
        }
        let bad: Vec<(usize, f64)> = pixels
            .iter()
            .enumerate()
            .filter(|(_, v)| !(0.0..=1.0).contains(*v))
            .map(|(i, &v)| (i, if v > 1.0 { v - 1.0 } else if v < 0.0 { -v } else { f64::NAN }))
            .collect();
        if !bad.is_empty() {
            let worst = bad.iter().map(|b| b.1).fold(0.0, f64::max);
            return Err(Error::RangeViolation { pixels: bad, worst });
        }
        Ok(Image { height, width, channels, pixels })
    }

    /// Single-channel image from row-major values.
    pub fn gray(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        Image::new(height, width, 1, pixels)
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image { height, width, channels, pixels: vec![0.0; height * width * channels] }
    }

    /// Builds an image from `f(channel, y, x)`, clamping results into `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut pixels = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    pixels.push(f(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        Image { height, width, channels, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Pixels per channel (`height · width`), the `n_pixel` of the ε·n convention.
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixel_count();
        &self.pixels[c * n..(c + 1) * n]
    }

    pub fn channel_l1(&self, c: usize) -> f64 {
        self.channel(c).iter().sum()
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub(crate) fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.shape_string(),
                actual: other.shape_string(),
            })
        }
    }

    pub(crate) fn shape_string(&self) -> String {
        format!("{}×{}×{}", self.channels, self.height, self.width)
    }

    /// Same shape, new pixel values; values must already be in range.
    pub fn with_pixels(&self, pixels: Vec<f64>) -> Result<Image> {
        Image::new(self.height, self.width, self.channels, pixels)
    }

    /// Same shape, values snapped into `[0, 1]`. Used by the ℓp threat models,
    /// whose ball definitions include the clamp.
    pub(crate) fn with_clamped(&self, pixels: Vec<f64>) -> Image {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        Image {
            pixels: pixels.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..*self
        }
    }

    /// Block-average downsampling by an integer factor (trailing rows/columns
    /// that do not fill a block are dropped).
    pub fn downsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 || factor > self.height || factor > self.width {
            return Err(Error::invalid("factor", format!("{factor} does not fit {}", self.shape_string())));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let area = (factor * factor) as f64;
        Ok(Image::from_fn(h, w, self.channels, |c, y, x| {
            let mut s = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    s += self.get(c, y * factor + dy, x * factor + dx);
                }
            }
            s / area
        }))
    }

    pub fn l2_distance(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    }

    pub fn linf_distance(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }
}

/// Per-channel probability distributions plus the ℓ1 norms that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedImage {
    height: usize,
    width: usize,
    channels: usize,
    distributions: Vec<f64>,
    l1_norms: Vec<f64>,
}

impl NormalizedImage {
    /// Assembles a normalized image from raw parts. Each channel block of
    /// `distributions` should sum to one; that is not enforced here because
    /// projected iterates only approximately preserve mass.
    pub fn from_parts(
        height: usize,
        width: usize,
        distributions: Vec<f64>,
        l1_norms: Vec<f64>,
    ) -> Result<Self> {
        let channels = l1_norms.len();
        if channels == 0 || distributions.len() != height * width * channels {
            return Err(Error::DimensionMismatch {
                expected: format!("{channels}×{height}×{width} values"),
                actual: format!("{} values", distributions.len()),
            });
        }
        if let Some(c) = l1_norms.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::ZeroMassChannel { channel: c });
        }
        Ok(NormalizedImage { height, width, channels, distributions, l1_norms })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn distributions(&self) -> &[f64] {
        &self.distributions
    }

    pub fn distribution(&self, c: usize) -> &[f64] {
        let n = self.pixel_count();
        &self.distributions[c * n..(c + 1) * n]
    }

    pub fn l1_norms(&self) -> &[f64] {
        &self.l1_norms
    }

    /// Per-channel pixel cap in normalized space, `1 / ‖x_c‖₁`.
    pub fn pixel_caps(&self) -> Vec<f64> {
        self.l1_norms.iter().map(|n| 1.0 / n).collect()
    }

    /// Same norms and shape, different distributions.
    pub fn with_distributions(&self, distributions: Vec<f64>) -> Result<Self> {
        NormalizedImage::from_parts(self.height, self.width, distributions, self.l1_norms.clone())
    }
}

pub fn normalize(image: &Image) -> Result<NormalizedImage> {
    let n = image.pixel_count();
    let mut distributions = Vec::with_capacity(image.len());
    let mut l1_norms = Vec::with_capacity(image.channels);
    for c in 0..image.channels {
        let norm = image.channel_l1(c);
        if norm <= 0.0 {
            return Err(Error::ZeroMassChannel { channel: c });
        }
        distributions.extend(image.channel(c).iter().map(|v| v / norm));
        l1_norms.push(norm);
    }
    debug_assert_eq!(distributions.len(), n * image.channels);
    Ok(NormalizedImage {
        height: image.height,
        width: image.width,
        channels: image.channels,
        distributions,
        l1_norms,
    })
}

/// Multiplies each channel back by its stored norm. Fails with
/// [`Error::RangeViolation`] if any pixel would leave `[0, 1]` by more than
/// [`PIXEL_SLACK`]; values are never clamped beyond that slack.
pub fn unnormalize(dist: &NormalizedImage) -> Result<Image> {
    let n = dist.pixel_count();
    let mut pixels = Vec::with_capacity(dist.distributions.len());
    let mut bad = Vec::new();
    for (idx, &d) in dist.distributions.iter().enumerate() {
        let v = d * dist.l1_norms[idx / n];
        if v > 1.0 + PIXEL_SLACK {
            bad.push((idx, v - 1.0));
        } else if v < -PIXEL_SLACK || !v.is_finite() {
            bad.push((idx, if v.is_finite() { -v } else { f64::INFINITY }));
        }
        pixels.push(v.clamp(0.0, 1.0));
    }
    if !bad.is_empty() {
        let worst = bad.iter().map(|b| b.1).fold(0.0, f64::max);
        return Err(Error::RangeViolation { pixels: bad, worst });
    }
    Ok(Image { height: dist.height, width: dist.width, channels: dist.channels, pixels })
}

/// Divides every pixel by `factor` (brightness dimming).
pub fn dim(image: &Image, factor: f64) -> Result<Image> {
    if !(factor >= 1.0 && factor.is_finite()) {
        return Err(Error::invalid("factor", format!("must be a finite value ≥ 1, got {factor}")));
    }
    Ok(Image { pixels: image.pixels.iter().map(|v| v / factor).collect(), ..*image })
}
