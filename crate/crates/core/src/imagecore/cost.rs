use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Support of the transport plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Locality {
    /// Mass may move at most `k / 2` pixels along each grid axis (`k` odd).
    Window(usize),
    /// Every pixel pair is allowed. Only sensible for tiny images.
    Global,
}

impl Default for Locality {
    fn default() -> Self {
        Locality::Window(5)
    }
}

/// Pairwise pixel transport costs `‖p_i − p_j‖₂^p` on the integer grid,
/// stored sparsely over the locality support.
///
/// The support is symmetric, so row `i` also lists the sources that may send
/// mass to destination `i`; the projection relies on this to run column
/// reductions over row storage.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    height: usize,
    width: usize,
    metric_order: f64,
    locality: Locality,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    costs: Vec<f64>,
}

pub fn build_cost_matrix(
    height: usize,
    width: usize,
    metric_order: f64,
    locality: Locality,
) -> Result<CostMatrix> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("dimensions", "height and width must be positive"));
    }
    if !(metric_order >= 1.0 && metric_order.is_finite()) {
        return Err(Error::invalid("metric_order", format!("must be ≥ 1, got {metric_order}")));
    }
    let reach = match locality {
        Locality::Window(k) if k % 2 == 1 => k / 2,
        Locality::Window(k) => {
            return Err(Error::invalid("locality", format!("window width must be odd, got {k}")))
        }
        Locality::Global => height.max(width),
    };
    let n = height * width;
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::new();
    let mut costs = Vec::new();
    row_ptr.push(0);
    for yi in 0..height {
        for xi in 0..width {
            let y_lo = yi.saturating_sub(reach);
            let y_hi = (yi + reach).min(height - 1);
            let x_lo = xi.saturating_sub(reach);
            let x_hi = (xi + reach).min(width - 1);
            for yj in y_lo..=y_hi {
                for xj in x_lo..=x_hi {
                    let dy = yi.abs_diff(yj) as f64;
                    let dx = xi.abs_diff(xj) as f64;
                    let d2 = dy * dy + dx * dx;
                    let c = if metric_order == 1.0 { d2.sqrt() } else { d2.powf(metric_order / 2.0) };
                    cols.push(yj * width + xj);
                    costs.push(c);
                }
            }
            row_ptr.push(cols.len());
        }
    }
    Ok(CostMatrix { height, width, metric_order, locality, row_ptr, cols, costs })
}

impl CostMatrix {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of pixels (rows) per channel.
    pub fn n(&self) -> usize {
        self.height * self.width
    }

    pub fn metric_order(&self) -> f64 {
        self.metric_order
    }

    pub fn locality(&self) -> Locality {
        self.locality
    }

    /// Number of finite entries.
    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Destinations reachable from pixel `i` and their costs, ascending by index.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.cols[a..b], &self.costs[a..b])
    }

    pub(crate) fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    pub(crate) fn cols(&self) -> &[usize] {
        &self.cols
    }

    pub(crate) fn costs(&self) -> &[f64] {
        &self.costs
    }

    /// `None` when the pair lies outside the locality window (infinite cost).
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let (cols, costs) = self.row(i);
        cols.binary_search(&j).ok().map(|k| costs[k])
    }

    /// Dense row-major copy with `f64::INFINITY` outside the support.
    pub fn dense(&self) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![f64::INFINITY; n * n];
        for i in 0..n {
            for k in self.row_range(i) {
                out[i * n + self.cols[k]] = self.costs[k];
            }
        }
        out
    }

    pub fn max_cost(&self) -> f64 {
        self.costs.iter().copied().fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_pixels_unit_cost() {
        let c = build_cost_matrix(1, 2, 1.0, Locality::Global).unwrap();
        assert_eq!(c.dense(), vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn two_by_two_geometry() {
        let c = build_cost_matrix(2, 2, 1.0, Locality::Global).unwrap();
        assert_eq!(c.get(0, 1), Some(1.0));
        assert_eq!(c.get(0, 2), Some(1.0));
        assert!((c.get(0, 3).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        let sq = build_cost_matrix(2, 2, 2.0, Locality::Global).unwrap();
        assert!((sq.get(0, 3).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn window_limits_support() {
        let c = build_cost_matrix(28, 28, 1.0, Locality::Window(5)).unwrap();
        for i in 0..c.n() {
            assert!(c.row(i).0.len() <= 25);
        }
        assert_eq!(c.row(14 * 28 + 14).0.len(), 25);
        assert_eq!(c.row(0).0.len(), 9);
        assert_eq!(c.get(0, 3), None);
        assert_eq!(c.get(0, 2), Some(2.0));
    }

    #[test]
    fn symmetric_with_zero_diagonal() {
        let c = build_cost_matrix(4, 5, 1.5, Locality::Window(3)).unwrap();
        for i in 0..c.n() {
            assert_eq!(c.get(i, i), Some(0.0));
            for j in 0..c.n() {
                assert_eq!(c.get(i, j), c.get(j, i));
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(build_cost_matrix(3, 3, 1.0, Locality::Window(4)).is_err());
        assert!(build_cost_matrix(3, 3, 0.5, Locality::Global).is_err());
    }
}
