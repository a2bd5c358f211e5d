//! Small numeric helpers shared by the transport solvers.

/// `log Σ exp(tᵢ)`, stable for large magnitudes. Returns `-∞` for an empty
/// slice or when every term is `-∞`.
#[inline]
pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    let s: f64 = terms.iter().map(|t| (t - m).exp()).sum();
    m + s.ln()
}

/// Natural log that maps exact zeros to `-∞` without tripping debug checks.
#[inline]
pub(crate) fn ln_or_neg_inf(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Absolute change between two dual values, treating equal infinities as no
/// change.
#[inline]
pub(crate) fn change(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs()
    }
}
