//! Principal branch of the Lambert W function on the non-negative reals.

/// `W₀(v)` for `v ≥ 0`: the `y ≥ 0` with `y·eʸ = v`.
///
/// Returns NaN for negative or NaN input.
pub fn lambert_w(v: f64) -> f64 {
    if v.is_nan() || v < 0.0 {
        return f64::NAN;
    }
    if v == 0.0 {
        return 0.0;
    }
    if v == f64::INFINITY {
        return f64::INFINITY;
    }
    if v > 1e100 {
        return lambert_w_of_exp(v.ln());
    }
    if v < 1e-8 {
        // W(v) = v − v² + 1.5 v³ − …, exact to rounding here.
        return v * (1.0 - v * (1.0 - 1.5 * v));
    }
    // Winitzki's approximation as the starting point, then Halley.
    let l = v.ln_1p();
    let mut y = l * (1.0 - (1.0 + l).ln() / (2.0 + l));
    for _ in 0..32 {
        let ey = y.exp();
        let f = y * ey - v;
        let fp = ey * (y + 1.0);
        let step = f / (fp - (y + 2.0) * f / (2.0 * y + 2.0));
        y -= step;
        if step.abs() <= 4.0 * f64::EPSILON * y.abs() {
            break;
        }
    }
    // One Newton polish against the residual.
    let ey = y.exp();
    y - (y * ey - v) / (ey * (y + 1.0))
}

/// `W₀(eˡ)` for any real `l`, without forming `eˡ` when it would overflow.
///
/// For `l > 2` this solves `y + ln y = l` by Newton's method.
pub fn lambert_w_of_exp(l: f64) -> f64 {
    if l.is_nan() {
        return f64::NAN;
    }
    if l == f64::NEG_INFINITY {
        return 0.0;
    }
    if l == f64::INFINITY {
        return f64::INFINITY;
    }
    if l <= 2.0 {
        return lambert_w(l.exp());
    }
    let mut y = l - l.ln();
    for _ in 0..64 {
        let f = y + y.ln() - l;
        let step = f / (1.0 + 1.0 / y);
        y -= step;
        if step.abs() <= 2.0 * f64::EPSILON * y {
            break;
        }
    }
    y
}

/// `W₀(v)` refined in double-double arithmetic, returned as `(hi, lo)` with
/// `hi + lo` the value. `hi` equals [`lambert_w`] up to the last bit or two.
pub fn lambert_w_extended(v: f64) -> (f64, f64) {
    let y0 = lambert_w(v);
    if !(y0 > 0.0) || !y0.is_finite() || v > 1e300 {
        return (y0, 0.0);
    }
    let mut y = Dd::from(y0);
    for _ in 0..2 {
        let ey = y.exp();
        let f = y.mul(ey).sub(Dd::from(v));
        let fp = ey.mul(y.add(Dd::from(1.0)));
        y = y.sub(f.div(fp));
    }
    (y.hi, y.lo)
}

/// Residual `y·eʸ − v` evaluated in double-double arithmetic, for `y = hi + lo`.
pub fn back_substitution_error(y: (f64, f64), v: f64) -> f64 {
    let y = Dd { hi: y.0, lo: y.1 };
    let r = y.mul(y.exp()).sub(Dd::from(v));
    r.hi + r.lo
}

/// Unevaluated sum `hi + lo` with `|lo| ≤ ulp(hi)/2`.
#[derive(Clone, Copy, Debug)]
struct Dd {
    hi: f64,
    lo: f64,
}

const LN2: Dd = Dd { hi: std::f64::consts::LN_2, lo: 2.319_046_813_846_299_6e-17 };

impl From<f64> for Dd {
    fn from(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

impl Dd {
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }

    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }

    fn scale(self, s: f64) -> Dd {
        Dd { hi: self.hi * s, lo: self.lo * s }
    }

    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Dd::from(q1)));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul(Dd::from(q2)));
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo }.add(Dd::from(q3))
    }

    fn exp(self) -> Dd {
        if self.hi > 709.0 {
            return Dd::from(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::from(0.0);
        }
        // x = k ln2 + r, r scaled down by 2¹⁰ for a short Taylor series.
        let k = (self.hi / LN2.hi).round();
        let r = self.sub(LN2.scale(k)).scale(1.0 / 1024.0);
        let mut term = Dd::from(1.0);
        let mut sum = Dd::from(1.0);
        for i in 1..=12 {
            term = term.mul(r).scale(1.0 / i as f64);
            sum = sum.add(term);
        }
        for _ in 0..10 {
            sum = sum.mul(sum);
        }
        let p = 2f64.powi(k as i32);
        sum.scale(p)
    }
}
