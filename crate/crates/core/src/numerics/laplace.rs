//! Laplace bin probabilities in log space, shared by the differentiable rate
//! term and by the coding path.

use super::tensor::Real;

/// `ln(1 - e^t)` for `t < 0`.
fn ln_one_minus_exp<F: Real>(t: F) -> F {
    if t > -F::of(std::f64::consts::LN_2) {
        (-t.exp_m1()).ln()
    } else {
        (-t.exp()).ln_1p()
    }
}

/// Natural log of the Laplace(`mu`, `b`) mass on `[x - width/2, x + width/2]`.
pub fn bin_log_prob<F: Real>(x: F, mu: F, b: F, width: F) -> F {
    let half = width * F::of(0.5);
    let a = (x - mu).abs();
    if a >= half {
        F::of(0.5).ln() - (a - half) / b + ln_one_minus_exp(-width / b)
    } else {
        let e1 = (-(half - a) / b).exp();
        let e2 = (-(half + a) / b).exp();
        (-(F::of(0.5) * (e1 + e2))).ln_1p()
    }
}

/// Partial derivatives of [`bin_log_prob`] with respect to `(x, mu, b)`.
pub fn bin_log_prob_grad<F: Real>(x: F, mu: F, b: F, width: F) -> (F, F, F) {
    let half = width * F::of(0.5);
    let d = x - mu;
    let sign = if d > F::zero() {
        F::one()
    } else if d < F::zero() {
        -F::one()
    } else {
        F::zero()
    };
    let a = d.abs();
    let b2 = b * b;
    let (d_a, d_b) = if a >= half {
        let r = F::one() / (width / b).exp_m1();
        (-F::one() / b, ((a - half) - width * r) / b2)
    } else {
        let e1 = (-(half - a) / b).exp();
        let e2 = (-(half + a) / b).exp();
        let p = F::one() - F::of(0.5) * (e1 + e2);
        let dp_da = (e2 - e1) / (F::of(2.0) * b);
        let dp_db = -F::of(0.5) * (e1 * (half - a) + e2 * (half + a)) / b2;
        (dp_da / p, dp_db / p)
    };
    (d_a * sign, -d_a * sign, d_b)
}

/// `-log2` of the bin mass, i.e. the ideal code length in bits.
pub fn bin_bits<F: Real>(x: F, mu: F, b: F, width: F) -> F {
    -bin_log_prob(x, mu, b, width) / F::of(std::f64::consts::LN_2)
}
