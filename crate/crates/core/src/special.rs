//! Scalar special functions shared by the graph ops and the entropy models.

use std::f64::consts::FRAC_1_SQRT_2;

/// 1 / sqrt(2*pi)
pub const FRAC_1_SQRT_2PI: f64 = 0.3989422804014327;

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// Standard normal density; the analytic derivative of `normal_cdf`.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() * FRAC_1_SQRT_2PI
}

/// Numerically stable log(1 + exp(x)).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Derivative of softplus.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus on (0, inf); useful for initializing scale parameters.
pub fn softplus_inv(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Mass a unit-width interval centered on `v` receives under N(mu, sigma^2).
pub fn gaussian_interval_mass(v: f64, mu: f64, sigma: f64) -> f64 {
    normal_cdf((v + 0.5 - mu) / sigma) - normal_cdf((v - 0.5 - mu) / sigma)
}
