//! Gaussian special functions with the tail handling needed by the
//! spike-and-slab posterior.
//!
//! Everything here is expressed through the scaled complementary error
//! function `erfcx(x) = exp(x²)·erfc(x)` so that Gaussian tail ratios can be
//! evaluated far beyond the range where `erfc` itself underflows.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Natural log of the standard normal density.
pub fn normal_log_pdf(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// Scaled complementary error function `exp(x²)·erfc(x)`.
pub fn erfcx(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        if x < -26.6 {
            return f64::INFINITY;
        }
        return 2.0 * (x * x).exp() - erfcx(-x);
    }
    if x < 25.0 {
        return (x * x).exp() * libm::erfc(x);
    }
    // Asymptotic series: 1/(x√π) Σ (-1)^k (2k-1)!! / (2x²)^k.
    let inv2x2 = 0.5 / (x * x);
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..9 {
        term *= -((2 * k - 1) as f64) * inv2x2;
        sum += term;
    }
    sum / (x * PI.sqrt())
}

/// `ln(Φ(z)·exp(z²/2))`, finite for every finite `z`.
pub fn log_scaled_cdf(z: f64) -> f64 {
    if z >= 0.0 {
        (-0.5 * libm::erfc(z * FRAC_1_SQRT_2)).ln_1p() + 0.5 * z * z
    } else {
        (0.5 * erfcx(-z * FRAC_1_SQRT_2)).ln()
    }
}

/// Moments of a standard normal truncated to `(-z, ∞)` after shifting by `z`,
/// i.e. of `N(z, 1)` restricted to the positive half line.
///
/// Returns `(mean, variance)`. For strongly negative `z` both quantities are
/// obtained from the Laplace continued fraction of the Mills ratio, which
/// avoids the cancellation in `z + φ(z)/Φ(z)`.
pub fn positive_truncated_moments(z: f64) -> (f64, f64) {
    if z < -5.0 {
        truncated_moments_cf(-z)
    } else {
        truncated_moments_direct(z)
    }
}

fn truncated_moments_direct(z: f64) -> (f64, f64) {
    let hazard = inverse_mills(z);
    let mean = z + hazard;
    let var = 1.0 - hazard * mean;
    (mean, var.max(0.0))
}

fn truncated_moments_cf(x: f64) -> (f64, f64) {
    // d = 2/(x + 3/(x + 4/(x + ...))), c = 1/(x + d)
    let mut d = 0.0;
    for k in (2..=120).rev() {
        d = k as f64 / (x + d);
    }
    let c = 1.0 / (x + d);
    (c, (d - c) / (x + d))
}

/// Inverse Mills ratio `φ(z)/Φ(z)`.
pub fn inverse_mills(z: f64) -> f64 {
    if z >= 0.0 {
        normal_pdf(z) / normal_cdf(z)
    } else {
        (2.0 / PI).sqrt() / erfcx(-z / SQRT_2)
    }
}

/// Numerically stable `ln(exp(a) + exp(b))`.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let hi = a.max(b);
    hi + (-(a - b).abs()).exp().ln_1p()
}

/// Logistic function `1/(1 + exp(-x))` without overflow.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
