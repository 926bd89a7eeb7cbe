//! Scalar normal-distribution helpers with tail-stable logarithms.

use std::f64::consts::{PI, SQRT_2};

use libm::erfc;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (x - mean).powi(2) / var - 0.5 * var.ln() - LN_SQRT_2PI
}

pub fn pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

/// Standard normal CDF.
pub fn cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// `ln Phi(z)`, accurate deep into the lower tail.
pub fn log_cdf(z: f64) -> f64 {
    if z == f64::INFINITY {
        return 0.0;
    }
    if z == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if z > -30.0 {
        if z > 0.0 {
            // 1 - Phi(z) is small here; ln1p keeps it
            (-0.5 * erfc(z / SQRT_2)).ln_1p()
        } else {
            cdf(z).ln()
        }
    } else {
        let z2 = z * z;
        let series = 1.0 - 1.0 / z2 + 3.0 / z2.powi(2) - 15.0 / z2.powi(3) + 105.0 / z2.powi(4);
        -0.5 * z2 - (-z).ln() - LN_SQRT_2PI + series.ln()
    }
}

/// `ln(e^a - e^b)` for `a >= b`.
fn log_diff_exp(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        a
    } else {
        a + (-(b - a).exp()).ln_1p()
    }
}

/// `ln(Phi(hi) - Phi(lo))` for `lo <= hi`, computed on whichever side of the
/// distribution keeps both tails representable.
pub fn log_mass(lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return f64::NEG_INFINITY;
    }
    if lo > 0.0 {
        log_diff_exp(log_cdf(-lo), log_cdf(-hi))
    } else {
        log_diff_exp(log_cdf(hi), log_cdf(lo))
    }
}

/// `ln sum exp(v)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
