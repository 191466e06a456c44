//! Standard normal density, distribution function and the ratios EP needs,
//! evaluated stably far into the lower tail.

use libm::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
// Below this point the continued fraction for the Mills ratio is used.
const TAIL_SWITCH: f64 = -5.0;

pub fn pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

pub fn log_pdf(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

pub fn cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

/// Mills ratio `Φ(-x)/φ(x)` for `x > 0`, by Lentz's method on the classical
/// continued fraction `1/(x+1/(x+2/(x+3/(x+...))))`.
fn mills_ratio(x: f64) -> f64 {
    let tiny = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64;
        d = x + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    1.0 / f
}

pub fn log_cdf(z: f64) -> f64 {
    if z < TAIL_SWITCH {
        log_pdf(z) + mills_ratio(-z).ln()
    } else {
        cdf(z).ln()
    }
}

/// `φ(z)/Φ(z)`, finite for every finite `z`.
pub fn inv_mills(z: f64) -> f64 {
    if z < TAIL_SWITCH {
        1.0 / mills_ratio(-z)
    } else {
        pdf(z) / cdf(z)
    }
}
