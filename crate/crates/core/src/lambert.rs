//! Principal branch of the Lambert W function.

use crate::error::{Error, Result};

/// Above this `u`, `W(e^u)` is evaluated from its asymptotic series.
pub const ASYMPTOTIC_SWITCH: f64 = 100.0;

/// Below this `u`, `W(e^u)` is evaluated from its Taylor series at 0.
const SERIES_SWITCH: f64 = -8.0;

/// `W(z)` for `z >= 0`, Halley iterations to full double precision.
pub fn lambert_w(z: f64) -> Result<f64> {
    if !(z >= 0.0) {
        return Err(Error::InvalidParameter(format!("lambert_w requires z >= 0, got {z}")));
    }
    if z == 0.0 {
        return Ok(0.0);
    }
    if z.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let mut w = if z < 1.0 {
        // series around 0
        z * (1.0 - z + 1.5 * z * z)
    } else {
        let l = z.ln();
        (l - l.max(1.0).ln()).max(0.5)
    };
    Ok(halley(z, &mut w))
}

fn halley(z: f64, w: &mut f64) -> f64 {
    for _ in 0..60 {
        let ew = w.exp();
        let f = *w * ew - z;
        let wp1 = *w + 1.0;
        let denom = ew * wp1 - (*w + 2.0) * f / (2.0 * wp1);
        let step = f / denom;
        *w -= step;
        if step.abs() <= 1e-15 * w.abs().max(1e-300) {
            break;
        }
    }
    *w
}

/// `W(exp(u))` without forming `exp(u)`.
///
/// Solves `w + ln w = u` by Newton for moderate `u`; above [`ASYMPTOTIC_SWITCH`] uses
/// `u - L + L/u + L(L-2)/(2u²)` with `L = ln u`, whose residual there is below 1e-7.
pub fn lambert_w_of_exp(u: f64) -> f64 {
    if u > ASYMPTOTIC_SWITCH {
        return asymptotic(u);
    }
    if u < -700.0 {
        // W(z) ≈ z for tiny z
        return u.exp();
    }
    if u < SERIES_SWITCH {
        // W(z) = z − z² + 3z³/2 − 8z⁴/3 + 125z⁵/24 − …, truncation below 1e-16 relative here
        let z = u.exp();
        return z * (1.0 + z * (-1.0 + z * (1.5 + z * (-8.0 / 3.0 + z * (125.0 / 24.0)))));
    }
    if u < 1.0 {
        return lambert_w(u.exp()).expect("exp is nonnegative");
    }
    // Newton on w + ln w - u, convex and monotone for w > 0.
    let mut w = u - u.ln().max(0.0);
    if w <= 0.0 {
        w = 0.5;
    }
    for _ in 0..60 {
        let f = w + w.ln() - u;
        let step = f / (1.0 + 1.0 / w);
        w -= step;
        if step.abs() <= 1e-15 * w {
            break;
        }
    }
    w
}

fn asymptotic(u: f64) -> f64 {
    let l = u.ln();
    u - l + l / u + l * (l - 2.0) / (2.0 * u * u)
}
