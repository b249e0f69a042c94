use rayon::prelude::*;

use crate::conv::{blur_operator, Padding};
use crate::error::Result;
use crate::volume::{Kernel3D, Volume3D};

const EPS_DIV: f64 = 1e-12;

/// Multiplicative Richardson-Lucy iterations from `x⁰ = max(y, ε)`.
pub fn richardson_lucy(y: &Volume3D, h: &Kernel3D, iters: usize, padding: Padding) -> Result<Volume3D> {
    y.ensure_same_dims(h.volume())?;
    if y.data().iter().any(|&v| v < 0.0) {
        log::warn!("richardson_lucy: negative observations clipped to 0");
    }
    let yc: Vec<f64> = y.data().par_iter().map(|&v| v.max(0.0)).collect();
    let op = blur_operator(h, padding);
    let mut x: Vec<f64> = yc.par_iter().map(|&v| v.max(EPS_DIV)).collect();
    for _ in 0..iters {
        let hx = op.apply(&x);
        let ratio: Vec<f64> = yc.par_iter().zip(hx.par_iter()).map(|(&a, &b)| a / (b + EPS_DIV)).collect();
        let corr = op.adjoint(&ratio);
        x.par_iter_mut().zip(corr.par_iter()).for_each(|(v, &c)| *v = (*v * c).max(0.0));
    }
    y.with_data(x)
}
