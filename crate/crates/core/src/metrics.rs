//! Image-quality metrics.

use crate::conv::convolve_circular;
use crate::error::{Error, Result};
use crate::volume::{Kernel3D, Volume3D};

/// Value returned by [`snr_db`] when the error energy vanishes.
pub const SNR_CAP_DB: f64 = 300.0;

/// Signal-to-noise ratio `10 log10(‖ref‖² / ‖ref − test‖²)` in dB.
pub fn snr_db(reference: &Volume3D, test: &Volume3D) -> Result<f64> {
    snr_db_capped(reference, test, SNR_CAP_DB)
}

pub fn snr_db_capped(reference: &Volume3D, test: &Volume3D, cap: f64) -> Result<f64> {
    reference.ensure_same_dims(test)?;
    let signal = reference.norm_sq();
    let err: f64 = reference.data().iter().zip(test.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    if err < 1e-30 {
        return Ok(cap);
    }
    Ok((10.0 * (signal / err).log10()).min(cap))
}

/// Background, scale and kernel of a blurred-bead model `α + β (h ∗ x)`.
#[derive(Debug, Clone, Copy)]
pub struct BeadModel<'a> {
    pub alpha: f64,
    pub beta: f64,
    pub kernel: &'a Kernel3D,
}

/// Evaluates `α + β (h ∗ x)` with circular convolution.
pub fn bead_model(model: BeadModel<'_>, bead: &Volume3D) -> Result<Volume3D> {
    let conv = convolve_circular(bead, model.kernel)?;
    Ok(conv.map(|v| model.alpha + model.beta * v))
}

/// Percent root-mean-square difference between an estimated and a true blurred-bead model.
pub fn prd_percent(estimate: BeadModel<'_>, truth: BeadModel<'_>, bead: &Volume3D) -> Result<f64> {
    let est = bead_model(estimate, bead)?;
    let tru = bead_model(truth, bead)?;
    let den = tru.norm_sq().sqrt();
    if den == 0.0 {
        return Err(Error::Degenerate("true bead model is identically zero".into()));
    }
    let num: f64 = est.data().iter().zip(tru.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(100.0 * num / den)
}
