//! FFT-based circular and zero-padded convolution with a centred kernel.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::Result;
use crate::fft::{fftshift, ifftshift_into, next_fast_len, Fft3d};
use crate::volume::{Dims, Kernel3D, Volume3D};

/// A linear blur operator `H` together with its adjoint.
pub trait LinearBlur: Send + Sync {
    fn dims(&self) -> Dims;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn adjoint(&self, x: &[f64]) -> Vec<f64>;
}

/// Keeps the real part; the imaginary residue must be negligible next to `scale`.
fn take_real(buf: Vec<Complex64>, scale: f64) -> Vec<f64> {
    debug_assert!(
        buf.iter().all(|c| c.im.abs() <= 1e-9 * scale.max(f64::MIN_POSITIVE) + 1e-300),
        "imaginary residue above tolerance"
    );
    buf.into_par_iter().map(|c| c.re).collect()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Circular convolution with a fixed kernel, with the spectrum computed once.
#[derive(Debug, Clone)]
pub struct CircularConv {
    fft: Fft3d,
    spectrum: Vec<Complex64>,
    kernel_l1: f64,
}

impl CircularConv {
    pub fn new(kernel: &Kernel3D) -> Self {
        Self::from_centered(kernel.data(), kernel.dims())
    }

    /// `kernel` is centred on [`Dims::center`].
    pub fn from_centered(kernel: &[f64], dims: Dims) -> Self {
        let fft = Fft3d::new(dims);
        let shifted = ifftshift_into(kernel, dims, dims);
        let spectrum = fft.forward_real(&shifted);
        let kernel_l1 = kernel.iter().map(|v| v.abs()).sum();
        Self { fft, spectrum, kernel_l1 }
    }

    /// Uses an uncentred signal (origin at index 0) as the kernel; `x ∗ u` for any `u`.
    pub fn from_signal(signal: &[f64], dims: Dims) -> Self {
        let fft = Fft3d::new(dims);
        let spectrum = fft.forward_real(signal);
        let kernel_l1 = signal.iter().map(|v| v.abs()).sum();
        Self { fft, spectrum, kernel_l1 }
    }

    pub fn spectrum(&self) -> &[Complex64] {
        &self.spectrum
    }

    fn multiply(&self, x: &[f64], conjugate: bool) -> Vec<f64> {
        assert_eq!(x.len(), self.spectrum.len(), "operand size mismatch");
        let mut buf = self.fft.forward_real(x);
        buf.par_iter_mut().zip(self.spectrum.par_iter()).for_each(|(b, s)| {
            *b *= if conjugate { s.conj() } else { *s };
        });
        self.fft.inverse(&mut buf);
        take_real(buf, max_abs(x) * self.kernel_l1)
    }
}

impl LinearBlur for CircularConv {
    fn dims(&self) -> Dims {
        self.fft.dims()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.multiply(x, false)
    }

    fn adjoint(&self, x: &[f64]) -> Vec<f64> {
        self.multiply(x, true)
    }
}

/// Linear convolution (zero padding outside the volume) cropped back to the volume dims.
#[derive(Debug, Clone)]
pub struct ZeroPadConv {
    dims: Dims,
    padded: Dims,
    fft: Fft3d,
    spectrum: Vec<Complex64>,
    kernel_l1: f64,
}

impl ZeroPadConv {
    pub fn new(kernel: &Kernel3D) -> Self {
        let dims = kernel.dims();
        // A kernel offset o in [-c, n-1-c] must not alias for any output/input pair:
        // P >= max(2n - 1 - c, n + c).
        let pad = |n: usize, c: usize| next_fast_len((2 * n - 1 - c).max(n + c));
        let (ci, cj, ck) = dims.center();
        let padded = Dims::new(pad(dims.nx, ci), pad(dims.ny, cj), pad(dims.nz, ck));
        let fft = Fft3d::new(padded);
        let shifted = ifftshift_into(kernel.data(), dims, padded);
        let spectrum = fft.forward_real(&shifted);
        let kernel_l1 = kernel.data().iter().map(|v| v.abs()).sum();
        Self { dims, padded, fft, spectrum, kernel_l1 }
    }

    pub fn padded_dims(&self) -> Dims {
        self.padded
    }

    fn pad(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf = vec![Complex64::default(); self.padded.len()];
        let d = self.dims;
        for k in 0..d.nz {
            for j in 0..d.ny {
                let src = d.index(0, j, k);
                let dst = self.padded.index(0, j, k);
                for i in 0..d.nx {
                    buf[dst + i] = Complex64::new(x[src + i], 0.0);
                }
            }
        }
        buf
    }

    fn crop(&self, buf: &[Complex64]) -> Vec<Complex64> {
        let d = self.dims;
        let mut out = Vec::with_capacity(d.len());
        for k in 0..d.nz {
            for j in 0..d.ny {
                let src = self.padded.index(0, j, k);
                out.extend_from_slice(&buf[src..src + d.nx]);
            }
        }
        out
    }

    fn multiply(&self, x: &[f64], conjugate: bool) -> Vec<f64> {
        assert_eq!(x.len(), self.dims.len(), "operand size mismatch");
        let mut buf = self.pad(x);
        self.fft.forward(&mut buf);
        buf.par_iter_mut().zip(self.spectrum.par_iter()).for_each(|(b, s)| {
            *b *= if conjugate { s.conj() } else { *s };
        });
        self.fft.inverse(&mut buf);
        take_real(self.crop(&buf), max_abs(x) * self.kernel_l1)
    }
}

impl LinearBlur for ZeroPadConv {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.multiply(x, false)
    }

    fn adjoint(&self, x: &[f64]) -> Vec<f64> {
        self.multiply(x, true)
    }
}

/// Boundary handling of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    Circular,
    Zero,
}

/// Builds the blur operator for `kernel` with the requested boundary handling.
pub fn blur_operator(kernel: &Kernel3D, padding: Padding) -> Box<dyn LinearBlur> {
    match padding {
        Padding::Circular => Box::new(CircularConv::new(kernel)),
        Padding::Zero => Box::new(ZeroPadConv::new(kernel)),
    }
}

pub fn convolve_circular(vol: &Volume3D, ker: &Kernel3D) -> Result<Volume3D> {
    vol.ensure_same_dims(ker.volume())?;
    vol.with_data(CircularConv::new(ker).apply(vol.data()))
}

pub fn convolve_zeropad(vol: &Volume3D, ker: &Kernel3D) -> Result<Volume3D> {
    vol.ensure_same_dims(ker.volume())?;
    vol.with_data(ZeroPadConv::new(ker).apply(vol.data()))
}

/// `max_n |DFT(vol)_n|²`.
pub fn dft_max_power(vol: &Volume3D) -> f64 {
    let fft = Fft3d::new(vol.dims());
    fft.forward_real(vol.data()).iter().map(|c| c.norm_sqr()).fold(0.0, f64::max)
}

/// Convolution `x ∗ h` of a fixed signal `x` with a varying centred kernel `h`,
/// plus the adjoint `h ↦` correlation used by gradient steps in the kernel.
#[derive(Debug, Clone)]
pub struct SignalConv {
    dims: Dims,
    inner: CircularConv,
}

impl SignalConv {
    pub fn new(signal: &Volume3D) -> Self {
        let dims = signal.dims();
        Self { dims, inner: CircularConv::from_signal(signal.data(), dims) }
    }

    /// `X h` where `h` is stored centred.
    pub fn apply_kernel(&self, h: &[f64]) -> Vec<f64> {
        let shifted = ifftshift_into(h, self.dims, self.dims);
        self.inner.apply(&shifted)
    }

    /// `Xᵀ r`, returned in centred kernel storage.
    pub fn adjoint_to_kernel(&self, r: &[f64]) -> Vec<f64> {
        fftshift(&self.inner.adjoint(r), self.dims)
    }

    pub fn max_power(&self) -> f64 {
        self.inner.spectrum().iter().map(|c| c.norm_sqr()).fold(0.0, f64::max)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
}
