//! Parametric PSF models, the spherical bead phantom and FWHM / orientation analytics.
//!
//! Orientation convention: a precision matrix is written `S = R diag(s) Rᵀ` with
//! `R = Rz(phi) · Rx(theta) · Rz(psi)` (Z-X-Z). The third column of `R` is the
//! principal axis `Z'`; `psi` only rotates the `X'`/`Y'` pair about `Z'` and is
//! irrelevant whenever `s_X' = s_Y'`, which is why models are usually quoted with
//! `psi = 0`. Flipping the sign of `Z'` maps `(theta, phi)` to `(pi - theta, phi ± pi)`.

use std::f64::consts::{LN_2, PI};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{Grid, Kernel3D, Volume3D};

const SYM_TOL: f64 = 1e-12;

fn check_spd(s: &Matrix3<f64>) -> Result<()> {
    if !s.iter().all(|v| v.is_finite()) {
        return Err(Error::NotSpd);
    }
    let scale = s.amax().max(1.0);
    if (s - s.transpose()).amax() > SYM_TOL * scale {
        return Err(Error::NotSpd);
    }
    if s.cholesky().is_none() {
        return Err(Error::NotSpd);
    }
    Ok(())
}

/// `ωᵀ S ω` for a symmetric `S`.
#[inline]
pub fn quad_form(s: &Matrix3<f64>, w: [f64; 3]) -> f64 {
    let v = Vector3::from(w);
    v.dot(&(s * v))
}

/// Precision matrix of a centred Gaussian PSF, in μm⁻².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPsfParams {
    precision: Matrix3<f64>,
}

impl GaussianPsfParams {
    pub fn new(precision: Matrix3<f64>) -> Result<Self> {
        check_spd(&precision)?;
        Ok(Self { precision })
    }

    /// `D + ε₁ I`.
    pub fn from_shifted(d: &Matrix3<f64>, eps1: f64) -> Result<Self> {
        Self::new(d + Matrix3::identity() * eps1)
    }

    pub fn from_euler(e: &EulerDecomp) -> Result<Self> {
        Self::new(spd_from_euler(e))
    }

    pub fn precision(&self) -> &Matrix3<f64> {
        &self.precision
    }

    /// Density prefactor `sqrt(|S| / (2π)³)`.
    pub fn peak_density(&self) -> f64 {
        (self.precision.determinant() / (2.0 * PI).powi(3)).sqrt()
    }
}

/// Samples the Gaussian density at every voxel centre; optionally rescales onto the simplex.
pub fn gaussian_kernel(params: &GaussianPsfParams, grid: &Grid, normalize: bool) -> Result<Kernel3D> {
    let s = params.precision;
    let c = params.peak_density();
    let data: Vec<f64> = (0..grid.dims().len())
        .into_par_iter()
        .map(|n| c * (-0.5 * quad_form(&s, grid.omega(n))).exp())
        .collect();
    let mut k = Kernel3D::new(Volume3D::new(grid.dims(), grid.voxel_size(), data)?);
    if normalize {
        k.normalize()?;
    }
    Ok(k)
}

/// Generalized exponential family `∝ exp(-½ (ωᵀ S ω)^{η/2})`; `η = 2` is Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenExpParams {
    pub precision: Matrix3<f64>,
    pub eta: f64,
}

impl GenExpParams {
    pub fn new(precision: Matrix3<f64>, eta: f64) -> Result<Self> {
        check_spd(&precision)?;
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::InvalidParameter(format!("eta must be positive, got {eta}")));
        }
        Ok(Self { precision, eta })
    }
}

pub fn genexp_kernel(params: &GenExpParams, grid: &Grid) -> Result<Kernel3D> {
    let GenExpParams { precision: s, eta } = *params;
    check_spd(&s)?;
    if !(eta > 0.0) {
        return Err(Error::InvalidParameter(format!("eta must be positive, got {eta}")));
    }
    let data: Vec<f64> = (0..grid.dims().len())
        .into_par_iter()
        .map(|n| {
            let q = quad_form(&s, grid.omega(n)).max(0.0);
            (-0.5 * q.powf(0.5 * eta)).exp()
        })
        .collect();
    let mut k = Kernel3D::new(Volume3D::new(grid.dims(), grid.voxel_size(), data)?);
    k.normalize()?;
    Ok(k)
}

/// A uniformly fluorescent sphere of diameter `tau` micrometres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeadSpec {
    tau: f64,
}

impl BeadSpec {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidParameter(format!("bead diameter must be positive, got {tau}")));
        }
        Ok(Self { tau })
    }

    pub fn diameter(&self) -> f64 {
        self.tau
    }
}

/// Binary sphere phantom of radius `τ/2` centred on the grid origin.
pub fn sphere_bead(spec: &BeadSpec, grid: &Grid) -> Result<Volume3D> {
    let r = 0.5 * spec.tau;
    let half = grid.half_extent();
    if half.iter().any(|&h| r >= h) {
        return Err(Error::InvalidParameter(format!(
            "bead radius {r} µm does not fit in the grid (half extent {half:?})"
        )));
    }
    let r2 = r * r;
    let data = (0..grid.dims().len())
        .map(|n| {
            let w = grid.omega(n);
            if w[0] * w[0] + w[1] * w[1] + w[2] * w[2] <= r2 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Volume3D::new(grid.dims(), grid.voxel_size(), data)
}

/// Full width at half maximum (μm) along a principal axis with precision eigenvalue `s`.
pub fn fwhm_from_eig(s: f64) -> Result<f64> {
    if !(s > 0.0) {
        return Err(Error::InvalidParameter(format!("eigenvalue must be positive, got {s}")));
    }
    Ok(2.0 * (2.0 * LN_2 / s).sqrt())
}

/// Inverse of [`fwhm_from_eig`].
pub fn eig_from_fwhm(fwhm: f64) -> f64 {
    8.0 * LN_2 / (fwhm * fwhm)
}

/// Diffraction-limited lateral and axial FWHM for two-photon excitation.
pub fn theoretical_fwhm(lambda_em_um: f64, na: f64, n_r: f64) -> (f64, f64) {
    (0.7 * lambda_em_um / na, 2.3 * lambda_em_um * n_r / (na * na))
}

/// Orientation and principal precisions of an SPD matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerDecomp {
    /// Polar angle of `Z'`, in `[0, π]`.
    pub theta: f64,
    /// Azimuth of `Z'`, in `[-π, π]`.
    pub phi: f64,
    /// In-plane angle of `X'` about `Z'`.
    pub psi: f64,
    /// `(s_X', s_Y', s_Z')`.
    pub eigs: [f64; 3],
}

impl EulerDecomp {
    /// Axisymmetric-style parameterization with `psi = 0`.
    pub fn new(theta: f64, phi: f64, eigs: [f64; 3]) -> Self {
        Self { theta, phi, psi: 0.0, eigs }
    }

    pub fn fwhm(&self) -> Result<[f64; 3]> {
        Ok([fwhm_from_eig(self.eigs[0])?, fwhm_from_eig(self.eigs[1])?, fwhm_from_eig(self.eigs[2])?])
    }

    /// Direction of the `Z'` axis.
    pub fn axis(&self) -> Vector3<f64> {
        rotation(self.theta, self.phi, self.psi).column(2).into_owned()
    }
}

fn rz(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn rx(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rotation(theta: f64, phi: f64, psi: f64) -> Matrix3<f64> {
    rz(phi) * rx(theta) * rz(psi)
}

pub fn spd_from_euler(e: &EulerDecomp) -> Matrix3<f64> {
    let r = rotation(e.theta, e.phi, e.psi);
    let s = r * Matrix3::from_diagonal(&Vector3::from(e.eigs)) * r.transpose();
    0.5 * (s + s.transpose())
}

pub fn euler_decompose(s: &Matrix3<f64>) -> Result<EulerDecomp> {
    check_spd(s)?;
    let eig = SymmetricEigen::new(*s);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.map(|i| eig.eigenvalues[i]);
    // The eigenvalue farthest from the other two is Z'; ties favour the largest.
    let (xi, yi, zi) = if vals[1] - vals[0] < vals[2] - vals[1] {
        (order[0], order[1], order[2])
    } else {
        (order[1], order[2], order[0])
    };
    let mut ux: Vector3<f64> = eig.eigenvectors.column(xi).into_owned();
    let mut uz: Vector3<f64> = eig.eigenvectors.column(zi).into_owned();
    if uz.z < 0.0 {
        uz = -uz;
    }
    let mut uy = uz.cross(&ux);
    ux = uy.cross(&uz);
    let mut r = Matrix3::from_columns(&[ux, uy, uz]);
    let mut angles = rotation_angles(&r);
    // psi and psi + π describe the same ellipsoid; keep cos(psi) >= 0.
    if angles.2.cos() < 0.0 {
        ux = -ux;
        uy = -uy;
        r = Matrix3::from_columns(&[ux, uy, uz]);
        angles = rotation_angles(&r);
    }
    let (theta, phi, psi) = angles;
    Ok(EulerDecomp { theta, phi, psi, eigs: [eig.eigenvalues[xi], eig.eigenvalues[yi], eig.eigenvalues[zi]] })
}

/// Z-X-Z angles of a proper rotation, `R = Rz(phi) Rx(theta) Rz(psi)`.
fn rotation_angles(r: &Matrix3<f64>) -> (f64, f64, f64) {
    let theta = r[(2, 2)].clamp(-1.0, 1.0).acos();
    if theta.sin() > 1e-9 {
        let phi = r[(0, 2)].atan2(-r[(1, 2)]);
        let psi = r[(2, 0)].atan2(r[(2, 1)]);
        (theta, phi, psi)
    } else if r[(2, 2)] > 0.0 {
        (0.0, 0.0, r[(1, 0)].atan2(r[(0, 0)]))
    } else {
        (PI, 0.0, (-r[(1, 0)]).atan2(r[(0, 0)]))
    }
}

/// Smallest angular distance between two `(theta, phi)` axis orientations, treating
/// `±Z'` as the same axis.
pub fn axis_angle_between(a: &EulerDecomp, b: &EulerDecomp) -> f64 {
    let c = a.axis().dot(&b.axis()).abs().min(1.0);
    c.acos()
}
