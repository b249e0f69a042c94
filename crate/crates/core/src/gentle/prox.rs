//! Proximity operators of the kernel and precision-matrix blocks.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lambert::lambert_w_of_exp;
use crate::volume::Grid;

/// Entropic prox on the simplex:
/// `argmin_h λγ Σ (h ln h − h ln ζ + c_n h) + ½‖h − h'‖²  s.t.  Σ h = 1`.
#[derive(Debug, Clone)]
pub struct EntropicProxProblem<'a> {
    pub hprime: &'a [f64],
    /// `1 / (λ γ_h)`.
    pub rho: f64,
    pub c: &'a [f64],
    pub ln_zeta: f64,
    /// Starting guess for the multiplier `μ`.
    pub mu_hint: f64,
}

/// Output of [`prox_h`].
#[derive(Debug, Clone)]
pub struct EntropicProx {
    pub h: Vec<f64>,
    /// Simplex multiplier `μ̂`.
    pub mu: f64,
    /// `κ(μ̂)`.
    pub residual: f64,
}

const KAPPA_TOL: f64 = 1e-10;
const MAX_ROOT_EVALS: usize = 400;

impl EntropicProxProblem<'_> {
    /// `w_n(μ)` with `ν = ρ μ`.
    #[inline]
    fn w(&self, n: usize, nu: f64) -> f64 {
        -1.0 - self.c[n] + self.rho * self.hprime[n] - nu + self.ln_zeta
    }

    /// `κ` and `dκ/dν`; the entries are written to `h`.
    fn kappa(&self, nu: f64, h: &mut [f64]) -> (f64, f64) {
        let ln_rho = self.rho.ln();
        let rho = self.rho;
        h.par_iter_mut().enumerate().for_each(|(n, hn)| {
            *hn = lambert_w_of_exp(ln_rho + self.w(n, nu)) / rho;
        });
        let (sum, dsum) = h
            .par_iter()
            .map(|&hn| (hn, -hn / (1.0 + rho * hn)))
            .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        (sum - 1.0, dsum)
    }
}

/// Solves the entropic prox. `κ(ν) = Σ h_n(ν) − 1` is strictly decreasing and convex in
/// `ν = ρμ`, so Newton from the hint converges; a bracket is kept for bisection, grown
/// geometrically while one side is still unknown.
pub fn prox_h(p: &EntropicProxProblem<'_>) -> Result<EntropicProx> {
    let n = p.hprime.len();
    if p.c.len() != n || n == 0 {
        return Err(Error::InvalidParameter("prox_h: c and h' must have equal, non-zero length".into()));
    }
    if !(p.rho > 0.0 && p.rho.is_finite()) {
        return Err(Error::InvalidParameter(format!("prox_h: rho must be positive, got {}", p.rho)));
    }
    if p.c.iter().any(|c| !c.is_finite()) || p.hprime.iter().any(|v| !v.is_finite()) || !p.mu_hint.is_finite() {
        return Err(Error::InvalidParameter("prox_h: non-finite input".into()));
    }
    let mut h = vec![0.0; n];
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    let mut nu = p.rho * p.mu_hint;
    let mut step = 1.0;
    for _ in 0..MAX_ROOT_EVALS {
        let (k, dk) = p.kappa(nu, &mut h);
        if k.abs() <= KAPPA_TOL {
            return Ok(finish(h, nu / p.rho));
        }
        if k > 0.0 {
            lo = nu;
        } else {
            hi = nu;
        }
        if lo.is_finite() && hi.is_finite() && hi - lo <= 1e-15 * nu.abs().max(1.0) {
            break;
        }
        let newton = nu - k / dk;
        nu = if dk < 0.0 && newton > lo && newton < hi {
            newton
        } else if lo.is_finite() && hi.is_finite() {
            0.5 * (lo + hi)
        } else {
            step *= 2.0;
            if step > 1e300 {
                return Err(Error::Bracketing("prox_h: no sign change of κ".into()));
            }
            if k > 0.0 { nu + step } else { nu - step }
        };
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Bracketing("prox_h: root not bracketed".into()));
    }
    let (k, _) = p.kappa(nu, &mut h);
    if k.abs() > 1e-8 {
        return Err(Error::Bracketing(format!("prox_h: κ residual {k} after bracket collapse")));
    }
    Ok(finish(h, nu / p.rho))
}

/// Rescales away the root-finding residual so the output lies on the simplex to rounding.
fn finish(mut h: Vec<f64>, mu: f64) -> EntropicProx {
    let s: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= s);
    let residual = h.iter().sum::<f64>() - 1.0;
    EntropicProx { h, mu, residual }
}

/// `Σ_n h_n ω_n ω_nᵀ`.
pub fn second_moment(h: &[f64], grid: &Grid) -> Matrix3<f64> {
    (0..h.len())
        .into_par_iter()
        .fold(Matrix3::zeros, |mut acc, n| {
            let w = Vector3::from(grid.omega(n));
            acc += h[n] * w * w.transpose();
            acc
        })
        .reduce(Matrix3::zeros, |a, b| a + b)
}

/// Parameters of the precision-matrix prox.
#[derive(Debug, Clone, Copy)]
pub struct DProxParams {
    pub lambda: f64,
    pub gamma_d: f64,
    pub eps1: f64,
    pub eps2: f64,
}

/// `prox_{γ_D F(α, β, h, ·)}(D')`.
///
/// With `c = 2ε₂γ_D + 1`, `S = γ_D λ M / (2c)` and `m = γ_D λ / (2c)`, each eigenvalue `μ`
/// of `D'/c − S` maps to the minimizer of `½s² − μs + m φ(s)` over `s ≥ −ε₁`.
pub fn prox_d(dprime: &Matrix3<f64>, moment: &Matrix3<f64>, p: DProxParams) -> Matrix3<f64> {
    let c = 2.0 * p.eps2 * p.gamma_d + 1.0;
    let m = p.gamma_d * p.lambda / (2.0 * c);
    let z = dprime / c - moment * m;
    let z = 0.5 * (z + z.transpose());
    let eig = SymmetricEigen::new(z);
    let s = eig.eigenvalues.map(|mu| scalar_prox(mu, m, p.eps1));
    let out = eig.eigenvectors * Matrix3::from_diagonal(&s) * eig.eigenvectors.transpose();
    0.5 * (out + out.transpose())
}

fn scalar_prox(mu: f64, m: f64, eps1: f64) -> f64 {
    if m == 0.0 {
        return mu.max(-eps1);
    }
    if mu >= -m / eps1 {
        // log branch, s >= 0
        let disc = ((mu + eps1) * (mu + eps1) + 4.0 * m).sqrt();
        // stable form when μ − ε₁ is very negative
        let a = mu - eps1;
        let s = if a >= 0.0 { 0.5 * (a + disc) } else { 2.0 * (m + mu * eps1) / (disc - a) };
        s.max(0.0)
    } else {
        // quadratic extension of φ below 0
        let s = (mu + m / eps1) / (1.0 + 2.0 * m / (eps1 * eps1));
        s.clamp(-eps1, 0.0)
    }
}
