use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::SignalConv;
use crate::error::{Error, Result};
use crate::psf::{gaussian_kernel, spd_from_euler, EulerDecomp, GaussianPsfParams};
use crate::volume::{Grid, Kernel3D, Volume3D};

const MIN_EIG: f64 = 1e-6;

/// Parameters of the Gaussian bead model `α + β g(S(θ, φ, s)) ∗ x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlsParams {
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    pub phi: f64,
    pub s: [f64; 3],
}

impl NlsParams {
    fn to_vec(self) -> [f64; 7] {
        [self.alpha, self.beta, self.theta, self.phi, self.s[0], self.s[1], self.s[2]]
    }

    fn from_vec(v: &[f64]) -> Self {
        Self { alpha: v[0], beta: v[1], theta: v[2], phi: v[3], s: [v[4], v[5], v[6]] }
    }

    pub fn euler(&self) -> EulerDecomp {
        EulerDecomp::new(self.theta, self.phi, self.s)
    }

    /// Normalized Gaussian kernel of these parameters.
    pub fn kernel(&self, grid: &Grid) -> Result<Kernel3D> {
        gaussian_kernel(&GaussianPsfParams::new(spd_from_euler(&self.euler()))?, grid, true)
    }
}

/// Box constraints and stopping rules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NlsConfig {
    pub alpha_bounds: [f64; 2],
    pub beta_bounds: [f64; 2],
    pub max_iters: usize,
    pub initial_damping: f64,
    pub step_tol: f64,
    /// Relative forward-difference step.
    pub fd_step: f64,
}

impl Default for NlsConfig {
    fn default() -> Self {
        Self { alpha_bounds: [0.0, 1.0], beta_bounds: [0.0, 3.0], max_iters: 200, initial_damping: 1e-3, step_tol: 1e-9, fd_step: 1e-6 }
    }
}

impl NlsConfig {
    fn project(&self, v: &mut [f64]) {
        v[0] = v[0].clamp(self.alpha_bounds[0], self.alpha_bounds[1]);
        v[1] = v[1].clamp(self.beta_bounds[0], self.beta_bounds[1]);
        v[2] = v[2].clamp(0.0, std::f64::consts::PI);
        // φ is periodic: its projection onto [−π, π] is the wrap.
        v[3] = wrap_angle(v[3]);
        for s in &mut v[4..7] {
            *s = s.max(MIN_EIG);
        }
    }
}

fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI && a > 0.0 { PI } else { w }
}

/// Fit result; `residual_norms` lists `‖r‖` after every accepted step, starting at the initial point.
#[derive(Debug, Clone)]
pub struct NlsFit {
    pub params: NlsParams,
    pub residual_norms: Vec<f64>,
    pub iterations: usize,
}

struct Model<'a> {
    y: &'a [f64],
    xconv: SignalConv,
    grid: Grid,
}

impl Model<'_> {
    fn residual(&self, v: &[f64]) -> Result<Vec<f64>> {
        let p = NlsParams::from_vec(v);
        let gx = self.xconv.apply_kernel(p.kernel(&self.grid)?.data());
        Ok(self.y.par_iter().zip(gx.par_iter()).map(|(&y, &g)| y - p.alpha - p.beta * g).collect())
    }
}

fn norm(r: &[f64]) -> f64 {
    r.par_iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖y − α − β g(S) ∗ x‖` for the given parameters.
pub fn nls_residual_norm(y: &Volume3D, x: &Volume3D, p: &NlsParams) -> Result<f64> {
    y.ensure_same_dims(x)?;
    let m = Model { y: y.data(), xconv: SignalConv::new(x), grid: x.grid() };
    Ok(norm(&m.residual(&p.to_vec())?))
}

/// Levenberg-Marquardt on the 7 parameters with a forward-difference Jacobian.
pub fn nls_fit(y: &Volume3D, x: &Volume3D, init: NlsParams, cfg: &NlsConfig) -> Result<NlsFit> {
    y.ensure_same_dims(x)?;
    let model = Model { y: y.data(), xconv: SignalConv::new(x), grid: x.grid() };
    let mut p = init.to_vec();
    cfg.project(&mut p);
    let mut r = model.residual(&p)?;
    let mut rn = norm(&r);
    let mut norms = vec![rn];
    let mut damping = cfg.initial_damping;
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        // Jacobian of the model (negated residual derivative).
        let cols: Vec<Vec<f64>> = (0..7)
            .map(|i| {
                let h = cfg.fd_step * p[i].abs().max(1.0);
                let mut q = p;
                q[i] += h;
                model.residual(&q).map(|rq| r.iter().zip(&rq).map(|(a, b)| (a - b) / h).collect())
            })
            .collect::<Result<_>>()?;
        let mut jtj = DMatrix::<f64>::zeros(7, 7);
        let mut jtr = DVector::<f64>::zeros(7);
        for a in 0..7 {
            jtr[a] = cols[a].par_iter().zip(r.par_iter()).map(|(j, r)| j * r).sum();
            for b in a..7 {
                let v: f64 = cols[a].par_iter().zip(cols[b].par_iter()).map(|(u, w)| u * w).sum();
                jtj[(a, b)] = v;
                jtj[(b, a)] = v;
            }
        }
        let mut accepted = false;
        let mut step_norm = f64::INFINITY;
        while damping < 1e16 {
            let mut lhs = jtj.clone();
            for a in 0..7 {
                lhs[(a, a)] += damping * jtj[(a, a)].max(1e-12);
            }
            let Some(delta) = lhs.cholesky().map(|c| c.solve(&jtr)) else {
                damping *= 10.0;
                continue;
            };
            let mut q = p;
            for a in 0..7 {
                q[a] += delta[a];
            }
            cfg.project(&mut q);
            let rq = model.residual(&q)?;
            let qn = norm(&rq);
            if qn < rn {
                step_norm = q.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                p = q;
                r = rq;
                rn = qn;
                norms.push(rn);
                damping = (damping / 10.0).max(1e-12);
                accepted = true;
                break;
            }
            damping *= 10.0;
        }
        if !accepted || step_norm < cfg.step_tol {
            break;
        }
    }
    if !rn.is_finite() {
        return Err(Error::Degenerate("nls_fit residual is not finite".into()));
    }
    Ok(NlsFit { params: NlsParams::from_vec(&p), residual_norms: norms, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{prd_percent, BeadModel};
    use crate::psf::{sphere_bead, BeadSpec};
    use crate::volume::{Dims, VoxelSize};

    fn setup() -> (Grid, Volume3D, NlsParams) {
        let g = Grid::new(Dims::new(20, 20, 24), VoxelSize::new(0.05, 0.05, 0.1).unwrap());
        let x = sphere_bead(&BeadSpec::new(0.4).unwrap(), &g).unwrap();
        let p = NlsParams { alpha: 0.1, beta: 1.0, theta: 0.6, phi: 0.4, s: [150.0, 120.0, 8.0] };
        (g, x, p)
    }

    fn observe(g: &Grid, x: &Volume3D, p: &NlsParams) -> Volume3D {
        let gx = SignalConv::new(x).apply_kernel(p.kernel(g).unwrap().data());
        x.with_data(gx.iter().map(|v| p.alpha + p.beta * v).collect()).unwrap()
    }

    #[test]
    fn truth_is_a_fixed_point() {
        let (g, x, p) = setup();
        let y = observe(&g, &x, &p);
        let fit = nls_fit(&y, &x, p, &NlsConfig::default()).unwrap();
        let a = fit.params.to_vec();
        let b = p.to_vec();
        for i in 0..7 {
            assert!((a[i] - b[i]).abs() <= 1e-6 * b[i].abs().max(1.0), "{i}: {} {}", a[i], b[i]);
        }
    }

    #[test]
    fn recovers_from_perturbed_start() {
        let (g, x, p) = setup();
        let y = observe(&g, &x, &p);
        let start = NlsParams {
            alpha: p.alpha * 1.1,
            beta: p.beta * 0.9,
            theta: p.theta * 1.1,
            phi: p.phi * 0.9,
            s: [p.s[0] * 1.1, p.s[1] * 0.9, p.s[2] * 1.1],
        };
        let fit = nls_fit(&y, &x, start, &NlsConfig::default()).unwrap();
        for w in fit.residual_norms.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let hk = fit.params.kernel(&g).unwrap();
        let tk = p.kernel(&g).unwrap();
        let prd = prd_percent(
            BeadModel { alpha: fit.params.alpha, beta: fit.params.beta, kernel: &hk },
            BeadModel { alpha: p.alpha, beta: p.beta, kernel: &tk },
            &x,
        )
        .unwrap();
        assert!(prd < 1.0, "{prd}");
    }
}
