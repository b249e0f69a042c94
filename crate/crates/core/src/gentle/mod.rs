//! GENTLE: Gaussian kernel fitting from large beads by proximal alternating minimization.
//!
//! Minimizes over `(α, β, h, D)`
//!
//! ```text
//! ½‖y − α1 − β(h ∗ x)‖² + λ Ψ̃(h, D) + ε₂‖D‖²_F
//! ```
//!
//! with `α ∈ [α₋, α₊]`, `β ∈ [β₋, β₊]`, `h` on the simplex and `D + ε₁I ⪰ 0`, where `Ψ̃`
//! is the Kullback-Leibler divergence between `h` and the scaled Gaussian `ζ g(D + ε₁I)`.

mod prox;

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::SignalConv;
use crate::error::{Error, Result};
use crate::psf::{gaussian_kernel, quad_form, GaussianPsfParams};
use crate::volume::{Grid, Kernel3D, Volume3D};

pub use prox::{prox_d, prox_h, second_moment, DProxParams, EntropicProx, EntropicProxProblem};

/// Solver settings. `gamma_h` and `zeta` default to `1.9 / L̄` and `r_X r_Y r_Z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GentleConfig {
    pub lambda: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub zeta: Option<f64>,
    pub alpha_bounds: [f64; 2],
    pub beta_bounds: [f64; 2],
    pub gamma_h: Option<f64>,
    /// Fraction of `2 / L̄` used when `gamma_h` is unset.
    pub gamma_h_factor: f64,
    pub gamma_d: f64,
    pub stop_tol: f64,
    pub max_iters: usize,
}

impl Default for GentleConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            eps1: 1e-6,
            eps2: 1e-6,
            zeta: None,
            alpha_bounds: [0.0, 1.0],
            beta_bounds: [0.0, 3.0],
            gamma_h: None,
            gamma_h_factor: 0.95,
            gamma_d: 1.0,
            stop_tol: 1e-7,
            max_iters: 5000,
        }
    }
}

impl GentleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.lambda > 0.0) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.eps1 > 0.0 && self.eps2 > 0.0) {
            return bad("eps1 and eps2 must be positive".into());
        }
        if self.zeta.is_some_and(|z| !(z > 0.0)) {
            return bad("zeta must be positive".into());
        }
        if !(self.alpha_bounds[0] <= self.alpha_bounds[1] && self.beta_bounds[0] <= self.beta_bounds[1]) {
            return bad("bounds must satisfy lower <= upper".into());
        }
        if self.gamma_h.is_some_and(|g| !(g > 0.0)) || !(self.gamma_d > 0.0) {
            return bad("step sizes must be positive".into());
        }
        if !(self.gamma_h_factor > 0.0 && self.gamma_h_factor < 1.0) {
            return bad("gamma_h_factor must lie in (0, 1)".into());
        }
        Ok(())
    }

    fn proj_alpha(&self, a: f64) -> f64 {
        a.clamp(self.alpha_bounds[0], self.alpha_bounds[1])
    }

    fn proj_beta(&self, b: f64) -> f64 {
        b.clamp(self.beta_bounds[0], self.beta_bounds[1])
    }

    fn d_params(&self) -> DProxParams {
        DProxParams { lambda: self.lambda, gamma_d: self.gamma_d, eps1: self.eps1, eps2: self.eps2 }
    }
}

/// The quadruple evolved by the solver.
#[derive(Debug, Clone, PartialEq)]
pub struct GentleState {
    pub alpha: f64,
    pub beta: f64,
    pub h: Kernel3D,
    pub d: Matrix3<f64>,
}

impl GentleState {
    /// Uniform kernel and `D = 0`.
    pub fn initial(grid: &Grid, alpha: f64, beta: f64) -> Self {
        Self { alpha, beta, h: Kernel3D::uniform(grid.dims(), grid.voxel_size()), d: Matrix3::zeros() }
    }

    /// Precision matrix `D + ε₁I` of the Gaussian prior.
    pub fn precision(&self, eps1: f64) -> Matrix3<f64> {
        self.d + Matrix3::identity() * eps1
    }
}

/// `φ`: `−ln(t + ε₁)` for `t ≥ 0`, quadratic extension below.
pub fn phi(t: f64, eps1: f64) -> f64 {
    if t >= 0.0 {
        -(t + eps1).ln()
    } else {
        -eps1.ln() - t / eps1 + t * t / (eps1 * eps1)
    }
}

/// `Φ(D) = Σ φ(s_i)` over the eigenvalues of `D`.
pub fn big_phi(d: &Matrix3<f64>, eps1: f64) -> f64 {
    d.symmetric_eigenvalues().iter().map(|&s| phi(s, eps1)).sum()
}

/// Fixed data of one fitting problem.
pub struct GentleProblem<'a> {
    y: &'a Volume3D,
    grid: Grid,
    xconv: SignalConv,
    zeta: f64,
    lbar: f64,
    cfg: GentleConfig,
}

impl<'a> GentleProblem<'a> {
    pub fn new(y: &'a Volume3D, x: &Volume3D, cfg: &GentleConfig) -> Result<Self> {
        cfg.validate()?;
        y.ensure_same_dims(x)?;
        let xconv = SignalConv::new(x);
        let b = cfg.beta_bounds[1];
        let lbar = b * b * xconv.max_power();
        let zeta = cfg.zeta.unwrap_or_else(|| y.voxel_size().volume());
        Ok(Self { y, grid: y.grid(), xconv, zeta, lbar, cfg: cfg.clone() })
    }

    /// `L̄ = β₊² max |DFT(x)|²`.
    pub fn lipschitz(&self) -> f64 {
        self.lbar
    }

    pub fn gamma_h(&self) -> Result<f64> {
        if self.lbar <= 0.0 {
            return Err(Error::Degenerate("bead image has no energy".into()));
        }
        let bound = 2.0 / self.lbar;
        match self.cfg.gamma_h {
            Some(g) if g >= bound => {
                Err(Error::InvalidParameter(format!("gamma_h = {g} violates the step bound 2/L = {bound}")))
            }
            Some(g) => Ok(g),
            None => Ok(self.cfg.gamma_h_factor * bound),
        }
    }

    pub fn config(&self) -> &GentleConfig {
        &self.cfg
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    /// `h ∗ x`.
    pub fn blur(&self, h: &Kernel3D) -> Vec<f64> {
        self.xconv.apply_kernel(h.data())
    }

    /// `c_n = ½(3 ln 2π + Φ(D) + ω_nᵀ(D + ε₁I)ω_n)`.
    pub fn c_coeffs(&self, d: &Matrix3<f64>) -> Vec<f64> {
        let base = 3.0 * (2.0 * PI).ln() + big_phi(d, self.cfg.eps1);
        let s = d + Matrix3::identity() * self.cfg.eps1;
        (0..self.grid.dims().len())
            .into_par_iter()
            .map(|n| 0.5 * (base + quad_form(&s, self.grid.omega(n))))
            .collect()
    }

    fn data_term(&self, alpha: f64, beta: f64, hx: &[f64]) -> f64 {
        0.5 * self
            .y
            .data()
            .par_iter()
            .zip(hx.par_iter())
            .map(|(&yv, &c)| {
                let r = yv - alpha - beta * c;
                r * r
            })
            .sum::<f64>()
    }

    /// `Ψ̃(h, D)`; `+∞` if `h` has a negative entry.
    pub fn psi(&self, h: &[f64], d: &Matrix3<f64>) -> f64 {
        let c = self.c_coeffs(d);
        let ln_zeta = self.zeta.ln();
        let mut neg = false;
        let total: f64 = h
            .iter()
            .zip(&c)
            .map(|(&hn, &cn)| {
                if hn < 0.0 {
                    neg = true;
                    0.0
                } else if hn == 0.0 {
                    0.0
                } else {
                    hn * hn.ln() - hn * ln_zeta + hn * cn
                }
            })
            .sum();
        if neg {
            f64::INFINITY
        } else {
            total
        }
    }

    fn cost_with_blur(&self, s: &GentleState, hx: &[f64]) -> f64 {
        let cfg = &self.cfg;
        let in_box = |v: f64, b: [f64; 2]| v >= b[0] && v <= b[1];
        if !in_box(s.alpha, cfg.alpha_bounds) || !in_box(s.beta, cfg.beta_bounds) {
            return f64::INFINITY;
        }
        if !s.h.is_simplex(1e-9) {
            return f64::INFINITY;
        }
        let eig = s.d.symmetric_eigenvalues();
        if eig.min() < -cfg.eps1 - 1e-12 * (1.0 + eig.amax()) {
            return f64::INFINITY;
        }
        self.data_term(s.alpha, s.beta, hx) + cfg.lambda * self.psi(s.h.data(), &s.d) + cfg.eps2 * s.d.norm_squared()
    }

    /// The objective; `+∞` outside the feasible set.
    pub fn cost(&self, s: &GentleState) -> f64 {
        self.cost_with_blur(s, &self.blur(&s.h))
    }

    /// Exact `α` block update for a given `h ∗ x`.
    pub fn update_alpha(&self, beta: f64, hx: &[f64]) -> f64 {
        let n = hx.len() as f64;
        let m = self.y.data().par_iter().zip(hx.par_iter()).map(|(&y, &c)| y - beta * c).sum::<f64>() / n;
        self.cfg.proj_alpha(m)
    }

    /// Exact `β` block update for a given `h ∗ x`.
    pub fn update_beta(&self, alpha: f64, hx: &[f64]) -> Result<f64> {
        let (num, den) = self
            .y
            .data()
            .par_iter()
            .zip(hx.par_iter())
            .map(|(&y, &c)| ((y - alpha) * c, c * c))
            .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        if den == 0.0 {
            return Err(Error::Degenerate("h ∗ x is identically zero".into()));
        }
        Ok(self.cfg.proj_beta(num / den))
    }

    /// Forward-backward step on `h`.
    pub fn update_h(&self, s: &GentleState, hx: &[f64], gamma_h: f64) -> Result<Kernel3D> {
        Ok(self.update_h_hinted(s, hx, gamma_h, 0.0)?.0)
    }

    /// [`Self::update_h`] with a starting guess for the simplex multiplier; also returns the multiplier.
    pub fn update_h_hinted(&self, s: &GentleState, hx: &[f64], gamma_h: f64, mu_hint: f64) -> Result<(Kernel3D, f64)> {
        let (alpha, beta) = (s.alpha, s.beta);
        let resid: Vec<f64> = self.y.data().par_iter().zip(hx.par_iter()).map(|(&y, &c)| y - alpha - beta * c).collect();
        let grad = self.xconv.adjoint_to_kernel(&resid);
        let hprime: Vec<f64> = s.h.data().par_iter().zip(grad.par_iter()).map(|(&h, &g)| h + gamma_h * beta * g).collect();
        let c = self.c_coeffs(&s.d);
        let out = prox_h(&EntropicProxProblem {
            hprime: &hprime,
            rho: 1.0 / (self.cfg.lambda * gamma_h),
            c: &c,
            ln_zeta: self.zeta.ln(),
            mu_hint,
        })?;
        Ok((Kernel3D::new(s.h.volume().with_data(out.h)?), out.mu))
    }

    /// Proximal step on `D`.
    pub fn update_d(&self, s: &GentleState) -> Matrix3<f64> {
        let m = second_moment(s.h.data(), &self.grid);
        prox_d(&s.d, &m, self.cfg.d_params())
    }

    /// `‖y − α − β g(D + ε₁I) ∗ x‖²`, the λ-selection criterion.
    pub fn gaussian_criterion(&self, s: &GentleState) -> Result<f64> {
        let g = gaussian_kernel(&GaussianPsfParams::new(s.precision(self.cfg.eps1))?, &self.grid, true)?;
        let gx = self.blur(&g);
        Ok(2.0 * self.data_term(s.alpha, s.beta, &gx))
    }
}

/// Objective value of `state` for observation `y` and bead image `x`.
pub fn cost_f(state: &GentleState, y: &Volume3D, x: &Volume3D, cfg: &GentleConfig) -> Result<f64> {
    Ok(GentleProblem::new(y, x, cfg)?.cost(state))
}

pub fn update_alpha(state: &GentleState, y: &Volume3D, x: &Volume3D, cfg: &GentleConfig) -> Result<f64> {
    let p = GentleProblem::new(y, x, cfg)?;
    Ok(p.update_alpha(state.beta, &p.blur(&state.h)))
}

pub fn update_beta(state: &GentleState, y: &Volume3D, x: &Volume3D, cfg: &GentleConfig) -> Result<f64> {
    let p = GentleProblem::new(y, x, cfg)?;
    p.update_beta(state.alpha, &p.blur(&state.h))
}

/// One row of the solver trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    #[serde(rename = "F")]
    pub f: f64,
    pub alpha: f64,
    pub beta: f64,
    pub h_sum: f64,
    #[serde(rename = "D_eig_min")]
    pub d_eig_min: f64,
    #[serde(rename = "D_eig_max")]
    pub d_eig_max: f64,
    pub step_norm: f64,
}

/// Result of [`run_gentle`].
#[derive(Debug, Clone)]
pub struct GentleRun {
    pub state: GentleState,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
}

impl GentleRun {
    pub fn iterations(&self) -> usize {
        self.trace.last().map_or(0, |r| r.iter)
    }

    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.trace {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io("<trace>", e))?;
        Ok(())
    }
}

const DESCENT_SLACK: f64 = 1e-9;

/// Runs the alternating scheme `α → β → h → D` until `‖t⁽ˡ⁺¹⁾ − t⁽ˡ⁾‖ ≤ stop_tol`.
pub fn run_gentle(y: &Volume3D, x: &Volume3D, cfg: &GentleConfig, init: GentleState) -> Result<GentleRun> {
    let p = GentleProblem::new(y, x, cfg)?;
    p.run(init)
}

impl GentleProblem<'_> {
    pub fn run(&self, init: GentleState) -> Result<GentleRun> {
        let gamma_h = self.gamma_h()?;
        let mut s = init;
        if s.h.dims() != self.grid.dims() {
            return Err(Error::Shape { left: s.h.dims(), right: self.grid.dims() });
        }
        let mut hx = self.blur(&s.h);
        let mut f = self.cost_with_blur(&s, &hx);
        if !f.is_finite() {
            return Err(Error::InvalidParameter("initial GENTLE state is infeasible".into()));
        }
        let mut trace = vec![self.trace_row(0, f, &s, 0.0)];
        let mut costs = vec![f];
        let mut converged = false;
        let mut mu = 0.0;
        for iter in 1..=self.cfg.max_iters {
            let prev = s.clone();
            s.alpha = self.update_alpha(s.beta, &hx);
            s.beta = self.update_beta(s.alpha, &hx)?;
            (s.h, mu) = self.update_h_hinted(&s, &hx, gamma_h, mu)?;
            s.d = self.update_d(&s);
            hx = self.blur(&s.h);
            let f_new = self.cost_with_blur(&s, &hx);
            costs.push(f_new);
            if !(f_new <= f + DESCENT_SLACK * f.abs().max(1.0)) {
                return Err(Error::Descent { solver: "gentle", iteration: iter, previous: f, current: f_new, trace: costs });
            }
            f = f_new;
            let step = step_norm(&prev, &s);
            trace.push(self.trace_row(iter, f, &s, step));
            if step <= self.cfg.stop_tol {
                converged = true;
                break;
            }
        }
        log::debug!("gentle finished after {} iterations (converged: {converged})", trace.len() - 1);
        Ok(GentleRun { state: s, trace, converged })
    }

    fn trace_row(&self, iter: usize, f: f64, s: &GentleState, step: f64) -> TraceRow {
        let e = s.d.symmetric_eigenvalues();
        TraceRow {
            iter,
            f,
            alpha: s.alpha,
            beta: s.beta,
            h_sum: s.h.volume().sum(),
            d_eig_min: e.min(),
            d_eig_max: e.max(),
            step_norm: step,
        }
    }
}

fn step_norm(a: &GentleState, b: &GentleState) -> f64 {
    let dh: f64 = a.h.data().iter().zip(b.h.data()).map(|(u, v)| (u - v) * (u - v)).sum();
    ((a.alpha - b.alpha).powi(2) + (a.beta - b.beta).powi(2) + dh + (a.d - b.d).norm_squared()).sqrt()
}

/// Outcome of one λ in [`lambda_grid_search`].
#[derive(Debug, Clone)]
pub struct LambdaTrial {
    pub lambda: f64,
    pub criterion: f64,
    pub run: GentleRun,
}

/// Runs GENTLE for every λ (in parallel) and keeps the one minimizing the Gaussian
/// criterion; ties go to the smaller λ.
pub fn lambda_grid_search(
    y: &Volume3D,
    x: &Volume3D,
    cfg: &GentleConfig,
    lambdas: &[f64],
    init: &GentleState,
) -> Result<(LambdaTrial, Vec<LambdaTrial>)> {
    if lambdas.is_empty() {
        return Err(Error::InvalidParameter("lambda list is empty".into()));
    }
    let trials: Vec<LambdaTrial> = lambdas
        .par_iter()
        .map(|&lambda| {
            let c = GentleConfig { lambda, ..cfg.clone() };
            let p = GentleProblem::new(y, x, &c)?;
            let run = p.run(init.clone())?;
            let criterion = p.gaussian_criterion(&run.state)?;
            Ok(LambdaTrial { lambda, criterion, run })
        })
        .collect::<Result<_>>()?;
    let best = trials
        .iter()
        .min_by(|a, b| a.criterion.total_cmp(&b.criterion).then(a.lambda.total_cmp(&b.lambda)))
        .expect("non-empty")
        .clone();
    Ok((best, trials))
}
