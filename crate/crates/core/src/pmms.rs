//! Constrained restoration `min g(x)` s.t. `‖W(Hx − y + α)‖² ≤ B`, `x ≥ 0`, solved by
//! exterior penalties and a two-direction subspace majorize-minimize inner loop.
//!
//! Majorants are used in the form `F(x + d) ≤ F(x) + ∇F(x)ᵀd + ½ dᵀA(x)d`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{blur_operator, LinearBlur, Padding};
use crate::error::{Error, Result};
use crate::noise::{sigma, uniform_smooth, NoiseParams};
use crate::volume::{Dims, Kernel3D, Volume3D, VoxelSize};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.par_iter().zip(b.par_iter()).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Forward difference along `axis`, zero on the last slice.
fn grad_axis(x: &[f64], d: Dims, axis: usize) -> Vec<f64> {
    let (stride, n) = match axis {
        0 => (1, d.nx),
        1 => (d.nx, d.ny),
        _ => (d.nx * d.ny, d.nz),
    };
    (0..x.len())
        .into_par_iter()
        .map(|m| if (m / stride) % n + 1 < n { x[m + stride] - x[m] } else { 0.0 })
        .collect()
}

/// Adjoint of [`grad_axis`].
fn grad_axis_adjoint(p: &[f64], d: Dims, axis: usize) -> Vec<f64> {
    let (stride, n) = match axis {
        0 => (1, d.nx),
        1 => (d.nx, d.ny),
        _ => (d.nx * d.ny, d.nz),
    };
    (0..p.len())
        .into_par_iter()
        .map(|m| {
            let t = (m / stride) % n;
            let own = if t + 1 < n { -p[m] } else { 0.0 };
            let prev = if t > 0 { p[m - stride] } else { 0.0 };
            own + prev
        })
        .collect()
}

/// Voxel-size-weighted smoothed total variation and its pieces.
struct Tv {
    diffs: [Vec<f64>; 3],
    psi: Vec<f64>,
}

fn tv(x: &[f64], d: Dims, delta: f64, r: VoxelSize) -> Tv {
    let diffs = [grad_axis(x, d, 0), grad_axis(x, d, 1), grad_axis(x, d, 2)];
    let inv = r.0.map(|v| 1.0 / v);
    let psi = (0..x.len())
        .into_par_iter()
        .map(|m| (delta + diffs[0][m].powi(2) * inv[0] + diffs[1][m].powi(2) * inv[1] + diffs[2][m].powi(2) * inv[2]).sqrt())
        .collect();
    Tv { diffs, psi }
}

impl Tv {
    fn value(&self) -> f64 {
        self.psi.par_iter().sum()
    }

    fn gradient(&self, d: Dims, r: VoxelSize) -> Vec<f64> {
        let mut out = vec![0.0; self.psi.len()];
        for a in 0..3 {
            let p: Vec<f64> = self.diffs[a].par_iter().zip(self.psi.par_iter()).map(|(g, s)| g / (r.0[a] * s)).collect();
            let adj = grad_axis_adjoint(&p, d, a);
            out.par_iter_mut().zip(adj.par_iter()).for_each(|(o, v)| *o += v);
        }
        out
    }

    /// `d₁ᵀ A_g d₂` with `A_g = Σ_A G_Aᵀ Diag(1/(r_A ψ)) G_A`.
    fn curvature_form(&self, g1: &[Vec<f64>; 3], g2: &[Vec<f64>; 3], r: VoxelSize) -> f64 {
        (0..3)
            .map(|a| {
                let inv = 1.0 / r.0[a];
                g1[a].par_iter().zip(g2[a].par_iter()).zip(self.psi.par_iter()).map(|((u, v), s)| inv * u * v / s).sum::<f64>()
            })
            .sum()
    }
}

/// `g(x) = Σ √(δ + Σ_A (G_A x)²/r_A)`.
pub fn reg_g(x: &Volume3D, delta: f64, r: VoxelSize) -> f64 {
    tv(x.data(), x.dims(), delta, r).value()
}

pub fn grad_g(x: &Volume3D, delta: f64, r: VoxelSize) -> Volume3D {
    let d = x.dims();
    x.with_data(tv(x.data(), d, delta, r).gradient(d, r)).expect("same length")
}

/// `Σ min(x, 0)²`.
pub fn penalty_r2(x: &Volume3D) -> f64 {
    x.data().par_iter().map(|&v| v.min(0.0).powi(2)).sum()
}

pub fn grad_r2(x: &Volume3D) -> Volume3D {
    x.map(|v| 2.0 * v.min(0.0))
}

/// Settings used to build a [`RestorationProblem`] from data and a noise model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestorationConfig {
    /// TV smoothing `δ`.
    pub delta: f64,
    /// Constraint bound; `None` means the voxel count.
    pub bound: Option<f64>,
    /// Odd window of the uniform filter used to approximate `Hx̄` in the weights.
    pub weight_smoothing: usize,
    pub padding: Padding,
}

impl Default for RestorationConfig {
    fn default() -> Self {
        Self { delta: 0.1, bound: None, weight_smoothing: 3, padding: Padding::Zero }
    }
}

/// Data, blur, weights and bound of the constrained restoration.
pub struct RestorationProblem {
    y: Volume3D,
    alpha: f64,
    weights: Vec<f64>,
    bound: f64,
    delta: f64,
    op: Box<dyn LinearBlur>,
}

impl std::fmt::Debug for RestorationProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RestorationProblem")
            .field("dims", &self.y.dims())
            .field("alpha", &self.alpha)
            .field("bound", &self.bound)
            .field("delta", &self.delta)
            .finish()
    }
}

impl RestorationProblem {
    pub fn new(y: Volume3D, h: &Kernel3D, alpha: f64, weights: Vec<f64>, bound: f64, delta: f64, padding: Padding) -> Result<Self> {
        y.ensure_same_dims(h.volume())?;
        if weights.len() != y.len() {
            return Err(Error::DataLength { dims: y.dims(), len: weights.len(), expected: y.len() });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidParameter("weights must be positive and finite".into()));
        }
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(Error::InvalidParameter(format!("bound must be positive, got {bound}")));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidParameter(format!("delta must be positive, got {delta}")));
        }
        let op = blur_operator(h, padding);
        Ok(Self { y, alpha, weights, bound, delta, op })
    }

    /// Weights `1/σ(y_s − α)` from a smoothed observation, `σ` floored at `√b` and `1e-8`.
    pub fn with_noise_model(y: Volume3D, h: &Kernel3D, alpha: f64, noise: NoiseParams, cfg: &RestorationConfig) -> Result<Self> {
        let ys = uniform_smooth(&y, cfg.weight_smoothing)?;
        let floor = noise.b.sqrt().max(1e-8);
        let weights = ys.data().par_iter().map(|&t| 1.0 / sigma(t - alpha, noise).max(floor)).collect();
        let bound = cfg.bound.unwrap_or(y.len() as f64);
        Self::new(y, h, alpha, weights, bound, cfg.delta, cfg.padding)
    }

    /// Unit weights, as used by the penalized least-squares baseline.
    pub fn unweighted(y: Volume3D, h: &Kernel3D, alpha: f64, delta: f64, padding: Padding) -> Result<Self> {
        let n = y.len();
        Self::new(y, h, alpha, vec![1.0; n], n as f64, delta, padding)
    }

    pub fn y(&self) -> &Volume3D {
        &self.y
    }

    pub fn dims(&self) -> Dims {
        self.y.dims()
    }

    pub fn voxel_size(&self) -> VoxelSize {
        self.y.voxel_size()
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn blur(&self, x: &[f64]) -> Vec<f64> {
        self.op.apply(x)
    }

    /// `v = W(Hx − y + α)` given `Hx`.
    fn weighted_residual(&self, hx: &[f64]) -> Vec<f64> {
        let a = self.alpha;
        hx.par_iter()
            .zip(self.y.data().par_iter())
            .zip(self.weights.par_iter())
            .map(|((h, y), w)| w * (h - y + a))
            .collect()
    }

    /// `f(x) = ‖W(Hx − y + α)‖²`.
    pub fn data_fidelity(&self, x: &Volume3D) -> Result<f64> {
        self.y.ensure_same_dims(x)?;
        let v = self.weighted_residual(&self.blur(x.data()));
        Ok(dot(&v, &v))
    }

    /// Squared distance of `W(Hx − y + α)` to the ball of radius `√B`.
    pub fn penalty_r1(&self, x: &Volume3D) -> Result<f64> {
        self.y.ensure_same_dims(x)?;
        let v = self.weighted_residual(&self.blur(x.data()));
        Ok((norm(&v) - self.bound.sqrt()).max(0.0).powi(2))
    }

    pub fn grad_r1(&self, x: &Volume3D) -> Result<Volume3D> {
        self.y.ensure_same_dims(x)?;
        let v = self.weighted_residual(&self.blur(x.data()));
        let nv = norm(&v);
        let rb = self.bound.sqrt();
        let c = if nv > rb { 2.0 * (1.0 - rb / nv) } else { 0.0 };
        let wv: Vec<f64> = v.par_iter().zip(self.weights.par_iter()).map(|(v, w)| c * w * v).collect();
        x.with_data(self.op.adjoint(&wv))
    }

    pub fn grad_f(&self, x: &Volume3D) -> Result<Volume3D> {
        self.y.ensure_same_dims(x)?;
        let v = self.weighted_residual(&self.blur(x.data()));
        let wv: Vec<f64> = v.par_iter().zip(self.weights.par_iter()).map(|(v, w)| 2.0 * w * v).collect();
        x.with_data(self.op.adjoint(&wv))
    }
}

/// Smooth part of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularizer {
    SmoothTv,
    /// `½‖x‖²`, a test hook with identity curvature.
    HalfSquaredNorm,
}

/// Which penalized objective is being minimized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// `g + γ(R₁ + R₂)`.
    Constrained,
    /// `f + χ g + γ R₂`.
    Penalized { chi: f64 },
    /// Only the regularizer, no data term nor penalties.
    RegularizerOnly,
}

/// `F_γ` for one penalty level.
#[derive(Debug, Clone, Copy)]
pub struct PenalizedCost<'a> {
    pub prob: &'a RestorationProblem,
    pub gamma: f64,
    pub objective: Objective,
    pub regularizer: Regularizer,
}

/// Value breakdown of `F_γ` at a point.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct CostParts {
    pub total: f64,
    pub g: f64,
    pub f: f64,
    pub r1: f64,
    pub r2: f64,
}

/// Everything the inner loop needs at one iterate.
struct Eval {
    parts: CostParts,
    grad: Vec<f64>,
    tv: Option<Tv>,
}

impl<'a> PenalizedCost<'a> {
    pub fn constrained(prob: &'a RestorationProblem, gamma: f64) -> Self {
        Self { prob, gamma, objective: Objective::Constrained, regularizer: Regularizer::SmoothTv }
    }

    fn reg_weight(&self) -> f64 {
        match self.objective {
            Objective::Penalized { chi } => chi,
            _ => 1.0,
        }
    }

    fn uses_data(&self) -> bool {
        !matches!(self.objective, Objective::RegularizerOnly)
    }

    fn uses_r2(&self) -> bool {
        !matches!(self.objective, Objective::RegularizerOnly)
    }

    /// Factor `c` such that the data-term gradient is `Hᵀ W (c v)`, plus the parts.
    fn data_terms(&self, v: &[f64]) -> (f64, f64, f64) {
        let nv2 = dot(v, v);
        match self.objective {
            Objective::Constrained => {
                let nv = nv2.sqrt();
                let rb = self.prob.bound.sqrt();
                let r1 = (nv - rb).max(0.0).powi(2);
                let c = if nv > rb { 2.0 * self.gamma * (1.0 - rb / nv) } else { 0.0 };
                (c, nv2, r1)
            }
            Objective::Penalized { .. } => (2.0, nv2, 0.0),
            Objective::RegularizerOnly => (0.0, nv2, 0.0),
        }
    }

    /// `(½-form)` curvature factor of the data term: `A_data = k HᵀW²H`.
    fn data_curvature(&self) -> f64 {
        match self.objective {
            Objective::Constrained => 2.0 * self.gamma,
            Objective::Penalized { .. } => 2.0,
            Objective::RegularizerOnly => 0.0,
        }
    }

    fn r2_curvature(&self) -> f64 {
        if self.uses_r2() {
            2.0 * self.gamma
        } else {
            0.0
        }
    }

    fn evaluate(&self, x: &[f64], hx: &[f64]) -> Eval {
        let p = self.prob;
        let d = p.dims();
        let r = p.voxel_size();
        let wr = self.reg_weight();
        let (g, mut grad, tvs) = match self.regularizer {
            Regularizer::SmoothTv => {
                let t = tv(x, d, p.delta, r);
                let mut gr = t.gradient(d, r);
                if wr != 1.0 {
                    gr.par_iter_mut().for_each(|v| *v *= wr);
                }
                (t.value(), gr, Some(t))
            }
            Regularizer::HalfSquaredNorm => (0.5 * dot(x, x), x.par_iter().map(|v| wr * v).collect(), None),
        };
        let (mut f, mut r1, mut r2) = (0.0, 0.0, 0.0);
        let mut total = wr * g;
        if self.uses_data() {
            let v = p.weighted_residual(hx);
            let (c, nv2, rr1) = self.data_terms(&v);
            f = nv2;
            r1 = rr1;
            if c != 0.0 {
                let wv: Vec<f64> = v.par_iter().zip(p.weights.par_iter()).map(|(v, w)| c * w * v).collect();
                let adj = p.op.adjoint(&wv);
                grad.par_iter_mut().zip(adj.par_iter()).for_each(|(g, a)| *g += a);
            }
            total += match self.objective {
                Objective::Constrained => self.gamma * r1,
                _ => f,
            };
        }
        if self.uses_r2() {
            r2 = x.par_iter().map(|&v| v.min(0.0).powi(2)).sum();
            let gm = 2.0 * self.gamma;
            grad.par_iter_mut().zip(x.par_iter()).for_each(|(g, &v)| *g += gm * v.min(0.0));
            total += self.gamma * r2;
        }
        Eval { parts: CostParts { total, g, f, r1, r2 }, grad, tv: tvs }
    }

    /// `F_γ(x)` with its parts.
    pub fn value(&self, x: &Volume3D) -> CostParts {
        self.evaluate(x.data(), &self.prob.blur(x.data())).parts
    }

    pub fn gradient(&self, x: &Volume3D) -> Volume3D {
        x.with_data(self.evaluate(x.data(), &self.prob.blur(x.data())).grad).expect("same length")
    }

    /// `A_{F_γ}(x) d` (½-form curvature) as an explicit product; used for checks and small problems.
    pub fn curvature_apply(&self, x: &Volume3D, d: &Volume3D) -> Volume3D {
        let p = self.prob;
        let dims = p.dims();
        let r = p.voxel_size();
        let wr = self.reg_weight();
        let mut out = match self.regularizer {
            Regularizer::SmoothTv => {
                let t = tv(x.data(), dims, p.delta, r);
                let mut acc = vec![0.0; d.len()];
                for a in 0..3 {
                    let gd = grad_axis(d.data(), dims, a);
                    let q: Vec<f64> = gd.par_iter().zip(t.psi.par_iter()).map(|(g, s)| wr * g / (r.0[a] * s)).collect();
                    let adj = grad_axis_adjoint(&q, dims, a);
                    acc.par_iter_mut().zip(adj.par_iter()).for_each(|(o, v)| *o += v);
                }
                acc
            }
            Regularizer::HalfSquaredNorm => d.data().par_iter().map(|v| wr * v).collect(),
        };
        let kd = self.data_curvature();
        if kd != 0.0 {
            let hd = p.blur(d.data());
            let w2: Vec<f64> = hd.par_iter().zip(p.weights.par_iter()).map(|(h, w)| kd * w * w * h).collect();
            let adj = p.op.adjoint(&w2);
            out.par_iter_mut().zip(adj.par_iter()).for_each(|(o, a)| *o += a);
        }
        let k2 = self.r2_curvature();
        if k2 != 0.0 {
            out.par_iter_mut().zip(d.data().par_iter()).for_each(|(o, v)| *o += k2 * v);
        }
        d.with_data(out).expect("same length")
    }

    /// Gram matrix entries `dᵢᵀ A dⱼ` from the directions and their blurred images.
    fn subspace_curvature(&self, e: &Eval, dirs: &[&[f64]], hdirs: &[&[f64]]) -> Vec<Vec<f64>> {
        let p = self.prob;
        let dims = p.dims();
        let r = p.voxel_size();
        let wr = self.reg_weight();
        let k = dirs.len();
        let grads: Vec<[Vec<f64>; 3]> = match self.regularizer {
            Regularizer::SmoothTv => dirs.iter().map(|d| [grad_axis(d, dims, 0), grad_axis(d, dims, 1), grad_axis(d, dims, 2)]).collect(),
            Regularizer::HalfSquaredNorm => Vec::new(),
        };
        let whd: Vec<Vec<f64>> = hdirs.iter().map(|h| h.par_iter().zip(p.weights.par_iter()).map(|(h, w)| h * w).collect()).collect();
        let kd = self.data_curvature();
        let k2 = self.r2_curvature();
        let mut m = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in i..k {
                let mut v = match (&self.regularizer, &e.tv) {
                    (Regularizer::SmoothTv, Some(t)) => wr * t.curvature_form(&grads[i], &grads[j], r),
                    _ => wr * dot(dirs[i], dirs[j]),
                };
                if kd != 0.0 {
                    v += kd * dot(&whd[i], &whd[j]);
                }
                if k2 != 0.0 {
                    v += k2 * dot(dirs[i], dirs[j]);
                }
                m[i][j] = v;
                m[j][i] = v;
            }
        }
        m
    }
}

/// Pseudo-inverse solve of a 1×1 or 2×2 symmetric system with eigenvalue floor `1e-12·trace`.
fn pinv_solve(b: &[Vec<f64>], rhs: &[f64]) -> Vec<f64> {
    let k = rhs.len();
    let trace: f64 = (0..k).map(|i| b[i][i]).sum();
    let floor = 1e-12 * trace.abs();
    if k == 1 {
        return vec![if b[0][0] > floor { rhs[0] / b[0][0] } else { 0.0 }];
    }
    let m = nalgebra::Matrix2::new(b[0][0], b[0][1], b[1][0], b[1][1]);
    let eig = m.symmetric_eigen();
    let r = nalgebra::Vector2::new(rhs[0], rhs[1]);
    let mut out = nalgebra::Vector2::zeros();
    for i in 0..2 {
        let l = eig.eigenvalues[i];
        if l > floor {
            let v = eig.eigenvectors.column(i);
            out += v * (v.dot(&r) / l);
        }
    }
    vec![out[0], out[1]]
}

/// Result of [`mm_inner_solve`].
#[derive(Debug, Clone)]
pub struct InnerResult {
    pub x: Volume3D,
    pub iterations: usize,
    pub grad_norm: f64,
    pub parts: CostParts,
    /// `F_γ` before the first step and after every step.
    pub trace: Vec<f64>,
}

/// Relative slack of the monotonicity check.
const DESCENT_SLACK: f64 = 1e-9;

/// Subspace MM on `F_γ` from `x_init` until `‖∇F_γ‖ < eps` or `max_inner` steps.
pub fn mm_inner_solve(x_init: &Volume3D, cost: &PenalizedCost<'_>, eps: f64, max_inner: usize) -> Result<InnerResult> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    let p = cost.prob;
    p.y.ensure_same_dims(x_init)?;
    let needs_blur = cost.uses_data();
    let mut x = x_init.data().to_vec();
    let mut hx = if needs_blur { p.blur(&x) } else { Vec::new() };
    let mut e = cost.evaluate(&x, &hx);
    let mut gn = norm(&e.grad);
    let mut trace = vec![e.parts.total];
    let mut prev_step: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut iterations = 0;
    while gn >= eps && iterations < max_inner {
        iterations += 1;
        let d1: Vec<f64> = e.grad.par_iter().map(|g| -g).collect();
        let hd1 = if needs_blur { p.blur(&d1) } else { Vec::new() };
        let (dirs, hdirs): (Vec<&[f64]>, Vec<&[f64]>) = match &prev_step {
            Some((d2, hd2)) if norm(d2) > 0.0 => (vec![&d1, d2], vec![&hd1, hd2]),
            _ => (vec![&d1], vec![&hd1]),
        };
        let bmat = cost.subspace_curvature(&e, &dirs, &hdirs);
        let rhs: Vec<f64> = dirs.iter().map(|d| -dot(d, &e.grad)).collect();
        let u = pinv_solve(&bmat, &rhs);
        let mut step = vec![0.0; x.len()];
        let mut hstep = if needs_blur { vec![0.0; x.len()] } else { Vec::new() };
        for (k, uk) in u.iter().enumerate() {
            step.par_iter_mut().zip(dirs[k].par_iter()).for_each(|(s, d)| *s += uk * d);
            if needs_blur {
                hstep.par_iter_mut().zip(hdirs[k].par_iter()).for_each(|(s, d)| *s += uk * d);
            }
        }
        x.par_iter_mut().zip(step.par_iter()).for_each(|(a, s)| *a += s);
        if needs_blur {
            hx.par_iter_mut().zip(hstep.par_iter()).for_each(|(a, s)| *a += s);
        }
        let e_new = cost.evaluate(&x, &hx);
        let (fo, fn_) = (e.parts.total, e_new.parts.total);
        trace.push(fn_);
        if !(fn_ <= fo + DESCENT_SLACK * fo.abs().max(1.0)) {
            return Err(Error::Descent { solver: "mm_inner_solve", iteration: iterations, previous: fo, current: fn_, trace });
        }
        e = e_new;
        gn = norm(&e.grad);
        prev_step = Some((step, hstep));
    }
    Ok(InnerResult { x: x_init.with_data(x)?, iterations, grad_norm: gn, parts: e.parts, trace })
}

/// Penalty and precision sequences `γ_j = (c j)^p`, `ε_j = e / γ_j^q`, `j = 1, 2, …`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltySchedule {
    pub gamma_scale: f64,
    pub gamma_power: f64,
    pub eps_numerator: f64,
    pub eps_power: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for PenaltySchedule {
    fn default() -> Self {
        Self::simulation()
    }
}

impl PenaltySchedule {
    /// `γ_j = (2j)²`, `ε_j = 10⁵/γ_j^0.75`.
    pub fn simulation() -> Self {
        Self { gamma_scale: 2.0, gamma_power: 2.0, eps_numerator: 1e5, eps_power: 0.75, max_outer: 40, max_inner: 100 }
    }

    /// `γ_j = (1.5j)^1.2`, `ε_j = 10⁵/γ_j^0.5`.
    pub fn real_data() -> Self {
        Self { gamma_scale: 1.5, gamma_power: 1.2, eps_numerator: 1e5, eps_power: 0.5, max_outer: 40, max_inner: 100 }
    }

    pub fn gamma(&self, j: usize) -> f64 {
        (self.gamma_scale * j as f64).powf(self.gamma_power)
    }

    pub fn eps(&self, j: usize) -> f64 {
        self.eps_numerator / self.gamma(j).powf(self.eps_power)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma_scale > 0.0 && self.gamma_power > 0.0 && self.eps_numerator > 0.0 && self.eps_power > 0.0;
        if !ok || self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::InvalidParameter(
                "schedule needs positive scale, powers and numerator, and non-zero iteration limits".into(),
            ));
        }
        Ok(())
    }
}

/// One outer iteration in the run log.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct OuterLog {
    pub j: usize,
    pub gamma: f64,
    pub eps: f64,
    pub inner_iterations: usize,
    #[serde(rename = "F_gamma")]
    pub f_gamma: f64,
    pub g: f64,
    pub f: f64,
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R2")]
    pub r2: f64,
    pub grad_norm: f64,
    pub min_x: f64,
}

/// Output of [`pmms_run`].
#[derive(Debug, Clone)]
pub struct PmmsRun {
    pub x: Volume3D,
    pub log: Vec<OuterLog>,
}

impl PmmsRun {
    /// `max(f(x) − B, 0)` at the final iterate.
    pub fn constraint_excess(&self, prob: &RestorationProblem) -> Result<f64> {
        Ok((prob.data_fidelity(&self.x)? - prob.bound).max(0.0))
    }

    pub fn write_log_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.log {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io("<pmms log>", e))?;
        Ok(())
    }
}

/// Outer penalty loop; each inner solve is warm-started at the previous iterate.
/// `on_outer` is called after every outer iteration with the current iterate.
pub fn pmms_run_with(
    prob: &RestorationProblem,
    objective: Objective,
    schedule: &PenaltySchedule,
    x0: &Volume3D,
    mut on_outer: impl FnMut(&OuterLog, &Volume3D),
) -> Result<PmmsRun> {
    schedule.validate()?;
    let mut x = x0.clone();
    let mut log = Vec::with_capacity(schedule.max_outer);
    for j in 1..=schedule.max_outer {
        let gamma = schedule.gamma(j);
        let eps = schedule.eps(j);
        let cost = PenalizedCost { prob, gamma, objective, regularizer: Regularizer::SmoothTv };
        let res = mm_inner_solve(&x, &cost, eps, schedule.max_inner)?;
        x = res.x;
        let row = OuterLog {
            j,
            gamma,
            eps,
            inner_iterations: res.iterations,
            f_gamma: res.parts.total,
            g: res.parts.g,
            f: res.parts.f,
            r1: res.parts.r1,
            r2: res.parts.r2,
            grad_norm: res.grad_norm,
            min_x: x.min(),
        };
        log::debug!("pmms j={j} gamma={gamma:.3e} eps={eps:.3e} inner={} f={:.4e} min={:.3e}", row.inner_iterations, row.f, row.min_x);
        on_outer(&row, &x);
        log.push(row);
    }
    Ok(PmmsRun { x, log })
}

/// Constrained restoration from `x0` (usually `y`).
pub fn pmms_run(prob: &RestorationProblem, schedule: &PenaltySchedule, x0: &Volume3D) -> Result<PmmsRun> {
    pmms_run_with(prob, Objective::Constrained, schedule, x0, |_, _| {})
}
