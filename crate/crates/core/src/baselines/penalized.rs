use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::Padding;
use crate::error::{Error, Result};
use crate::metrics::snr_db;
use crate::pmms::{mm_inner_solve, Objective, PenalizedCost, PenaltySchedule, Regularizer, RestorationProblem};
use crate::volume::{Kernel3D, Volume3D};

/// Iteration budget of the penalized baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenalizedConfig {
    /// TV smoothing `δ`.
    pub delta: f64,
    /// Number of nonnegativity penalty levels `γ_j = (2j)²`.
    pub levels: usize,
    /// Inner iterations per level.
    pub inner_iters: usize,
    /// Inner stop on `‖∇F‖ < rel_tol·‖∇F(y)‖`.
    pub rel_tol: f64,
    pub padding: Padding,
}

impl Default for PenalizedConfig {
    fn default() -> Self {
        Self { delta: 0.1, levels: 10, inner_iters: 100, rel_tol: 1e-6, padding: Padding::Zero }
    }
}

/// Output of [`penalized_restore`].
#[derive(Debug, Clone)]
pub struct PenalizedResult {
    pub x: Volume3D,
    /// Inner iterations summed over the penalty levels.
    pub iterations: usize,
}

/// Minimizes `‖Hx − y + α‖² + χ g(x)` over `x ≥ 0`, the sign constraint handled by an
/// exterior penalty path, starting from `y`.
pub fn penalized_restore(y: &Volume3D, h: &Kernel3D, alpha: f64, chi: f64, cfg: &PenalizedConfig) -> Result<PenalizedResult> {
    if !(chi >= 0.0) || !chi.is_finite() {
        return Err(Error::InvalidParameter(format!("chi must be finite and >= 0, got {chi}")));
    }
    if cfg.levels == 0 || cfg.inner_iters == 0 || !(cfg.rel_tol > 0.0) {
        return Err(Error::InvalidParameter("penalized restore needs levels, inner_iters and rel_tol > 0".into()));
    }
    let prob = RestorationProblem::unweighted(y.clone(), h, alpha, cfg.delta, cfg.padding)?;
    let objective = Objective::Penalized { chi };
    let sched = PenaltySchedule::simulation();
    let g0 = PenalizedCost { prob: &prob, gamma: sched.gamma(1), objective, regularizer: Regularizer::SmoothTv }.gradient(y);
    let eps = (cfg.rel_tol * g0.norm_sq().sqrt()).max(f64::MIN_POSITIVE);
    let mut x = y.clone();
    let mut iterations = 0;
    for j in 1..=cfg.levels {
        let cost = PenalizedCost { prob: &prob, gamma: sched.gamma(j), objective, regularizer: Regularizer::SmoothTv };
        let res = mm_inner_solve(&x, &cost, eps, cfg.inner_iters)?;
        iterations += res.iterations;
        x = res.x;
    }
    Ok(PenalizedResult { x, iterations })
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo) || n == 0 {
        return Err(Error::InvalidParameter(format!("log grid needs 0 < lo <= hi and n > 0, got {lo}, {hi}, {n}")));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect())
}

/// One row of a χ-sweep.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SweepRow {
    pub chi: f64,
    pub snr_db: f64,
    pub iterations: usize,
    pub runtime_s: f64,
}

/// Penalized restorations for every `chi`, scored against `truth`; runs in parallel.
pub fn chi_sweep(
    y: &Volume3D,
    truth: &Volume3D,
    h: &Kernel3D,
    alpha: f64,
    chis: &[f64],
    cfg: &PenalizedConfig,
) -> Result<Vec<SweepRow>> {
    chis.par_iter()
        .map(|&chi| {
            let t0 = Instant::now();
            let res = penalized_restore(y, h, alpha, chi, cfg)?;
            Ok(SweepRow { chi, snr_db: snr_db(truth, &res.x)?, iterations: res.iterations, runtime_s: t0.elapsed().as_secs_f64() })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<sweep csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::restoration_phantom;
    use crate::volume::{Dims, VoxelSize};

    fn dirac(d: Dims, r: VoxelSize) -> Kernel3D {
        Kernel3D::dirac(d, r)
    }

    fn circ() -> PenalizedConfig {
        PenalizedConfig { padding: Padding::Circular, ..Default::default() }
    }

    fn variance(v: &Volume3D) -> f64 {
        let m = v.sum() / v.len() as f64;
        v.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    }

    #[test]
    fn zero_chi_with_identity_blur_returns_data() {
        let d = Dims::new(8, 8, 6);
        let r = VoxelSize::isotropic(0.1).unwrap();
        let y = restoration_phantom(d, r, 3);
        let res = penalized_restore(&y, &dirac(d, r), 0.0, 0.0, &circ()).unwrap();
        let err = y.data().iter().zip(res.x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn huge_chi_flattens() {
        let d = Dims::new(8, 8, 6);
        let r = VoxelSize::isotropic(0.1).unwrap();
        let y = restoration_phantom(d, r, 4);
        let cfg = PenalizedConfig { inner_iters: 400, ..circ() };
        let res = penalized_restore(&y, &dirac(d, r), 0.0, 1e8, &cfg).unwrap();
        assert!(variance(&res.x) < 1e-6 * variance(&y), "{} vs {}", variance(&res.x), variance(&y));
    }

    #[test]
    fn negative_chi_rejected() {
        let d = Dims::new(4, 4, 4);
        let r = VoxelSize::isotropic(0.1).unwrap();
        let y = Volume3D::zeros(d, r);
        assert!(penalized_restore(&y, &dirac(d, r), 0.0, -1.0, &circ()).is_err());
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(1e-3, 1e1, 5).unwrap();
        assert_eq!(g.len(), 5);
        assert!((g[0] - 1e-3).abs() < 1e-15 && (g[4] - 10.0).abs() < 1e-12);
        assert!((g[2] - 0.1).abs() < 1e-12);
        assert!(log_grid(0.0, 1.0, 3).is_err());
    }
}
