//! Multi-bead PSF calibration: extraction, per-bead GENTLE fits and averaging.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beads::{average_psf_models, centered_crop, extract_regions, wiener_denoise, BeadRegion, ExtractConfig, PsfModel};
use crate::error::{Error, Result};
use crate::gentle::{lambda_grid_search, run_gentle, GentleConfig, GentleState};
use crate::psf::{axis_angle_between, euler_decompose, gaussian_kernel, sphere_bead, BeadSpec, EulerDecomp, GaussianPsfParams};
use crate::volume::{Dims, Grid, Kernel3D, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    /// Size of the crop fitted around each bead centroid.
    pub crop: [usize; 3],
    pub bead_diameter_um: f64,
    /// One value runs GENTLE directly; several run the criterion-based search.
    pub lambdas: Vec<f64>,
    pub gentle: GentleConfig,
    pub extract: ExtractConfig,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            crop: [24, 24, 48],
            bead_diameter_um: 1.0,
            lambdas: vec![100.0],
            gentle: GentleConfig { max_iters: 2000, gamma_d: 1e4, ..Default::default() },
            extract: ExtractConfig::default(),
        }
    }
}

/// Fit of one bead.
#[derive(Debug, Clone)]
pub struct BeadFit {
    pub region: BeadRegion,
    pub lambda: f64,
    pub model: PsfModel,
    pub euler: EulerDecomp,
    pub fwhm_um: [f64; 3],
    pub iterations: usize,
    pub converged: bool,
    pub kernel: Kernel3D,
}

/// One row of the per-bead report.
#[derive(Debug, Clone, Serialize)]
pub struct BeadReportRow {
    pub bead: usize,
    pub cx_um: f64,
    pub cy_um: f64,
    pub cz_um: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub fwhm_x_um: f64,
    pub fwhm_y_um: f64,
    pub fwhm_z_um: f64,
    pub theta: f64,
    pub phi: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub fits: Vec<BeadFit>,
    pub average: PsfModel,
    pub average_euler: EulerDecomp,
    /// Gaussian kernel of the averaged precision on the crop grid.
    pub kernel: Kernel3D,
}

impl Calibration {
    pub fn rows(&self) -> Vec<BeadReportRow> {
        self.fits
            .iter()
            .enumerate()
            .map(|(i, f)| BeadReportRow {
                bead: i,
                cx_um: f.region.centroid_um[0],
                cy_um: f.region.centroid_um[1],
                cz_um: f.region.centroid_um[2],
                lambda: f.lambda,
                alpha: f.model.alpha,
                beta: f.model.beta,
                fwhm_x_um: f.fwhm_um[0],
                fwhm_y_um: f.fwhm_um[1],
                fwhm_z_um: f.fwhm_um[2],
                theta: f.euler.theta,
                phi: f.euler.phi,
                iterations: f.iterations,
                converged: f.converged,
            })
            .collect()
    }

    pub fn write_report_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in self.rows() {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io("<psf report>", e))?;
        Ok(())
    }

    /// `(max − min) / mean` of each FWHM axis over the beads.
    pub fn fwhm_spread(&self) -> [f64; 3] {
        let fw: Vec<[f64; 3]> = self.fits.iter().map(|f| f.fwhm_um).collect();
        relative_spread(&fw)
    }

    /// Largest angle between the `Z'` axes of two beads.
    pub fn axis_spread(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, a) in self.fits.iter().enumerate() {
            for b in &self.fits[i + 1..] {
                worst = worst.max(axis_angle_between(&a.euler, &b.euler));
            }
        }
        worst
    }
}

pub fn relative_spread(values: &[[f64; 3]]) -> [f64; 3] {
    [0, 1, 2].map(|a| {
        let v: Vec<f64> = values.iter().map(|x| x[a]).collect();
        let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
        if v.is_empty() { 0.0 } else { (hi - lo) / mean }
    })
}

/// Locates beads in `y` with the extraction settings of `cfg`.
pub fn locate_beads(y: &Volume3D, cfg: &ExtractConfig) -> Result<Vec<BeadRegion>> {
    let z = wiener_denoise(y, cfg.wiener_nsr)?;
    extract_regions(&z, cfg.threshold_frac, cfg.min_voxels, cfg.max_voxels, cfg.margin_voxels)
}

/// GENTLE on one bead crop `y` with the ideal bead centred in the crop.
pub fn fit_bead(y: &Volume3D, cfg: &CalibrationConfig) -> Result<(f64, crate::gentle::GentleRun)> {
    let grid = y.grid();
    let x = sphere_bead(&BeadSpec::new(cfg.bead_diameter_um)?, &grid)?;
    let init = GentleState::initial(&grid, cfg.gentle.alpha_bounds[0], 1.0_f64.clamp(cfg.gentle.beta_bounds[0], cfg.gentle.beta_bounds[1]));
    match cfg.lambdas.as_slice() {
        [] => Err(Error::InvalidParameter("lambda list is empty".into())),
        [lambda] => {
            let c = GentleConfig { lambda: *lambda, ..cfg.gentle.clone() };
            Ok((*lambda, run_gentle(y, &x, &c, init)?))
        }
        many => {
            let (best, _) = lambda_grid_search(y, &x, &cfg.gentle, many, &init)?;
            Ok((best.lambda, best.run))
        }
    }
}

/// Full calibration of a multi-bead volume. Beads whose crop leaves the volume are skipped.
pub fn calibrate(y: &Volume3D, cfg: &CalibrationConfig) -> Result<Calibration> {
    let regions = locate_beads(y, &cfg.extract)?;
    if regions.is_empty() {
        return Err(Error::NoRegions);
    }
    let crop = Dims::from_array(cfg.crop);
    let voxel = y.voxel_size().0;
    let jobs: Vec<(BeadRegion, Volume3D)> = regions
        .into_iter()
        .filter_map(|r| {
            let c = centered_crop(y, r.centroid_voxel(voxel), crop);
            if c.is_none() {
                log::warn!("bead at {:?} µm too close to the border for a {crop} crop; skipped", r.centroid_um);
            }
            c.map(|c| (r, c))
        })
        .collect();
    if jobs.is_empty() {
        return Err(Error::NoRegions);
    }
    let eps1 = cfg.gentle.eps1;
    let fits = jobs
        .into_par_iter()
        .map(|(region, sub)| {
            let (lambda, run) = fit_bead(&sub, cfg)?;
            let s = run.state;
            let model = PsfModel { alpha: s.alpha, beta: s.beta, d: s.d };
            let euler = euler_decompose(&s.precision(eps1))?;
            Ok(BeadFit {
                region,
                lambda,
                model,
                fwhm_um: euler.fwhm()?,
                euler,
                iterations: run.trace.len() - 1,
                converged: run.converged,
                kernel: s.h,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let models: Vec<PsfModel> = fits.iter().map(|f| f.model).collect();
    let average = average_psf_models(&models)?;
    let prec = average.d + nalgebra::Matrix3::identity() * eps1;
    let kernel = gaussian_kernel(&GaussianPsfParams::new(prec)?, &Grid::new(crop, y.voxel_size()), true)?;
    Ok(Calibration { fits, average, average_euler: euler_decompose(&prec)?, kernel })
}
