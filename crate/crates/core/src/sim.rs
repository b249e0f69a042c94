//! Synthetic data: bead acquisitions, restoration phantoms and noise generators.
//!
//! Noise is drawn from counter-based streams (one ChaCha stream per block of voxels),
//! so results depend only on the seed, never on thread scheduling.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{convolve_circular, convolve_zeropad};
use crate::error::{Error, Result};
use crate::noise::{sigma, NoiseParams};
use crate::psf::{gaussian_kernel, genexp_kernel, sphere_bead, spd_from_euler, BeadSpec, EulerDecomp, GaussianPsfParams, GenExpParams};
use crate::volume::{Dims, Grid, Kernel3D, Volume3D, VoxelSize};

const BLOCK: usize = 4096;

/// `len` standard normal draws, reproducible for a given seed.
pub fn standard_normal(len: usize, seed: u64) -> Vec<f64> {
    let mut out = vec![0.0; len];
    out.par_chunks_mut(BLOCK).enumerate().for_each(|(b, chunk)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        for v in chunk {
            *v = rng.sample(StandardNormal);
        }
    });
    out
}

/// Standard deviation of white noise giving `snr_db` against `clean`.
pub fn noise_std_for_snr(clean: &Volume3D, snr_db: f64) -> f64 {
    let power = clean.norm_sq() / clean.len() as f64;
    (power / 10f64.powf(snr_db / 10.0)).sqrt()
}

/// Adds white Gaussian noise at the requested SNR.
pub fn add_white_noise(clean: &Volume3D, snr_db: f64, seed: u64) -> Volume3D {
    let sd = noise_std_for_snr(clean, snr_db);
    let n = standard_normal(clean.len(), seed);
    let data = clean.data().iter().zip(&n).map(|(c, e)| c + sd * e).collect();
    clean.with_data(data).expect("same length")
}

/// Adds white Gaussian noise of a given variance.
pub fn add_gaussian_noise(clean: &Volume3D, variance: f64, seed: u64) -> Volume3D {
    let sd = variance.sqrt();
    let n = standard_normal(clean.len(), seed);
    let data = clean.data().iter().zip(&n).map(|(c, e)| c + sd * e).collect();
    clean.with_data(data).expect("same length")
}

/// `y = t + σ(t) n` with `σ(t)² = a t + b`.
pub fn add_heteroscedastic_noise(clean: &Volume3D, p: NoiseParams, seed: u64) -> Volume3D {
    let n = standard_normal(clean.len(), seed);
    let data = clean.data().iter().zip(&n).map(|(&c, e)| c + sigma(c, p) * e).collect();
    clean.with_data(data).expect("same length")
}

/// Ground truth of a single-bead calibration experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeadSetup {
    pub dims: [usize; 3],
    pub voxel_size_um: [f64; 3],
    pub bead_diameter_um: f64,
    pub theta: f64,
    pub phi: f64,
    pub eigs: [f64; 3],
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub snr_db: f64,
}

impl Default for BeadSetup {
    fn default() -> Self {
        Self {
            dims: [40, 40, 80],
            voxel_size_um: [0.05, 0.05, 0.1],
            bead_diameter_um: 1.0,
            theta: 5.0 * PI / 6.0,
            phi: PI / 6.0,
            eigs: [138.6, 138.6, 3.2],
            eta: 2.0,
            alpha: 0.1,
            beta: 1.0,
            snr_db: 10.0,
        }
    }
}

/// Simulated bead data.
#[derive(Debug, Clone)]
pub struct BeadData {
    pub bead: Volume3D,
    pub kernel: Kernel3D,
    pub clean: Volume3D,
    pub noisy: Volume3D,
}

impl BeadSetup {
    pub fn grid(&self) -> Result<Grid> {
        let [rx, ry, rz] = self.voxel_size_um;
        Ok(Grid::new(Dims::from_array(self.dims), VoxelSize::new(rx, ry, rz)?))
    }

    pub fn precision(&self) -> nalgebra::Matrix3<f64> {
        spd_from_euler(&EulerDecomp::new(self.theta, self.phi, self.eigs))
    }

    /// Bead, true kernel, noise-free and noisy observation (circular model).
    pub fn simulate(&self, seed: u64) -> Result<BeadData> {
        let grid = self.grid()?;
        let bead = sphere_bead(&BeadSpec::new(self.bead_diameter_um)?, &grid)?;
        let kernel = genexp_kernel(&GenExpParams::new(self.precision(), self.eta)?, &grid)?;
        let blurred = convolve_circular(&bead, &kernel)?;
        let clean = blurred.map(|v| self.alpha + self.beta * v);
        let noisy = add_white_noise(&clean, self.snr_db, seed);
        Ok(BeadData { bead, kernel, clean, noisy })
    }
}

/// Ground truth of a restoration experiment: phantom, Gaussian blur and heteroscedastic noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestorationSetup {
    pub dims: [usize; 3],
    pub voxel_size_um: [f64; 3],
    pub theta: f64,
    pub phi: f64,
    pub eigs: [f64; 3],
    pub alpha: f64,
    pub noise: NoiseParams,
    /// Seed of the phantom layout, independent of the noise seed.
    pub phantom_seed: u64,
}

impl Default for RestorationSetup {
    fn default() -> Self {
        Self {
            dims: [64, 64, 32],
            voxel_size_um: [0.05, 0.05, 0.05],
            theta: 5.0 * PI / 6.0,
            phi: 0.0,
            eigs: [50.0, 50.0, 20.0],
            alpha: 0.0,
            noise: NoiseParams { a: 0.01, b: 1e-5 },
            phantom_seed: 7,
        }
    }
}

/// Phantom, blur kernel and degraded observation.
#[derive(Debug, Clone)]
pub struct RestorationData {
    pub truth: Volume3D,
    pub kernel: Kernel3D,
    pub degraded: Volume3D,
}

impl RestorationSetup {
    pub fn grid(&self) -> Result<Grid> {
        let [rx, ry, rz] = self.voxel_size_um;
        Ok(Grid::new(Dims::from_array(self.dims), VoxelSize::new(rx, ry, rz)?))
    }

    /// `y = Hx̄ + α + σ(Hx̄) n` with zero-padded blur.
    pub fn simulate(&self, seed: u64) -> Result<RestorationData> {
        let grid = self.grid()?;
        let truth = restoration_phantom(grid.dims(), grid.voxel_size(), self.phantom_seed);
        let prec = spd_from_euler(&EulerDecomp::new(self.theta, self.phi, self.eigs));
        let kernel = gaussian_kernel(&GaussianPsfParams::new(prec)?, &grid, true)?;
        let blurred = convolve_zeropad(&truth, &kernel)?;
        let noise = NoiseParams::new(self.noise.a, self.noise.b)?;
        let degraded = add_heteroscedastic_noise(&blurred, noise, seed).map(|v| v + self.alpha);
        Ok(RestorationData { truth, kernel, degraded })
    }
}

/// Places identical blurred beads at the given voxel centres of a larger volume.
///
/// The kernel is defined on a `crop`-sized grid; each bead is rendered on that grid and
/// added at its centre, then the shared background and white noise (variance `noise_var`) are applied.
pub fn multi_bead_volume(
    dims: Dims,
    voxel: VoxelSize,
    crop: Dims,
    centres: &[[usize; 3]],
    setup: &BeadSetup,
    noise_var: f64,
    seed: u64,
) -> Result<Volume3D> {
    let crop_grid = Grid::new(crop, voxel);
    let bead = sphere_bead(&BeadSpec::new(setup.bead_diameter_um)?, &crop_grid)?;
    let kernel = genexp_kernel(&GenExpParams::new(setup.precision(), setup.eta)?, &crop_grid)?;
    let blurred = convolve_zeropad(&bead, &kernel)?;
    let mut out = Volume3D::filled(dims, voxel, setup.alpha);
    let (ci, cj, ck) = crop.center();
    for c in centres {
        for k in 0..crop.nz {
            for j in 0..crop.ny {
                for i in 0..crop.nx {
                    let gi = c[0] as isize + i as isize - ci as isize;
                    let gj = c[1] as isize + j as isize - cj as isize;
                    let gk = c[2] as isize + k as isize - ck as isize;
                    if gi < 0 || gj < 0 || gk < 0 || gi >= dims.nx as isize || gj >= dims.ny as isize || gk >= dims.nz as isize {
                        continue;
                    }
                    let (gi, gj, gk) = (gi as usize, gj as usize, gk as usize);
                    let v = out.get(gi, gj, gk) + setup.beta * blurred.get(i, j, k);
                    out.set(gi, gj, gk, v);
                }
            }
        }
    }
    Ok(if noise_var > 0.0 { add_gaussian_noise(&out, noise_var, seed) } else { out })
}

/// Piecewise-smooth test object with values in `[0, 1]`: smooth blobs, a graded slab,
/// thin tubes and sharp-edged cubes on a faint background.
pub fn restoration_phantom(dims: Dims, voxel: VoxelSize, seed: u64) -> Volume3D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.as_array().map(|v| v as f64);
    let rand_pt = |rng: &mut ChaCha8Rng| [rng.random_range(0.15..0.85) * n[0], rng.random_range(0.15..0.85) * n[1], rng.random_range(0.2..0.8) * n[2]];

    struct Blob {
        c: [f64; 3],
        r: [f64; 3],
        amp: f64,
    }
    let blobs: Vec<Blob> = (0..6)
        .map(|_| Blob {
            c: rand_pt(&mut rng),
            r: [rng.random_range(0.06..0.14) * n[0], rng.random_range(0.06..0.14) * n[1], rng.random_range(0.1..0.25) * n[2]],
            amp: rng.random_range(0.4..0.9),
        })
        .collect();
    let cubes: Vec<([f64; 3], f64, f64)> = (0..4)
        .map(|_| (rand_pt(&mut rng), rng.random_range(0.04..0.08) * n[0], rng.random_range(0.5..1.0)))
        .collect();
    let tubes: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.random_range(0.1..0.9) * n[1], rng.random_range(0.2..0.8) * n[2], rng.random_range(0.6..1.0)))
        .collect();

    let data: Vec<f64> = (0..dims.len())
        .into_par_iter()
        .map(|idx| {
            let (i, j, k) = dims.coords(idx);
            let p = [i as f64, j as f64, k as f64];
            let mut v = 0.05;
            for b in &blobs {
                let d2: f64 = (0..3).map(|a| ((p[a] - b.c[a]) / b.r[a]).powi(2)).sum();
                if d2 < 1.0 {
                    // smooth dome with a hard rim
                    v = f64::max(v, b.amp * (0.6 + 0.4 * (1.0 - d2)));
                }
            }
            for (c, half, amp) in &cubes {
                if (0..3).all(|a| (p[a] - c[a]).abs() <= *half * if a == 2 { 0.5 } else { 1.0 }) {
                    v = f64::max(v, *amp);
                }
            }
            for (cy, cz, amp) in &tubes {
                let d2 = (p[1] - cy).powi(2) + ((p[2] - cz) * 2.0).powi(2);
                if d2 <= 2.25 {
                    v = f64::max(v, *amp);
                }
            }
            // graded slab along x in the lower z quarter
            if p[2] < 0.2 * n[2] && p[1] > 0.6 * n[1] {
                v = f64::max(v, 0.2 + 0.6 * p[0] / n[0]);
            }
            v.min(1.0)
        })
        .collect();
    Volume3D::new(dims, voxel, data).expect("length matches")
}

/// Linear ramp along x between `lo` and `hi`.
pub fn ramp_phantom(dims: Dims, voxel: VoxelSize, lo: f64, hi: f64) -> Volume3D {
    let nx = dims.nx.max(2) as f64 - 1.0;
    Volume3D::from_fn(dims, voxel, |i, _, _| lo + (hi - lo) * i as f64 / nx)
}

/// Checks that a list of voxel centres is non-empty and inside `dims`.
pub fn validate_centres(dims: Dims, centres: &[[usize; 3]]) -> Result<()> {
    if centres.is_empty() {
        return Err(Error::InvalidParameter("no bead centres given".into()));
    }
    for c in centres {
        if c[0] >= dims.nx || c[1] >= dims.ny || c[2] >= dims.nz {
            return Err(Error::InvalidParameter(format!("bead centre {c:?} outside {dims}")));
        }
    }
    Ok(())
}
