//! Locating isolated beads in a multi-bead acquisition and averaging per-bead fits.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Fft3d;
use crate::volume::{Dims, Volume3D};

/// Wiener filter with a flat signal prior: each coefficient is scaled by
/// `|Y|² / (|Y|² + nsr · mean|Y|²)`.
pub fn wiener_denoise(y: &Volume3D, nsr: f64) -> Result<Volume3D> {
    if !(nsr >= 0.0) {
        return Err(Error::InvalidParameter(format!("nsr must be >= 0, got {nsr}")));
    }
    if nsr == 0.0 {
        return Ok(y.clone());
    }
    if nsr.is_infinite() {
        return Ok(y.map(|_| 0.0));
    }
    let fft = Fft3d::new(y.dims());
    let mut spec = fft.forward_real(y.data());
    let mean_power = spec.par_iter().map(|c| c.norm_sqr()).sum::<f64>() / spec.len() as f64;
    let floor = nsr * mean_power;
    spec.par_iter_mut().for_each(|c| {
        let p = c.norm_sqr();
        *c *= if p + floor > 0.0 { p / (p + floor) } else { 0.0 };
    });
    fft.inverse(&mut spec);
    y.with_data(spec.into_iter().map(|c| c.re).collect())
}

/// Settings of [`extract_regions`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    /// Fraction of the volume maximum used as binarization threshold.
    pub threshold_frac: f64,
    pub min_voxels: usize,
    pub max_voxels: usize,
    /// Box dilation per axis, in voxels.
    pub margin_voxels: [usize; 3],
    /// Wiener noise-to-signal ratio applied before thresholding; 0 disables it.
    pub wiener_nsr: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { threshold_frac: 0.3, min_voxels: 20, max_voxels: 1_000_000, margin_voxels: [10, 10, 20], wiener_nsr: 1.0 }
    }
}

/// One connected supra-threshold component and its dilated bounding box.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeadRegion {
    /// Inclusive lower corner of the dilated box.
    pub lo: [usize; 3],
    /// Inclusive upper corner of the dilated box.
    pub hi: [usize; 3],
    /// Intensity-weighted centroid of the component, in micrometres from voxel (0, 0, 0).
    pub centroid_um: [f64; 3],
    pub voxels: usize,
}

impl BeadRegion {
    pub fn contains(&self, v: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= v[a] && v[a] <= self.hi[a])
    }

    pub fn overlaps(&self, other: &BeadRegion) -> bool {
        (0..3).all(|a| self.lo[a] <= other.hi[a] && other.lo[a] <= self.hi[a])
    }

    /// Centroid rounded to the nearest voxel.
    pub fn centroid_voxel(&self, voxel: [f64; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| (self.centroid_um[a] / voxel[a]).round().max(0.0) as usize)
    }
}

/// 26-connected components of `{y > threshold_frac · max(y)}` with sizes in
/// `[min_voxels, max_voxels]`, boxes dilated by `margin_voxels` and clipped to the volume.
/// Regions are ordered by their first voxel in storage order.
pub fn extract_regions(y: &Volume3D, threshold_frac: f64, min_voxels: usize, max_voxels: usize, margin_voxels: [usize; 3]) -> Result<Vec<BeadRegion>> {
    if !(threshold_frac > 0.0 && threshold_frac < 1.0) {
        return Err(Error::InvalidParameter(format!("threshold_frac must lie in (0, 1), got {threshold_frac}")));
    }
    let d = y.dims();
    let max = y.max();
    if !(max > 0.0) {
        return Ok(Vec::new());
    }
    let thr = threshold_frac * max;
    let mask: Vec<bool> = y.data().par_iter().map(|&v| v > thr).collect();
    let mut seen = vec![false; mask.len()];
    let voxel = y.voxel_size().0;
    let dims = d.as_array();
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut count = 0usize;
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut wsum = 0.0;
        let mut acc = [0.0; 3];
        while let Some(n) = queue.pop_front() {
            let (i, j, k) = d.coords(n);
            let c = [i, j, k];
            count += 1;
            let w = y.data()[n];
            wsum += w;
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
                acc[a] += w * c[a] as f64;
            }
            for dk in -1isize..=1 {
                for dj in -1isize..=1 {
                    for di in -1isize..=1 {
                        let q = [i as isize + di, j as isize + dj, k as isize + dk];
                        if (0..3).any(|a| q[a] < 0 || q[a] >= dims[a] as isize) {
                            continue;
                        }
                        let m = d.index(q[0] as usize, q[1] as usize, q[2] as usize);
                        if mask[m] && !seen[m] {
                            seen[m] = true;
                            queue.push_back(m);
                        }
                    }
                }
            }
        }
        if count < min_voxels || count > max_voxels {
            continue;
        }
        let lo_d = [0, 1, 2].map(|a| lo[a].saturating_sub(margin_voxels[a]));
        let hi_d = [0, 1, 2].map(|a| (hi[a] + margin_voxels[a]).min(dims[a] - 1));
        let centroid_um = [0, 1, 2].map(|a| acc[a] / wsum * voxel[a]);
        out.push(BeadRegion { lo: lo_d, hi: hi_d, centroid_um, voxels: count });
    }
    Ok(out)
}

/// Region table: `index, x0, x1, y0, y1, z0, z1, centroid_x_um, centroid_y_um, centroid_z_um, voxels`.
pub fn write_regions_csv<W: Write>(regions: &[BeadRegion], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "x0", "x1", "y0", "y1", "z0", "z1", "centroid_x_um", "centroid_y_um", "centroid_z_um", "voxels"])?;
    for (i, r) in regions.iter().enumerate() {
        w.write_record([
            i.to_string(),
            r.lo[0].to_string(),
            r.hi[0].to_string(),
            r.lo[1].to_string(),
            r.hi[1].to_string(),
            r.lo[2].to_string(),
            r.hi[2].to_string(),
            r.centroid_um[0].to_string(),
            r.centroid_um[1].to_string(),
            r.centroid_um[2].to_string(),
            r.voxels.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<regions>", e))?;
    Ok(())
}

/// Fixed-size crop whose [`Dims::center`] voxel is `centre`; `None` if it does not fit.
pub fn centered_crop(y: &Volume3D, centre: [usize; 3], size: Dims) -> Option<Volume3D> {
    let (ci, cj, ck) = size.center();
    let c = [ci, cj, ck];
    let s = size.as_array();
    let d = y.dims().as_array();
    let mut lo = [0; 3];
    let mut hi = [0; 3];
    for a in 0..3 {
        lo[a] = centre[a].checked_sub(c[a])?;
        hi[a] = lo[a] + s[a] - 1;
        if hi[a] >= d[a] {
            return None;
        }
    }
    y.crop(lo, hi).ok()
}

/// Parameters `(α, β, D)` of one fitted bead model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsfModel {
    pub alpha: f64,
    pub beta: f64,
    pub d: Matrix3<f64>,
}

/// Arithmetic mean of `α`, `β` and entrywise mean of `D`.
pub fn average_psf_models(estimates: &[PsfModel]) -> Result<PsfModel> {
    if estimates.is_empty() {
        return Err(Error::NoRegions);
    }
    let n = estimates.len() as f64;
    let alpha = estimates.iter().map(|e| e.alpha).sum::<f64>() / n;
    let beta = estimates.iter().map(|e| e.beta).sum::<f64>() / n;
    let d = estimates.iter().fold(Matrix3::zeros(), |acc, e| acc + e.d) / n;
    Ok(PsfModel { alpha, beta, d: 0.5 * (d + d.transpose()) })
}
