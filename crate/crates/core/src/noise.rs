//! Heteroscedastic noise model `σ(t)² = a t + b` and its estimation from one volume.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, Volume3D};

/// Affine variance law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    pub a: f64,
    pub b: f64,
}

impl NoiseParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise parameters must be finite and >= 0, got a={a}, b={b}")));
        }
        Ok(Self { a, b })
    }
}

/// `√(a t + b)` for `t ≥ 0`, else 0.
pub fn sigma(t: f64, p: NoiseParams) -> f64 {
    if t >= 0.0 {
        (p.a * t + p.b).sqrt()
    } else {
        0.0
    }
}

/// Mean over an `s×s×s` window with symmetric (edge-repeating) boundary handling.
pub fn uniform_smooth(y: &Volume3D, s: usize) -> Result<Volume3D> {
    if s.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("smoothing size must be odd and >= 1, got {s}")));
    }
    if s == 1 {
        return Ok(y.clone());
    }
    let d = y.dims();
    let mut data = y.data().to_vec();
    for axis in 0..3 {
        data = box_pass(&data, d, axis, s);
    }
    y.with_data(data)
}

/// Symmetric reflection of an index into `[0, n)`: `… 1 0 | 0 1 … n-1 | n-1 n-2 …`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn box_pass(src: &[f64], d: Dims, axis: usize, s: usize) -> Vec<f64> {
    let dims = d.as_array();
    let n = dims[axis];
    let stride = match axis {
        0 => 1,
        1 => d.nx,
        _ => d.nx * d.ny,
    };
    let half = (s / 2) as isize;
    let inv = 1.0 / s as f64;
    let mut out = vec![0.0; src.len()];
    // One line per (other two coordinates); lines are independent.
    let lines: Vec<usize> = (0..src.len()).filter(|&idx| (idx / stride) % n == 0).collect();
    let results: Vec<(usize, Vec<f64>)> = lines
        .par_iter()
        .map(|&start| {
            let line: Vec<f64> = (0..n).map(|t| src[start + t * stride]).collect();
            let vals = (0..n as isize)
                .map(|t| (-half..=half).map(|o| line[reflect(t + o, n)]).sum::<f64>() * inv)
                .collect();
            (start, vals)
        })
        .collect();
    for (start, vals) in results {
        for (t, v) in vals.into_iter().enumerate() {
            out[start + t * stride] = v;
        }
    }
    out
}

/// Result of [`lloyd_max_quantize`].
#[derive(Debug, Clone)]
pub struct Quantization {
    /// Sorted levels.
    pub levels: Vec<f64>,
    /// Level index of every input value.
    pub assignment: Vec<usize>,
    /// Mean squared error after each sweep.
    pub mse_history: Vec<f64>,
    /// `J` requested, before any reduction to the number of distinct values.
    pub requested: usize,
}

impl Quantization {
    pub fn mse(&self) -> f64 {
        self.mse_history.last().copied().unwrap_or(0.0)
    }
}

const LLOYD_MAX_SWEEPS: usize = 500;
const LLOYD_TOL: f64 = 1e-9;

/// Prefix sums over sorted values, shifted by their mean for conditioning.
struct Prefix {
    shift: f64,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl Prefix {
    fn new(sorted: &[f64]) -> Self {
        let shift = sorted.iter().sum::<f64>() / sorted.len() as f64;
        let mut s1 = Vec::with_capacity(sorted.len() + 1);
        let mut s2 = Vec::with_capacity(sorted.len() + 1);
        s1.push(0.0);
        s2.push(0.0);
        let (mut a, mut b) = (0.0, 0.0);
        for &v in sorted {
            let c = v - shift;
            a += c;
            b += c * c;
            s1.push(a);
            s2.push(b);
        }
        Self { shift, s1, s2 }
    }

    fn mean(&self, lo: usize, hi: usize) -> f64 {
        (self.s1[hi] - self.s1[lo]) / (hi - lo) as f64 + self.shift
    }

    /// `Σ (v − level)²` over `[lo, hi)`.
    fn sse(&self, lo: usize, hi: usize, level: f64) -> f64 {
        let n = (hi - lo) as f64;
        let c = level - self.shift;
        let s1 = self.s1[hi] - self.s1[lo];
        let s2 = self.s2[hi] - self.s2[lo];
        (s2 - 2.0 * c * s1 + n * c * c).max(0.0)
    }
}

/// 1-D Lloyd-Max (k-means) quantizer with quantile initialization.
pub fn lloyd_max_quantize(values: &[f64], j: usize) -> Result<Quantization> {
    if j == 0 {
        return Err(Error::InvalidParameter("number of levels must be >= 1".into()));
    }
    if values.is_empty() {
        return Err(Error::InvalidParameter("cannot quantize an empty set".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("cannot quantize non-finite values".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.par_sort_unstable_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let mut distinct = sorted.clone();
    distinct.dedup();
    let jj = j.min(distinct.len());
    if jj < j {
        log::warn!("Lloyd-Max: reducing J from {j} to {jj} distinct values");
    }

    let m = sorted.len();
    let mut levels: Vec<f64> = Vec::with_capacity(jj);
    for q in 0..jj {
        let pos = (((q as f64 + 0.5) / jj as f64) * m as f64) as usize;
        let mut v = sorted[pos.min(m - 1)];
        if let Some(&prev) = levels.last() {
            if v <= prev {
                let k = distinct.partition_point(|&u| u <= prev);
                v = distinct[k.min(distinct.len() - 1)];
            }
        }
        levels.push(v);
    }
    // If the forward fill ran out of distinct values, fill from the bottom instead.
    levels.dedup();
    if levels.len() < jj {
        levels = distinct.iter().copied().step_by((distinct.len() / jj).max(1)).take(jj).collect();
    }

    let prefix = Prefix::new(&sorted);
    let cuts = |levels: &[f64]| -> Vec<usize> {
        let mut c = vec![0usize];
        for w in levels.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            c.push(sorted.partition_point(|&v| v <= mid));
        }
        c.push(m);
        c
    };
    let mse_of = |levels: &[f64], c: &[usize]| -> f64 {
        (0..levels.len()).map(|q| if c[q + 1] > c[q] { prefix.sse(c[q], c[q + 1], levels[q]) } else { 0.0 }).sum::<f64>()
            / m as f64
    };

    let mut c = cuts(&levels);
    let mut history = vec![mse_of(&levels, &c)];
    for _ in 0..LLOYD_MAX_SWEEPS {
        let new: Vec<f64> =
            (0..levels.len()).map(|q| if c[q + 1] > c[q] { prefix.mean(c[q], c[q + 1]) } else { levels[q] }).collect();
        let moved = new.iter().zip(&levels).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        levels = new;
        c = cuts(&levels);
        let mse = mse_of(&levels, &c);
        let prev = *history.last().expect("non-empty");
        // Non-increasing in exact arithmetic; only prefix-sum rounding can violate it.
        history.push(mse.min(prev));
        if moved < LLOYD_TOL {
            break;
        }
    }

    let mut assignment = vec![0usize; m];
    for q in 0..levels.len() {
        for &idx in &order[c[q]..c[q + 1]] {
            assignment[idx] = q;
        }
    }
    Ok(Quantization { levels, assignment, mse_history: history, requested: j })
}

/// Statistics of one level set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegmentStats {
    pub j: usize,
    pub level: f64,
    #[serde(rename = "I_hat")]
    pub i_hat: f64,
    pub var_hat: f64,
    pub count: usize,
}

/// Settings of the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseEstimateConfig {
    /// Odd smoothing window size.
    pub s: usize,
    /// Number of quantization levels.
    #[serde(rename = "J")]
    pub j: usize,
    /// Weight the regression by segment size.
    pub weighted: bool,
    /// Segments smaller than this are left out of the regression.
    pub min_segment: usize,
}

impl Default for NoiseEstimateConfig {
    fn default() -> Self {
        Self { s: 5, j: 25, weighted: true, min_segment: 10 }
    }
}

/// Result of [`estimate_noise`].
#[derive(Debug, Clone)]
pub struct NoiseEstimate {
    pub params: NoiseParams,
    /// Unclamped regression coefficients.
    pub raw: (f64, f64),
    pub segments: Vec<SegmentStats>,
    /// Segments that entered the regression.
    pub used: Vec<bool>,
    pub r2: f64,
}

impl NoiseEstimate {
    /// Per-level table followed by a summary row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["j", "level", "I_hat", "var_hat", "count"])?;
        for s in &self.segments {
            w.write_record([s.j.to_string(), s.level.to_string(), s.i_hat.to_string(), s.var_hat.to_string(), s.count.to_string()])?;
        }
        w.write_record(["a", "b", "r2", "", ""])?;
        w.write_record([self.params.a.to_string(), self.params.b.to_string(), self.r2.to_string(), String::new(), String::new()])?;
        w.flush().map_err(|e| Error::io("<noise report>", e))?;
        Ok(())
    }
}

/// Estimates `(a, b)` with default weighting and segment filtering.
pub fn estimate_noise(y: &Volume3D, s: usize, j: usize) -> Result<NoiseEstimate> {
    estimate_noise_with(y, &NoiseEstimateConfig { s, j, ..Default::default() })
}

pub fn estimate_noise_with(y: &Volume3D, cfg: &NoiseEstimateConfig) -> Result<NoiseEstimate> {
    if cfg.j < 2 {
        return Err(Error::InvalidParameter(format!("J must be >= 2, got {}", cfg.j)));
    }
    let ys = uniform_smooth(y, cfg.s)?;
    let q = lloyd_max_quantize(ys.data(), cfg.j)?;
    let nl = q.levels.len();

    // Per-segment sums in a fixed order: first the mean, then centred second moments.
    let mut count = vec![0usize; nl];
    let mut sum = vec![0.0; nl];
    for (&a, &v) in q.assignment.iter().zip(y.data()) {
        count[a] += 1;
        sum[a] += v;
    }
    let mean: Vec<f64> = (0..nl).map(|k| if count[k] > 0 { sum[k] / count[k] as f64 } else { 0.0 }).collect();
    let mut ss = vec![0.0; nl];
    for (&a, &v) in q.assignment.iter().zip(y.data()) {
        ss[a] += (v - mean[a]) * (v - mean[a]);
    }
    let segments: Vec<SegmentStats> = (0..nl)
        .map(|k| SegmentStats {
            j: k + 1,
            level: q.levels[k],
            i_hat: mean[k],
            var_hat: if count[k] > 0 { ss[k] / count[k] as f64 } else { 0.0 },
            count: count[k],
        })
        .collect();
    let used: Vec<bool> = segments.iter().map(|s| s.count >= cfg.min_segment.max(1)).collect();
    let pts: Vec<(f64, f64, f64)> = segments
        .iter()
        .zip(&used)
        .filter(|(_, u)| **u)
        .map(|(s, _)| (s.i_hat, s.var_hat, if cfg.weighted { s.count as f64 } else { 1.0 }))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Degenerate(format!("only {} segment(s) large enough for the regression", pts.len())));
    }
    let (a, b, r2) = weighted_line_fit(&pts)?;
    Ok(NoiseEstimate { params: NoiseParams { a: a.max(0.0), b: b.max(0.0) }, raw: (a, b), segments, used, r2 })
}

/// Weighted least squares `v ≈ a t + b`; returns `(a, b, R²)`.
fn weighted_line_fit(pts: &[(f64, f64, f64)]) -> Result<(f64, f64, f64)> {
    let w: f64 = pts.iter().map(|p| p.2).sum();
    let tm = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / w;
    let vm = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / w;
    let stt: f64 = pts.iter().map(|p| p.2 * (p.0 - tm).powi(2)).sum();
    let stv: f64 = pts.iter().map(|p| p.2 * (p.0 - tm) * (p.1 - vm)).sum();
    let svv: f64 = pts.iter().map(|p| p.2 * (p.1 - vm).powi(2)).sum();
    if stt <= 0.0 {
        return Err(Error::Degenerate("segment intensities are all equal".into()));
    }
    let a = stv / stt;
    let b = vm - a * tm;
    let sres: f64 = pts.iter().map(|p| p.2 * (p.1 - a * p.0 - b).powi(2)).sum();
    let r2 = if svv > 0.0 { 1.0 - sres / svv } else { 1.0 };
    Ok((a, b, r2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VoxelSize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigma_values() {
        let p = NoiseParams::new(0.01, 1e-5).unwrap();
        assert_eq!(sigma(-1.0, p), 0.0);
        assert!((sigma(0.0, p) - 1e-5f64.sqrt()).abs() < 1e-18);
        assert!((sigma(1.0, p) - 0.100_049_99).abs() < 1e-8);
        assert!(NoiseParams::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn reflect_indices() {
        assert_eq!((-3..8).map(|i| reflect(i, 4)).collect::<Vec<_>>(), vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
    }

    #[test]
    fn smoothing_matches_direct_window_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = Dims::new(5, 4, 6);
        let v = Volume3D::from_fn(d, VoxelSize::isotropic(1.0).unwrap(), |_, _, _| rng.random_range(0.0..1.0));
        let s = uniform_smooth(&v, 3).unwrap();
        for (i, j, k) in [(0, 0, 0), (2, 1, 3), (4, 3, 5)] {
            let mut acc = 0.0;
            for dk in -1..=1isize {
                for dj in -1..=1isize {
                    for di in -1..=1isize {
                        acc += v.get(
                            reflect(i as isize + di, 5),
                            reflect(j as isize + dj, 4),
                            reflect(k as isize + dk, 6),
                        );
                    }
                }
            }
            assert!((s.get(i, j, k) - acc / 27.0).abs() < 1e-14);
        }
        assert!(uniform_smooth(&v, 4).is_err());
        assert_eq!(uniform_smooth(&v, 1).unwrap(), v);
    }

    #[test]
    fn lloyd_constant_input() {
        let q = lloyd_max_quantize(&[2.5; 100], 1).unwrap();
        assert_eq!(q.levels, vec![2.5]);
        assert_eq!(q.mse(), 0.0);
    }

    #[test]
    fn lloyd_two_clusters() {
        let v: Vec<f64> = (0..2000).map(|i| if i % 2 == 0 { 0.0 } else { 10.0 }).collect();
        let q = lloyd_max_quantize(&v, 2).unwrap();
        assert_eq!(q.levels, vec![0.0, 10.0]);
        for (a, x) in q.assignment.iter().zip(&v) {
            assert_eq!(*a, if *x == 0.0 { 0 } else { 1 });
        }
    }

    #[test]
    fn lloyd_reduces_j_to_distinct_count() {
        let q = lloyd_max_quantize(&[1.0, 2.0, 2.0, 3.0], 10).unwrap();
        assert_eq!(q.levels, vec![1.0, 2.0, 3.0]);
        assert_eq!(q.requested, 10);
        assert!(lloyd_max_quantize(&[], 2).is_err());
        assert!(lloyd_max_quantize(&[1.0], 0).is_err());
    }

    #[test]
    fn lloyd_beats_uniform_quantizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<f64> = (0..20_000).map(|_| rng.random_range(0.0..1.0)).collect();
        let q = lloyd_max_quantize(&v, 8).unwrap();
        let uniform_mse = v
            .iter()
            .map(|x| {
                let c = ((x * 8.0).floor().min(7.0) + 0.5) / 8.0;
                (x - c).powi(2)
            })
            .sum::<f64>()
            / v.len() as f64;
        assert!(q.mse() <= uniform_mse + 1e-12, "{} vs {uniform_mse}", q.mse());
        for w in q.mse_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
        assert!(q.levels.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn noise_free_plateaus_give_zero() {
        let d = Dims::new(24, 24, 24);
        let v = Volume3D::from_fn(d, VoxelSize::isotropic(0.05).unwrap(), |i, j, _| (i / 8) as f64 * 0.3 + (j / 12) as f64 * 0.1);
        let e = estimate_noise(&v, 1, 6).unwrap();
        assert!(e.params.a.abs() < 1e-12 && e.params.b.abs() < 1e-12, "{:?}", e.params);
    }

    #[test]
    fn too_few_segments_is_error() {
        let v = Volume3D::filled(Dims::new(8, 8, 8), VoxelSize::isotropic(1.0).unwrap(), 1.0);
        assert!(estimate_noise(&v, 3, 4).is_err());
        assert!(estimate_noise(&v, 3, 1).is_err());
    }

    #[test]
    fn report_has_summary_row() {
        let d = Dims::new(24, 24, 24);
        let v = Volume3D::from_fn(d, VoxelSize::isotropic(0.05).unwrap(), |i, _, _| (i / 8) as f64);
        let e = estimate_noise(&v, 1, 3).unwrap();
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "j,level,I_hat,var_hat,count");
        assert_eq!(lines.len(), 1 + 3 + 2);
        assert!(lines[4].starts_with("a,b,r2"));
    }
}
