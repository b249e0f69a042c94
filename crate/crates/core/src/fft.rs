//! Separable 3D FFT over x-fastest complex buffers, built on `rustfft`.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::volume::Dims;

/// Cached forward and inverse plans for one grid size.
#[derive(Clone)]
pub struct Fft3d {
    dims: Dims,
    fwd: [Arc<dyn Fft<f64>>; 3],
    inv: [Arc<dyn Fft<f64>>; 3],
}

impl std::fmt::Debug for Fft3d {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft3d").field("dims", &self.dims).finish()
    }
}

impl Fft3d {
    pub fn new(dims: Dims) -> Self {
        let mut planner = FftPlanner::new();
        let n = dims.as_array();
        let fwd = [0, 1, 2].map(|a| planner.plan_fft_forward(n[a]));
        let inv = [0, 1, 2].map(|a| planner.plan_fft_inverse(n[a]));
        Self { dims, fwd, inv }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Unnormalized forward transform in place.
    pub fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.fwd);
    }

    /// Inverse transform in place, scaled by `1/N`.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.inv);
        let s = 1.0 / buf.len() as f64;
        buf.par_iter_mut().for_each(|c| *c *= s);
    }

    pub fn forward_real(&self, data: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = data.par_iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    fn run(&self, buf: &mut [Complex64], plans: &[Arc<dyn Fft<f64>>; 3]) {
        let Dims { nx, ny, nz } = self.dims;
        assert_eq!(buf.len(), self.dims.len(), "buffer does not match FFT dims");

        // x: contiguous lines
        if nx > 1 {
            let p = &plans[0];
            buf.par_chunks_mut(nx * ny.max(1)).for_each(|slab| {
                let mut scratch = vec![Complex64::default(); p.get_inplace_scratch_len()];
                for line in slab.chunks_mut(nx) {
                    p.process_with_scratch(line, &mut scratch);
                }
            });
        }

        // y: strided by nx inside each z slab
        if ny > 1 {
            let p = &plans[1];
            buf.par_chunks_mut(nx * ny).for_each(|slab| {
                let mut scratch = vec![Complex64::default(); p.get_inplace_scratch_len()];
                let mut line = vec![Complex64::default(); ny];
                for i in 0..nx {
                    for j in 0..ny {
                        line[j] = slab[i + nx * j];
                    }
                    p.process_with_scratch(&mut line, &mut scratch);
                    for j in 0..ny {
                        slab[i + nx * j] = line[j];
                    }
                }
            });
        }

        // z: transpose so that columns become contiguous
        if nz > 1 {
            let p = &plans[2];
            let plane = nx * ny;
            let mut cols = vec![Complex64::default(); buf.len()];
            cols.par_chunks_mut(nz).enumerate().for_each(|(c, col)| {
                for k in 0..nz {
                    col[k] = buf[c + plane * k];
                }
            });
            cols.par_chunks_mut(nz * 64).for_each(|block| {
                let mut scratch = vec![Complex64::default(); p.get_inplace_scratch_len()];
                for col in block.chunks_mut(nz) {
                    p.process_with_scratch(col, &mut scratch);
                }
            });
            buf.par_chunks_mut(plane).enumerate().for_each(|(k, slab)| {
                for (c, v) in slab.iter_mut().enumerate() {
                    *v = cols[c * nz + k];
                }
            });
        }
    }
}

/// Smallest integer `>= n` whose only prime factors are 2, 3, 5 and 7.
pub fn next_fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5, 7] {
            while r.is_multiple_of(p) {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// Moves the centred kernel origin to index 0 (inverse FFT shift), resizing to `out` dims.
///
/// Each kernel offset `o = idx - center` lands at `o mod out`, so the output is the
/// circularly wrapped kernel on the (possibly larger) grid.
pub fn ifftshift_into(src: &[f64], src_dims: Dims, out: Dims) -> Vec<f64> {
    let mut dst = vec![0.0; out.len()];
    let (ci, cj, ck) = src_dims.center();
    let wrap = |idx: usize, c: usize, n: usize| -> usize {
        let o = idx as isize - c as isize;
        o.rem_euclid(n as isize) as usize
    };
    for k in 0..src_dims.nz {
        let kk = wrap(k, ck, out.nz);
        for j in 0..src_dims.ny {
            let jj = wrap(j, cj, out.ny);
            for i in 0..src_dims.nx {
                let ii = wrap(i, ci, out.nx);
                dst[out.index(ii, jj, kk)] += src[src_dims.index(i, j, k)];
            }
        }
    }
    dst
}

/// Inverse of [`ifftshift_into`] for equal dims: moves index 0 back to the centre voxel.
pub fn fftshift(src: &[f64], dims: Dims) -> Vec<f64> {
    let mut dst = vec![0.0; dims.len()];
    let (ci, cj, ck) = dims.center();
    for k in 0..dims.nz {
        let kk = (k + ck) % dims.nz;
        for j in 0..dims.ny {
            let jj = (j + cj) % dims.ny;
            for i in 0..dims.nx {
                let ii = (i + ci) % dims.nx;
                dst[dims.index(ii, jj, kk)] = src[dims.index(i, j, k)];
            }
        }
    }
    dst
}
