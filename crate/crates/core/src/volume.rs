//! 3D scalar volumes, the voxel-centre grid and convolution kernels.
//!
//! Data is stored x-fastest, then y, then z: the voxel `(i, j, k)` lives at flat
//! index `i + nx * (j + ny * k)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn from_array(a: [usize; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nx * (j + self.ny * k)
    }

    #[inline]
    pub fn coords(&self, n: usize) -> (usize, usize, usize) {
        let i = n % self.nx;
        let r = n / self.nx;
        (i, r % self.ny, r / self.ny)
    }

    /// Index of the voxel used as the kernel origin, `(⌊nx/2⌋, ⌊ny/2⌋, ⌊nz/2⌋)`.
    pub fn center(&self) -> (usize, usize, usize) {
        (self.nx / 2, self.ny / 2, self.nz / 2)
    }

    pub fn center_index(&self) -> usize {
        let (i, j, k) = self.center();
        self.index(i, j, k)
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// Voxel edge lengths in micrometres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelSize(pub [f64; 3]);

impl VoxelSize {
    pub fn new(rx: f64, ry: f64, rz: f64) -> Result<Self> {
        let v = Self([rx, ry, rz]);
        v.validate()?;
        Ok(v)
    }

    pub fn isotropic(r: f64) -> Result<Self> {
        Self::new(r, r, r)
    }

    fn validate(&self) -> Result<()> {
        if self.0.iter().all(|r| r.is_finite() && *r > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "voxel sizes must be positive, got {:?}",
                self.0
            )))
        }
    }

    /// Volume of one voxel in cubic micrometres.
    pub fn volume(&self) -> f64 {
        self.0[0] * self.0[1] * self.0[2]
    }
}

/// A 3D real scalar field on a regular voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    voxel: VoxelSize,
    data: Vec<f64>,
}

impl Volume3D {
    pub fn new(dims: Dims, voxel: VoxelSize, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidParameter(format!("empty dims {dims}")));
        }
        voxel.validate()?;
        if data.len() != dims.len() {
            return Err(Error::DataLength { dims, len: data.len(), expected: dims.len() });
        }
        Ok(Self { dims, voxel, data })
    }

    pub fn zeros(dims: Dims, voxel: VoxelSize) -> Self {
        Self::filled(dims, voxel, 0.0)
    }

    pub fn filled(dims: Dims, voxel: VoxelSize, value: f64) -> Self {
        assert!(!dims.is_empty(), "empty dims");
        Self { dims, voxel, data: vec![value; dims.len()] }
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(dims: Dims, voxel: VoxelSize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for k in 0..dims.nz {
            for j in 0..dims.ny {
                for i in 0..dims.nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { dims, voxel, data }
    }

    /// A volume on the same grid as `self` holding `data`.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.dims, self.voxel, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size(&self) -> VoxelSize {
        self.voxel
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.dims, self.voxel)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.dims.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let n = self.dims.index(i, j, k);
        self.data[n] = v;
    }

    pub fn ensure_same_dims(&self, other: &Volume3D) -> Result<()> {
        if self.dims == other.dims {
            Ok(())
        } else {
            Err(Error::Shape { left: self.dims, right: other.dims })
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { dims: self.dims, voxel: self.voxel, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Extracts the inclusive box `[x0, x1] × [y0, y1] × [z0, z1]`.
    pub fn crop(&self, lo: [usize; 3], hi: [usize; 3]) -> Result<Self> {
        let d = self.dims.as_array();
        for a in 0..3 {
            if lo[a] > hi[a] || hi[a] >= d[a] {
                return Err(Error::InvalidParameter(format!(
                    "crop box {lo:?}..={hi:?} outside {}",
                    self.dims
                )));
            }
        }
        let dims = Dims::new(hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1);
        Ok(Self::from_fn(dims, self.voxel, |i, j, k| self.get(lo[0] + i, lo[1] + j, lo[2] + k)))
    }
}

/// Voxel mass-centre coordinates in micrometres.
///
/// The voxel at [`Dims::center`] sits at the origin, so a kernel stored on this
/// grid has its reference point on an actual voxel. For odd extents this is also
/// the grid centroid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    dims: Dims,
    voxel: VoxelSize,
}

impl Grid {
    pub fn new(dims: Dims, voxel: VoxelSize) -> Self {
        Self { dims, voxel }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size(&self) -> VoxelSize {
        self.voxel
    }

    #[inline]
    pub fn coord(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let (ci, cj, ck) = self.dims.center();
        let r = self.voxel.0;
        [
            (i as f64 - ci as f64) * r[0],
            (j as f64 - cj as f64) * r[1],
            (k as f64 - ck as f64) * r[2],
        ]
    }

    #[inline]
    pub fn omega(&self, n: usize) -> [f64; 3] {
        let (i, j, k) = self.dims.coords(n);
        self.coord(i, j, k)
    }

    /// All coordinates in storage order.
    pub fn points(&self) -> Vec<[f64; 3]> {
        (0..self.dims.len()).map(|n| self.omega(n)).collect()
    }

    /// Half of the grid extent along each axis, in micrometres.
    pub fn half_extent(&self) -> [f64; 3] {
        let d = self.dims.as_array();
        let r = self.voxel.0;
        [0.5 * d[0] as f64 * r[0], 0.5 * d[1] as f64 * r[1], 0.5 * d[2] as f64 * r[2]]
    }
}

/// A discrete convolution kernel stored centred on [`Dims::center`].
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel3D(Volume3D);

/// Tolerance on the kernel sum when checking simplex membership.
pub const SIMPLEX_TOL: f64 = 1e-12;

impl Kernel3D {
    pub fn new(vol: Volume3D) -> Self {
        Self(vol)
    }

    /// Wraps `vol`, requiring it to lie on the probability simplex.
    pub fn normalized(vol: Volume3D) -> Result<Self> {
        let k = Self(vol);
        if !k.is_simplex(1e-9) {
            return Err(Error::InvalidParameter("kernel is not on the simplex".into()));
        }
        Ok(k)
    }

    /// The discrete Dirac: one at the centre voxel.
    pub fn dirac(dims: Dims, voxel: VoxelSize) -> Self {
        let mut v = Volume3D::zeros(dims, voxel);
        let c = dims.center_index();
        v.data_mut()[c] = 1.0;
        Self(v)
    }

    /// Uniform kernel `1/N`.
    pub fn uniform(dims: Dims, voxel: VoxelSize) -> Self {
        Self(Volume3D::filled(dims, voxel, 1.0 / dims.len() as f64))
    }

    pub fn volume(&self) -> &Volume3D {
        &self.0
    }

    pub fn into_volume(self) -> Volume3D {
        self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn dims(&self) -> Dims {
        self.0.dims()
    }

    /// Nonnegative with entries summing to one within `tol`.
    pub fn is_simplex(&self, tol: f64) -> bool {
        self.0.data().iter().all(|&v| v >= 0.0) && (self.0.sum() - 1.0).abs() <= tol
    }

    /// Rescales to unit sum. Fails on a zero or negative total.
    pub fn normalize(&mut self) -> Result<()> {
        let s = self.0.sum();
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Degenerate(format!("kernel sum {s}")));
        }
        self.0.data_mut().iter_mut().for_each(|v| *v /= s);
        Ok(())
    }
}

impl From<Kernel3D> for Volume3D {
    fn from(k: Kernel3D) -> Self {
        k.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vs() -> VoxelSize {
        VoxelSize::new(0.05, 0.05, 0.1).unwrap()
    }

    #[test]
    fn data_length_checked() {
        let err = Volume3D::new(Dims::new(2, 2, 2), vs(), vec![0.0; 7]).unwrap_err();
        assert!(matches!(err, Error::DataLength { len: 7, expected: 8, .. }));
    }

    #[test]
    fn voxel_size_must_be_positive() {
        assert!(VoxelSize::new(0.1, 0.0, 0.1).is_err());
        assert!(VoxelSize::new(0.1, -1.0, 0.1).is_err());
    }

    #[test]
    fn index_roundtrip_is_x_fastest() {
        let d = Dims::new(3, 4, 5);
        assert_eq!(d.index(1, 0, 0), 1);
        assert_eq!(d.index(0, 1, 0), 3);
        assert_eq!(d.index(0, 0, 1), 12);
        for n in 0..d.len() {
            let (i, j, k) = d.coords(n);
            assert_eq!(d.index(i, j, k), n);
        }
    }

    #[test]
    fn odd_grid_is_centred_on_origin() {
        let g = Grid::new(Dims::new(5, 7, 9), vs());
        let mut s = [0.0; 3];
        for p in g.points() {
            for a in 0..3 {
                s[a] += p[a];
            }
        }
        for v in s {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn grid_spacing_matches_voxel_size() {
        let g = Grid::new(Dims::new(4, 6, 8), vs());
        let a = g.coord(1, 2, 3);
        assert!((g.coord(2, 2, 3)[0] - a[0] - 0.05).abs() < 1e-15);
        assert!((g.coord(1, 3, 3)[1] - a[1] - 0.05).abs() < 1e-15);
        assert!((g.coord(1, 2, 4)[2] - a[2] - 0.1).abs() < 1e-15);
        assert_eq!(g.coord(2, 3, 4), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn crop_extracts_inclusive_box() {
        let d = Dims::new(4, 4, 4);
        let v = Volume3D::from_fn(d, vs(), |i, j, k| (i + 10 * j + 100 * k) as f64);
        let c = v.crop([1, 2, 3], [2, 3, 3]).unwrap();
        assert_eq!(c.dims(), Dims::new(2, 2, 1));
        assert_eq!(c.get(0, 0, 0), 321.0);
        assert_eq!(c.get(1, 1, 0), 332.0);
        assert!(v.crop([0, 0, 0], [4, 0, 0]).is_err());
    }

    #[test]
    fn dirac_and_uniform_are_simplex() {
        let d = Dims::new(4, 5, 6);
        assert!(Kernel3D::dirac(d, vs()).is_simplex(SIMPLEX_TOL));
        assert!(Kernel3D::uniform(d, vs()).is_simplex(SIMPLEX_TOL));
    }
}
