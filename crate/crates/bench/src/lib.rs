//! Fixtures shared by the benchmarks.

use mpmrestore::psf::{gaussian_kernel, sphere_bead, spd_from_euler, BeadSpec, EulerDecomp, GaussianPsfParams};
use mpmrestore::{Grid, Kernel3D, Volume3D};

/// Bead phantom and a tilted Gaussian kernel on `grid`.
pub fn bead_fixture(grid: &Grid) -> (Volume3D, Kernel3D) {
    let bead = sphere_bead(&BeadSpec::new(1.0).expect("valid diameter"), grid).expect("bead fits");
    let s = spd_from_euler(&EulerDecomp::new(5.0 * std::f64::consts::PI / 6.0, std::f64::consts::PI / 6.0, [138.6, 138.6, 3.2]));
    let h = gaussian_kernel(&GaussianPsfParams::new(s).expect("spd"), grid, true).expect("kernel");
    (bead, h)
}
