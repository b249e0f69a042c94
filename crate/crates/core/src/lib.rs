//! Gaussian PSF calibration from micro-bead images, heteroscedastic noise estimation,
//! and constrained 3D deconvolution for multiphoton microscopy volumes.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod beads;
pub mod calibrate;
pub mod conv;
pub mod error;
pub mod fft;
pub mod gentle;
pub mod io;
pub mod lambert;
pub mod metrics;
pub mod noise;
pub mod pmms;
pub mod psf;
pub mod sim;
pub mod volume;

pub use conv::{convolve_circular, convolve_zeropad, dft_max_power, LinearBlur, Padding};
pub use error::{Error, Result};
pub use metrics::{prd_percent, snr_db, BeadModel};
pub use psf::{BeadSpec, EulerDecomp, GaussianPsfParams, GenExpParams};
pub use volume::{Dims, Grid, Kernel3D, Volume3D, VoxelSize};
