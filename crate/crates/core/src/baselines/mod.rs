//! Comparison methods: Richardson-Lucy, Levenberg-Marquardt Gaussian fitting and
//! penalized least-squares restoration.

mod nls;
mod penalized;
mod rl;

pub use nls::{nls_fit, nls_residual_norm, NlsConfig, NlsFit, NlsParams};
pub use penalized::{chi_sweep, log_grid, penalized_restore, write_sweep_csv, PenalizedConfig, PenalizedResult, SweepRow};
pub use rl::richardson_lucy;
