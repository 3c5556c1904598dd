//! SERLU activation toolkit.
//!
//! - [`activations`]: SERLU and five comparison activations, shift-dropout.
//! - [`moments`]: the Gaussian mean/variance map through one layer.
//! - [`analysis`]: fixed-point constants, Jacobian, grid scan, contraction.
//! - [`nn`]: a dense feed-forward network with RMSProp.
//! - [`data`]: MNIST IDX loading, normalization and batching.

pub mod activations;
pub mod analysis;
pub mod cli;
pub mod data;
pub mod error;
pub mod moments;
pub mod nn;
pub mod quadrature;
pub mod special;

pub use activations::{activate, activate_grad, shift_dropout, shift_dropout_grad, ActivationKind, ActivationSpec, DropoutConfig, ShiftDropout};
pub use analysis::{grid_scan, iterate_to_fixed_point, jacobian_at, solve_serlu_params, spectral_norm_2x2, DomainBox, GridScanReport, Jacobian2};
pub use error::{Error, Result};
pub use moments::{gauss_pdf, moment_map_montecarlo, moment_map_quadrature, moment_map_serlu, MomentPair, WeightStats};
pub use special::{erfc, erfcx};

/// Crate version embedded in output artifacts.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
