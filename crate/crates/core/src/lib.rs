//! Deformable 2D image registration with coordinate networks.
//!
//! A sinusoidal network maps pixel coordinates to a displacement field. In
//! the decomposition modes two further networks split the moving image into a
//! support image, which is aligned to the fixed image, and a residual image
//! holding content with no counterpart in the fixed image.

pub mod autodiff;
pub mod encoding;
pub mod engine;
pub mod error;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod siren;
pub mod warp;

pub use autodiff::{ExecMode, Gradients, Tape, Tensor, Var};
pub use encoding::FourierConfig;
pub use engine::{
    make_synthetic_pair, run_registration, EpochTerms, Mode, Registration, RegistrationConfig,
    RegistrationResult, SynthConfig, SyntheticPair, TextureConfig,
};
pub use error::{Error, Result};
pub use imageio::Image;
pub use losses::{LnccConfig, LossWeights};
pub use metrics::{Mask, MetricReport};
pub use optim::{AdamW, AdamWConfig};
pub use siren::{SirenConfig, SirenNetwork};
pub use warp::{CoordinateGrid, DisplacementField};
