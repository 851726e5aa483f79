//! Score-based restoration of color images with invertible
//! high-dimensional lifts.
//!
//! The pipeline learns (or is given) a score model over lifted tensors
//! `H(x)`, then restores a masked observation by alternating annealed
//! Langevin steps with a closed-form data-fidelity update. See
//! [`sampler::restore_basic`] and [`sampler::restore_progressive`].

pub mod degradation;
pub mod error;
pub mod io;
pub mod metrics;
pub mod noise;
pub mod sampler;
pub mod schedule;
pub mod score;
pub mod synth;
pub mod tensor;
pub mod transforms;

pub use degradation::{DegradationOp, MaskKind};
pub use error::{Error, Result};
pub use metrics::{psnr, ssim, MetricReport};
pub use noise::{perturb, NoiseSource};
pub use sampler::{DcVariant, RestorationResult, RestoreConfig, RestoreMode};
pub use schedule::{make_noise_schedule, step_size, NoiseSchedule};
pub use score::{Score, ScoreModel};
pub use tensor::{ImageTensor, Shape};
pub use transforms::{h_forward, h_inverse, HighDimTransform};
