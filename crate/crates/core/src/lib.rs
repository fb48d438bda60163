//! Anomaly detection for grain appearance inspection.
//!
//! Trains a per-position discriminator using only normal images. Anomaly
//! supervision is synthesized on the fly from two directions:
//!
//! - image level: gradient-noise masks constrained to the grain foreground
//!   select regions that are opacity-blended with an arbitrary source image;
//! - feature level: Gaussian noise added to the normal patch-aware features.
//!
//! Both synthesized kinds are labeled positive, real normal features negative,
//! and a small MLP is trained with cross-entropy over every spatial position.
//! At inference the maximum positive-class probability over the fused feature
//! map is the image's anomaly score.
//!
//! Everything is deterministic given explicit seeds: noise fields, source
//! textures, weight initialization, batch order and the synthetic benchmark
//! corpus all derive from seeded ChaCha8 streams.

pub mod data;
pub mod discriminator;
pub mod error;
pub mod featext;
pub mod featsynth;
pub mod imagesynth;
pub mod linalg;
pub mod metrics;
pub mod noisegen;
pub mod pipeline;
pub mod rng;
pub(crate) mod serio;

pub use error::{CoreError, Result};
