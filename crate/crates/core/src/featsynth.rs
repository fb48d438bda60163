//! Feature-level anomaly synthesis.
//!
//! Anomaly-like features are the normal patch-aware features plus i.i.d.
//! Gaussian noise, one independent draw per scalar entry (per position and
//! per channel). Draws come from the seeded Box-Muller source in [`crate::rng`].

use crate::error::{CoreError, Result};
use crate::featext::FeatureMap;
use crate::rng::GaussianSource;

#[derive(Debug, Clone, Copy)]
pub struct GaussianNoiseParams {
    pub mu: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl GaussianNoiseParams {
    pub fn new(sigma: f64, seed: u64) -> Self {
        Self { mu: 0.0, sigma, seed }
    }
}

/// Add elementwise Gaussian noise to a feature map.
///
/// With `sigma == 0` and `mu == 0` the input is returned bit-identical,
/// which is the image-level-only ablation arm.
pub fn add_feature_noise(f_x: &FeatureMap, params: &GaussianNoiseParams) -> Result<FeatureMap> {
    if params.sigma < 0.0 {
        return Err(CoreError::invalid("sigma must be >= 0"));
    }
    if params.sigma == 0.0 && params.mu == 0.0 {
        return Ok(f_x.clone());
    }
    let mut out = f_x.clone();
    let mut gauss = GaussianSource::new(params.seed);
    for v in out.values.iter_mut() {
        *v += gauss.next(params.mu, params.sigma) as f32;
    }
    Ok(out)
}
