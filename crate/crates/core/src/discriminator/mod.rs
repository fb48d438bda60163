//! The per-position discriminator: classifier, objective, training loop,
//! inference scoring and the serialized model.

pub mod adam;
pub mod mlp;
pub mod model;
pub mod train;

pub use adam::Adam;
pub use mlp::{classify, Dense, Mlp, MlpClassifier, MlpGrads, ProbGrid, CLASS_ANOMALOUS, CLASS_NORMAL};
pub use model::{DiscriminatorModel, MODEL_FORMAT_VERSION};
pub use train::{loss_and_gradients, train, TrainConfig, TrainLog, Trainer, MAX_SYNTH_ATTEMPTS};

use crate::error::{CoreError, Result};
use crate::imagesynth::Image;
use crate::linalg::Real;

use mlp::PROB_CLAMP;

/// Cross-entropy of a probability grid against one target class, summed over
/// positions. Probabilities are clamped at 1e-12 before the log.
fn ce_sum<T: Real>(grid: &ProbGrid<T>, target: usize) -> f64 {
    let mut sum = 0.0;
    for pos in 0..grid.positions() {
        let p = grid.prob(pos, target).to_f64();
        let p = if p < PROB_CLAMP { PROB_CLAMP } else { p };
        sum -= p.ln();
    }
    sum
}

/// The training objective over one batch triple: mean per-position
/// cross-entropy with the normal grid labeled negative and both synthesized
/// grids labeled positive.
pub fn batch_loss<T: Real>(
    preds_x: &ProbGrid<T>,
    preds_n: &ProbGrid<T>,
    preds_a: &ProbGrid<T>,
) -> Result<f64> {
    let same = |a: &ProbGrid<T>, b: &ProbGrid<T>| a.width == b.width && a.height == b.height;
    if !same(preds_x, preds_n) || !same(preds_x, preds_a) {
        return Err(CoreError::invalid("prediction grids must share spatial shape"));
    }
    let n_total = 3 * preds_x.positions();
    if n_total == 0 {
        return Err(CoreError::invalid("prediction grids must be non-empty"));
    }
    let sum = ce_sum(preds_x, CLASS_NORMAL)
        + ce_sum(preds_n, CLASS_ANOMALOUS)
        + ce_sum(preds_a, CLASS_ANOMALOUS);
    Ok(sum / n_total as f64)
}

/// An image's anomaly score: the per-position positive-class probabilities
/// and their maximum.
#[derive(Debug, Clone)]
pub struct AnomalyScore {
    pub id: String,
    pub score: f64,
    pub map_width: usize,
    pub map_height: usize,
    pub score_map: Vec<f32>,
}

/// Score one image: positive-class probability at every fused-feature
/// position, maximum over the map. No synthesis branch runs at inference.
pub fn anomaly_score(id: &str, image: &Image, model: &DiscriminatorModel) -> Result<AnomalyScore> {
    let fused = model.extractor.patch_features(image)?;
    let grid = classify(&fused, &model.classifier)?;
    score_from_grid(id, &grid)
}

/// Score an already classified grid (shared by scoring paths and tests).
pub fn score_from_grid(id: &str, grid: &ProbGrid<f32>) -> Result<AnomalyScore> {
    if grid.positions() == 0 {
        return Err(CoreError::invalid("score map must be non-empty"));
    }
    let score_map: Vec<f32> =
        (0..grid.positions()).map(|pos| grid.prob(pos, CLASS_ANOMALOUS)).collect();
    let score = score_map.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    Ok(AnomalyScore {
        id: id.to_string(),
        score,
        map_width: grid.width,
        map_height: grid.height,
        score_map,
    })
}

/// Arithmetic mean of member scores for one image.
pub fn ensemble_score(scores: &[AnomalyScore]) -> Result<f64> {
    if scores.is_empty() {
        return Err(CoreError::invalid("ensemble needs at least one member score"));
    }
    Ok(scores.iter().map(|s| s.score).sum::<f64>() / scores.len() as f64)
}
