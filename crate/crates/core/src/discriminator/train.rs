//! Discriminator training.
//!
//! Each step takes a batch of normal images and builds up to three labeled
//! feature grids per image: the normal patch-aware features (negative), the
//! features of a synthesized anomaly image (positive) and the normal features
//! plus Gaussian noise (positive). The per-position cross-entropy is averaged
//! over every position of every contributed grid and the classifier is
//! updated with Adam (decoupled weight decay).
//!
//! Determinism: all synthesis and noise streams derive from
//! (seed, epoch, step, slot), batch order from (seed, epoch), so a (seed,
//! config, dataset) triple fully determines the trained weights regardless of
//! worker scheduling.

use std::sync::Arc;

use rayon::prelude::*;

use crate::data::{Dataset, ImageStore, Split};
use crate::error::{CoreError, Result};
use crate::featext::{
    backward_aggregate, backward_interpolate, Extractor, ExtractorSpec, FeatureMap,
};
use crate::featsynth::{add_feature_noise, GaussianNoiseParams};
use crate::imagesynth::{synthesize_anomaly, SynthConfig};
use crate::linalg::Real;
use crate::rng;

use super::adam::Adam;
use super::mlp::{softmax_rows, Mlp, MlpGrads, CLASS_ANOMALOUS, CLASS_NORMAL, PROB_CLAMP};
use super::model::DiscriminatorModel;

/// Maximum resample attempts when image-level synthesis yields an empty mask.
pub const MAX_SYNTH_ATTEMPTS: usize = 5;

/// Training hyperparameters. `synth.max_area_ratio` is the image-level noise
/// budget r; `sigma` is the feature-level noise level.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub sigma: f64,
    pub hidden_widths: Vec<usize>,
    pub fine_tune_extractor: bool,
    pub synth: SynthConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.8,
            beta2: 0.999,
            weight_decay: 1e-4,
            batch_size: 4,
            epochs: 8,
            seed: 0,
            sigma: 0.025,
            hidden_widths: vec![128, 128],
            fine_tune_extractor: false,
            synth: SynthConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The image-level area budget r.
    pub fn r(&self) -> f64 {
        self.synth.max_area_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 {
            return Err(CoreError::Config("rates must be non-negative".into()));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(beta > 0.0 && beta < 1.0) {
                return Err(CoreError::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be >= 1".into()));
        }
        if self.sigma < 0.0 {
            return Err(CoreError::Config("sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.r()) {
            return Err(CoreError::Config("r must lie in [0, 1]".into()));
        }
        if self.sigma == 0.0 && self.r() == 0.0 {
            return Err(CoreError::Config(
                "sigma = 0 and r = 0 disables all anomaly supervision; at least one must be positive".into(),
            ));
        }
        if self.hidden_widths.is_empty() {
            return Err(CoreError::Config("classifier needs at least one hidden layer".into()));
        }
        Ok(())
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone)]
pub struct TrainLog {
    pub epoch_mean_losses: Vec<f64>,
}

impl TrainLog {
    /// True when every epoch's mean loss strictly decreased.
    pub fn strictly_decreasing(&self) -> bool {
        self.epoch_mean_losses.windows(2).all(|w| w[1] < w[0])
    }
}

/// Mean cross-entropy over every position of every grid plus parameter
/// gradients. Targets are class indices; `want_input_grads` additionally
/// returns the gradient at each grid's features (used by fine-tuning).
pub fn loss_and_gradients<T: Real>(
    mlp: &Mlp<T>,
    grids: &[(&FeatureMap<T>, usize)],
    want_input_grads: bool,
) -> Result<(f64, MlpGrads<T>, Vec<Option<Vec<T>>>)> {
    if grids.is_empty() {
        return Err(CoreError::invalid("loss needs at least one grid"));
    }
    for (f, target) in grids {
        if f.channels != mlp.input_dim() {
            return Err(CoreError::invalid(format!(
                "grid channels {} do not match classifier input {}",
                f.channels,
                mlp.input_dim()
            )));
        }
        if *target > 1 {
            return Err(CoreError::invalid("target must be 0 or 1"));
        }
    }
    let n_total: usize = grids.iter().map(|(f, _)| f.positions()).sum();
    let scale = T::from_f64(1.0 / n_total as f64);

    let per_grid: Vec<(f64, MlpGrads<T>)> = grids
        .par_iter()
        .map(|(f, target)| {
            let n = f.positions();
            let acts = mlp.forward(&f.values, n);
            let logits = acts.last().unwrap();
            let probs = softmax_rows(logits, n);
            let mut loss_sum = 0.0f64;
            let mut d_logits = vec![T::ZERO; 2 * n];
            for row in 0..n {
                // Clamp written so NaN probabilities propagate into the loss
                // and trip the divergence check.
                let p = probs[row * 2 + target].to_f64();
                let p_target = if p < PROB_CLAMP { PROB_CLAMP } else { p };
                loss_sum -= p_target.ln();
                for class in 0..2 {
                    let y = if class == *target { T::ONE } else { T::ZERO };
                    d_logits[row * 2 + class] = (probs[row * 2 + class] - y) * scale;
                }
            }
            let grads = mlp.backward(&acts, &d_logits, n, want_input_grads);
            (loss_sum, grads)
        })
        .collect();

    let mut total = MlpGrads::zeros_like(mlp);
    let mut loss_sum = 0.0f64;
    let mut input_grads = Vec::with_capacity(per_grid.len());
    for (grid_loss, grads) in per_grid {
        loss_sum += grid_loss;
        total.accumulate(&grads);
        input_grads.push(grads.d_input);
    }
    Ok((loss_sum / n_total as f64, total, input_grads))
}

/// Features contributed by one batch slot.
struct SlotFeatures {
    f_x: Arc<FeatureMap>,
    f_n: Option<FeatureMap>,
    f_a: Option<FeatureMap>,
    trace_x: Option<crate::featext::extractor::Stage4Trace<f32>>,
    trace_n: Option<crate::featext::extractor::Stage4Trace<f32>>,
}

/// Mutable training state across steps.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    extractor: Extractor<f32>,
    mlp: Mlp<f32>,
    adam: Adam<f32>,
    adam_stage4: Option<Adam<f32>>,
    store: &'a ImageStore,
    feature_cache: Vec<Option<Arc<FeatureMap>>>,
}

/// How many leading train images feed the extractor recalibration.
pub const CALIBRATION_SAMPLE: usize = 16;

impl<'a> Trainer<'a> {
    pub fn new(
        extractor_spec: &ExtractorSpec,
        cfg: &TrainConfig,
        store: &'a ImageStore,
        dataset_len: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let extractor = Extractor::<f32>::from_spec(extractor_spec)?;
        let mlp = Mlp::<f32>::seeded(
            extractor_spec.fused_channels(),
            &cfg.hidden_widths,
            rng::derive_seed(cfg.seed, &[0x4D4C]),
        );
        let sizes: Vec<usize> =
            mlp.layers.iter().flat_map(|l| [l.w.len(), l.b.len()]).collect();
        let adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.weight_decay, &sizes);
        let adam_stage4 = cfg.fine_tune_extractor.then(|| {
            let l4 = &extractor.layers[3];
            Adam::new(
                cfg.learning_rate,
                cfg.beta1,
                cfg.beta2,
                cfg.weight_decay,
                &[l4.weights.len(), l4.bias.len()],
            )
        });
        Ok(Self {
            cfg: cfg.clone(),
            extractor,
            mlp,
            adam,
            adam_stage4,
            store,
            feature_cache: vec![None; dataset_len],
        })
    }

    pub fn classifier(&self) -> &Mlp<f32> {
        &self.mlp
    }

    fn slot_features(
        &self,
        dataset: &Dataset,
        item_idx: usize,
        epoch: usize,
        step: usize,
        slot: usize,
    ) -> Result<SlotFeatures> {
        let item = &dataset.items[item_idx];
        let image = self.store.load(item)?;
        let fine_tune = self.cfg.fine_tune_extractor;

        let (f_x, trace_x) = if let (false, Some(cached)) =
            (fine_tune, self.feature_cache[item_idx].as_ref())
        {
            (cached.clone(), None)
        } else if fine_tune {
            let (maps, trace) = self.extractor.extract_with_trace(&image)?;
            (Arc::new(self.extractor.fuse_extracted(&maps)?), Some(trace))
        } else {
            (Arc::new(self.extractor.patch_features(&image)?), None)
        };

        // Image-level branch: resample on degenerate masks, give up after
        // MAX_SYNTH_ATTEMPTS and train the item as pure normal this step.
        let mut f_n = None;
        let mut trace_n = None;
        if self.cfg.r() > 0.0 {
            let mut synth_rng =
                rng::stream(self.cfg.seed, &[0x57E9, epoch as u64, step as u64, slot as u64]);
            for _ in 0..MAX_SYNTH_ATTEMPTS {
                let outcome = synthesize_anomaly(&image, &self.cfg.synth, &mut synth_rng)?;
                if !outcome.degenerate {
                    if fine_tune {
                        let (maps, trace) = self.extractor.extract_with_trace(&outcome.image)?;
                        f_n = Some(self.extractor.fuse_extracted(&maps)?);
                        trace_n = Some(trace);
                    } else {
                        f_n = Some(self.extractor.patch_features(&outcome.image)?);
                    }
                    break;
                }
            }
        }

        // Feature-level branch.
        let f_a = if self.cfg.sigma > 0.0 {
            let params = GaussianNoiseParams {
                mu: 0.0,
                sigma: self.cfg.sigma,
                seed: rng::derive_seed(
                    self.cfg.seed,
                    &[0xFA7, epoch as u64, step as u64, slot as u64],
                ),
            };
            Some(add_feature_noise(&f_x, &params)?)
        } else {
            None
        };

        Ok(SlotFeatures { f_x, f_n, f_a, trace_x, trace_n })
    }

    /// One optimizer step over a batch of dataset indices. Returns the loss.
    pub fn train_step(
        &mut self,
        dataset: &Dataset,
        batch: &[usize],
        epoch: usize,
        step: usize,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(CoreError::invalid("batch must be non-empty"));
        }
        let slots: Vec<SlotFeatures> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &item_idx)| self.slot_features(dataset, item_idx, epoch, step, slot))
            .collect::<Result<Vec<_>>>()?;

        if !self.cfg.fine_tune_extractor {
            for (slot, &item_idx) in batch.iter().enumerate() {
                if self.feature_cache[item_idx].is_none() {
                    self.feature_cache[item_idx] = Some(slots[slot].f_x.clone());
                }
            }
        }

        // Grid order: all normals, then image-level positives, then
        // feature-level positives, each in slot order.
        let mut grids: Vec<(&FeatureMap, usize)> = Vec::new();
        let mut grid_tags: Vec<(usize, u8)> = Vec::new(); // (slot, kind 0=x 1=n 2=a)
        for (slot, s) in slots.iter().enumerate() {
            grids.push((&s.f_x, CLASS_NORMAL));
            grid_tags.push((slot, 0));
        }
        for (slot, s) in slots.iter().enumerate() {
            if let Some(f_n) = &s.f_n {
                grids.push((f_n, CLASS_ANOMALOUS));
                grid_tags.push((slot, 1));
            }
        }
        for (slot, s) in slots.iter().enumerate() {
            if let Some(f_a) = &s.f_a {
                grids.push((f_a, CLASS_ANOMALOUS));
                grid_tags.push((slot, 2));
            }
        }

        let (loss, grads, input_grads) =
            loss_and_gradients(&self.mlp, &grids, self.cfg.fine_tune_extractor)?;
        if !loss.is_finite() {
            return Err(CoreError::TrainingDivergence { epoch, step, loss });
        }

        let mut params: Vec<&mut [f32]> = Vec::new();
        for layer in self.mlp.layers.iter_mut() {
            params.push(&mut layer.w);
            params.push(&mut layer.b);
        }
        let grad_refs: Vec<&[f32]> = grads
            .d_w
            .iter()
            .zip(grads.d_b.iter())
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect();
        self.adam.update(&mut params, &grad_refs);

        if self.cfg.fine_tune_extractor {
            self.finetune_stage4(&slots, &grids, &grid_tags, &input_grads)?;
        }
        Ok(loss)
    }

    /// Push fused-feature gradients back into the final extractor stage.
    fn finetune_stage4(
        &mut self,
        slots: &[SlotFeatures],
        grids: &[(&FeatureMap, usize)],
        grid_tags: &[(usize, u8)],
        input_grads: &[Option<Vec<f32>>],
    ) -> Result<()> {
        // Per slot, the fused-feature gradient of the normal branch combines
        // the F_x grid and the F_a grid (noise addition is identity in grad).
        let n_slots = slots.len();
        let fused_len = grids[0].0.values.len();
        let mut d_fused_x: Vec<Vec<f32>> = vec![vec![0.0; fused_len]; n_slots];
        let mut d_fused_n: Vec<Option<Vec<f32>>> = vec![None; n_slots];
        for (grid_idx, &(slot, kind)) in grid_tags.iter().enumerate() {
            let Some(grad) = &input_grads[grid_idx] else { continue };
            match kind {
                0 | 2 => {
                    for (acc, &g) in d_fused_x[slot].iter_mut().zip(grad.iter()) {
                        *acc += g;
                    }
                }
                _ => d_fused_n[slot] = Some(grad.clone()),
            }
        }

        let layer4 = &self.extractor.layers[3];
        let mut d_w4 = vec![0.0f32; layer4.weights.len()];
        let mut d_b4 = vec![0.0f32; layer4.bias.len()];
        let spec = &self.extractor.spec;
        let c4 = spec.stage_channels[3];
        let (w4, h4) = (spec.stage_resolution(4), spec.stage_resolution(4));
        let mut apply = |trace: &crate::featext::extractor::Stage4Trace<f32>,
                         d_fused: &[f32],
                         fused_like: &FeatureMap| {
            // Slice out the deep-stage channels of the fused gradient.
            let shallow_ch = fused_like.channels - c4;
            let mut d4 =
                FeatureMap::<f32>::new(fused_like.width, fused_like.height, c4, 4);
            for pos in 0..fused_like.positions() {
                for c in 0..c4 {
                    d4.values[pos * c4 + c] = d_fused[pos * fused_like.channels + shallow_ch + c];
                }
            }
            let d_agg = backward_interpolate(&d4, w4, h4);
            let d_stage4 = backward_aggregate(&d_agg, spec.patch_size).unwrap();
            let (dw, db) = self.extractor.stage4_gradients(trace, &d_stage4.values);
            for (acc, g) in d_w4.iter_mut().zip(dw.iter()) {
                *acc += g;
            }
            for (acc, g) in d_b4.iter_mut().zip(db.iter()) {
                *acc += g;
            }
        };
        for (slot, s) in slots.iter().enumerate() {
            if let Some(trace) = &s.trace_x {
                apply(trace, &d_fused_x[slot], &s.f_x);
            }
            if let (Some(trace), Some(d_fn)) = (&s.trace_n, &d_fused_n[slot]) {
                apply(trace, d_fn, s.f_n.as_ref().unwrap());
            }
        }

        let adam = self.adam_stage4.as_mut().expect("fine-tune optimizer");
        let layer4 = &mut self.extractor.layers[3];
        adam.update(&mut [&mut layer4.weights, &mut layer4.bias], &[&d_w4, &d_b4]);
        Ok(())
    }
}

/// Full training loop. The dataset must be a train split of normal images
/// with at least `batch_size` items.
pub fn train(
    dataset: &Dataset,
    store: &ImageStore,
    extractor_spec: &ExtractorSpec,
    cfg: &TrainConfig,
) -> Result<(DiscriminatorModel, TrainLog)> {
    cfg.validate()?;
    extractor_spec.validate()?;
    if dataset.split != Split::Train {
        return Err(CoreError::Data("training requires the train split".into()));
    }
    if dataset.is_empty() {
        return Err(CoreError::Data("training dataset is empty".into()));
    }
    if dataset.len() < cfg.batch_size {
        return Err(CoreError::Data(format!(
            "training needs at least batch_size ({}) images, got {}",
            cfg.batch_size,
            dataset.len()
        )));
    }
    if store.resolution() != extractor_spec.input_resolution {
        return Err(CoreError::Config(
            "image store resolution must match the extractor working resolution".into(),
        ));
    }

    let mut trainer = Trainer::new(extractor_spec, cfg, store, dataset.len())?;
    let mut log = TrainLog { epoch_mean_losses: Vec::with_capacity(cfg.epochs) };
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        rng::shuffle(&mut rng::stream(cfg.seed, &[0xE9, epoch as u64]), &mut order);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            epoch_loss += trainer.train_step(dataset, batch, epoch, step)?;
            steps += 1;
        }
        log.epoch_mean_losses.push(epoch_loss / steps as f64);
    }

    let model = DiscriminatorModel {
        version: super::model::MODEL_FORMAT_VERSION,
        extractor: trainer.extractor,
        classifier: trainer.mlp,
        config: cfg.clone(),
    };
    Ok((model, log))
}
