//! End-to-end runs: train + evaluate combinations and the noise-level
//! ablation harness shared by the CLI, the Python bindings and the
//! acceptance suite.

use crate::data::{Dataset, ImageStore};
use crate::discriminator::{train, DiscriminatorModel, TrainConfig, TrainLog};
use crate::error::{CoreError, Result};
use crate::featext::ExtractorSpec;
use crate::metrics::{evaluate, EvalReport};

/// Train on the train split and evaluate on the test split.
pub fn train_and_eval(
    train_ds: &Dataset,
    test_ds: &Dataset,
    store: &ImageStore,
    extractor_spec: &ExtractorSpec,
    cfg: &TrainConfig,
) -> Result<(DiscriminatorModel, TrainLog, EvalReport)> {
    let (model, log) = train(train_ds, store, extractor_spec, cfg)?;
    let report = evaluate(&model, test_ds, store)?;
    Ok((model, log, report))
}

/// One ablation arm: a named (sigma, r) noise-level setting.
#[derive(Debug, Clone)]
pub struct AblationArm {
    pub name: String,
    pub sigma: f64,
    pub r: f64,
}

/// The standard three arms: image-level only (sigma = 0), feature-level only
/// (r = 0) and both.
pub fn standard_arms(sigma: f64, r: f64) -> Vec<AblationArm> {
    vec![
        AblationArm { name: "image_only".into(), sigma: 0.0, r },
        AblationArm { name: "feature_only".into(), sigma, r: 0.0 },
        AblationArm { name: "combined".into(), sigma, r },
    ]
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub arm: String,
    pub seed: u64,
    pub auroc: f64,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// (arm name, median AUROC) in arm order.
    pub medians: Vec<(String, f64)>,
}

impl AblationTable {
    pub fn median_of(&self, arm: &str) -> Option<f64> {
        self.medians.iter().find(|(name, _)| name == arm).map(|(_, m)| *m)
    }

    /// TSV rendering: one row per (arm, seed) plus one median row per arm.
    pub fn render(&self) -> String {
        let mut out = String::from("arm\tseed\tauroc\n");
        for row in &self.rows {
            out.push_str(&format!("{}\t{}\t{:.6}\n", row.arm, row.seed, row.auroc));
        }
        for (arm, median) in &self.medians {
            out.push_str(&format!("{arm}\tmedian\t{median:.6}\n"));
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

/// Train and evaluate every arm with every seed on a shared corpus.
///
/// Arms with sigma = 0 and r = 0 simultaneously are rejected: that would
/// leave the discriminator with no anomaly supervision at all.
pub fn run_ablation(
    train_ds: &Dataset,
    test_ds: &Dataset,
    store: &ImageStore,
    extractor_spec: &ExtractorSpec,
    base_cfg: &TrainConfig,
    arms: &[AblationArm],
    seeds: &[u64],
) -> Result<AblationTable> {
    if arms.is_empty() || seeds.is_empty() {
        return Err(CoreError::Config("ablation needs at least one arm and one seed".into()));
    }
    let mut rows = Vec::with_capacity(arms.len() * seeds.len());
    let mut medians = Vec::with_capacity(arms.len());
    for arm in arms {
        if arm.sigma == 0.0 && arm.r == 0.0 {
            return Err(CoreError::Config(format!(
                "arm {:?} has sigma = 0 and r = 0: no anomaly supervision at all",
                arm.name
            )));
        }
        let mut aurocs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base_cfg.clone();
            cfg.seed = seed;
            cfg.sigma = arm.sigma;
            cfg.synth.max_area_ratio = arm.r;
            let (_model, _log, report) =
                train_and_eval(train_ds, test_ds, store, extractor_spec, &cfg)?;
            rows.push(AblationRow { arm: arm.name.clone(), seed, auroc: report.auroc });
            aurocs.push(report.auroc);
        }
        medians.push((arm.name.clone(), median(&aurocs)));
    }
    Ok(AblationTable { rows, medians })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_handles_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[5.0]), 5.0);
    }

    #[test]
    fn standard_arms_cover_the_grid() {
        let arms = standard_arms(0.025, 0.2);
        assert_eq!(arms.len(), 3);
        assert_eq!((arms[0].sigma, arms[0].r), (0.0, 0.2));
        assert_eq!((arms[1].sigma, arms[1].r), (0.025, 0.0));
        assert_eq!((arms[2].sigma, arms[2].r), (0.025, 0.2));
    }

    #[test]
    fn table_rendering_has_rows_plus_medians() {
        let table = AblationTable {
            rows: vec![
                AblationRow { arm: "a".into(), seed: 0, auroc: 0.9 },
                AblationRow { arm: "a".into(), seed: 1, auroc: 0.8 },
            ],
            medians: vec![("a".into(), 0.85)],
        };
        let text = table.render();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 + 1);
        assert!(lines[3].starts_with("a\tmedian\t0.85"));
    }
}
