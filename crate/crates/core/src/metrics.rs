//! Image-level evaluation: AUROC, macro F1 and the evaluation report.
//!
//! AUROC is computed from ranks (Mann-Whitney, ties get half credit) and is
//! checked elsewhere against the O(n^2) pair-counting oracle kept here.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{Dataset, ImageStore};
use crate::discriminator::{anomaly_score, ensemble_score, AnomalyScore, DiscriminatorModel};
use crate::error::{CoreError, Result};

/// Default decision threshold of the macro F1 metric.
pub const DEFAULT_F1_THRESHOLD: f64 = 0.3;

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(CoreError::invalid("scores and labels must have equal length"));
    }
    if scores.is_empty() {
        return Err(CoreError::invalid("scores must be non-empty"));
    }
    Ok(())
}

fn check_both_classes(labels: &[u8]) -> Result<(usize, usize)> {
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(CoreError::UndefinedMetric(
            "AUROC needs at least one positive and one negative".into(),
        ));
    }
    Ok((positives, negatives))
}

/// Rank-based AUROC: the probability that a random (anomalous, normal) pair
/// is ordered correctly, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (positives, negatives) = check_both_classes(labels)?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal));

    // Average ranks over tie groups (1-based ranks).
    let mut rank_sum_positive = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_positive += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let u = rank_sum_positive - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Exhaustive O(n^2) AUROC oracle: integer pair counting, ties = 1/2.
pub fn auroc_bruteforce(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    check_both_classes(labels)?;
    let mut wins: u64 = 0;
    let mut ties: u64 = 0;
    let mut pairs: u64 = 0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1;
            } else if si == sj {
                ties += 1;
            }
        }
    }
    Ok((2 * wins + ties) as f64 / (2 * pairs) as f64)
}

/// Per-class F1 at a fixed threshold (prediction = score > threshold),
/// averaged without weights over {normal, anomalous}. A class with
/// precision + recall = 0 contributes F1 = 0.
pub fn macro_f1(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_lengths(scores, labels)?;
    let mut f1_sum = 0.0;
    for class in [0u8, 1u8] {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for (&score, &label) in scores.iter().zip(labels.iter()) {
            let predicted: u8 = u8::from(score > threshold);
            if predicted == class && label == class {
                tp += 1.0;
            } else if predicted == class {
                fp += 1.0;
            } else if label == class {
                fn_ += 1.0;
            }
        }
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        f1_sum += f1;
    }
    Ok(f1_sum / 2.0)
}

/// Confusion counts at a threshold, anomalous = positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for (&score, &label) in scores.iter().zip(labels.iter()) {
        match (score > threshold, label == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// Per-image scores plus the aggregate metrics of one evaluation run.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// (id, score, label), in dataset order.
    pub per_image: Vec<(String, f64, u8)>,
    pub auroc: f64,
    pub macro_f1: f64,
    pub threshold: f64,
    pub confusion: ConfusionCounts,
    /// Wall-clock scoring time. Not part of the serialized report, which must
    /// be byte-identical across reruns.
    pub wall_clock_seconds: f64,
}

impl EvalReport {
    pub fn from_scores(
        per_image: Vec<(String, f64, u8)>,
        threshold: f64,
        wall_clock_seconds: f64,
    ) -> Result<Self> {
        let scores: Vec<f64> = per_image.iter().map(|(_, s, _)| *s).collect();
        let labels: Vec<u8> = per_image.iter().map(|(_, _, l)| *l).collect();
        let auroc_value = auroc(&scores, &labels)?;
        let f1 = macro_f1(&scores, &labels, threshold)?;
        let confusion = confusion(&scores, &labels, threshold);
        Ok(Self {
            per_image,
            auroc: auroc_value,
            macro_f1: f1,
            threshold,
            confusion,
            wall_clock_seconds,
        })
    }

    /// Human-readable report body. Deterministic for fixed inputs.
    pub fn render(&self) -> String {
        let c = &self.confusion;
        format!(
            "items: {}\npositives: {}\nnegatives: {}\nauroc: {:.6}\nmacro_f1: {:.6}\nthreshold: {:.3}\ntp: {} fp: {} tn: {} fn: {}\n",
            self.per_image.len(),
            c.tp + c.fn_,
            c.tn + c.fp,
            self.auroc,
            self.macro_f1,
            self.threshold,
            c.tp,
            c.fp,
            c.tn,
            c.fn_,
        )
    }

    /// Flat per-image score table: `id <TAB> score <TAB> label`.
    pub fn render_scores(&self) -> String {
        let mut out = String::new();
        for (id, score, label) in &self.per_image {
            out.push_str(&format!("{id}\t{score:.9}\t{label}\n"));
        }
        out
    }

    pub fn write_files(&self, report_path: &Path, scores_path: &Path) -> Result<()> {
        std::fs::write(report_path, self.render())?;
        std::fs::write(scores_path, self.render_scores())?;
        Ok(())
    }
}

/// Score each test item with one model and assemble the report.
pub fn evaluate(
    model: &DiscriminatorModel,
    test: &Dataset,
    store: &ImageStore,
) -> Result<EvalReport> {
    evaluate_ensemble(std::slice::from_ref(model), test, store)
}

/// Score each test item with every model and average per image.
pub fn evaluate_ensemble(
    models: &[DiscriminatorModel],
    test: &Dataset,
    store: &ImageStore,
) -> Result<EvalReport> {
    if models.is_empty() {
        return Err(CoreError::invalid("evaluation needs at least one model"));
    }
    if test.is_empty() {
        return Err(CoreError::Data("test dataset is empty".into()));
    }
    let start = Instant::now();
    let per_image: Vec<(String, f64, u8)> = test
        .items
        .par_iter()
        .map(|item| -> Result<(String, f64, u8)> {
            let image = store.load(item)?;
            let members: Vec<AnomalyScore> = models
                .iter()
                .map(|m| anomaly_score(&item.id(), &image, m))
                .collect::<Result<Vec<_>>>()?;
            Ok((item.id(), ensemble_score(&members)?, item.label))
        })
        .collect::<Result<Vec<_>>>()?;
    let elapsed = start.elapsed().as_secs_f64();
    EvalReport::from_scores(per_image, DEFAULT_F1_THRESHOLD, elapsed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, stream};

    #[test]
    fn perfect_separation_is_one() {
        let scores = [0.1, 0.2, 0.8, 0.9];
        let labels = [0, 0, 1, 1];
        assert_eq!(auroc(&scores, &labels).unwrap(), 1.0);
        assert_eq!(auroc_bruteforce(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn all_ties_is_half() {
        let scores = [0.5, 0.5, 0.5, 0.5];
        let labels = [0, 1, 0, 1];
        assert_eq!(auroc(&scores, &labels).unwrap(), 0.5);
        assert_eq!(auroc_bruteforce(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn hand_checkable_case() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [0, 0, 1, 1];
        assert_eq!(auroc(&scores, &labels).unwrap(), 0.75);
        assert_eq!(auroc_bruteforce(&scores, &labels).unwrap(), 0.75);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            auroc(&[0.1, 0.2], &[0, 0]),
            Err(CoreError::UndefinedMetric(_))
        ));
        assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(auroc(&[0.1], &[0, 1]).is_err());
    }

    fn random_instance(rng: &mut rng::ChaCha8Rng, max_n: usize) -> (Vec<f64>, Vec<u8>) {
        let n = 2 + rng::uniform_index(rng, max_n - 1);
        loop {
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    // Quantized scores so ties actually occur.
                    (rng::uniform_f64(rng) * 8.0).floor() / 8.0
                })
                .collect();
            let labels: Vec<u8> = (0..n).map(|_| u8::from(rng::uniform_f64(rng) < 0.4)).collect();
            let pos = labels.iter().filter(|&&l| l == 1).count();
            if pos > 0 && pos < n {
                return (scores, labels);
            }
        }
    }

    #[test]
    fn rank_auroc_matches_bruteforce_with_ties() {
        let mut rng = stream(17, &[]);
        for _ in 0..300 {
            let (scores, labels) = random_instance(&mut rng, 60);
            let fast = auroc(&scores, &labels).unwrap();
            let slow = auroc_bruteforce(&scores, &labels).unwrap();
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn auroc_is_invariant_under_monotone_transforms() {
        let mut rng = stream(19, &[]);
        for _ in 0..100 {
            let (scores, labels) = random_instance(&mut rng, 40);
            let base = auroc(&scores, &labels).unwrap();
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s + 1.0).exp()).collect();
            let after = auroc(&transformed, &labels).unwrap();
            assert!((base - after).abs() < 1e-12);
        }
    }

    #[test]
    fn negating_scores_complements_auroc() {
        let mut rng = stream(23, &[]);
        for _ in 0..100 {
            let (scores, labels) = random_instance(&mut rng, 40);
            let base = auroc(&scores, &labels).unwrap();
            let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
            let after = auroc(&negated, &labels).unwrap();
            assert!((base + after - 1.0).abs() < 1e-12, "{base} + {after} != 1");
        }
    }

    #[test]
    fn macro_f1_perfect_predictions() {
        let scores = [0.1, 0.2, 0.8, 0.9];
        let labels = [0, 0, 1, 1];
        assert_eq!(macro_f1(&scores, &labels, 0.3).unwrap(), 1.0);
    }

    #[test]
    fn macro_f1_degenerate_all_negative_predictor() {
        // All scores 0 with mixed labels: class-1 F1 = 0, class-0 F1 =
        // 2*tn / (2*tn + fn) with tn = negatives, fn = positives.
        let scores = [0.0, 0.0, 0.0, 0.0];
        let labels = [0, 0, 1, 1];
        let f1_class0 = 2.0 * 2.0 / (2.0 * 2.0 + 2.0);
        let expected = (f1_class0 + 0.0) / 2.0;
        assert!((macro_f1(&scores, &labels, 0.3).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn threshold_comparison_is_strict() {
        // score == threshold must predict negative.
        let scores = [0.3, 0.31];
        let labels = [0, 1];
        assert_eq!(macro_f1(&scores, &labels, 0.3).unwrap(), 1.0);
    }

    #[test]
    fn macro_f1_matches_confusion_oracle() {
        let mut rng = stream(29, &[]);
        for _ in 0..50 {
            let n = 20;
            let scores: Vec<f64> = (0..n).map(|_| rng::uniform_f64(&mut rng)).collect();
            let labels: Vec<u8> =
                (0..n).map(|_| u8::from(rng::uniform_f64(&mut rng) < 0.5)).collect();
            let fast = macro_f1(&scores, &labels, 0.3).unwrap();

            // Hand confusion-matrix computation.
            let mut slow_sum = 0.0;
            for class in [0u8, 1u8] {
                let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    let pred = u8::from(scores[i] > 0.3);
                    if pred == class && labels[i] == class {
                        tp += 1.0;
                    }
                    if pred == class && labels[i] != class {
                        fp += 1.0;
                    }
                    if pred != class && labels[i] == class {
                        fn_ += 1.0;
                    }
                }
                let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
                let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
                slow_sum += if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
            }
            assert!((fast - slow_sum / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn report_counts_sum_to_items_and_renders_deterministically() {
        let per_image = vec![
            ("a".to_string(), 0.1, 0u8),
            ("b".to_string(), 0.9, 1u8),
            ("c".to_string(), 0.2, 0u8),
            ("d".to_string(), 0.6, 1u8),
        ];
        let report = EvalReport::from_scores(per_image.clone(), 0.3, 1.23).unwrap();
        assert_eq!(report.confusion.total(), 4);
        assert_eq!(report.auroc, 1.0);
        let again = EvalReport::from_scores(per_image, 0.3, 9.87).unwrap();
        assert_eq!(report.render(), again.render());
        assert_eq!(report.render_scores(), again.render_scores());
        assert!(!report.render().contains("1.23"));
    }

    #[test]
    fn constant_scores_give_half_auroc_in_report() {
        let per_image = vec![
            ("a".to_string(), 0.4, 0u8),
            ("b".to_string(), 0.4, 1u8),
            ("c".to_string(), 0.4, 0u8),
        ];
        let report = EvalReport::from_scores(per_image, 0.3, 0.0).unwrap();
        assert_eq!(report.auroc, 0.5);
    }
}
