//! Per-position MLP classifier.
//!
//! The classifier is applied independently and identically at every spatial
//! position of a feature map: positions become rows of a matrix, layers are
//! dense with tanh between them, and the two output logits are turned into
//! probabilities by a softmax.

use crate::error::{CoreError, Result};
use crate::featext::FeatureMap;
use crate::linalg::{mm_nn, mm_nt, mm_tn, Real};
use crate::rng::{self, ChaCha8Rng};

/// Class index of normal (negative) predictions.
pub const CLASS_NORMAL: usize = 0;
/// Class index of anomalous (positive) predictions.
pub const CLASS_ANOMALOUS: usize = 1;

/// Probabilities are clamped to this floor inside cross-entropy.
pub const PROB_CLAMP: f64 = 1e-12;

/// One dense layer with `(out, in)` row-major weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T = f32> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, w: vec![T::ZERO; out_dim * in_dim], b: vec![T::ZERO; out_dim] }
    }

    /// Seeded uniform fan-in initialization: U(-1/sqrt(in), 1/sqrt(in)) for
    /// weights and biases.
    pub fn seeded(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut layer = Self::zeros(in_dim, out_dim);
        for v in layer.w.iter_mut() {
            *v = T::from_f64(rng::uniform_in(rng, -bound, bound));
        }
        for v in layer.b.iter_mut() {
            *v = T::from_f64(rng::uniform_in(rng, -bound, bound));
        }
        layer
    }
}

/// Multi-layer perceptron ending in 2 logits; tanh between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T = f32> {
    pub layers: Vec<Dense<T>>,
}

/// The f32 production classifier.
pub type MlpClassifier = Mlp<f32>;

impl<T: Real> Mlp<T> {
    /// Build `input -> hidden... -> 2` with seeded initialization.
    pub fn seeded(input_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(idx, pair)| {
                let mut rng = rng::stream(seed, &[0x4D4C50, idx as u64]);
                Dense::seeded(pair[0], pair[1], &mut rng)
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Forward pass over `n` rows. Returns every post-activation, the last
    /// entry being the raw logits.
    pub fn forward(&self, x: &[T], n: usize) -> Vec<Vec<T>> {
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (idx, layer) in self.layers.iter().enumerate() {
            let prev = &acts[idx];
            let mut out = mm_nt(prev, &layer.w, n, layer.in_dim, layer.out_dim);
            for row in 0..n {
                for c in 0..layer.out_dim {
                    out[row * layer.out_dim + c] += layer.b[c];
                }
            }
            if idx + 1 < self.layers.len() {
                for v in out.iter_mut() {
                    *v = v.tanh();
                }
            }
            acts.push(out);
        }
        acts
    }

    /// Logits for `n` rows without keeping intermediates.
    pub fn logits(&self, x: &[T], n: usize) -> Vec<T> {
        self.forward(x, n).pop().unwrap()
    }

    /// Backward pass given the loss gradient at the logits. Returns per-layer
    /// weight/bias gradients and, when `want_input_grad`, the gradient at the
    /// network input.
    pub fn backward(
        &self,
        acts: &[Vec<T>],
        d_logits: &[T],
        n: usize,
        want_input_grad: bool,
    ) -> MlpGrads<T> {
        let mut d_w: Vec<Vec<T>> = self.layers.iter().map(|l| vec![T::ZERO; l.w.len()]).collect();
        let mut d_b: Vec<Vec<T>> = self.layers.iter().map(|l| vec![T::ZERO; l.b.len()]).collect();
        let mut delta = d_logits.to_vec();
        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            let input = &acts[idx];
            // dW = delta^T (n x out) * input (n x in)
            d_w[idx] = mm_tn(&delta, input, layer.out_dim, n, layer.in_dim);
            for row in 0..n {
                for c in 0..layer.out_dim {
                    d_b[idx][c] += delta[row * layer.out_dim + c];
                }
            }
            if idx == 0 && !want_input_grad {
                break;
            }
            // d input = delta (n x out) * W (out x in)
            let mut d_in = mm_nn(&delta, &layer.w, n, layer.out_dim, layer.in_dim);
            if idx > 0 {
                // Back through tanh: the stored activation is tanh(z).
                let a = &acts[idx];
                for (g, &act) in d_in.iter_mut().zip(a.iter()) {
                    *g = *g * (T::ONE - act * act);
                }
            }
            delta = d_in;
        }
        let d_input = want_input_grad.then_some(delta);
        MlpGrads { d_w, d_b, d_input }
    }
}

/// Gradients produced by one backward pass.
pub struct MlpGrads<T> {
    pub d_w: Vec<Vec<T>>,
    pub d_b: Vec<Vec<T>>,
    pub d_input: Option<Vec<T>>,
}

impl<T: Real> MlpGrads<T> {
    pub fn zeros_like(mlp: &Mlp<T>) -> Self {
        Self {
            d_w: mlp.layers.iter().map(|l| vec![T::ZERO; l.w.len()]).collect(),
            d_b: mlp.layers.iter().map(|l| vec![T::ZERO; l.b.len()]).collect(),
            d_input: None,
        }
    }

    pub fn accumulate(&mut self, other: &MlpGrads<T>) {
        for (acc, g) in self.d_w.iter_mut().zip(other.d_w.iter()) {
            for (a, &v) in acc.iter_mut().zip(g.iter()) {
                *a += v;
            }
        }
        for (acc, g) in self.d_b.iter_mut().zip(other.d_b.iter()) {
            for (a, &v) in acc.iter_mut().zip(g.iter()) {
                *a += v;
            }
        }
    }
}

/// Row-wise softmax of an `n x 2` logit matrix, numerically stabilized.
pub fn softmax_rows<T: Real>(logits: &[T], n: usize) -> Vec<T> {
    let mut probs = vec![T::ZERO; logits.len()];
    let classes = logits.len() / n.max(1);
    for row in 0..n {
        let chunk = &logits[row * classes..(row + 1) * classes];
        let mut max = chunk[0];
        for &v in chunk.iter() {
            max = max.maximum(v);
        }
        let mut denom = T::ZERO;
        for (i, &v) in chunk.iter().enumerate() {
            let e = (v - max).exp();
            probs[row * classes + i] = e;
            denom += e;
        }
        for i in 0..classes {
            probs[row * classes + i] = probs[row * classes + i] / denom;
        }
    }
    probs
}

/// Per-position 2-class probabilities over a spatial grid, laid out
/// `(y * width + x) * 2 + class`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbGrid<T = f32> {
    pub width: usize,
    pub height: usize,
    pub probs: Vec<T>,
}

impl<T: Real> ProbGrid<T> {
    pub fn positions(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn prob(&self, pos: usize, class: usize) -> T {
        self.probs[pos * 2 + class]
    }
}

/// Apply the classifier at every position of a feature map.
pub fn classify<T: Real>(f: &FeatureMap<T>, model: &Mlp<T>) -> Result<ProbGrid<T>> {
    if f.channels != model.input_dim() {
        return Err(CoreError::invalid(format!(
            "feature channels {} do not match classifier input width {}",
            f.channels,
            model.input_dim()
        )));
    }
    let n = f.positions();
    let logits = model.logits(&f.values, n);
    Ok(ProbGrid { width: f.width, height: f.height, probs: softmax_rows(&logits, n) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_map(w: usize, h: usize, ch: usize, seed: u64) -> FeatureMap<f64> {
        let mut rng = rng::stream(seed, &[3]);
        let mut f = FeatureMap::new(w, h, ch, 0);
        for v in f.values.iter_mut() {
            *v = rng::uniform_f64(&mut rng) * 2.0 - 1.0;
        }
        f
    }

    #[test]
    fn zero_model_predicts_uniform() {
        let mlp = Mlp::<f64> { layers: vec![Dense::zeros(4, 2)] };
        let f = random_map(3, 3, 4, 1);
        let grid = classify(&f, &mlp).unwrap();
        for pos in 0..grid.positions() {
            assert!((grid.prob(pos, 0) - 0.5).abs() < 1e-12);
            assert!((grid.prob(pos, 1) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mlp = Mlp::<f64>::seeded(6, &[5, 5], 3);
        let f = random_map(4, 4, 6, 2);
        let grid = classify(&f, &mlp).unwrap();
        for pos in 0..grid.positions() {
            let total = grid.prob(pos, 0) + grid.prob(pos, 1);
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mlp = Mlp::<f64>::seeded(6, &[4], 3);
        let f = random_map(2, 2, 5, 2);
        assert!(matches!(classify(&f, &mlp), Err(CoreError::InvalidArgument(_))));
    }

    #[test]
    fn spatial_permutation_permutes_outputs() {
        let mlp = Mlp::<f64>::seeded(3, &[4], 9);
        let f = random_map(4, 2, 3, 5);
        let grid = classify(&f, &mlp).unwrap();

        // Reverse the positions and classify again.
        let n = f.positions();
        let mut reversed = f.clone();
        for pos in 0..n {
            let src = n - 1 - pos;
            for c in 0..3 {
                reversed.values[pos * 3 + c] = f.values[src * 3 + c];
            }
        }
        let grid_rev = classify(&reversed, &mlp).unwrap();
        for pos in 0..n {
            for class in 0..2 {
                assert_eq!(grid.prob(n - 1 - pos, class), grid_rev.prob(pos, class));
            }
        }
    }

    #[test]
    fn hand_set_logits_match_closed_form_softmax() {
        // Single position, one hand-set layer giving the positive class
        // logit 2 and the negative class logit 0.
        let mut layer = Dense::<f64>::zeros(1, 2);
        layer.w[CLASS_ANOMALOUS] = 2.0;
        layer.w[CLASS_NORMAL] = 0.0;
        let mlp = Mlp { layers: vec![layer] };
        let mut f = FeatureMap::<f64>::new(1, 1, 1, 0);
        f.values[0] = 1.0;
        let grid = classify(&f, &mlp).unwrap();
        let expected = 2f64.exp() / (2f64.exp() + 1.0);
        assert!((grid.prob(0, CLASS_ANOMALOUS) - expected).abs() < 1e-12);
        assert!((grid.prob(0, CLASS_NORMAL) - (1.0 - expected)).abs() < 1e-12);
        assert!((expected - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn seeded_init_is_deterministic_and_bounded() {
        let a = Mlp::<f32>::seeded(10, &[8, 8], 4);
        let b = Mlp::<f32>::seeded(10, &[8, 8], 4);
        assert_eq!(a, b);
        let bound = 1.0 / (10f32).sqrt();
        for &w in &a.layers[0].w {
            assert!(w.abs() <= bound);
        }
        let c = Mlp::<f32>::seeded(10, &[8, 8], 5);
        assert_ne!(a, c);
    }
}
