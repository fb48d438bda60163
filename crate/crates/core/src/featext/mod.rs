//! Hierarchical feature extraction and patch-aware fusion.
//!
//! Images pass through a frozen 4-stage convolutional extractor (stem stride
//! 4, then stride-2 stages). Per fusion stage, each position is replaced by
//! the mean of its p x p neighborhood (clipped at borders), the deeper map is
//! bilinearly interpolated up to the shallower resolution, and channels are
//! concatenated into the final patch-aware feature map.

pub mod extractor;

pub use extractor::{ConvLayer, Extractor, Stage4Trace};

use std::path::PathBuf;

use crate::error::{CoreError, Result};
use crate::imagesynth::Image;
use crate::linalg::Real;

/// Stage marker for maps produced by fusing several stages.
pub const FUSED_STAGE: u8 = 0;

/// Default seed for the built-in deterministic extractor weights.
pub const DEFAULT_WEIGHT_SEED: u64 = 0x6741_4457; // "gADW"

/// Spatial grid of feature vectors, laid out `(y * width + x) * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T = f32> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Extractor stage (1-4) this map came from, or [`FUSED_STAGE`].
    pub stage: u8,
    pub values: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(width: usize, height: usize, channels: usize, stage: u8) -> Self {
        Self { width, height, channels, stage, values: vec![T::ZERO; width * height * channels] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.values[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: T) {
        self.values[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn positions(&self) -> usize {
        self.width * self.height
    }
}

/// Where extractor weights come from.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightSource {
    /// Deterministic seeded orthogonal-style initialization.
    Seeded(u64),
    /// A weight container file (see the README for the exact layout).
    File(PathBuf),
}

/// Architecture and fusion settings of the feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorSpec {
    /// Square working resolution images must be resized to before extraction.
    pub input_resolution: usize,
    /// Output channels of stages 1-4.
    pub stage_channels: [usize; 4],
    /// Neighborhood size of the patch aggregation; odd.
    pub patch_size: usize,
    /// Stages whose aggregated maps are fused, ascending.
    pub fusion_stages: Vec<usize>,
    pub weight_source: WeightSource,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        Self {
            input_resolution: 256,
            stage_channels: [32, 64, 128, 256],
            patch_size: 3,
            fusion_stages: vec![3, 4],
            weight_source: WeightSource::Seeded(DEFAULT_WEIGHT_SEED),
        }
    }
}

impl ExtractorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_resolution == 0 || self.input_resolution % 32 != 0 {
            return Err(CoreError::invalid(
                "input_resolution must be a positive multiple of 32",
            ));
        }
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return Err(CoreError::invalid("patch_size must be odd and >= 1"));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(CoreError::invalid("stage channel counts must be >= 1"));
        }
        if self.fusion_stages.is_empty() {
            return Err(CoreError::invalid("fusion_stages must be non-empty"));
        }
        let mut prev = 0usize;
        for &s in &self.fusion_stages {
            if !(1..=4).contains(&s) || s <= prev {
                return Err(CoreError::invalid(
                    "fusion_stages must be ascending values in 1..=4",
                ));
            }
            prev = s;
        }
        Ok(())
    }

    /// Spatial resolution of a stage's output; stage strides are {4,8,16,32}.
    pub fn stage_resolution(&self, stage: usize) -> usize {
        self.input_resolution >> (stage + 1)
    }

    /// Channel count of the fused patch-aware map.
    pub fn fused_channels(&self) -> usize {
        self.fusion_stages.iter().map(|&s| self.stage_channels[s - 1]).sum()
    }

    /// Spatial resolution of the fused patch-aware map.
    pub fn fused_resolution(&self) -> usize {
        self.stage_resolution(self.fusion_stages[0])
    }
}

/// Extract the four stage feature maps for one image.
///
/// Convenience wrapper that builds the extractor from the spec; loops should
/// build an [`Extractor`] once and call [`Extractor::extract`].
pub fn extract_hierarchical(image: &Image, spec: &ExtractorSpec) -> Result<Vec<FeatureMap>> {
    Extractor::<f32>::from_spec(spec)?.extract(image)
}

/// Mean over the p x p neighborhood of every position, neighborhoods clipped
/// to valid positions and averaged over the clipped count. Resolution and
/// channel count are preserved.
pub fn aggregate_patches<T: Real>(f: &FeatureMap<T>, p: usize) -> Result<FeatureMap<T>> {
    if p == 0 || p % 2 == 0 {
        return Err(CoreError::invalid("patch size must be odd and >= 1"));
    }
    let (w, h, ch) = (f.width, f.height, f.channels);
    let half = p / 2;

    // Horizontal pass: windowed sums along x and the window widths.
    let mut hsum = vec![T::ZERO; w * h * ch];
    let mut hcnt = vec![0usize; w];
    for (x, cnt) in hcnt.iter_mut().enumerate() {
        let x0 = x.saturating_sub(half);
        let x1 = (x + half).min(w - 1);
        *cnt = x1 - x0 + 1;
    }
    for y in 0..h {
        for x in 0..w {
            let x0 = x.saturating_sub(half);
            let x1 = (x + half).min(w - 1);
            let out = (y * w + x) * ch;
            for xi in x0..=x1 {
                let src = (y * w + xi) * ch;
                for c in 0..ch {
                    hsum[out + c] += f.values[src + c];
                }
            }
        }
    }

    // Vertical pass over the horizontal sums, divided by the clipped count.
    let mut out = FeatureMap::new(w, h, ch, f.stage);
    for y in 0..h {
        let y0 = y.saturating_sub(half);
        let y1 = (y + half).min(h - 1);
        let vcnt = y1 - y0 + 1;
        for x in 0..w {
            let denom = T::from_f64((hcnt[x] * vcnt) as f64);
            let dst = (y * w + x) * ch;
            for c in 0..ch {
                let mut acc = T::ZERO;
                for yi in y0..=y1 {
                    acc += hsum[(yi * w + x) * ch + c];
                }
                out.values[dst + c] = acc / denom;
            }
        }
    }
    Ok(out)
}

/// Bilinear interpolation to a new resolution with align-corners sampling:
/// output corners map exactly onto input corners.
pub fn interpolate_bilinear<T: Real>(
    f: &FeatureMap<T>,
    out_w: usize,
    out_h: usize,
) -> FeatureMap<T> {
    let (w, h, ch) = (f.width, f.height, f.channels);
    let mut out = FeatureMap::new(out_w, out_h, ch, f.stage);
    let scale = |o: usize, out_n: usize, in_n: usize| -> f64 {
        if out_n <= 1 || in_n <= 1 {
            0.0
        } else {
            o as f64 * (in_n - 1) as f64 / (out_n - 1) as f64
        }
    };
    for oy in 0..out_h {
        let sy = scale(oy, out_h, h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = T::from_f64(sy - y0 as f64);
        for ox in 0..out_w {
            let sx = scale(ox, out_w, w);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = T::from_f64(sx - x0 as f64);
            let dst = (oy * out_w + ox) * ch;
            for c in 0..ch {
                let v00 = f.values[(y0 * w + x0) * ch + c];
                let v10 = f.values[(y0 * w + x1) * ch + c];
                let v01 = f.values[(y1 * w + x0) * ch + c];
                let v11 = f.values[(y1 * w + x1) * ch + c];
                // Lerp form keeps constants bit-exact.
                let top = v00 + wx * (v10 - v00);
                let bot = v01 + wx * (v11 - v01);
                out.values[dst + c] = top + wy * (bot - top);
            }
        }
    }
    out
}

/// Adjoint of [`interpolate_bilinear`]: scatter output-space gradients back
/// to the input grid. Used by the extractor fine-tune mode.
pub fn backward_interpolate<T: Real>(
    d_out: &FeatureMap<T>,
    in_w: usize,
    in_h: usize,
) -> FeatureMap<T> {
    let (ow, oh, ch) = (d_out.width, d_out.height, d_out.channels);
    let mut d_in = FeatureMap::new(in_w, in_h, ch, d_out.stage);
    let scale = |o: usize, out_n: usize, in_n: usize| -> f64 {
        if out_n <= 1 || in_n <= 1 {
            0.0
        } else {
            o as f64 * (in_n - 1) as f64 / (out_n - 1) as f64
        }
    };
    for oy in 0..oh {
        let sy = scale(oy, oh, in_h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let wy = sy - y0 as f64;
        for ox in 0..ow {
            let sx = scale(ox, ow, in_w);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let wx = sx - x0 as f64;
            let src = (oy * ow + ox) * ch;
            for c in 0..ch {
                let g = d_out.values[src + c];
                d_in.values[(y0 * in_w + x0) * ch + c] +=
                    g * T::from_f64((1.0 - wy) * (1.0 - wx));
                d_in.values[(y0 * in_w + x1) * ch + c] += g * T::from_f64((1.0 - wy) * wx);
                d_in.values[(y1 * in_w + x0) * ch + c] += g * T::from_f64(wy * (1.0 - wx));
                d_in.values[(y1 * in_w + x1) * ch + c] += g * T::from_f64(wy * wx);
            }
        }
    }
    d_in
}

/// Adjoint of [`aggregate_patches`]: each output gradient is spread evenly
/// over the clipped neighborhood it averaged.
pub fn backward_aggregate<T: Real>(d_out: &FeatureMap<T>, p: usize) -> Result<FeatureMap<T>> {
    if p == 0 || p % 2 == 0 {
        return Err(CoreError::invalid("patch size must be odd and >= 1"));
    }
    let (w, h, ch) = (d_out.width, d_out.height, d_out.channels);
    let half = p / 2;
    let mut d_in = FeatureMap::new(w, h, ch, d_out.stage);
    for y in 0..h {
        let y0 = y.saturating_sub(half);
        let y1 = (y + half).min(h - 1);
        for x in 0..w {
            let x0 = x.saturating_sub(half);
            let x1 = (x + half).min(w - 1);
            let count = T::from_f64(((x1 - x0 + 1) * (y1 - y0 + 1)) as f64);
            let src = (y * w + x) * ch;
            for yi in y0..=y1 {
                for xi in x0..=x1 {
                    let dst = (yi * w + xi) * ch;
                    for c in 0..ch {
                        d_in.values[dst + c] += d_out.values[src + c] / count;
                    }
                }
            }
        }
    }
    Ok(d_in)
}

/// Fuse two aggregated stage maps: the deeper map is interpolated up to the
/// shallower resolution and the channels are concatenated.
pub fn fuse_features<T: Real>(f3: &FeatureMap<T>, f4: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if f4.width > f3.width || f4.height > f3.height {
        return Err(CoreError::invalid(
            "deeper map resolution must not exceed the shallower map",
        ));
    }
    let up = interpolate_bilinear(f4, f3.width, f3.height);
    let ch = f3.channels + f4.channels;
    let mut out = FeatureMap::new(f3.width, f3.height, ch, FUSED_STAGE);
    for i in 0..f3.positions() {
        let dst = i * ch;
        out.values[dst..dst + f3.channels]
            .copy_from_slice(&f3.values[i * f3.channels..(i + 1) * f3.channels]);
        out.values[dst + f3.channels..dst + ch]
            .copy_from_slice(&up.values[i * f4.channels..(i + 1) * f4.channels]);
    }
    Ok(out)
}

/// Full patch-aware pipeline: hierarchical extraction, per-stage patch
/// aggregation, interpolation and channel concatenation.
pub fn patch_features(image: &Image, spec: &ExtractorSpec) -> Result<FeatureMap> {
    Extractor::<f32>::from_spec(spec)?.patch_features(image)
}

/// Fuse aggregated maps for an arbitrary ascending stage set.
pub(crate) fn fuse_stage_maps<T: Real>(maps: Vec<FeatureMap<T>>) -> Result<FeatureMap<T>> {
    let mut iter = maps.into_iter();
    let mut fused = iter.next().ok_or_else(|| CoreError::invalid("no maps to fuse"))?;
    for next in iter {
        fused = fuse_features(&fused, &next)?;
    }
    fused.stage = FUSED_STAGE;
    Ok(fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, uniform_f64};

    fn random_map(w: usize, h: usize, ch: usize, seed: u64) -> FeatureMap<f64> {
        let mut rng = stream(seed, &[31]);
        let mut f = FeatureMap::new(w, h, ch, 1);
        for v in f.values.iter_mut() {
            *v = uniform_f64(&mut rng) * 4.0 - 2.0;
        }
        f
    }

    /// Reference double-loop neighborhood mean with border clipping.
    fn naive_aggregate(f: &FeatureMap<f64>, p: usize) -> FeatureMap<f64> {
        let half = p / 2;
        let mut out = FeatureMap::new(f.width, f.height, f.channels, f.stage);
        for y in 0..f.height {
            for x in 0..f.width {
                for c in 0..f.channels {
                    let mut sum = 0.0;
                    let mut count = 0.0;
                    for dy in -(half as isize)..=half as isize {
                        for dx in -(half as isize)..=half as isize {
                            let (nx, ny) = (x as isize + dx, y as isize + dy);
                            if nx >= 0
                                && ny >= 0
                                && (nx as usize) < f.width
                                && (ny as usize) < f.height
                            {
                                sum += f.get(nx as usize, ny as usize, c);
                                count += 1.0;
                            }
                        }
                    }
                    out.set(x, y, c, sum / count);
                }
            }
        }
        out
    }

    #[test]
    fn aggregate_p1_is_identity() {
        let f = random_map(5, 4, 3, 1);
        let out = aggregate_patches(&f, 1).unwrap();
        assert_eq!(out.values, f.values);
    }

    #[test]
    fn aggregate_constant_stays_constant() {
        let mut f = FeatureMap::<f64>::new(6, 6, 2, 1);
        for v in f.values.iter_mut() {
            *v = 1.75;
        }
        let out = aggregate_patches(&f, 3).unwrap();
        for &v in &out.values {
            assert!((v - 1.75).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_two_by_two_patch_three() {
        let mut f = FeatureMap::<f64>::new(2, 2, 1, 1);
        f.values = vec![1.0, 2.0, 3.0, 4.0];
        let out = aggregate_patches(&f, 3).unwrap();
        for &v in &out.values {
            assert!((v - 2.5).abs() < 1e-12, "expected 2.5, got {v}");
        }
    }

    #[test]
    fn aggregate_rejects_even_patch() {
        let f = random_map(3, 3, 1, 2);
        assert!(aggregate_patches(&f, 2).is_err());
        assert!(aggregate_patches(&f, 0).is_err());
    }

    #[test]
    fn aggregate_matches_naive_reference() {
        let mut rng = stream(77, &[]);
        for case in 0..300 {
            let w = 1 + (case % 5);
            let h = 1 + ((case / 5) % 5);
            let ch = 1 + (case % 4);
            let p = [1, 3, 5][case % 3];
            let f = random_map(w, h, ch, 500 + case as u64);
            let fast = aggregate_patches(&f, p).unwrap();
            let slow = naive_aggregate(&f, p);
            for (a, b) in fast.values.iter().zip(slow.values.iter()) {
                let rel = (a - b).abs() / b.abs().max(1.0);
                assert!(rel < 1e-6, "case {case}: {a} vs {b}");
            }
            let _ = uniform_f64(&mut rng);
        }
    }

    #[test]
    fn aggregate_respects_neighborhood_bounds() {
        for case in 0..50u64 {
            let f = random_map(5, 5, 2, 900 + case);
            let out = aggregate_patches(&f, 3).unwrap();
            for y in 0..5 {
                for x in 0..5 {
                    for c in 0..2 {
                        let mut lo = f64::INFINITY;
                        let mut hi = f64::NEG_INFINITY;
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                                if (0..5).contains(&nx) && (0..5).contains(&ny) {
                                    let v = f.get(nx as usize, ny as usize, c);
                                    lo = lo.min(v);
                                    hi = hi.max(v);
                                }
                            }
                        }
                        let v = out.get(x, y, c);
                        assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn interpolate_constant_is_exact() {
        let mut f = FeatureMap::<f64>::new(3, 3, 2, 4);
        for v in f.values.iter_mut() {
            *v = -0.625;
        }
        let up = interpolate_bilinear(&f, 7, 9);
        for &v in &up.values {
            assert_eq!(v, -0.625);
        }
    }

    #[test]
    fn interpolate_matches_closed_form_1d() {
        let mut f = FeatureMap::<f64>::new(2, 1, 1, 4);
        f.values = vec![0.0, 1.0];
        let up = interpolate_bilinear(&f, 4, 1);
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (got, want) in up.values.iter().zip(expected.iter()) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn fuse_shapes_and_errors() {
        let f3 = random_map(16, 16, 5, 1);
        let f4 = random_map(8, 8, 7, 2);
        let fused = fuse_features(&f3, &f4).unwrap();
        assert_eq!((fused.width, fused.height, fused.channels), (16, 16, 12));
        assert_eq!(fused.stage, FUSED_STAGE);
        assert!(fuse_features(&f4, &f3).is_err());
    }

    #[test]
    fn fuse_preserves_shallow_channels_and_constant_deep() {
        let f3 = random_map(4, 4, 2, 3);
        let mut f4 = FeatureMap::<f64>::new(2, 2, 3, 4);
        for v in f4.values.iter_mut() {
            *v = 2.5;
        }
        let fused = fuse_features(&f3, &f4).unwrap();
        for i in 0..16 {
            assert_eq!(fused.values[i * 5], f3.values[i * 2]);
            assert_eq!(fused.values[i * 5 + 1], f3.values[i * 2 + 1]);
            for c in 2..5 {
                assert_eq!(fused.values[i * 5 + c], 2.5);
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(ExtractorSpec::default().validate().is_ok());
        let mut bad = ExtractorSpec { patch_size: 2, ..Default::default() };
        assert!(bad.validate().is_err());
        bad = ExtractorSpec { fusion_stages: vec![], ..Default::default() };
        assert!(bad.validate().is_err());
        bad = ExtractorSpec { fusion_stages: vec![4, 3], ..Default::default() };
        assert!(bad.validate().is_err());
        bad = ExtractorSpec { input_resolution: 100, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn stage_resolutions_follow_stride_schedule() {
        let spec = ExtractorSpec::default();
        assert_eq!(spec.stage_resolution(1), 64);
        assert_eq!(spec.stage_resolution(2), 32);
        assert_eq!(spec.stage_resolution(3), 16);
        assert_eq!(spec.stage_resolution(4), 8);
        assert_eq!(spec.fused_resolution(), 16);
        assert_eq!(spec.fused_channels(), 128 + 256);
    }
}
