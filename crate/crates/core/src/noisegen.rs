//! Gradient-noise fields and binary anomaly masks.
//!
//! A [`NoiseField`] is classic 2-D lattice gradient noise: unit gradient
//! vectors hashed from (lattice point, seed), quintic-fade interpolation of
//! the corner dot products, scaled into [-1, 1]. The field is exactly zero at
//! every lattice point and bit-identical for identical inputs.
//!
//! Thresholding a field yields a [`BinaryMask`]; [`constrain_mask`] then
//! intersects it with the grain foreground and enforces an area budget by
//! monotone threshold raising.

use crate::error::{CoreError, Result};
use crate::rng::derive_seed;

/// Scale applied to raw corner-interpolated noise. The theoretical amplitude
/// of 2-D unit-gradient lattice noise is sqrt(2)/2; scaling by sqrt(2) uses
/// the full [-1, 1] range. A final clamp absorbs float rounding at the bound.
const FIELD_SCALE: f32 = std::f32::consts::SQRT_2;

/// The 8 unit gradient directions gradients are hashed onto.
const GRADIENTS: [(f32, f32); 8] = [
    (1.0, 0.0),
    (-1.0, 0.0),
    (0.0, 1.0),
    (0.0, -1.0),
    (std::f32::consts::FRAC_1_SQRT_2, std::f32::consts::FRAC_1_SQRT_2),
    (-std::f32::consts::FRAC_1_SQRT_2, std::f32::consts::FRAC_1_SQRT_2),
    (std::f32::consts::FRAC_1_SQRT_2, -std::f32::consts::FRAC_1_SQRT_2),
    (-std::f32::consts::FRAC_1_SQRT_2, -std::f32::consts::FRAC_1_SQRT_2),
];

/// A deterministic scalar noise field with values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseField {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub seed: u64,
    pub grid_period: usize,
}

impl NoiseField {
    #[inline]
    pub fn value(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Build a field from explicit values; used by tests and by callers that
    /// synthesize fields procedurally.
    pub fn from_values(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(CoreError::invalid(format!(
                "field value count {} does not match {}x{}",
                values.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, values, seed: 0, grid_period: 1 })
    }
}

/// Per-pixel {0,1} mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![0; width * height] }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![1; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, bit: u8) {
        self.bits[y * self.width + x] = bit;
    }

    /// Count of 1-pixels.
    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Area budget for a synthesized mask relative to a foreground mask.
#[derive(Debug, Clone)]
pub struct MaskConstraint {
    /// Maximum allowed ratio of mask area to foreground area, in [0, 1].
    pub max_area_ratio: f64,
    pub foreground: BinaryMask,
}

#[inline]
fn fade(t: f32) -> f32 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

#[inline]
fn lerp(t: f32, a: f32, b: f32) -> f32 {
    a + t * (b - a)
}

#[inline]
fn gradient(seed: u64, gx: u64, gy: u64) -> (f32, f32) {
    let h = derive_seed(seed, &[gx, gy]);
    GRADIENTS[(h & 7) as usize]
}

/// Single-octave gradient noise over a `width` x `height` pixel grid with
/// lattice cells of `grid_period` pixels.
pub fn perlin_field(
    width: usize,
    height: usize,
    grid_period: usize,
    seed: u64,
) -> Result<NoiseField> {
    if width == 0 || height == 0 {
        return Err(CoreError::invalid("noise field dimensions must be >= 1"));
    }
    if grid_period == 0 {
        return Err(CoreError::invalid("grid_period must be >= 1"));
    }

    let inv = 1.0 / grid_period as f32;
    let mut values = Vec::with_capacity(width * height);
    for py in 0..height {
        let cy = (py / grid_period) as u64;
        let ty = (py - cy as usize * grid_period) as f32 * inv;
        let fy = fade(ty);
        for px in 0..width {
            let cx = (px / grid_period) as u64;
            let tx = (px - cx as usize * grid_period) as f32 * inv;
            let fx = fade(tx);

            let g00 = gradient(seed, cx, cy);
            let g10 = gradient(seed, cx + 1, cy);
            let g01 = gradient(seed, cx, cy + 1);
            let g11 = gradient(seed, cx + 1, cy + 1);

            let n00 = g00.0 * tx + g00.1 * ty;
            let n10 = g10.0 * (tx - 1.0) + g10.1 * ty;
            let n01 = g01.0 * tx + g01.1 * (ty - 1.0);
            let n11 = g11.0 * (tx - 1.0) + g11.1 * (ty - 1.0);

            let v = lerp(fy, lerp(fx, n00, n10), lerp(fx, n01, n11)) * FIELD_SCALE;
            values.push(v.clamp(-1.0, 1.0));
        }
    }
    Ok(NoiseField { width, height, values, seed, grid_period })
}

/// Multi-octave gradient noise. Octave k runs at period `grid_period >> k`
/// (floored at 1) with amplitude `persistence^k`; the sum is renormalized so
/// values stay in [-1, 1]. Octave periods halve exactly, so coarse lattice
/// points remain zeros of every octave and of the sum.
pub fn fbm_field(
    width: usize,
    height: usize,
    grid_period: usize,
    octaves: usize,
    persistence: f64,
    seed: u64,
) -> Result<NoiseField> {
    if octaves == 0 {
        return Err(CoreError::invalid("octaves must be >= 1"));
    }
    if !(0.0..=1.0).contains(&persistence) {
        return Err(CoreError::invalid("persistence must lie in [0, 1]"));
    }
    let mut total = perlin_field(width, height, grid_period, derive_seed(seed, &[0]))?;
    if octaves == 1 {
        total.seed = seed;
        return Ok(total);
    }
    let mut norm = 1.0f64;
    let mut amplitude = 1.0f64;
    for k in 1..octaves {
        let period = (grid_period >> k).max(1);
        amplitude *= persistence;
        norm += amplitude;
        let octave = perlin_field(width, height, period, derive_seed(seed, &[k as u64]))?;
        let amp = amplitude as f32;
        for (acc, v) in total.values.iter_mut().zip(octave.values.iter()) {
            *acc += amp * v;
        }
    }
    let inv_norm = (1.0 / norm) as f32;
    for v in total.values.iter_mut() {
        *v = (*v * inv_norm).clamp(-1.0, 1.0);
    }
    total.seed = seed;
    total.grid_period = grid_period;
    Ok(total)
}

/// Threshold a field: bit(i,j) = 1 iff field(i,j) > threshold.
pub fn binary_mask_from_field(field: &NoiseField, threshold: f32) -> BinaryMask {
    BinaryMask {
        width: field.width,
        height: field.height,
        bits: field.values.iter().map(|&v| u8::from(v > threshold)).collect(),
    }
}

fn masked_threshold_area(field: &NoiseField, keep: &BinaryMask, threshold: f32) -> usize {
    field
        .values
        .iter()
        .zip(keep.bits.iter())
        .filter(|&(&v, &k)| k != 0 && v > threshold)
        .count()
}

fn masked_threshold_mask(field: &NoiseField, keep: &BinaryMask, threshold: f32) -> BinaryMask {
    BinaryMask {
        width: field.width,
        height: field.height,
        bits: field
            .values
            .iter()
            .zip(keep.bits.iter())
            .map(|(&v, &k)| u8::from(k != 0 && v > threshold))
            .collect(),
    }
}

/// Number of bisection steps used when the AND-mask exceeds its area budget.
const CONSTRAIN_BISECT_ITERS: usize = 20;

/// Intersect `m_b` with the foreground and enforce
/// `area <= max_area_ratio * area(foreground)`.
///
/// If the plain intersection already fits the budget it is returned
/// unchanged. Otherwise the activation threshold is raised by bisection over
/// the field values until the budget holds; the upper bracket always
/// satisfies the bound, so the result does too.
pub fn constrain_mask(
    m_b: &BinaryMask,
    constraint: &MaskConstraint,
    field: &NoiseField,
) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&constraint.max_area_ratio) {
        return Err(CoreError::invalid("max_area_ratio must lie in [0, 1]"));
    }
    if !m_b.same_dims(&constraint.foreground)
        || m_b.width != field.width
        || m_b.height != field.height
    {
        return Err(CoreError::invalid(
            "mask, foreground and field dimensions must match",
        ));
    }

    let mut keep = m_b.clone();
    for (bit, &fg) in keep.bits.iter_mut().zip(constraint.foreground.bits.iter()) {
        *bit &= u8::from(fg != 0);
    }
    let budget = constraint.max_area_ratio * constraint.foreground.area() as f64;
    if (keep.area() as f64) <= budget {
        return Ok(keep);
    }

    let (mut lo, mut hi) = (-1.0f32, 1.0f32);
    // Values are <= 1, so threshold 1 gives the empty mask: hi starts valid.
    for _ in 0..CONSTRAIN_BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if (masked_threshold_area(field, &keep, mid) as f64) <= budget {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(masked_threshold_mask(field, &keep, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, uniform_f64};

    #[test]
    fn rejects_zero_dimensions() {
        assert!(perlin_field(0, 64, 16, 1).is_err());
        assert!(perlin_field(64, 0, 16, 1).is_err());
        assert!(perlin_field(64, 64, 0, 1).is_err());
    }

    #[test]
    fn value_at_origin_is_exactly_zero() {
        let f = perlin_field(64, 64, 16, 7).unwrap();
        assert_eq!(f.value(0, 0), 0.0);
    }

    #[test]
    fn lattice_points_are_zero() {
        let f = perlin_field(64, 64, 16, 7).unwrap();
        for y in (0..64).step_by(16) {
            for x in (0..64).step_by(16) {
                assert!(f.value(x, y).abs() < 1e-9, "({x},{y}) = {}", f.value(x, y));
            }
        }
    }

    #[test]
    fn repeated_generation_is_bit_identical() {
        let a = perlin_field(64, 64, 16, 7).unwrap();
        let b = perlin_field(64, 64, 16, 7).unwrap();
        assert_eq!(a, b);
        let c = perlin_field(64, 64, 16, 8).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn values_stay_in_range() {
        let f = perlin_field(64, 64, 16, 7).unwrap();
        let min = f.values.iter().copied().fold(f32::INFINITY, f32::min);
        let max = f.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        assert!(min >= -1.0 && max <= 1.0, "range [{min}, {max}]");
        // The field should actually use a good part of the range.
        assert!(max > 0.3 && min < -0.3, "degenerate range [{min}, {max}]");
    }

    #[test]
    fn adjacent_differences_shrink_with_period() {
        // Loose Lipschitz-style bound: per-pixel steps scale like 1/period.
        for period in [8usize, 16, 32] {
            let f = perlin_field(96, 96, period, 3).unwrap();
            let mut max_step = 0.0f32;
            for y in 0..96 {
                for x in 1..96 {
                    max_step = max_step.max((f.value(x, y) - f.value(x - 1, y)).abs());
                }
            }
            assert!(
                max_step <= 6.0 / period as f32,
                "period {period}: max step {max_step}"
            );
        }
    }

    #[test]
    fn fbm_keeps_range_and_coarse_lattice_zeros() {
        let f = fbm_field(64, 64, 16, 3, 0.5, 9).unwrap();
        for &v in &f.values {
            assert!((-1.0..=1.0).contains(&v));
        }
        for y in (0..64).step_by(16) {
            for x in (0..64).step_by(16) {
                assert!(f.value(x, y).abs() < 1e-9);
            }
        }
        assert_eq!(f, fbm_field(64, 64, 16, 3, 0.5, 9).unwrap());
    }

    #[test]
    fn threshold_extremes() {
        let f = perlin_field(64, 64, 16, 7).unwrap();
        let max = f.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let near_empty = binary_mask_from_field(&f, max - 1e-4);
        assert!(near_empty.area() < 64 * 64 / 50);
        let near_full = binary_mask_from_field(&f, -1.0 + 1e-6);
        assert!(near_full.area() > 64 * 64 * 9 / 10);
    }

    #[test]
    fn constant_zero_field_gives_empty_mask() {
        let f = NoiseField::from_values(8, 8, vec![0.0; 64]).unwrap();
        let m = binary_mask_from_field(&f, 0.5);
        assert_eq!(m.area(), 0);
    }

    #[test]
    fn mask_area_matches_per_pixel_scan() {
        let f = perlin_field(64, 64, 16, 7).unwrap();
        let m = binary_mask_from_field(&f, 0.4);
        let mut expected = 0usize;
        for y in 0..64 {
            for x in 0..64 {
                if f.value(x, y) > 0.4 {
                    expected += 1;
                    assert_eq!(m.get(x, y), 1);
                } else {
                    assert_eq!(m.get(x, y), 0);
                }
            }
        }
        assert_eq!(m.area(), expected);
        assert!(expected > 0);
    }

    #[test]
    fn constrain_r_zero_gives_empty_mask() {
        let f = perlin_field(64, 64, 16, 7).unwrap();
        let m = binary_mask_from_field(&f, 0.4);
        let c = MaskConstraint { max_area_ratio: 0.0, foreground: BinaryMask::ones(64, 64) };
        assert_eq!(constrain_mask(&m, &c, &f).unwrap().area(), 0);
    }

    #[test]
    fn constrain_empty_foreground_gives_empty_mask() {
        let f = perlin_field(64, 64, 16, 7).unwrap();
        let m = binary_mask_from_field(&f, 0.4);
        let c = MaskConstraint { max_area_ratio: 0.5, foreground: BinaryMask::zeros(64, 64) };
        assert_eq!(constrain_mask(&m, &c, &f).unwrap().area(), 0);
    }

    #[test]
    fn constrain_honors_area_budget_on_full_foreground() {
        let f = perlin_field(64, 64, 16, 7).unwrap();
        let m = binary_mask_from_field(&f, 0.4);
        let c = MaskConstraint { max_area_ratio: 0.2, foreground: BinaryMask::ones(64, 64) };
        let out = constrain_mask(&m, &c, &f).unwrap();
        let count = (0..64)
            .flat_map(|y| (0..64).map(move |x| (x, y)))
            .filter(|&(x, y)| out.get(x, y) != 0)
            .count();
        assert_eq!(out.area(), count);
        assert!(count <= 819, "area {count} > 0.2 * 4096");
    }

    #[test]
    fn constrain_returns_and_mask_unchanged_when_within_budget() {
        let f = perlin_field(32, 32, 8, 5).unwrap();
        let m = binary_mask_from_field(&f, 0.6);
        let c = MaskConstraint { max_area_ratio: 1.0, foreground: BinaryMask::ones(32, 32) };
        let out = constrain_mask(&m, &c, &f).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn constrain_dimension_mismatch_is_an_error() {
        let f = perlin_field(32, 32, 8, 5).unwrap();
        let m = binary_mask_from_field(&f, 0.4);
        let c = MaskConstraint { max_area_ratio: 0.5, foreground: BinaryMask::ones(16, 16) };
        assert!(matches!(constrain_mask(&m, &c, &f), Err(CoreError::InvalidArgument(_))));
    }

    #[test]
    fn constrain_containment_and_budget_over_random_cases() {
        let mut rng = stream(42, &[]);
        for case in 0..100 {
            let field = perlin_field(48, 48, 12, 1000 + case).unwrap();
            let m_b = binary_mask_from_field(&field, (uniform_f64(&mut rng) as f32) * 0.8 - 0.2);
            let mut fg = BinaryMask::zeros(48, 48);
            for bit in fg.bits.iter_mut() {
                *bit = u8::from(uniform_f64(&mut rng) < 0.7);
            }
            let r = uniform_f64(&mut rng);
            let c = MaskConstraint { max_area_ratio: r, foreground: fg.clone() };
            let out = constrain_mask(&m_b, &c, &field).unwrap();
            for i in 0..out.bits.len() {
                if out.bits[i] != 0 {
                    assert_eq!(m_b.bits[i], 1, "case {case}: output escapes m_b");
                    assert_eq!(fg.bits[i], 1, "case {case}: output escapes foreground");
                }
            }
            assert!(
                out.area() as f64 <= r * fg.area() as f64,
                "case {case}: area {} > {} * {}",
                out.area(),
                r,
                fg.area()
            );
        }
    }
}
