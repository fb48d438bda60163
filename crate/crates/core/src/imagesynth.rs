//! Images and image-level anomaly synthesis.
//!
//! An anomaly-like image is produced from a normal image by blending an
//! arbitrary source image into it under a noise-derived mask:
//!
//! ```text
//! out = (1 - M) * x  +  beta * (M * a)  +  (1 - beta) * (M * x)
//! ```
//!
//! Pixels outside the mask are copied bit-exactly; pixels inside move toward
//! the source image with opacity `beta`. The mask comes from a gradient-noise
//! field, intersected with the grain foreground and capped by an area ratio.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use crate::error::{CoreError, Result};
use crate::noisegen::{self, BinaryMask, MaskConstraint};
use crate::rng::{self, ChaCha8Rng};

/// Interleaved float image with values in [0, 1] and an optional foreground
/// mask. Index layout is `(y * width + x) * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Vec<f32>,
    pub foreground: Option<BinaryMask>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(CoreError::invalid("image dimensions must be >= 1"));
        }
        if channels != 1 && channels != 3 {
            return Err(CoreError::invalid("image must have 1 or 3 channels"));
        }
        Ok(Self {
            width,
            height,
            channels,
            values: vec![0.0; width * height * channels],
            foreground: None,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.values[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.channels == other.channels
    }

    /// Foreground mask, defaulting to all-ones when none is attached.
    pub fn foreground_or_full(&self) -> BinaryMask {
        self.foreground
            .clone()
            .unwrap_or_else(|| BinaryMask::ones(self.width, self.height))
    }

    /// 3-channel view of this image; grayscale channels are replicated.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let mut out = Image::new(self.width, self.height, 3).unwrap();
        for i in 0..self.width * self.height {
            let v = self.values[i];
            out.values[i * 3] = v;
            out.values[i * 3 + 1] = v;
            out.values[i * 3 + 2] = v;
        }
        out.foreground = self.foreground.clone();
        out
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let dynamic = image::open(path).map_err(|e| CoreError::DataSource {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let rgb = dynamic.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut img = Image::new(w, h, 3)?;
        for (i, px) in rgb.pixels().enumerate() {
            img.values[i * 3] = px.0[0] as f32 / 255.0;
            img.values[i * 3 + 1] = px.0[1] as f32 / 255.0;
            img.values[i * 3 + 2] = px.0[2] as f32 / 255.0;
        }
        Ok(img)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let rgb = self.to_rgb8();
        rgb.save(path)?;
        Ok(())
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let src = self.to_rgb();
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in out.pixels_mut().enumerate() {
            for c in 0..3 {
                let v = (src.values[i * 3 + c] * 255.0).round().clamp(0.0, 255.0);
                px.0[c] = v as u8;
            }
        }
        out
    }

    /// Bilinear resize via 8-bit space; foreground masks resize with nearest
    /// neighbor to stay binary.
    pub fn resized(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let rgb = self.to_rgb8();
        let resized = image::imageops::resize(
            &rgb,
            width as u32,
            height as u32,
            FilterType::Triangle,
        );
        let mut img = Image::new(width, height, 3).unwrap();
        for (i, px) in resized.pixels().enumerate() {
            img.values[i * 3] = px.0[0] as f32 / 255.0;
            img.values[i * 3 + 1] = px.0[1] as f32 / 255.0;
            img.values[i * 3 + 2] = px.0[2] as f32 / 255.0;
        }
        img.foreground = self.foreground.as_ref().map(|m| resize_mask(m, width, height));
        img
    }
}

pub fn resize_mask(mask: &BinaryMask, width: usize, height: usize) -> BinaryMask {
    if width == mask.width && height == mask.height {
        return mask.clone();
    }
    let mut gray = image::GrayImage::new(mask.width as u32, mask.height as u32);
    for (i, px) in gray.pixels_mut().enumerate() {
        px.0[0] = if mask.bits[i] != 0 { 255 } else { 0 };
    }
    let resized =
        image::imageops::resize(&gray, width as u32, height as u32, FilterType::Nearest);
    BinaryMask {
        width,
        height,
        bits: resized.pixels().map(|p| u8::from(p.0[0] != 0)).collect(),
    }
}

/// Closed opacity interval for blend sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaRange {
    pub lo: f64,
    pub hi: f64,
}

impl Default for BetaRange {
    fn default() -> Self {
        Self { lo: 0.15, hi: 1.0 }
    }
}

impl BetaRange {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lo) || !(0.0..=1.0).contains(&self.hi) || self.lo > self.hi
        {
            return Err(CoreError::invalid("beta range must satisfy 0 <= lo <= hi <= 1"));
        }
        Ok(())
    }
}

/// A sampled blend opacity together with the range it was drawn from.
#[derive(Debug, Clone, Copy)]
pub struct BlendParams {
    pub beta: f64,
    pub range: BetaRange,
}

/// Uniform opacity draw from the given range.
pub fn sample_beta(rng: &mut ChaCha8Rng, range: BetaRange) -> f64 {
    rng::uniform_in(rng, range.lo, range.hi)
}

/// Where arbitrary blend-source images come from.
#[derive(Debug, Clone)]
pub enum SourcePool {
    /// Seeded multi-scale colored noise textures; needs no external assets.
    Procedural,
    /// A directory of 8-bit PNG images.
    Directory(PathBuf),
}

/// Draw one source image at the requested size.
pub fn sample_source_image(
    source: &SourcePool,
    width: usize,
    height: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Image> {
    match source {
        SourcePool::Procedural => procedural_texture(width, height, rng),
        SourcePool::Directory(dir) => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| CoreError::DataSource { path: dir.clone(), reason: e.to_string() })?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|ext| ext.eq_ignore_ascii_case("png")))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(CoreError::DataSource {
                    path: dir.clone(),
                    reason: "source pool contains no PNG images".into(),
                });
            }
            let idx = rng::uniform_index(rng, paths.len());
            Ok(Image::load_png(&paths[idx])?.resized(width, height))
        }
    }
}

/// Colored noise texture: a random base color per channel plus a multi-octave
/// gradient-noise modulation, clamped to [0, 1].
fn procedural_texture(width: usize, height: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
    let mut base = [0.0f32; 3];
    for b in base.iter_mut() {
        *b = rng::uniform_in(rng, 0.2, 0.8) as f32;
    }
    let field_seed = rng.next_u64();
    let period = (width.min(height) / 8).max(4);
    let mut img = Image::new(width, height, 3)?;
    for c in 0..3 {
        let field = noisegen::fbm_field(
            width,
            height,
            period,
            3,
            0.5,
            rng::derive_seed(field_seed, &[c as u64]),
        )?;
        for i in 0..width * height {
            img.values[i * 3 + c] = (base[c] + 0.35 * field.values[i]).clamp(0.0, 1.0);
        }
    }
    Ok(img)
}

use rand_chacha::rand_core::RngCore;

/// Apply the opacity blend. Pixels with mask 0 are copied from `i_x`
/// bit-exactly; pixels with mask 1 become `beta * i_a + (1 - beta) * i_x`.
pub fn blend_anomaly(
    i_x: &Image,
    i_a: &Image,
    m_b_prime: &BinaryMask,
    beta: f64,
) -> Result<Image> {
    if !i_x.same_dims(i_a) {
        return Err(CoreError::invalid("blend inputs must share dimensions"));
    }
    if m_b_prime.width != i_x.width || m_b_prime.height != i_x.height {
        return Err(CoreError::invalid("blend mask must match image dimensions"));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(CoreError::invalid("beta must lie in [0, 1]"));
    }
    let b = beta as f32;
    let mut out = i_x.clone();
    let ch = i_x.channels;
    for (i, &bit) in m_b_prime.bits.iter().enumerate() {
        if bit != 0 {
            for c in 0..ch {
                let x = i_x.values[i * ch + c];
                let a = i_a.values[i * ch + c];
                out.values[i * ch + c] = b * a + (1.0 - b) * x;
            }
        }
    }
    Ok(out)
}

/// Knobs for image-level anomaly synthesis.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    /// Lattice cell size of the noise field, in pixels.
    pub grid_period: usize,
    pub octaves: usize,
    pub persistence: f64,
    /// Field value above which mask pixels activate.
    pub mask_threshold: f32,
    /// Cap on mask area as a fraction of the foreground area.
    pub max_area_ratio: f64,
    pub beta_range: BetaRange,
    pub source: SourcePool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid_period: 16,
            octaves: 1,
            persistence: 0.5,
            mask_threshold: 0.4,
            max_area_ratio: 0.2,
            beta_range: BetaRange::default(),
            source: SourcePool::Procedural,
        }
    }
}

/// Result of one synthesis attempt.
#[derive(Debug, Clone)]
pub struct SynthOutcome {
    pub image: Image,
    pub mask: BinaryMask,
    /// True when the constrained mask came out empty and the caller should
    /// resample or treat the item as pure normal for this step.
    pub degenerate: bool,
}

/// Full image-level pipeline: noise field, thresholded mask, foreground and
/// area constraint, opacity blend with a sampled source image.
///
/// Draw order from `rng` is fixed: field seed, then (if the mask is
/// non-empty) beta, then the source image.
pub fn synthesize_anomaly(
    i_x: &Image,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SynthOutcome> {
    cfg.beta_range.validate()?;
    let foreground = i_x.foreground_or_full();
    let field_seed = rng.next_u64();
    let field = if cfg.octaves <= 1 {
        noisegen::perlin_field(i_x.width, i_x.height, cfg.grid_period, field_seed)?
    } else {
        noisegen::fbm_field(
            i_x.width,
            i_x.height,
            cfg.grid_period,
            cfg.octaves,
            cfg.persistence,
            field_seed,
        )?
    };
    let m_b = noisegen::binary_mask_from_field(&field, cfg.mask_threshold);
    let constraint = MaskConstraint { max_area_ratio: cfg.max_area_ratio, foreground };
    let mask = noisegen::constrain_mask(&m_b, &constraint, &field)?;
    if mask.is_empty() {
        return Ok(SynthOutcome {
            image: i_x.clone(),
            mask: BinaryMask::zeros(i_x.width, i_x.height),
            degenerate: true,
        });
    }
    let beta = sample_beta(rng, cfg.beta_range);
    let source = sample_source_image(&cfg.source, i_x.width, i_x.height, rng)?;
    let source = if source.channels == i_x.channels { source } else { source.to_rgb() };
    let image = blend_anomaly(i_x, &source, &mask, beta)?;
    Ok(SynthOutcome { image, mask, degenerate: false })
}
