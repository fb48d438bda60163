//! Procedural desk-scale benchmark corpus.
//!
//! Normal samples are elliptical kernel silhouettes on a dark plate with a
//! seeded noise texture, limb shading and a lengthwise crease. Anomalies are
//! the same renderings with one injected defect: dark spots, edge erosions
//! ("holes") or a local hue shift. Every image carries its foreground mask,
//! and anomaly/clean pairs share the base rendering seed so defects are
//! verifiable pixel-by-pixel.

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::imagesynth::Image;
use crate::noisegen::{self, BinaryMask};
use crate::rng::{self, ChaCha8Rng};

use super::{Dataset, Item, LABEL_ANOMALOUS, LABEL_NORMAL};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefectType {
    Spot,
    Hole,
    Discoloration,
}

impl DefectType {
    pub fn category(&self) -> &'static str {
        match self {
            DefectType::Spot => "spot",
            DefectType::Hole => "hole",
            DefectType::Discoloration => "discolor",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "spot" => Ok(DefectType::Spot),
            "hole" => Ok(DefectType::Hole),
            "discolor" | "discoloration" => Ok(DefectType::Discoloration),
            other => Err(CoreError::Config(format!("unknown defect type {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticParams {
    pub train_normals: usize,
    pub test_normals: usize,
    pub test_anomalies: usize,
    pub image_size: usize,
    pub defect_types: Vec<DefectType>,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            train_normals: 300,
            test_normals: 50,
            test_anomalies: 50,
            image_size: 256,
            defect_types: vec![DefectType::Spot, DefectType::Hole, DefectType::Discoloration],
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if self.train_normals == 0 {
            return Err(CoreError::Config("train_normals must be > 0".into()));
        }
        if self.test_normals + self.test_anomalies == 0 {
            return Err(CoreError::Config("test set must contain at least one item".into()));
        }
        if self.image_size < 16 {
            return Err(CoreError::Config("image_size must be >= 16".into()));
        }
        if self.test_anomalies > 0 && self.defect_types.is_empty() {
            return Err(CoreError::Config("defect_types must be non-empty".into()));
        }
        Ok(())
    }
}

/// The acquisition plate is the same for every shot: one background and a
/// small pool of kernel texture patterns shared across the whole corpus.
const PLATE_SEED: u64 = 0x504C_4154;
const TEXTURE_POOL: usize = 8;

/// Render one normal kernel image with its foreground mask.
pub fn render_kernel(size: usize, seed: u64) -> (Image, BinaryMask) {
    let mut rng = rng::stream(seed, &[0xC0D5]);
    let s = size as f64;

    // Kernels are pose-normalized single-kernel shots: modest jitter around
    // one variety's shape.
    let bg = [0.10, 0.10, 0.11];
    let cx = s * (0.5 + rng::uniform_in(&mut rng, -0.015, 0.015));
    let cy = s * (0.5 + rng::uniform_in(&mut rng, -0.015, 0.015));
    let rx = s * rng::uniform_in(&mut rng, 0.26, 0.285);
    let ry = s * rng::uniform_in(&mut rng, 0.37, 0.40);
    let theta = rng::uniform_in(&mut rng, -0.12, 0.12);
    let base = [
        0.72 + rng::uniform_in(&mut rng, -0.03, 0.03),
        0.58 + rng::uniform_in(&mut rng, -0.03, 0.03),
        0.38 + rng::uniform_in(&mut rng, -0.03, 0.03),
    ];
    let texture_seed =
        rng::derive_seed(PLATE_SEED, &[0x7E47, rng::uniform_index(&mut rng, TEXTURE_POOL) as u64]);
    let texture =
        noisegen::fbm_field(size, size, (size / 8).max(4), 3, 0.5, texture_seed).unwrap();
    let bg_noise =
        noisegen::fbm_field(size, size, (size / 4).max(4), 2, 0.5, rng::derive_seed(PLATE_SEED, &[0xB6]))
            .unwrap();

    let (sin_t, cos_t) = theta.sin_cos();
    let mut img = Image::new(size, size, 3).unwrap();
    let mut mask = BinaryMask::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = (dx * cos_t + dy * sin_t) / rx;
            let v = (-dx * sin_t + dy * cos_t) / ry;
            let d2 = u * u + v * v;
            let idx = y * size + x;
            if d2 <= 1.0 {
                mask.bits[idx] = 1;
                let tex = 1.0 + 0.18 * texture.values[idx] as f64;
                let limb = 1.0 - 0.35 * d2;
                let crease = 1.0 - 0.20 * (-(u / 0.10) * (u / 0.10)).exp();
                for c in 0..3 {
                    let val = base[c] * tex * limb * crease;
                    img.values[idx * 3 + c] = val.clamp(0.0, 1.0) as f32;
                }
            } else {
                for c in 0..3 {
                    let val = bg[c] + 0.02 * bg_noise.values[idx] as f64;
                    img.values[idx * 3 + c] = val.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    img.foreground = Some(mask.clone());
    (img, mask)
}

fn pick_foreground_pixel(mask: &BinaryMask, rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
    let candidates: Vec<usize> =
        mask.bits.iter().enumerate().filter(|(_, &b)| b != 0).map(|(i, _)| i).collect();
    if candidates.is_empty() {
        return None;
    }
    let idx = candidates[rng::uniform_index(rng, candidates.len())];
    Some((idx % mask.width, idx / mask.width))
}

fn pick_boundary_pixel(mask: &BinaryMask, rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
    let (w, h) = (mask.width, mask.height);
    let mut boundary = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) == 0 {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x == w - 1
                || y == h - 1
                || mask.get(x - 1, y) == 0
                || mask.get(x + 1, y) == 0
                || mask.get(x, y - 1) == 0
                || mask.get(x, y + 1) == 0;
            if edge {
                boundary.push((x, y));
            }
        }
    }
    if boundary.is_empty() {
        return None;
    }
    Some(boundary[rng::uniform_index(rng, boundary.len())])
}

fn mean_background(img: &Image, mask: &BinaryMask) -> [f32; 3] {
    let mut acc = [0.0f64; 3];
    let mut count = 0usize;
    for (i, &bit) in mask.bits.iter().enumerate() {
        if bit == 0 {
            for c in 0..3 {
                acc[c] += img.values[i * 3 + c] as f64;
            }
            count += 1;
        }
    }
    if count == 0 {
        return [0.1, 0.1, 0.11];
    }
    [0, 1, 2].map(|c| (acc[c] / count as f64) as f32)
}

/// Inject one defect into a rendered kernel. Returns the defective image, the
/// updated foreground mask and the set of pixels the defect touched.
pub fn inject_defect(
    img: &Image,
    foreground: &BinaryMask,
    defect: DefectType,
    seed: u64,
) -> (Image, BinaryMask, BinaryMask) {
    let mut rng = rng::stream(seed, &[0xDEF]);
    let size = img.width;
    let scale = size as f64 / 256.0;
    let mut out = img.clone();
    let mut fg = foreground.clone();
    let mut region = BinaryMask::zeros(size, img.height);

    match defect {
        DefectType::Spot => {
            let spots = 2 + rng::uniform_index(&mut rng, 3);
            for _ in 0..spots {
                let Some((cx, cy)) = pick_foreground_pixel(&fg, &mut rng) else { continue };
                let radius = rng::uniform_in(&mut rng, 12.0, 22.0) * scale;
                let darkness = rng::uniform_in(&mut rng, 0.08, 0.3);
                stamp_radial(&mut out, &mut region, Some(&fg), cx, cy, radius, |px, w| {
                    for c in px.iter_mut() {
                        *c *= (1.0 - (1.0 - darkness) * w) as f32;
                    }
                });
            }
        }
        DefectType::Hole => {
            let Some((cx, cy)) = pick_boundary_pixel(&fg, &mut rng) else {
                return (out, fg, region);
            };
            let radius = rng::uniform_in(&mut rng, 18.0, 30.0) * scale;
            let bg = mean_background(img, foreground);
            let r2 = radius * radius;
            for y in 0..img.height {
                for x in 0..size {
                    let dx = x as f64 - cx as f64;
                    let dy = y as f64 - cy as f64;
                    if dx * dx + dy * dy <= r2 {
                        let idx = y * size + x;
                        if fg.bits[idx] != 0 {
                            for c in 0..3 {
                                out.values[idx * 3 + c] = bg[c];
                            }
                            fg.bits[idx] = 0;
                            region.bits[idx] = 1;
                        }
                    }
                }
            }
        }
        DefectType::Discoloration => {
            let Some((cx, cy)) = pick_foreground_pixel(&fg, &mut rng) else {
                return (out, fg, region);
            };
            let radius = rng::uniform_in(&mut rng, 30.0, 52.0) * scale;
            let reddish = rng::uniform_f64(&mut rng) < 0.5;
            let tint: [f64; 3] =
                if reddish { [1.45, 0.65, 0.50] } else { [0.65, 1.35, 0.50] };
            stamp_radial(&mut out, &mut region, Some(&fg), cx, cy, radius, |px, w| {
                for (c, t) in px.iter_mut().zip(tint.iter()) {
                    let shifted = (*c as f64) * t;
                    *c = ((1.0 - 0.9 * w) * (*c as f64) + 0.9 * w * shifted)
                        .clamp(0.0, 1.0) as f32;
                }
            });
        }
    }
    out.foreground = Some(fg.clone());
    (out, fg, region)
}

/// Apply `edit(pixel, weight)` over a soft disc; weight is (1 - (d/r)^2)^2.
/// Pixels with weight below 0.02 are left untouched.
fn stamp_radial<F: FnMut(&mut [f32], f64)>(
    img: &mut Image,
    region: &mut BinaryMask,
    within: Option<&BinaryMask>,
    cx: usize,
    cy: usize,
    radius: f64,
    mut edit: F,
) {
    let size = img.width;
    let r2 = radius * radius;
    for y in 0..img.height {
        for x in 0..size {
            let dx = x as f64 - cx as f64;
            let dy = y as f64 - cy as f64;
            let d2 = dx * dx + dy * dy;
            if d2 > r2 {
                continue;
            }
            let idx = y * size + x;
            if let Some(mask) = within {
                if mask.bits[idx] == 0 {
                    continue;
                }
            }
            let t = 1.0 - d2 / r2;
            let w = t * t;
            if w < 0.02 {
                continue;
            }
            edit(&mut img.values[idx * 3..idx * 3 + 3], w);
            region.bits[idx] = 1;
        }
    }
}

/// Render an anomaly together with its paired clean rendering.
pub fn render_anomaly(
    size: usize,
    base_seed: u64,
    defect: DefectType,
    defect_seed: u64,
) -> (Image, Image, BinaryMask, BinaryMask) {
    let (clean, fg) = render_kernel(size, base_seed);
    let (anomaly, fg_after, region) = inject_defect(&clean, &fg, defect, defect_seed);
    let mut anomaly = anomaly;
    anomaly.foreground = Some(fg_after);
    (clean, anomaly, region, fg)
}

fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let mut gray = image::GrayImage::new(mask.width as u32, mask.height as u32);
    for (i, px) in gray.pixels_mut().enumerate() {
        px.0[0] = if mask.bits[i] != 0 { 255 } else { 0 };
    }
    gray.save(path)?;
    Ok(())
}

/// Generate the corpus under `out_dir`: PNG images, foreground masks and the
/// `train.tsv` / `test.tsv` manifests. Returns the two datasets.
pub fn generate_synthetic_corpus(
    params: &SyntheticParams,
    seed: u64,
    out_dir: &Path,
) -> Result<(Dataset, Dataset)> {
    params.validate()?;
    let images_dir = out_dir.join("images");
    let masks_dir = out_dir.join("masks");
    std::fs::create_dir_all(&images_dir)?;
    std::fs::create_dir_all(&masks_dir)?;

    let size = params.image_size;
    let mut train_lines = Vec::new();
    let mut test_lines = Vec::new();
    let mut train_items = Vec::new();
    let mut test_items = Vec::new();

    let emit = |name: String,
                    category: &str,
                    label: u8,
                    img: &Image,
                    fg: &BinaryMask,
                    lines: &mut Vec<String>,
                    items: &mut Vec<Item>|
     -> Result<()> {
        let img_rel = format!("images/{name}.png");
        let mask_rel = format!("masks/{name}.png");
        img.save_png(&out_dir.join(&img_rel))?;
        save_mask(fg, &out_dir.join(&mask_rel))?;
        lines.push(format!("{img_rel}\t{label}\t{category}\t{mask_rel}"));
        items.push(Item {
            path: out_dir.join(&img_rel),
            label,
            category: category.to_string(),
            mask_path: Some(out_dir.join(&mask_rel)),
        });
        Ok(())
    };

    for i in 0..params.train_normals {
        let (img, fg) = render_kernel(size, rng::derive_seed(seed, &[1, i as u64]));
        emit(format!("train_good_{i:04}"), "good", LABEL_NORMAL, &img, &fg, &mut train_lines, &mut train_items)?;
    }
    for i in 0..params.test_normals {
        let (img, fg) = render_kernel(size, rng::derive_seed(seed, &[2, i as u64]));
        emit(format!("test_good_{i:04}"), "good", LABEL_NORMAL, &img, &fg, &mut test_lines, &mut test_items)?;
    }
    for i in 0..params.test_anomalies {
        let defect = params.defect_types[i % params.defect_types.len()];
        let (_clean, anomaly, _region, _fg_before) = render_anomaly(
            size,
            rng::derive_seed(seed, &[3, i as u64]),
            defect,
            rng::derive_seed(seed, &[4, i as u64]),
        );
        let fg_after = anomaly.foreground.clone().unwrap();
        emit(
            format!("test_{}_{i:04}", defect.category()),
            defect.category(),
            LABEL_ANOMALOUS,
            &anomaly,
            &fg_after,
            &mut test_lines,
            &mut test_items,
        )?;
    }

    std::fs::write(out_dir.join("train.tsv"), train_lines.join("\n") + "\n")?;
    std::fs::write(out_dir.join("test.tsv"), test_lines.join("\n") + "\n")?;
    Ok((Dataset::train(train_items)?, Dataset::test(test_items)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_train_count_is_a_configuration_error() {
        let params = SyntheticParams { train_normals: 0, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            generate_synthetic_corpus(&params, 0, dir.path()),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn zero_anomalies_yields_no_positives() {
        let params = SyntheticParams {
            train_normals: 3,
            test_normals: 2,
            test_anomalies: 0,
            image_size: 64,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = generate_synthetic_corpus(&params, 0, dir.path()).unwrap();
        assert_eq!(train.len(), 3);
        assert_eq!(test.len(), 2);
        assert_eq!(test.positives(), 0);
    }

    #[test]
    fn corpus_is_bit_deterministic() {
        let params = SyntheticParams {
            train_normals: 2,
            test_normals: 1,
            test_anomalies: 3,
            image_size: 64,
            ..Default::default()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        generate_synthetic_corpus(&params, 7, dir_a.path()).unwrap();
        generate_synthetic_corpus(&params, 7, dir_b.path()).unwrap();
        for entry in walk_files(dir_a.path()) {
            let rel = entry.strip_prefix(dir_a.path()).unwrap();
            let a = std::fs::read(&entry).unwrap();
            let b = std::fs::read(dir_b.path().join(rel)).unwrap();
            assert_eq!(a, b, "file {} differs", rel.display());
        }
    }

    fn walk_files(root: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    out.push(path);
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn kernels_have_plausible_foreground() {
        let (img, mask) = render_kernel(128, 5);
        let area = mask.area();
        assert!(area > 128 * 128 / 8, "foreground too small: {area}");
        assert!(area < 128 * 128 / 2, "foreground too large: {area}");
        for &v in &img.values {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn defects_differ_only_inside_the_defect_region() {
        for (case, defect) in
            [DefectType::Spot, DefectType::Hole, DefectType::Discoloration].iter().enumerate()
        {
            let (clean, anomaly, region, _fg) = render_anomaly(128, 40 + case as u64, *defect, 90);
            let mut changed = 0usize;
            for i in 0..128 * 128 {
                let same = (0..3).all(|c| {
                    clean.values[i * 3 + c].to_bits() == anomaly.values[i * 3 + c].to_bits()
                });
                if !same {
                    assert_eq!(region.bits[i], 1, "{defect:?}: pixel {i} changed outside region");
                    changed += 1;
                }
            }
            assert!(changed > 10, "{defect:?}: defect changed only {changed} pixels");
        }
    }

    #[test]
    fn hole_defect_shrinks_foreground() {
        let (_clean, anomaly, region, fg_before) = render_anomaly(128, 3, DefectType::Hole, 17);
        let fg_after = anomaly.foreground.as_ref().unwrap();
        assert!(fg_after.area() < fg_before.area());
        assert_eq!(fg_before.area() - fg_after.area(), region.area());
    }

    #[test]
    fn corpus_loads_back_via_manifest_layout() {
        let params = SyntheticParams {
            train_normals: 2,
            test_normals: 2,
            test_anomalies: 2,
            image_size: 64,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = generate_synthetic_corpus(&params, 1, dir.path()).unwrap();
        let (train2, test2) =
            super::super::load_dataset(dir.path(), super::super::DatasetLayout::Manifest).unwrap();
        assert_eq!(train.len(), train2.len());
        assert_eq!(test.len(), test2.len());
        assert_eq!(test2.positives(), 2);
        assert!(test2.items.iter().all(|i| i.mask_path.is_some()));
    }
}
