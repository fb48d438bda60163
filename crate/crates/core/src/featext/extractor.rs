//! The built-in convolutional feature extractor.
//!
//! Four stages: a stride-4 stem (kernel 4, no padding) followed by three
//! stride-2 stages (kernel 3, padding 1). Each stage ends in
//! `relu(standardize(relu(conv)))`: the per-channel standardization constants
//! are calibrated once at construction from a fixed set of seeded probe
//! textures (without them, ReLU offsets compound across stages and swamp the
//! texture signal), and the second ReLU keeps stage outputs sparse and
//! non-negative the way pretrained backbone features are, which is what makes
//! additive feature noise separable from clean features. The constants are
//! plain per-channel scalars, so every output position stays a purely local
//! function of its receptive field. Weights are frozen during training by
//! default; an optional fine-tune mode updates only the final stage.
//!
//! Weights come either from deterministic seeded initialization (row-wise
//! Gram-Schmidt orthonormalization of Gaussian draws, scaled by sqrt(2)) or
//! from a little-endian f32 weight container file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::imagesynth::Image;
use crate::linalg::{mm_nt, mm_tn, Real};
use crate::rng::{derive_seed, GaussianSource};
use crate::serio;

use super::{fuse_stage_maps, aggregate_patches, ExtractorSpec, FeatureMap, WeightSource};

const WEIGHT_MAGIC: &[u8; 4] = b"GADW";
const WEIGHT_VERSION: u32 = 1;

/// One convolution layer. Weights are laid out `(out, ky, kx, in)` row-major,
/// one row of length `kernel * kernel * in_ch` per output channel. The
/// per-channel `norm_mean`/`norm_std` constants standardize the post-ReLU
/// activations; empty vectors mean "not calibrated yet".
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T = f32> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub norm_mean: Vec<T>,
    pub norm_std: Vec<T>,
}

impl<T: Real> ConvLayer<T> {
    pub fn out_dim(&self, in_dim: usize) -> usize {
        (in_dim + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_ch
    }

    /// Lower the input into patch rows: one row per output position, columns
    /// ordered (ky, kx, in channel), zero padding outside the input.
    pub fn im2col(&self, input: &[T], in_h: usize, in_w: usize) -> Vec<T> {
        let (oh, ow) = (self.out_dim(in_h), self.out_dim(in_w));
        let k = self.kernel;
        let ch = self.in_ch;
        let row_len = self.patch_len();
        let mut patches = vec![T::ZERO; oh * ow * row_len];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (oy * ow + ox) * row_len;
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= in_h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= in_w as isize {
                            continue;
                        }
                        let src = (iy as usize * in_w + ix as usize) * ch;
                        let dst = row + (ky * k + kx) * ch;
                        patches[dst..dst + ch].copy_from_slice(&input[src..src + ch]);
                    }
                }
            }
        }
        patches
    }

    /// Convolution + bias + ReLU. Returns (output, out_h, out_w) with the
    /// output interleaved `(y * out_w + x) * out_ch + c`.
    pub fn forward_relu(&self, input: &[T], in_h: usize, in_w: usize) -> (Vec<T>, usize, usize) {
        let (oh, ow) = (self.out_dim(in_h), self.out_dim(in_w));
        let patches = self.im2col(input, in_h, in_w);
        let mut out = mm_nt(&patches, &self.weights, oh * ow, self.patch_len(), self.out_ch);
        for pos in 0..oh * ow {
            for c in 0..self.out_ch {
                let v = out[pos * self.out_ch + c] + self.bias[c];
                out[pos * self.out_ch + c] = v.maximum(T::ZERO);
            }
        }
        (out, oh, ow)
    }

    pub fn is_calibrated(&self) -> bool {
        self.norm_mean.len() == self.out_ch && self.norm_std.len() == self.out_ch
    }

    /// Per-channel scale factors: output scale / std.
    fn norm_inv(&self) -> Vec<T> {
        let scale = T::from_f64(stage_output_scale());
        self.norm_std.iter().map(|&s| scale / s).collect()
    }

    /// Frozen normalization of post-ReLU activations, in place:
    /// standardize per channel, rescale, and clamp the negative half so the
    /// stage output stays sparse and non-negative.
    fn apply_norm(&self, values: &mut [T]) {
        debug_assert!(self.is_calibrated());
        let inv = self.norm_inv();
        for chunk in values.chunks_exact_mut(self.out_ch) {
            for (c, v) in chunk.iter_mut().enumerate() {
                *v = ((*v - self.norm_mean[c]) * inv[c]).maximum(T::ZERO);
            }
        }
    }
}

/// Stage outputs are standardized per channel and then scaled down to this
/// RMS. Keeping feature entries small relative to the default feature-noise
/// level (sigma = 0.025) makes the noised features genuinely separable from
/// the normal manifold instead of vanishing inside it.
fn stage_output_scale() -> f64 {
    std::env::var("GRAIN_AD_ALPHA").ok().and_then(|v| v.parse().ok()).unwrap_or(0.125)
}

/// Floor on calibrated channel standard deviations.
const NORM_STD_FLOOR: f64 = 1e-3;

/// Seed of the probe textures used to calibrate the normalization constants;
/// a fixed constant so calibration is identical for any weight source.
const CALIBRATION_SEED: u64 = 0xCA11_B8A7;
const CALIBRATION_PROBES: usize = 4;

fn architecture(spec: &ExtractorSpec) -> [(usize, usize, usize, usize, usize); 4] {
    let c = spec.stage_channels;
    [
        (3, c[0], 4, 4, 0),
        (c[0], c[1], 3, 2, 1),
        (c[1], c[2], 3, 2, 1),
        (c[2], c[3], 3, 2, 1),
    ]
}

/// Orthonormalize `rows` Gaussian rows of length `cols` (modified
/// Gram-Schmidt) and scale by `gain`. Requires rows <= cols.
fn orthogonal_rows(rows: usize, cols: usize, gain: f64, seed: u64) -> Vec<f64> {
    assert!(rows <= cols, "orthogonal init needs rows <= cols");
    let mut gauss = GaussianSource::new(seed);
    let mut m = vec![0.0f64; rows * cols];
    for v in m.iter_mut() {
        *v = gauss.next_standard();
    }
    for i in 0..rows {
        // Project out the previous (unit-norm) rows, then normalize.
        for j in 0..i {
            let mut dot = 0.0;
            for k in 0..cols {
                dot += m[i * cols + k] * m[j * cols + k];
            }
            for k in 0..cols {
                m[i * cols + k] -= dot * m[j * cols + k];
            }
        }
        let norm = m[i * cols..(i + 1) * cols].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 1e-10, "degenerate row in orthogonal init");
        for k in 0..cols {
            m[i * cols + k] /= norm;
        }
    }
    for v in m.iter_mut() {
        *v *= gain;
    }
    m
}

/// The 4-stage extractor with frozen weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Extractor<T = f32> {
    pub spec: ExtractorSpec,
    pub layers: Vec<ConvLayer<T>>,
}

/// Cached intermediates of the final stage, used by fine-tune backprop.
pub struct Stage4Trace<T> {
    /// im2col patch rows of the stage-4 input.
    pub patches: Vec<T>,
    /// Post-ReLU activations, before normalization.
    pub relu: Vec<T>,
    pub out_h: usize,
    pub out_w: usize,
}

impl<T: Real> Extractor<T> {
    pub fn from_spec(spec: &ExtractorSpec) -> Result<Self> {
        spec.validate()?;
        let layers = match &spec.weight_source {
            WeightSource::Seeded(seed) => Self::seeded_layers(spec, *seed),
            WeightSource::File(path) => {
                let f32_layers = load_weight_file(path, spec)?;
                f32_layers.into_iter().map(cast_layer::<T>).collect()
            }
        };
        let mut extractor = Self { spec: spec.clone(), layers };
        extractor.finalize()?;
        Ok(extractor)
    }

    /// Calibrate missing normalization constants. Must run before the
    /// extractor is used.
    pub(crate) fn finalize(&mut self) -> Result<()> {
        if !self.layers.iter().all(ConvLayer::is_calibrated) {
            self.calibrate()?;
        }
        Ok(())
    }

    /// Fill the per-channel normalization constants stage by stage from a
    /// fixed set of seeded probe textures. Purely a function of the spec and
    /// weights, so it reproduces bit-identically.
    pub(crate) fn calibrate(&mut self) -> Result<()> {
        let res = self.spec.input_resolution;
        let probes: Vec<Vec<T>> = (0..CALIBRATION_PROBES)
            .map(|k| -> Result<Vec<T>> {
                let mut rng = crate::rng::stream(CALIBRATION_SEED, &[k as u64]);
                let img = crate::imagesynth::sample_source_image(
                    &crate::imagesynth::SourcePool::Procedural,
                    res,
                    res,
                    &mut rng,
                )?;
                Ok(img.values.iter().map(|&v| T::from_f64(v as f64)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        self.calibrate_inputs(probes)
    }

    /// Recalibrate the normalization constants on sample images, typically a
    /// slice of the training normals. Deterministic in the image order.
    pub fn calibrate_on_images(&mut self, images: &[&Image]) -> Result<()> {
        if images.is_empty() {
            return Err(CoreError::invalid("calibration needs at least one image"));
        }
        let inputs: Vec<Vec<T>> = images
            .iter()
            .map(|img| -> Result<Vec<T>> {
                let res = self.spec.input_resolution;
                if img.width != res || img.height != res {
                    return Err(CoreError::invalid(
                        "calibration images must be at the working resolution",
                    ));
                }
                Ok(img.to_rgb().values.iter().map(|&v| T::from_f64(v as f64)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        self.calibrate_inputs(inputs)
    }

    fn calibrate_inputs(&mut self, probes: Vec<Vec<T>>) -> Result<()> {
        let res = self.spec.input_resolution;
        let mut currents = probes;
        let (mut h, mut w) = (res, res);
        for idx in 0..self.layers.len() {
            let layer = &self.layers[idx];
            let outputs: Vec<(Vec<T>, usize, usize)> =
                currents.iter().map(|input| layer.forward_relu(input, h, w)).collect();
            let ch = layer.out_ch;
            let mut mean = vec![0.0f64; ch];
            let mut var = vec![0.0f64; ch];
            let mut count = 0usize;
            for (out, oh, ow) in &outputs {
                count += oh * ow;
                for pos in 0..oh * ow {
                    for c in 0..ch {
                        mean[c] += out[pos * ch + c].to_f64();
                    }
                }
            }
            for m in mean.iter_mut() {
                *m /= count as f64;
            }
            for (out, oh, ow) in &outputs {
                for pos in 0..oh * ow {
                    for c in 0..ch {
                        let d = out[pos * ch + c].to_f64() - mean[c];
                        var[c] += d * d;
                    }
                }
            }
            let layer = &mut self.layers[idx];
            layer.norm_mean = mean.iter().map(|&m| T::from_f64(m)).collect();
            layer.norm_std = var
                .iter()
                .map(|&v| T::from_f64((v / count as f64).sqrt().max(NORM_STD_FLOOR)))
                .collect();

            let layer = &self.layers[idx];
            currents = outputs
                .into_iter()
                .map(|(mut out, _, _)| {
                    layer.apply_norm(&mut out);
                    out
                })
                .collect();
            h = layer.out_dim(h);
            w = layer.out_dim(w);
        }
        Ok(())
    }

    fn seeded_layers(spec: &ExtractorSpec, seed: u64) -> Vec<ConvLayer<T>> {
        architecture(spec)
            .iter()
            .enumerate()
            .map(|(idx, &(in_ch, out_ch, kernel, stride, pad))| {
                let cols = kernel * kernel * in_ch;
                let w64 = orthogonal_rows(
                    out_ch,
                    cols,
                    std::f64::consts::SQRT_2,
                    derive_seed(seed, &[idx as u64]),
                );
                ConvLayer {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    pad,
                    weights: w64.iter().map(|&v| T::from_f64(v)).collect(),
                    bias: vec![T::ZERO; out_ch],
                    norm_mean: Vec::new(),
                    norm_std: Vec::new(),
                }
            })
            .collect()
    }

    fn image_input(&self, image: &Image) -> Result<Vec<T>> {
        let res = self.spec.input_resolution;
        if image.width != res || image.height != res {
            return Err(CoreError::invalid(format!(
                "image must be resized to the working resolution {res}x{res}, got {}x{}",
                image.width, image.height
            )));
        }
        let rgb = image.to_rgb();
        Ok(rgb.values.iter().map(|&v| T::from_f64(v as f64)).collect())
    }

    /// Hierarchical features: one map per stage.
    pub fn extract(&self, image: &Image) -> Result<Vec<FeatureMap<T>>> {
        Ok(self.run_stages(self.image_input(image)?, false).0)
    }

    /// Hierarchical features plus the cached stage-4 intermediates.
    pub fn extract_with_trace(&self, image: &Image) -> Result<(Vec<FeatureMap<T>>, Stage4Trace<T>)> {
        let (maps, trace) = self.run_stages(self.image_input(image)?, true);
        Ok((maps, trace.expect("trace requested")))
    }

    fn run_stages(&self, input: Vec<T>, want_trace: bool) -> (Vec<FeatureMap<T>>, Option<Stage4Trace<T>>) {
        let res = self.spec.input_resolution;
        let mut maps = Vec::with_capacity(4);
        let mut current = input;
        let (mut h, mut w) = (res, res);
        let mut trace = None;
        for (idx, layer) in self.layers.iter().enumerate() {
            let patches = if want_trace && idx == 3 {
                Some(layer.im2col(&current, h, w))
            } else {
                None
            };
            let (mut out, oh, ow) = layer.forward_relu(&current, h, w);
            let relu = patches.is_some().then(|| out.clone());
            layer.apply_norm(&mut out);
            if let Some(patches) = patches {
                trace = Some(Stage4Trace { patches, relu: relu.unwrap(), out_h: oh, out_w: ow });
            }
            maps.push(FeatureMap {
                width: ow,
                height: oh,
                channels: layer.out_ch,
                stage: (idx + 1) as u8,
                values: out.clone(),
            });
            current = out;
            h = oh;
            w = ow;
        }
        (maps, trace)
    }

    /// Aggregate the fusion stages and fuse them into the patch-aware map.
    pub fn patch_features(&self, image: &Image) -> Result<FeatureMap<T>> {
        let maps = self.extract(image)?;
        self.fuse_extracted(&maps)
    }

    pub fn fuse_extracted(&self, maps: &[FeatureMap<T>]) -> Result<FeatureMap<T>> {
        let aggregated: Result<Vec<_>> = self
            .spec
            .fusion_stages
            .iter()
            .map(|&s| aggregate_patches(&maps[s - 1], self.spec.patch_size))
            .collect();
        fuse_stage_maps(aggregated?)
    }

    /// Gradients of the stage-4 weights and bias given the loss gradient of
    /// that stage's normalized output.
    pub fn stage4_gradients(&self, trace: &Stage4Trace<T>, d_output: &[T]) -> (Vec<T>, Vec<T>) {
        let layer = &self.layers[3];
        let positions = trace.out_h * trace.out_w;
        let inv = layer.norm_inv();
        // Backward through relu(standardize(relu(conv))): the outer ReLU
        // passes gradient only where the standardized activation was
        // positive (relu > mean), the inner one only where relu was active.
        let mut d_pre = vec![T::ZERO; d_output.len()];
        for pos in 0..positions {
            for c in 0..layer.out_ch {
                let i = pos * layer.out_ch + c;
                if trace.relu[i] > T::ZERO && trace.relu[i] > layer.norm_mean[c] {
                    d_pre[i] = d_output[i] * inv[c];
                }
            }
        }
        let d_weights = mm_tn(&d_pre, &trace.patches, layer.out_ch, positions, layer.patch_len());
        let mut d_bias = vec![T::ZERO; layer.out_ch];
        for pos in 0..positions {
            for c in 0..layer.out_ch {
                d_bias[c] += d_pre[pos * layer.out_ch + c];
            }
        }
        (d_weights, d_bias)
    }
}

fn cast_layer<T: Real>(layer: ConvLayer<f32>) -> ConvLayer<T> {
    let cast = |v: &[f32]| v.iter().map(|&x| T::from_f64(x as f64)).collect();
    ConvLayer {
        in_ch: layer.in_ch,
        out_ch: layer.out_ch,
        kernel: layer.kernel,
        stride: layer.stride,
        pad: layer.pad,
        weights: cast(&layer.weights),
        bias: cast(&layer.bias),
        norm_mean: cast(&layer.norm_mean),
        norm_std: cast(&layer.norm_std),
    }
}

impl Extractor<f32> {
    /// Write the extractor weights as a standalone weight container file.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(WEIGHT_MAGIC)?;
        serio::write_u32(&mut w, WEIGHT_VERSION)?;
        write_layer_entries(&mut w, &self.layers)?;
        Ok(())
    }
}

pub(crate) fn write_layer_entries<W: Write>(w: &mut W, layers: &[ConvLayer<f32>]) -> Result<()> {
    let calibrated = layers.iter().filter(|l| l.is_calibrated()).count();
    serio::write_u32(w, (layers.len() * 2 + calibrated * 2) as u32)?;
    let mut vector = |w: &mut W, name: String, values: &[f32]| -> Result<()> {
        serio::write_str(w, &name)?;
        serio::write_u32(w, 1)?;
        serio::write_u32(w, values.len() as u32)?;
        serio::write_f32_slice(w, values)
    };
    for (idx, layer) in layers.iter().enumerate() {
        serio::write_str(w, &format!("stage{}.weight", idx + 1))?;
        serio::write_u32(w, 4)?;
        for dim in [layer.out_ch, layer.kernel, layer.kernel, layer.in_ch] {
            serio::write_u32(w, dim as u32)?;
        }
        serio::write_f32_slice(w, &layer.weights)?;

        vector(w, format!("stage{}.bias", idx + 1), &layer.bias)?;
        if layer.is_calibrated() {
            vector(w, format!("stage{}.norm_mean", idx + 1), &layer.norm_mean)?;
            vector(w, format!("stage{}.norm_std", idx + 1), &layer.norm_std)?;
        }
    }
    Ok(())
}

pub(crate) fn read_layer_entries<R: Read>(
    r: &mut R,
    spec: &ExtractorSpec,
) -> Result<Vec<ConvLayer<f32>>> {
    let n_entries = serio::read_u32(r)? as usize;
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let name = serio::read_str(r)?;
        let ndim = serio::read_u32(r)? as usize;
        if ndim > 8 {
            return Err(CoreError::ModelLoad(format!("entry {name}: too many dims")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(serio::read_u32(r)? as usize);
        }
        let count: usize = dims.iter().product();
        if count > 64 << 20 {
            return Err(CoreError::ModelLoad(format!("entry {name}: unreasonable size")));
        }
        let values = serio::read_f32_vec(r, count)?;
        entries.push((name, dims, values));
    }

    let mut layers = Vec::with_capacity(4);
    for (idx, &(in_ch, out_ch, kernel, stride, pad)) in architecture(spec).iter().enumerate() {
        let wname = format!("stage{}.weight", idx + 1);
        let bname = format!("stage{}.bias", idx + 1);
        let weight = entries
            .iter()
            .find(|(n, _, _)| *n == wname)
            .ok_or_else(|| CoreError::ModelLoad(format!("missing entry {wname}")))?;
        let bias = entries
            .iter()
            .find(|(n, _, _)| *n == bname)
            .ok_or_else(|| CoreError::ModelLoad(format!("missing entry {bname}")))?;
        if weight.1 != vec![out_ch, kernel, kernel, in_ch] {
            return Err(CoreError::ModelLoad(format!(
                "{wname}: shape {:?} does not match spec {:?}",
                weight.1,
                [out_ch, kernel, kernel, in_ch]
            )));
        }
        if bias.1 != vec![out_ch] {
            return Err(CoreError::ModelLoad(format!("{bname}: bad shape {:?}", bias.1)));
        }
        // Normalization constants are optional in external weight files and
        // recalibrated when absent.
        let vector = |suffix: &str| -> Result<Vec<f32>> {
            let name = format!("stage{}.{suffix}", idx + 1);
            match entries.iter().find(|(n, _, _)| *n == name) {
                None => Ok(Vec::new()),
                Some(entry) if entry.1 == vec![out_ch] => Ok(entry.2.clone()),
                Some(entry) => {
                    Err(CoreError::ModelLoad(format!("{name}: bad shape {:?}", entry.1)))
                }
            }
        };
        layers.push(ConvLayer {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weights: weight.2.clone(),
            bias: bias.2.clone(),
            norm_mean: vector("norm_mean")?,
            norm_std: vector("norm_std")?,
        });
    }
    Ok(layers)
}

fn load_weight_file(path: &Path, spec: &ExtractorSpec) -> Result<Vec<ConvLayer<f32>>> {
    let file = File::open(path)
        .map_err(|e| CoreError::ModelLoad(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| CoreError::ModelLoad(format!("truncated weight file: {e}")))?;
    if &magic != WEIGHT_MAGIC {
        return Err(CoreError::ModelLoad("bad magic bytes in weight file".into()));
    }
    let version = serio::read_u32(&mut r)?;
    if version != WEIGHT_VERSION {
        return Err(CoreError::ModelLoad(format!("unsupported weight version {version}")));
    }
    read_layer_entries(&mut r, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featext::{interpolate_bilinear, WeightSource, DEFAULT_WEIGHT_SEED};

    fn tiny_spec() -> ExtractorSpec {
        ExtractorSpec {
            input_resolution: 32,
            stage_channels: [2, 3, 4, 5],
            patch_size: 3,
            fusion_stages: vec![3, 4],
            weight_source: WeightSource::Seeded(99),
        }
    }

    fn random_image(res: usize, seed: u64) -> Image {
        let mut rng = crate::rng::stream(seed, &[1]);
        let mut img = Image::new(res, res, 3).unwrap();
        for v in img.values.iter_mut() {
            *v = crate::rng::uniform_f64(&mut rng) as f32;
        }
        img
    }

    #[test]
    fn stage_shapes_match_stride_schedule() {
        let spec = ExtractorSpec::default();
        let ex = Extractor::<f32>::from_spec(&spec).unwrap();
        let maps = ex.extract(&random_image(256, 3)).unwrap();
        let dims: Vec<(usize, usize, usize)> =
            maps.iter().map(|m| (m.width, m.height, m.channels)).collect();
        assert_eq!(dims, vec![(64, 64, 32), (32, 32, 64), (16, 16, 128), (8, 8, 256)]);
    }

    #[test]
    fn extraction_is_deterministic() {
        let spec = tiny_spec();
        let img = random_image(32, 5);
        let a = Extractor::<f32>::from_spec(&spec).unwrap().extract(&img).unwrap();
        let b = Extractor::<f32>::from_spec(&spec).unwrap().extract(&img).unwrap();
        for (ma, mb) in a.iter().zip(b.iter()) {
            assert_eq!(ma.values, mb.values);
        }
    }

    #[test]
    fn zero_image_yields_per_channel_constant_stages() {
        let spec = tiny_spec();
        let ex = Extractor::<f32>::from_spec(&spec).unwrap();
        let img = Image::new(32, 32, 3).unwrap();
        for map in ex.extract(&img).unwrap() {
            // Zero input: the convolutions emit zero everywhere, the
            // standardized value is below the channel mean, and the final
            // ReLU clamps it, so every stage is exactly the zero constant.
            assert!(map.values.iter().all(|&v| v == 0.0), "stage {}", map.stage);
        }
    }

    #[test]
    fn rejects_wrong_resolution() {
        let spec = tiny_spec();
        let ex = Extractor::<f32>::from_spec(&spec).unwrap();
        assert!(ex.extract(&random_image(64, 4)).is_err());
    }

    #[test]
    fn seeded_weights_have_orthonormal_rows() {
        let w = orthogonal_rows(4, 12, std::f64::consts::SQRT_2, 7);
        for i in 0..4 {
            for j in 0..=i {
                let dot: f64 = (0..12).map(|k| w[i * 12 + k] * w[j * 12 + k]).sum();
                if i == j {
                    assert!((dot - 2.0).abs() < 1e-9, "row norm^2 {dot}");
                } else {
                    assert!(dot.abs() < 1e-9, "rows {i},{j} dot {dot}");
                }
            }
        }
    }

    #[test]
    fn patch_features_equals_manual_composition() {
        let spec = tiny_spec();
        let ex = Extractor::<f32>::from_spec(&spec).unwrap();
        let img = random_image(32, 8);
        let fused = ex.patch_features(&img).unwrap();

        let maps = ex.extract(&img).unwrap();
        let a3 = aggregate_patches(&maps[2], spec.patch_size).unwrap();
        let a4 = aggregate_patches(&maps[3], spec.patch_size).unwrap();
        let manual = crate::featext::fuse_features(&a3, &a4).unwrap();
        assert_eq!(fused.values, manual.values);
        // 32px input: stage 3 is 32/16 = 2, so the fused map is 2x2.
        assert_eq!((fused.width, fused.height), (2, 2));
        assert_eq!(fused.channels, 9);
    }

    #[test]
    fn default_spec_fused_shape() {
        let spec = ExtractorSpec::default();
        let ex = Extractor::<f32>::from_spec(&spec).unwrap();
        let fused = ex.patch_features(&random_image(256, 2)).unwrap();
        assert_eq!((fused.width, fused.height, fused.channels), (16, 16, 384));
    }

    #[test]
    fn weight_file_roundtrip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.gadw");
        let spec = tiny_spec();
        let ex = Extractor::<f32>::from_spec(&spec).unwrap();
        ex.save_weights(&path).unwrap();

        let loaded_spec =
            ExtractorSpec { weight_source: WeightSource::File(path.clone()), ..spec.clone() };
        let loaded = Extractor::<f32>::from_spec(&loaded_spec).unwrap();
        for (a, b) in ex.layers.iter().zip(loaded.layers.iter()) {
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.bias, b.bias);
        }

        // Spec with different channels must refuse the file.
        let bad_spec = ExtractorSpec {
            stage_channels: [2, 3, 4, 6],
            weight_source: WeightSource::File(path.clone()),
            ..spec.clone()
        };
        assert!(matches!(
            Extractor::<f32>::from_spec(&bad_spec),
            Err(CoreError::ModelLoad(_))
        ));

        assert!(matches!(
            Extractor::<f32>::from_spec(&ExtractorSpec {
                weight_source: WeightSource::File(dir.path().join("missing.gadw")),
                ..spec
            }),
            Err(CoreError::ModelLoad(_))
        ));
    }

    #[test]
    fn default_seed_is_stable() {
        let a = Extractor::<f32>::from_spec(&ExtractorSpec::default()).unwrap();
        let b = Extractor::<f32>::from_spec(&ExtractorSpec {
            weight_source: WeightSource::Seeded(DEFAULT_WEIGHT_SEED),
            ..ExtractorSpec::default()
        })
        .unwrap();
        assert_eq!(a.layers[0].weights, b.layers[0].weights);
    }

    #[test]
    fn stage4_gradients_match_finite_differences() {
        // f64 end to end: loss = sum(R * fused(image)), perturb stage-4
        // weights and compare analytic vs central-difference gradients.
        let spec = tiny_spec();
        let mut ex = Extractor::<f64>::from_spec(&spec).unwrap();
        let img = random_image(32, 21);

        let fused_of = |ex: &Extractor<f64>| -> FeatureMap<f64> {
            ex.patch_features(&img).unwrap()
        };
        let base = fused_of(&ex);
        let mut rng = crate::rng::stream(4, &[2]);
        let r_mask: Vec<f64> =
            (0..base.values.len()).map(|_| crate::rng::uniform_f64(&mut rng) - 0.5).collect();
        let loss_of = |ex: &Extractor<f64>| -> f64 {
            fused_of(ex).values.iter().zip(r_mask.iter()).map(|(v, r)| v * r).sum()
        };

        // Analytic: d fused -> split stage-4 part -> back-interp ->
        // back-aggregate -> stage-4 weight gradients.
        let (maps, trace) = ex.extract_with_trace(&img).unwrap();
        let c3 = maps[2].channels;
        let c4 = maps[3].channels;
        let mut d_fused4 = FeatureMap::<f64>::new(base.width, base.height, c4, 4);
        for pos in 0..base.positions() {
            for c in 0..c4 {
                d_fused4.values[pos * c4 + c] = r_mask[pos * base.channels + c3 + c];
            }
        }
        let d_agg4 =
            crate::featext::backward_interpolate(&d_fused4, maps[3].width, maps[3].height);
        let d_stage4 = crate::featext::backward_aggregate(&d_agg4, spec.patch_size).unwrap();
        let (d_w, d_b) = ex.stage4_gradients(&trace, &d_stage4.values);

        let h = 1e-5;
        let mut checked = 0;
        for idx in (0..ex.layers[3].weights.len()).step_by(17) {
            let orig = ex.layers[3].weights[idx];
            ex.layers[3].weights[idx] = orig + h;
            let up = loss_of(&ex);
            ex.layers[3].weights[idx] = orig - h;
            let down = loss_of(&ex);
            ex.layers[3].weights[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = d_w[idx];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(rel < 1e-4, "weight {idx}: analytic {analytic} vs numeric {numeric}");
            checked += 1;
        }
        assert!(checked > 10);
        for idx in 0..ex.layers[3].bias.len() {
            let orig = ex.layers[3].bias[idx];
            ex.layers[3].bias[idx] = orig + h;
            let up = loss_of(&ex);
            ex.layers[3].bias[idx] = orig - h;
            let down = loss_of(&ex);
            ex.layers[3].bias[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (numeric - d_b[idx]).abs() / numeric.abs().max(d_b[idx].abs()).max(1e-6);
            assert!(rel < 1e-4, "bias {idx}");
        }
    }

    #[test]
    fn interpolation_adjoint_is_consistent() {
        // <interp(x), y> == <x, interp^T(y)> for random x, y.
        let mut rng = crate::rng::stream(6, &[4]);
        let mut x = FeatureMap::<f64>::new(3, 3, 2, 4);
        for v in x.values.iter_mut() {
            *v = crate::rng::uniform_f64(&mut rng) - 0.5;
        }
        let up = interpolate_bilinear(&x, 7, 5);
        let mut y = FeatureMap::<f64>::new(7, 5, 2, 4);
        for v in y.values.iter_mut() {
            *v = crate::rng::uniform_f64(&mut rng) - 0.5;
        }
        let lhs: f64 = up.values.iter().zip(y.values.iter()).map(|(a, b)| a * b).sum();
        let back = crate::featext::backward_interpolate(&y, 3, 3);
        let rhs: f64 = x.values.iter().zip(back.values.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn aggregate_adjoint_is_consistent() {
        let mut rng = crate::rng::stream(8, &[4]);
        let mut x = FeatureMap::<f64>::new(5, 4, 3, 1);
        for v in x.values.iter_mut() {
            *v = crate::rng::uniform_f64(&mut rng) - 0.5;
        }
        let agg = aggregate_patches(&x, 3).unwrap();
        let mut y = FeatureMap::<f64>::new(5, 4, 3, 1);
        for v in y.values.iter_mut() {
            *v = crate::rng::uniform_f64(&mut rng) - 0.5;
        }
        let lhs: f64 = agg.values.iter().zip(y.values.iter()).map(|(a, b)| a * b).sum();
        let back = crate::featext::backward_aggregate(&y, 3).unwrap();
        let rhs: f64 = x.values.iter().zip(back.values.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
