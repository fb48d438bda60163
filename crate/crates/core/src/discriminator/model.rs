//! The serializable trained model.
//!
//! Binary container (magic `GADM`, little-endian throughout): format
//! version, extractor spec, embedded extractor weights, classifier layers,
//! then the training config and seed. Save -> load -> save round-trips
//! byte-identically; the exact layout is documented in the README.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};
use crate::featext::extractor::{read_layer_entries, write_layer_entries};
use crate::featext::{Extractor, ExtractorSpec, WeightSource};
use crate::imagesynth::{BetaRange, SourcePool, SynthConfig};
use crate::serio;

use super::mlp::{Dense, MlpClassifier};
use super::train::TrainConfig;

const MODEL_MAGIC: &[u8; 4] = b"GADM";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct DiscriminatorModel {
    pub version: u32,
    pub extractor: Extractor<f32>,
    pub classifier: MlpClassifier,
    pub config: TrainConfig,
}

impl DiscriminatorModel {
    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| CoreError::ModelLoad(format!("cannot open {}: {e}", path.display())))?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        serio::write_u32(w, self.version)?;
        write_extractor_spec(w, &self.extractor.spec)?;
        write_layer_entries(w, &self.extractor.layers)?;

        serio::write_u32(w, self.classifier.layers.len() as u32)?;
        for layer in &self.classifier.layers {
            serio::write_u32(w, layer.in_dim as u32)?;
            serio::write_u32(w, layer.out_dim as u32)?;
            serio::write_f32_slice(w, &layer.w)?;
            serio::write_f32_slice(w, &layer.b)?;
        }

        write_train_config(w, &self.config)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| CoreError::ModelLoad(format!("truncated model file: {e}")))?;
        if &magic != MODEL_MAGIC {
            return Err(CoreError::ModelLoad("bad magic bytes in model file".into()));
        }
        let version = serio::read_u32(r)?;
        if version != MODEL_FORMAT_VERSION {
            return Err(CoreError::ModelLoad(format!("unsupported model version {version}")));
        }
        let spec = read_extractor_spec(r)?;
        let layers = read_layer_entries(r, &spec)?;
        let mut extractor = Extractor { spec, layers };
        extractor
            .finalize()
            .map_err(|e| CoreError::ModelLoad(format!("cannot finalize extractor: {e}")))?;

        let n_layers = serio::read_u32(r)? as usize;
        if n_layers == 0 || n_layers > 64 {
            return Err(CoreError::ModelLoad("unreasonable classifier layer count".into()));
        }
        let mut mlp_layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let in_dim = serio::read_u32(r)? as usize;
            let out_dim = serio::read_u32(r)? as usize;
            if in_dim == 0 || out_dim == 0 || in_dim * out_dim > 64 << 20 {
                return Err(CoreError::ModelLoad("unreasonable classifier layer shape".into()));
            }
            let w = serio::read_f32_vec(r, in_dim * out_dim)?;
            let b = serio::read_f32_vec(r, out_dim)?;
            mlp_layers.push(Dense { in_dim, out_dim, w, b });
        }

        let config = read_train_config(r)?;
        Ok(Self {
            version,
            extractor,
            classifier: MlpClassifier { layers: mlp_layers },
            config,
        })
    }
}

fn write_extractor_spec<W: Write>(w: &mut W, spec: &ExtractorSpec) -> Result<()> {
    serio::write_u32(w, spec.input_resolution as u32)?;
    for &c in &spec.stage_channels {
        serio::write_u32(w, c as u32)?;
    }
    serio::write_u32(w, spec.patch_size as u32)?;
    serio::write_u32(w, spec.fusion_stages.len() as u32)?;
    for &s in &spec.fusion_stages {
        serio::write_u32(w, s as u32)?;
    }
    match &spec.weight_source {
        WeightSource::Seeded(seed) => {
            serio::write_u8(w, 0)?;
            serio::write_u64(w, *seed)?;
        }
        WeightSource::File(path) => {
            serio::write_u8(w, 1)?;
            serio::write_str(w, &path.to_string_lossy())?;
        }
    }
    Ok(())
}

fn read_extractor_spec<R: Read>(r: &mut R) -> Result<ExtractorSpec> {
    let input_resolution = serio::read_u32(r)? as usize;
    let mut stage_channels = [0usize; 4];
    for c in stage_channels.iter_mut() {
        *c = serio::read_u32(r)? as usize;
    }
    let patch_size = serio::read_u32(r)? as usize;
    let n_fusion = serio::read_u32(r)? as usize;
    if n_fusion == 0 || n_fusion > 4 {
        return Err(CoreError::ModelLoad("bad fusion stage count".into()));
    }
    let mut fusion_stages = Vec::with_capacity(n_fusion);
    for _ in 0..n_fusion {
        fusion_stages.push(serio::read_u32(r)? as usize);
    }
    let weight_source = match serio::read_u8(r)? {
        0 => WeightSource::Seeded(serio::read_u64(r)?),
        1 => WeightSource::File(PathBuf::from(serio::read_str(r)?)),
        other => return Err(CoreError::ModelLoad(format!("bad weight source tag {other}"))),
    };
    let spec =
        ExtractorSpec { input_resolution, stage_channels, patch_size, fusion_stages, weight_source };
    spec.validate().map_err(|e| CoreError::ModelLoad(format!("invalid extractor spec: {e}")))?;
    Ok(spec)
}

fn write_f32_bits<W: Write>(w: &mut W, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_f32_bits<R: Read>(r: &mut R) -> Result<f32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(f32::from_le_bytes(buf))
}

fn write_train_config<W: Write>(w: &mut W, cfg: &TrainConfig) -> Result<()> {
    serio::write_f64(w, cfg.learning_rate)?;
    serio::write_f64(w, cfg.beta1)?;
    serio::write_f64(w, cfg.beta2)?;
    serio::write_f64(w, cfg.weight_decay)?;
    serio::write_u32(w, cfg.batch_size as u32)?;
    serio::write_u32(w, cfg.epochs as u32)?;
    serio::write_u64(w, cfg.seed)?;
    serio::write_f64(w, cfg.sigma)?;
    serio::write_u32(w, cfg.hidden_widths.len() as u32)?;
    for &h in &cfg.hidden_widths {
        serio::write_u32(w, h as u32)?;
    }
    serio::write_u8(w, u8::from(cfg.fine_tune_extractor))?;

    let synth = &cfg.synth;
    serio::write_u32(w, synth.grid_period as u32)?;
    serio::write_u32(w, synth.octaves as u32)?;
    serio::write_f64(w, synth.persistence)?;
    write_f32_bits(w, synth.mask_threshold)?;
    serio::write_f64(w, synth.max_area_ratio)?;
    serio::write_f64(w, synth.beta_range.lo)?;
    serio::write_f64(w, synth.beta_range.hi)?;
    match &synth.source {
        SourcePool::Procedural => serio::write_u8(w, 0)?,
        SourcePool::Directory(dir) => {
            serio::write_u8(w, 1)?;
            serio::write_str(w, &dir.to_string_lossy())?;
        }
    }
    Ok(())
}

fn read_train_config<R: Read>(r: &mut R) -> Result<TrainConfig> {
    let learning_rate = serio::read_f64(r)?;
    let beta1 = serio::read_f64(r)?;
    let beta2 = serio::read_f64(r)?;
    let weight_decay = serio::read_f64(r)?;
    let batch_size = serio::read_u32(r)? as usize;
    let epochs = serio::read_u32(r)? as usize;
    let seed = serio::read_u64(r)?;
    let sigma = serio::read_f64(r)?;
    let n_hidden = serio::read_u32(r)? as usize;
    if n_hidden > 64 {
        return Err(CoreError::ModelLoad("unreasonable hidden layer count".into()));
    }
    let mut hidden_widths = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden_widths.push(serio::read_u32(r)? as usize);
    }
    let fine_tune_extractor = serio::read_u8(r)? != 0;

    let grid_period = serio::read_u32(r)? as usize;
    let octaves = serio::read_u32(r)? as usize;
    let persistence = serio::read_f64(r)?;
    let mask_threshold = read_f32_bits(r)?;
    let max_area_ratio = serio::read_f64(r)?;
    let beta_lo = serio::read_f64(r)?;
    let beta_hi = serio::read_f64(r)?;
    let source = match serio::read_u8(r)? {
        0 => SourcePool::Procedural,
        1 => SourcePool::Directory(PathBuf::from(serio::read_str(r)?)),
        other => return Err(CoreError::ModelLoad(format!("bad source pool tag {other}"))),
    };
    Ok(TrainConfig {
        learning_rate,
        beta1,
        beta2,
        weight_decay,
        batch_size,
        epochs,
        seed,
        sigma,
        hidden_widths,
        fine_tune_extractor,
        synth: SynthConfig {
            grid_period,
            octaves,
            persistence,
            mask_threshold,
            max_area_ratio,
            beta_range: BetaRange { lo: beta_lo, hi: beta_hi },
            source,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discriminator::mlp::Mlp;

    fn sample_model() -> DiscriminatorModel {
        let spec = ExtractorSpec {
            input_resolution: 32,
            stage_channels: [2, 3, 4, 5],
            patch_size: 3,
            fusion_stages: vec![3, 4],
            weight_source: WeightSource::Seeded(7),
        };
        let extractor = Extractor::<f32>::from_spec(&spec).unwrap();
        let classifier = Mlp::<f32>::seeded(9, &[6, 6], 11);
        DiscriminatorModel {
            version: MODEL_FORMAT_VERSION,
            extractor,
            classifier,
            config: TrainConfig { seed: 42, ..Default::default() },
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = sample_model();
        let p1 = dir.path().join("a.gadm");
        let p2 = dir.path().join("b.gadm");
        model.save(&p1).unwrap();
        let loaded = DiscriminatorModel::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        assert_eq!(loaded.classifier, model.classifier);
        assert_eq!(loaded.extractor.layers, model.extractor.layers);
        assert_eq!(loaded.config.seed, 42);
    }

    #[test]
    fn corrupt_and_truncated_files_are_model_load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.gadm");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(DiscriminatorModel::load(&path), Err(CoreError::ModelLoad(_))));

        let model = sample_model();
        let bytes = model.to_bytes().unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(DiscriminatorModel::load(&path).is_err());

        assert!(matches!(
            DiscriminatorModel::load(&dir.path().join("missing.gadm")),
            Err(CoreError::ModelLoad(_))
        ));
    }
}
