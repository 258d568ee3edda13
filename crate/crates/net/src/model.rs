//! The full estimator: condition encoder plus conditional denoiser, with
//! single-file checkpoints.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::condenc::{ConditionEncoder, EncoderConfig};
use crate::diffusion::{self, cosine_schedule, Denoiser, DenoiserConfig, NoiseSchedule, SampleOutput};
use crate::error::{NetError, Result};
use crate::nn::{Ctx, ParamStore};
use crate::ops;

pub const CHECKPOINT_FORMAT: &str = "trajdiff-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Side of the square input image and HR map.
    pub image_size: usize,
    pub timesteps: usize,
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserConfig,
    /// Seed of the parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            timesteps: 1000,
            encoder: EncoderConfig::default(),
            denoiser: DenoiserConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(NetError::Param(format!("image size must be a positive multiple of 32, got {}", self.image_size)));
        }
        if self.timesteps == 0 {
            return Err(NetError::Param("timesteps must be at least 1".into()));
        }
        self.encoder.validate()?;
        self.denoiser.validate()
    }
}

/// Schedule description stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInfo {
    pub kind: String,
    pub timesteps: usize,
    pub offset: f64,
    pub clip: f64,
}

impl ScheduleInfo {
    fn cosine(timesteps: usize) -> Self {
        Self { kind: "cosine".into(), timesteps, offset: diffusion::COSINE_OFFSET, clip: diffusion::ALPHA_CLIP }
    }
}

pub struct TrajDiff {
    cfg: ModelConfig,
    store: ParamStore,
    pub encoder: ConditionEncoder,
    pub denoiser: Denoiser,
    schedule: NoiseSchedule,
}

impl TrajDiff {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Self::with_dtype(cfg, DType::F32)
    }

    pub fn with_dtype(cfg: &ModelConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed, dtype);
        let encoder = ConditionEncoder::new(&mut store, "encoder", &cfg.encoder)?;
        let denoiser = Denoiser::new(&mut store, "denoiser", &cfg.denoiser, cfg.encoder.condition_channels())?;
        Ok(Self { cfg: cfg.clone(), store, encoder, denoiser, schedule: cosine_schedule(cfg.timesteps)? })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// `H×W×3` images in `[0, 1]` → `(B, 3, H, W)`.
    pub fn images_to_tensor(&self, images: &[&Array3<f64>]) -> Result<Tensor> {
        let n = self.cfg.image_size;
        let mut v = Vec::with_capacity(images.len() * 3 * n * n);
        for img in images {
            let (h, w, c) = img.dim();
            if (h, w, c) != (n, n, 3) {
                return Err(NetError::Shape(format!("image {h}x{w}x{c}, model expects {n}x{n}x3")));
            }
            for k in 0..3 {
                v.extend((0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| img[[y, x, k]]));
            }
        }
        ops::tensor_from(v, (images.len(), 3, n, n), self.dtype())
    }

    /// Condition map `z1` for a `(B, 3, H, W)` batch.
    pub fn condition(&self, blurred: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        self.encoder.forward(blurred, ctx)
    }

    /// `x0` probabilities from a noisy state.
    pub fn predict(&self, x_t: &Tensor, t: &[usize], blurred: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let z1 = self.condition(blurred, ctx)?;
        self.denoiser.forward(x_t, t, &z1, ctx)
    }

    /// Samples HR trajectory maps for a batch of blurred images.
    pub fn estimate(&self, blurred: &Tensor, steps: usize, seed: u64) -> Result<SampleOutput> {
        let z1 = self.condition(blurred, &Ctx::eval())?;
        let n = self.cfg.image_size;
        diffusion::sample(&self.denoiser, &z1, &self.schedule, steps, (n, n), seed)
    }

    /// Estimates one map per image, `batch` images at a time. Image `i` uses
    /// sampling seed `seeds[i]`, so results do not depend on batching.
    pub fn estimate_images(&self, images: &[&Array3<f64>], steps: usize, seeds: &[u64]) -> Result<Vec<Array2<u8>>> {
        if images.len() != seeds.len() {
            return Err(NetError::Shape(format!("{} images, {} seeds", images.len(), seeds.len())));
        }
        let mut out = Vec::with_capacity(images.len());
        for (img, &seed) in images.iter().zip(seeds) {
            let x = self.images_to_tensor(&[img])?;
            out.extend(self.estimate(&x, steps, seed)?.maps);
        }
        Ok(out)
    }

    /// Writes all tensors as little-endian f32 with the model config, the
    /// schedule and `extra` in the header metadata.
    pub fn save(&self, path: &Path, extra: &[(&str, String)]) -> Result<()> {
        let tensors: Vec<(String, Tensor)> = self
            .store
            .tensors()
            .into_iter()
            .map(|(k, v)| Ok((k, v.to_dtype(DType::F32)?)))
            .collect::<Result<_>>()?;
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
        meta.insert("model_config".to_string(), to_json(&self.cfg));
        meta.insert("schedule".to_string(), to_json(&ScheduleInfo::cosine(self.cfg.timesteps)));
        for (k, v) in extra {
            meta.insert((*k).to_string(), v.clone());
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| NetError::io(dir, e))?;
        }
        safetensors::serialize_to_file(tensors, Some(meta), path).map_err(|e| NetError::checkpoint(path, e))
    }

    /// Rebuilds a model from a checkpoint written by [`TrajDiff::save`] and
    /// returns it with the stored metadata.
    pub fn load(path: &Path) -> Result<(Self, HashMap<String, String>)> {
        let buf = std::fs::read(path).map_err(|e| NetError::io(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&buf).map_err(|e| NetError::checkpoint(path, e))?;
        let meta = header.metadata().clone().unwrap_or_default();
        match meta.get("format") {
            Some(f) if f == CHECKPOINT_FORMAT => {}
            other => return Err(NetError::checkpoint(path, format!("unknown format {other:?}"))),
        }
        let cfg: ModelConfig = from_json(path, &meta, "model_config")?;
        let schedule: ScheduleInfo = from_json(path, &meta, "schedule")?;
        if schedule != ScheduleInfo::cosine(cfg.timesteps) {
            return Err(NetError::checkpoint(path, format!("unsupported schedule {schedule:?}")));
        }
        let model = Self::new(&cfg)?;
        let tensors = candle_core::safetensors::load_buffer(&buf, &Device::Cpu)?;
        model.store.load(&tensors).map_err(|e| NetError::checkpoint(path, e))?;
        Ok((model, meta))
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config types serialize")
}

fn from_json<T: serde::de::DeserializeOwned>(path: &Path, meta: &HashMap<String, String>, key: &str) -> Result<T> {
    let s = meta.get(key).ok_or_else(|| NetError::checkpoint(path, format!("missing {key}")))?;
    serde_json::from_str(s).map_err(|e| NetError::checkpoint(path, format!("{key}: {e}")))
}
