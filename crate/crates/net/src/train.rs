//! End-to-end training loop and the ablation variants.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use trajdiff_core::blursim::{BlurPair, Manifest, PairRecord};
use trajdiff_core::seed::derive_seed;

use crate::condenc::Aggregation;
use crate::diffusion::{forward_sample, gaussian, maps_to_signal, stpd};
use crate::error::{NetError, Result};
use crate::losses::{objective, scalar, LossKind};
use crate::model::{ModelConfig, TrajDiff};
use crate::nn::Ctx;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub iou_eps: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    /// Trajectory pixel dropout probability; 0 disables it.
    pub stpd_p: f64,
    pub loss: LossKind,
    pub seed: u64,
    /// Periodic checkpoint interval in iterations; 0 saves only the final model.
    pub checkpoint_every: usize,
    /// Linear learning-rate warmup length in iterations.
    pub warmup: usize,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            iou_eps: 1.0,
            iterations: 5000,
            batch_size: 16,
            lr: 1e-3,
            lr_min: 1e-5,
            stpd_p: 0.1,
            loss: LossKind::Weighted,
            seed: 0,
            checkpoint_every: 1000,
            warmup: 100,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(NetError::Param("iterations and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_min > 0.0 && self.lr_min < self.lr) {
            return Err(NetError::Param(format!("need 0 < lr_min < lr, got {} and {}", self.lr_min, self.lr)));
        }
        if !(0.0..1.0).contains(&self.stpd_p) {
            return Err(NetError::Param(format!("stpd_p must lie in [0, 1), got {}", self.stpd_p)));
        }
        if !(self.grad_clip >= 0.0) || self.warmup >= self.iterations {
            return Err(NetError::Param("grad_clip must be non-negative and warmup shorter than training".into()));
        }
        if !(self.lambda >= 0.0) || !(self.iou_eps > 0.0) {
            return Err(NetError::Param("lambda must be non-negative and iou_eps positive".into()));
        }
        Ok(())
    }

    /// Linear warmup to `lr`, then cosine annealing to `lr_min` at the last
    /// iteration.
    pub fn learning_rate(&self, iteration: usize) -> f64 {
        if iteration <= self.warmup {
            return self.lr * iteration as f64 / self.warmup as f64;
        }
        let start = self.warmup + 1;
        if self.iterations <= start {
            return self.lr;
        }
        let frac = (iteration.saturating_sub(start)) as f64 / (self.iterations - start) as f64;
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
    }
}

/// Blurred images and HR maps held in memory.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub ids: Vec<String>,
    pub images: Vec<Array3<f64>>,
    pub maps: Vec<Array2<u8>>,
}

impl TrainingSet {
    pub fn from_pairs(pairs: &[BlurPair]) -> Self {
        Self {
            ids: pairs.iter().map(|p| format!("pair {} (seed {})", p.record.id, p.record.pair_seed)).collect(),
            images: pairs.iter().map(|p| p.blurred.clone()).collect(),
            maps: pairs.iter().map(|p| p.hr_map.grid().clone()).collect(),
        }
    }

    pub fn load(root: &Path, records: &[PairRecord]) -> Result<Self> {
        let pairs = records.iter().map(|r| BlurPair::load(root, r)).collect::<trajdiff_core::Result<Vec<_>>>()?;
        Ok(Self::from_pairs(&pairs))
    }

    pub fn load_manifest(root: &Path) -> Result<Self> {
        let m = Manifest::read(&root.join(Manifest::FILE_NAME))?;
        Self::load(root, &m.entries)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    pub wbce: f64,
    pub wiou: f64,
    pub lr: f64,
    pub wallclock: f64,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "model.safetensors";

/// Where a run writes its log and checkpoints.
pub fn checkpoint_path(out: &Path, iteration: usize) -> PathBuf {
    out.join("checkpoints").join(format!("iter_{iteration:06}.safetensors"))
}

/// One optimization step's inputs, drawn from the iteration seed.
struct Batch {
    indices: Vec<usize>,
    timesteps: Vec<usize>,
    x_t: Tensor,
    target: Tensor,
    images: Tensor,
}

fn draw_batch(model: &TrajDiff, data: &TrainingSet, cfg: &TrainConfig, seed: u64) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = cfg.batch_size;
    let indices: Vec<usize> = (0..b).map(|_| rng.gen_range(0..data.len())).collect();
    let clean: Vec<Array2<u8>> = indices.iter().map(|&i| data.maps[i].clone()).collect();
    let dropped = if cfg.stpd_p > 0.0 {
        clean.iter().map(|m| stpd(m, cfg.stpd_p, &mut rng)).collect::<Result<Vec<_>>>()?
    } else {
        clean.clone()
    };
    let t_max = model.schedule().steps();
    let timesteps: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=t_max)).collect();
    let x0 = maps_to_signal(&dropped, model.dtype())?;
    let eps = gaussian(x0.dims(), &mut rng, model.dtype())?;
    let x_t = forward_sample(&x0, &timesteps, &eps, model.schedule())?;
    let target = ((maps_to_signal(&clean, model.dtype())? + 1.0)? * 0.5)?;
    let imgs: Vec<&Array3<f64>> = indices.iter().map(|&i| &data.images[i]).collect();
    let images = model.images_to_tensor(&imgs)?;
    Ok(Batch { indices, timesteps, x_t, target, images })
}

/// Loss of one seeded batch with gradients attached; used by training and
/// by the gradient-flow checks.
pub fn batch_loss(model: &TrajDiff, data: &TrainingSet, cfg: &TrainConfig, iteration: usize) -> Result<(Tensor, LogRow)> {
    let batch_seed = derive_seed(cfg.seed, "batch", iteration as u64);
    let batch = draw_batch(model, data, cfg, batch_seed)?;
    let mut ctx = Ctx::train(derive_seed(cfg.seed, "dropout", iteration as u64));
    let pred = model.predict(&batch.x_t, &batch.timesteps, &batch.images, &mut ctx)?;
    let terms = objective(cfg.loss, &pred, &batch.target, cfg.lambda, cfg.iou_eps)?;
    let loss = scalar(&terms.total)?;
    if !loss.is_finite() {
        return Err(NetError::NonFinite {
            iteration,
            batch_seed,
            pairs: batch.indices.iter().map(|&i| data.ids[i].clone()).collect(),
            timesteps: batch.timesteps,
        });
    }
    let row = LogRow { iteration, loss, wbce: terms.wbce, wiou: terms.wiou, lr: cfg.learning_rate(iteration), wallclock: 0.0 };
    Ok((terms.total, row))
}

/// Trains `model` in place. With `out`, writes the CSV log, periodic
/// checkpoints and the final checkpoint there. `on_row` sees every log row.
pub fn train(
    model: &TrajDiff,
    data: &TrainingSet,
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut on_row: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(NetError::Param("training set is empty".into()));
    }
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| NetError::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            Some((csv::Writer::from_path(&path).map_err(|e| NetError::State(format!("{}: {e}", path.display())))?, path))
        }
        None => None,
    };
    let train_json = serde_json::to_string(cfg).expect("train config serializes");
    let params = ParamsAdamW { lr: cfg.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
    let mut opt = AdamW::new(model.params().trainable(), params)?;
    let start = Instant::now();
    let mut rows = Vec::with_capacity(cfg.iterations);
    for it in 1..=cfg.iterations {
        let (loss, mut row) = batch_loss(model, data, cfg, it)?;
        opt.set_learning_rate(row.lr);
        let mut grads = loss.backward()?;
        if cfg.grad_clip > 0.0 {
            clip_grad_norm(model, &mut grads, cfg.grad_clip)?;
        }
        opt.step(&grads)?;
        row.wallclock = start.elapsed().as_secs_f64();
        if let Some((w, path)) = log.as_mut() {
            w.serialize(&row).and_then(|_| Ok(w.flush()?)).map_err(|e| NetError::State(format!("{}: {e}", path.display())))?;
        }
        on_row(&row);
        rows.push(row);
        if let Some(dir) = out {
            let extra = [("train_config", train_json.clone()), ("iteration", it.to_string())];
            if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 {
                model.save(&checkpoint_path(dir, it), &extra)?;
            }
            if it == cfg.iterations {
                model.save(&dir.join(FINAL_CHECKPOINT), &extra)?;
            }
        }
    }
    Ok(rows)
}

/// Rescales all parameter gradients so that their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(model: &TrajDiff, grads: &mut GradStore, max_norm: f64) -> Result<f64> {
    let vars = model.params().trainable();
    let mut sq = 0.0;
    for v in &vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for v in &vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * k)?);
            }
        }
    }
    Ok(norm)
}

/// The five rows of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SingleScaleF2,
    SingleScaleF4,
    NoProposedLoss,
    NoStpd,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::SingleScaleF2, Variant::SingleScaleF4, Variant::NoProposedLoss, Variant::NoStpd, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::SingleScaleF2 => "single_scale_f2",
            Variant::SingleScaleF4 => "single_scale_f4",
            Variant::NoProposedLoss => "no_proposed_loss",
            Variant::NoStpd => "no_stpd",
            Variant::Full => "full",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.label() == s)
    }

    /// Applies the variant to a base configuration.
    pub fn apply(self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let (mut m, mut t) = (model.clone(), train.clone());
        match self {
            Variant::SingleScaleF2 => m.encoder.aggregation = Aggregation::SingleScale { stage: 2 },
            Variant::SingleScaleF4 => m.encoder.aggregation = Aggregation::SingleScale { stage: 4 },
            Variant::NoProposedLoss => t.loss = LossKind::Mse,
            Variant::NoStpd => t.stpd_p = 0.0,
            Variant::Full => {}
        }
        (m, t)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_learning_rate_endpoints() {
        let cfg = TrainConfig { iterations: 101, lr: 1e-4, lr_min: 1e-6, warmup: 0, ..TrainConfig::default() };
        assert_eq!(cfg.learning_rate(1), 1e-4);
        assert!((cfg.learning_rate(101) - 1e-6).abs() < 1e-18);
        assert!((cfg.learning_rate(51) - (1e-6 + 0.5 * (1e-4 - 1e-6))).abs() < 1e-15);
        let lrs: Vec<f64> = (1..=101).map(|i| cfg.learning_rate(i)).collect();
        assert!(lrs.windows(2).all(|w| w[0] >= w[1]));

        let warm = TrainConfig { iterations: 1000, warmup: 100, ..TrainConfig::default() };
        assert_eq!(warm.learning_rate(50), warm.lr / 2.0);
        assert_eq!(warm.learning_rate(100), warm.lr);
        assert_eq!(warm.learning_rate(101), warm.lr);
        assert!((warm.learning_rate(1000) - warm.lr_min).abs() < 1e-18);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr_min: 1e-3, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { stpd_p: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn variants_round_trip_labels() {
        for v in Variant::ALL {
            assert_eq!(Variant::from_label(v.label()), Some(v));
        }
        let (m, t) = Variant::NoStpd.apply(&ModelConfig::default(), &TrainConfig::default());
        assert_eq!(t.stpd_p, 0.0);
        assert_eq!(m, ModelConfig::default());
        let (m, _) = Variant::SingleScaleF4.apply(&ModelConfig::default(), &TrainConfig::default());
        assert_eq!(m.encoder.aggregation, Aggregation::SingleScale { stage: 4 });
    }
}
