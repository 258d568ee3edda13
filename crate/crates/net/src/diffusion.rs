//! Forward noising, trajectory pixel dropout, the x0-predicting denoiser and
//! ancestral sampling.
//!
//! Maps live in `{0, 1}`; the diffusion state uses `{-1, +1}`. The denoiser
//! emits probabilities in `[0, 1]`, rescaled to `[-1, 1]` when the next state
//! is formed.

use candle_core::{DType, Tensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::nn::{BatchNorm2d, Conv2d, Ctx, Dropout, Linear, ParamStore};
use crate::ops;

pub const COSINE_OFFSET: f64 = 0.008;
pub const ALPHA_CLIP: f64 = 1e-5;

/// Cumulative signal coefficients `alpha_bar_t` for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() || alpha_bar.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(NetError::Param("alpha_bar values must lie in (0, 1]".into()));
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    /// `alpha_bar_t`; `t = 0` is the clean signal with value 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.alpha_bar.len() => Ok(self.alpha_bar[t - 1]),
            t => Err(NetError::Timestep { t, max: self.alpha_bar.len() }),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `steps` timesteps from `T` down to a uniform stride; always starts at `T`.
    pub fn sub_schedule(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.steps();
        if steps == 0 || steps > t_max {
            return Err(NetError::Param(format!("sampling steps must lie in [1, {t_max}], got {steps}")));
        }
        Ok((1..=steps).rev().map(|i| ((i * t_max) as f64 / steps as f64).round() as usize).collect())
    }
}

/// `alpha_bar_t = f(t) / f(0)`, `f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)`,
/// clipped to `[1e-5, 1 - 1e-5]`.
pub fn cosine_schedule(t_max: usize) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(NetError::Param("T must be at least 1".into()));
    }
    let f = |t: f64| (((t / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let f0 = f(0.0);
    let alpha_bar = (1..=t_max).map(|t| (f(t as f64) / f0).clamp(ALPHA_CLIP, 1.0 - ALPHA_CLIP)).collect();
    NoiseSchedule::from_alpha_bar(alpha_bar)
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`, one timestep per
/// batch element of `(B, ...)` tensors.
pub fn forward_sample(x0: &Tensor, t: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let b = x0.dim(0)?;
    if t.len() != b || eps.dims() != x0.dims() {
        return Err(NetError::Shape(format!("x0 {:?}, eps {:?}, {} timesteps", x0.dims(), eps.dims(), t.len())));
    }
    let mut signal = Vec::with_capacity(b);
    let mut noise = Vec::with_capacity(b);
    for &ti in t {
        if ti == 0 {
            return Err(NetError::Timestep { t: 0, max: schedule.steps() });
        }
        let a = schedule.alpha_bar(ti)?;
        signal.push(a.sqrt());
        noise.push((1.0 - a).sqrt());
    }
    let mut shape = vec![b];
    shape.extend(std::iter::repeat(1).take(x0.rank() - 1));
    let signal = ops::tensor_from(signal, shape.as_slice(), x0.dtype())?;
    let noise = ops::tensor_from(noise, shape.as_slice(), x0.dtype())?;
    Ok((x0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
}

/// Stochastic trajectory pixel dropout: every set pixel is cleared
/// independently with probability `p`.
pub fn stpd(map: &Array2<u8>, p: f64, rng: &mut impl Rng) -> Result<Array2<u8>> {
    if !(p > 0.0 && p < 1.0) {
        return Err(NetError::Param(format!("dropout probability must lie in (0, 1), got {p}")));
    }
    Ok(map.mapv(|v| if v != 0 && rng.gen::<f64>() >= p { 1 } else { 0 }))
}

/// Standard normal tensor from a seeded stream.
pub fn gaussian(shape: &[usize], rng: &mut impl Rng, dtype: DType) -> Result<Tensor> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    ops::tensor_from(v, shape, dtype)
}

/// `{0, 1}` maps → `(B, 1, H, W)` signal in `{-1, +1}`.
pub fn maps_to_signal(maps: &[Array2<u8>], dtype: DType) -> Result<Tensor> {
    let (h, w) = maps.first().map(|m| m.dim()).ok_or_else(|| NetError::Shape("empty batch".into()))?;
    let mut v = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        if m.dim() != (h, w) {
            return Err(NetError::Shape("maps in a batch must share a size".into()));
        }
        v.extend(m.iter().map(|&x| if x != 0 { 1.0 } else { -1.0 }));
    }
    ops::tensor_from(v, (maps.len(), 1, h, w), dtype)
}

/// Thresholds a `(B, 1, H, W)` signal at 0 (probability 0.5).
pub fn signal_to_maps(x: &Tensor) -> Result<Vec<Array2<u8>>> {
    let (b, _, h, w) = x.dims4()?;
    let v: Vec<f64> = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok((0..b)
        .map(|i| Array2::from_shape_fn((h, w), |(r, c)| u8::from(v[(i * h + r) * w + c] >= 0.0)))
        .collect())
}

/// Anything that predicts clean-map probabilities from a noisy state.
pub trait X0Predictor {
    /// `x_t`: `(B, 1, H, W)` in signal range; returns probabilities of the
    /// same shape.
    fn predict_x0(&self, x_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor>;
}

/// DDPM posterior `q(x_s | x_t, x0)` for a jump `t → s < t`: mean
/// coefficients on `x0` and `x_t`, and the variance.
pub fn posterior(schedule: &NoiseSchedule, t: usize, s: usize) -> Result<(f64, f64, f64)> {
    let at = schedule.alpha_bar(t)?;
    let as_ = schedule.alpha_bar(s)?;
    let step = at / as_;
    let c0 = as_.sqrt() * (1.0 - step) / (1.0 - at);
    let ct = step.sqrt() * (1.0 - as_) / (1.0 - at);
    let var = (1.0 - as_) / (1.0 - at) * (1.0 - step);
    Ok((c0, ct, var.max(0.0)))
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub maps: Vec<Array2<u8>>,
    /// Final `x0` probabilities, `(B, 1, H, W)`.
    pub probabilities: Tensor,
}

/// Ancestral sampling with x0 parameterization over `steps` uniformly
/// strided timesteps, then binarization at 0.5.
pub fn sample(
    model: &impl X0Predictor,
    cond: &Tensor,
    schedule: &NoiseSchedule,
    steps: usize,
    map_size: (usize, usize),
    seed: u64,
) -> Result<SampleOutput> {
    let b = cond.dim(0)?;
    let dtype = cond.dtype();
    let ts = schedule.sub_schedule(steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [b, 1, map_size.0, map_size.1];
    let mut x = gaussian(&shape, &mut rng, dtype)?;
    let mut probs = None;
    for (i, &t) in ts.iter().enumerate() {
        let s = ts.get(i + 1).copied().unwrap_or(0);
        let p = model.predict_x0(&x, &vec![t; b], cond)?;
        if p.dims() != shape {
            return Err(NetError::Shape(format!("predictor returned {:?}, expected {shape:?}", p.dims())));
        }
        let x0 = ((&p * 2.0)? - 1.0)?;
        let (c0, ct, var) = posterior(schedule, t, s)?;
        let mean = ((&x0 * c0)? + (&x * ct)?)?;
        x = if s > 0 && var > 0.0 { (mean + (gaussian(&shape, &mut rng, dtype)? * var.sqrt())?)? } else { mean };
        probs = Some(p);
    }
    Ok(SampleOutput { maps: signal_to_maps(&x)?, probabilities: probs.expect("at least one step") })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub mid_channels: usize,
    /// Output widths of the two decoder blocks.
    pub decoder_channels: [usize; 2],
    pub time_embedding: usize,
    pub dropout: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { latent_channels: 32, mid_channels: 128, decoder_channels: [32, 16], time_embedding: 64, dropout: 0.1 }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mid_channels % 4 != 0 || self.decoder_channels[0] % 4 != 0 {
            return Err(NetError::Param("decoder inputs must be divisible by 4 for depth-to-space".into()));
        }
        if self.time_embedding == 0 || self.time_embedding % 2 != 0 {
            return Err(NetError::Param("time embedding width must be even and positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NetError::Param(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.latent_channels == 0 || self.decoder_channels.contains(&0) {
            return Err(NetError::Param("channel widths must be positive".into()));
        }
        Ok(())
    }
}

/// Sinusoidal embedding `[sin(t w_i), cos(t w_i)]`, `w_i = 10000^(-i / (d/2))`.
pub fn timestep_embedding(t: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let row: Vec<f64> = (0..half).map(|i| ti as f64 * (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
        v.extend(row.iter().map(|a| a.sin()));
        v.extend(row.iter().map(|a| a.cos()));
    }
    ops::tensor_from(v, (t.len(), dim), dtype)
}

struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    time: Linear,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl ResBlock {
    fn forward(&self, x: &Tensor, emb: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let c = x.dim(1)?;
        let bias = self.time.forward(emb)?.reshape((x.dim(0)?, c, 1, 1))?;
        let h = self.bn1.forward(&self.conv1.forward(x)?, ctx)?.broadcast_add(&bias)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, ctx)?;
        Ok((x + h)?.relu()?)
    }
}

/// Asymmetric encoder-decoder without skip connections: one encoding block
/// at stride 4, two depth-to-space decoding blocks.
pub struct Denoiser {
    cfg: DenoiserConfig,
    stem: Conv2d,
    res: ResBlock,
    enc_out: Conv2d,
    mid: Conv2d,
    dec: [Conv2d; 2],
    dropout: Dropout,
    head: Conv2d,
}

impl Denoiser {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &DenoiserConfig, cond_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.latent_channels;
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            cfg: cfg.clone(),
            stem: Conv2d::new(ps, &n("stem"), 1, c, 7, 4, 3)?,
            res: ResBlock {
                conv1: Conv2d::new(ps, &n("res.conv1"), c, c, 3, 1, 1)?,
                bn1: BatchNorm2d::new(ps, &n("res.bn1"), c)?,
                time: Linear::new(ps, &n("res.time"), cfg.time_embedding, c)?,
                conv2: Conv2d::new(ps, &n("res.conv2"), c, c, 3, 1, 1)?,
                bn2: BatchNorm2d::new(ps, &n("res.bn2"), c)?,
            },
            enc_out: Conv2d::new(ps, &n("enc_out"), c, c, 3, 1, 1)?,
            mid: Conv2d::new(ps, &n("mid"), c + cond_channels, cfg.mid_channels, 1, 1, 0)?,
            dec: [
                Conv2d::new(ps, &n("dec1"), cfg.mid_channels / 4, cfg.decoder_channels[0], 3, 1, 1)?,
                Conv2d::new(ps, &n("dec2"), cfg.decoder_channels[0] / 4, cfg.decoder_channels[1], 3, 1, 1)?,
            ],
            dropout: Dropout { p: cfg.dropout },
            // near-zero logits: the untrained model predicts 0.5 everywhere
            head: Conv2d::with_bound(ps, &n("head"), cfg.decoder_channels[1], 1, 1, 1e-3)?,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Latent `(B, C, H/4, W/4)` of the noisy state.
    pub fn encode(&self, x_t: &Tensor, t: &[usize], ctx: &Ctx) -> Result<Tensor> {
        let emb = timestep_embedding(t, self.cfg.time_embedding, x_t.dtype())?;
        let h = self.stem.forward(x_t)?.relu()?;
        let h = self.res.forward(&h, &emb, ctx)?;
        Ok(self.enc_out.forward(&h)?.relu()?)
    }

    /// Probabilities `(B, 1, H, W)`.
    pub fn forward(&self, x_t: &Tensor, t: &[usize], cond: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let (_, _, h, w) = x_t.dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(NetError::Shape(format!("map size {h}x{w} is not divisible by 4")));
        }
        let latent = self.encode(x_t, t, ctx)?;
        let (lb, _, lh, lw) = latent.dims4()?;
        let (cb, _, ch, cw) = cond.dims4()?;
        if (lb, lh, lw) != (cb, ch, cw) {
            return Err(NetError::Shape(format!("latent {:?} and condition {:?} differ", latent.dims(), cond.dims())));
        }
        let mut y = self.mid.forward(&Tensor::cat(&[&latent, cond], 1)?)?.relu()?;
        for conv in &self.dec {
            y = conv.forward(&ops::pixel_shuffle2(&y)?)?.relu()?;
        }
        let y = self.dropout.forward(&y, ctx)?;
        ops::sigmoid(&self.head.forward(&y)?)
    }
}

impl X0Predictor for Denoiser {
    fn predict_x0(&self, x_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
        self.forward(x_t, t, cond, &mut Ctx::eval())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn cosine_schedule_endpoints_and_monotone() {
        let s = cosine_schedule(1000).unwrap();
        assert!(s.alpha_bar(1).unwrap() > 0.999);
        assert!(s.alpha_bar(1000).unwrap() < 0.01);
        assert!(s.values().windows(2).all(|w| w[0] > w[1] || w[1] == ALPHA_CLIP));
        assert_eq!(s.alpha_bar(1000).unwrap(), ALPHA_CLIP);
        assert!(cosine_schedule(0).is_err());
        // direct evaluation at t = 500
        let f = |t: f64| (((t / 1000.0 + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        assert!((s.alpha_bar(500).unwrap() - f(500.0) / f(0.0)).abs() < 1e-15);
    }

    #[test]
    fn forward_sample_limits() {
        let dev = Device::Cpu;
        let x0 = Tensor::new(&[[0.5f64, -1.0]], &dev).unwrap();
        let eps = Tensor::new(&[[0.3f64, 0.7]], &dev).unwrap();
        let one = NoiseSchedule::from_alpha_bar(vec![1.0]).unwrap();
        let got: Vec<Vec<f64>> = forward_sample(&x0, &[1], &eps, &one).unwrap().to_vec2().unwrap();
        assert_eq!(got, vec![vec![0.5, -1.0]]);
        // alpha -> 0 is not representable in a schedule; check the formula directly
        let tiny = NoiseSchedule::from_alpha_bar(vec![1e-300]).unwrap();
        let got: Vec<Vec<f64>> = forward_sample(&x0, &[1], &eps, &tiny).unwrap().to_vec2().unwrap();
        assert!((got[0][0] - 0.3).abs() < 1e-12 && (got[0][1] - 0.7).abs() < 1e-12);
        assert!(matches!(forward_sample(&x0, &[2], &eps, &one), Err(NetError::Timestep { .. })));
        assert!(matches!(forward_sample(&x0, &[0], &eps, &one), Err(NetError::Timestep { .. })));
    }

    #[test]
    fn stpd_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let map = Array2::from_shape_fn((16, 16), |(r, c)| u8::from((r + c) % 3 == 0));
        assert_eq!(stpd(&map, 1e-9, &mut rng).unwrap(), map);
        let empty = Array2::<u8>::zeros((8, 8));
        assert_eq!(stpd(&empty, 0.5, &mut rng).unwrap(), empty);
        for p in [0.0, 1.0, -0.1, 1.5] {
            assert!(stpd(&map, p, &mut rng).is_err());
        }
        let out = stpd(&map, 0.5, &mut rng).unwrap();
        assert!(out.iter().zip(map.iter()).all(|(&o, &m)| o <= m));
    }

    #[test]
    fn sub_schedule_strides() {
        let s = cosine_schedule(1000).unwrap();
        assert_eq!(s.sub_schedule(1).unwrap(), vec![1000]);
        assert_eq!(s.sub_schedule(4).unwrap(), vec![1000, 750, 500, 250]);
        assert_eq!(s.sub_schedule(1000).unwrap().last(), Some(&1));
        assert!(s.sub_schedule(0).is_err());
    }

    #[test]
    fn posterior_at_first_step_returns_x0() {
        let s = cosine_schedule(1000).unwrap();
        let (c0, ct, var) = posterior(&s, 1, 0).unwrap();
        assert!((c0 - 1.0).abs() < 1e-12 && ct.abs() < 1e-12 && var.abs() < 1e-12);
        // coefficients of a full-step DDPM posterior
        let (c0, ct, var) = posterior(&s, 10, 9).unwrap();
        let (a, ap) = (s.alpha_bar(10).unwrap(), s.alpha_bar(9).unwrap());
        let beta = 1.0 - a / ap;
        assert!((c0 - ap.sqrt() * beta / (1.0 - a)).abs() < 1e-12);
        assert!((ct - (1.0 - beta).sqrt() * (1.0 - ap) / (1.0 - a)).abs() < 1e-12);
        assert!((var - (1.0 - ap) / (1.0 - a) * beta).abs() < 1e-12);
    }

    #[test]
    fn timestep_embedding_values() {
        let e: Vec<Vec<f64>> = timestep_embedding(&[0, 3], 4, DType::F64).unwrap().to_vec2().unwrap();
        assert_eq!(e[0], vec![0.0, 0.0, 1.0, 1.0]);
        assert!((e[1][0] - 3f64.sin()).abs() < 1e-15);
        assert!((e[1][1] - (3.0 * 0.01f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn denoiser_shapes_and_mismatch() {
        let mut ps = ParamStore::new(0, DType::F32);
        let den = Denoiser::new(&mut ps, "d", &DenoiserConfig::default(), 8).unwrap();
        let x = Tensor::zeros((2, 1, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let z = Tensor::zeros((2, 8, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(den.encode(&x, &[1, 2], &Ctx::eval()).unwrap().dims(), &[2, 32, 16, 16]);
        let p = den.predict_x0(&x, &[1, 2], &z).unwrap();
        assert_eq!(p.dims(), &[2, 1, 64, 64]);
        let bad = Tensor::zeros((2, 8, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(den.predict_x0(&x, &[1, 2], &bad), Err(NetError::Shape(_))));
    }
}
