//! Condition encoder: pyramid transformer features, local emphasis and
//! stepwise aggregation into the condition map `z1`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::nn::{Conv2d, Ctx, LayerNorm, Linear, ParamStore};
use crate::ops;

/// Output stride of each stage relative to the input.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// How pyramid levels become the condition map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Aggregation {
    /// Deep-to-shallow fusion of all four stages.
    Stepwise,
    /// Only stage `stage` (1-based) after local emphasis.
    SingleScale { stage: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    pub heads: [usize; 4],
    pub sr_ratios: [usize; 4],
    pub mlp_ratio: usize,
    /// Output channels of each local-emphasis module; `None` keeps the stage width.
    pub le_channels: Option<[usize; 4]>,
    pub aggregation: Aggregation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stage_channels: [32, 64, 128, 256],
            heads: [1, 2, 4, 8],
            sr_ratios: [8, 4, 2, 1],
            mlp_ratio: 4,
            le_channels: Some([32; 4]),
            aggregation: Aggregation::Stepwise,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for s in 0..4 {
            let c = self.stage_channels[s];
            if c == 0 || self.heads[s] == 0 || c % self.heads[s] != 0 {
                return Err(NetError::Param(format!("stage {} width {c} not divisible by {} heads", s + 1, self.heads[s])));
            }
            if self.sr_ratios[s] == 0 {
                return Err(NetError::Param("reduction ratios must be positive".into()));
            }
        }
        if let Aggregation::SingleScale { stage } = self.aggregation {
            if !(1..=4).contains(&stage) {
                return Err(NetError::Param(format!("single-scale stage must be 1..=4, got {stage}")));
            }
        }
        if self.mlp_ratio == 0 {
            return Err(NetError::Param("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn le_widths(&self) -> [usize; 4] {
        self.le_channels.unwrap_or(self.stage_channels)
    }

    /// Channel count of `z1`.
    pub fn condition_channels(&self) -> usize {
        match self.aggregation {
            Aggregation::Stepwise => self.le_widths()[0],
            Aggregation::SingleScale { stage } => self.le_widths()[stage - 1],
        }
    }
}

/// `f_1..f_4`, each `(B, C_s, H/stride_s, W/stride_s)`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 4],
}

struct Attention {
    heads: usize,
    q: Linear,
    kv: Linear,
    proj: Linear,
    sr: Option<(Conv2d, LayerNorm)>,
}

impl Attention {
    fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, sr_ratio: usize) -> Result<Self> {
        let sr = if sr_ratio > 1 {
            Some((
                Conv2d::new(ps, &format!("{name}.sr"), dim, dim, sr_ratio, sr_ratio, 0)?,
                LayerNorm::new(ps, &format!("{name}.sr_norm"), dim)?,
            ))
        } else {
            None
        };
        Ok(Self {
            heads,
            q: Linear::new(ps, &format!("{name}.q"), dim, dim)?,
            kv: Linear::new(ps, &format!("{name}.kv"), dim, 2 * dim)?,
            proj: Linear::new(ps, &format!("{name}.proj"), dim, dim)?,
            sr,
        })
    }

    /// Spatial-reduction attention on `(B, N, C)` tokens laid out on `h×w`.
    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let d = c / self.heads;
        let q = self.q.forward(x)?.reshape((b, n, self.heads, d))?.transpose(1, 2)?.contiguous()?;
        let kv_src = match &self.sr {
            Some((conv, norm)) => {
                let map = tokens_to_map(x, h, w)?;
                let r = conv.kernel;
                let reduced = if h >= r && w >= r { conv.forward(&map)? } else { conv.forward(&map.pad_with_zeros(2, 0, r - h.min(r))?.pad_with_zeros(3, 0, r - w.min(r))?)? };
                norm.forward(&map_to_tokens(&reduced)?)?
            }
            None => x.clone(),
        };
        let m = kv_src.dim(1)?;
        let kv = self.kv.forward(&kv_src)?.reshape((b, m, 2, self.heads, d))?;
        let k = kv.narrow(2, 0, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?;
        let v = kv.narrow(2, 1, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (d as f64).sqrt()))?;
        let out = ops::softmax_last(&scores)?.matmul(&v)?;
        let out = out.transpose(1, 2)?.reshape((b, n, c))?;
        self.proj.forward(&out)
    }
}

/// Feed-forward with a depthwise 3×3 convolution between the two linears.
struct MixFfn {
    fc1: Linear,
    dw_weight: Tensor,
    dw_bias: Tensor,
    fc2: Linear,
}

impl MixFfn {
    fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden)?,
            dw_weight: ps.uniform(&format!("{name}.dw.weight"), &[hidden, 9], 1.0 / 3.0)?,
            dw_bias: ps.uniform(&format!("{name}.dw.bias"), &[hidden], 1.0 / 3.0)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let hid = self.fc1.forward(x)?;
        let map = ops::depthwise3x3(&tokens_to_map(&hid, h, w)?, &self.dw_weight, &self.dw_bias)?;
        self.fc2.forward(&ops::gelu(&map_to_tokens(&map)?)?)
    }
}

struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ffn: MixFfn,
}

struct Stage {
    embed: Conv2d,
    embed_norm: LayerNorm,
    block: Block,
    norm: LayerNorm,
}

impl Stage {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let map = self.embed.forward(x)?;
        let (_, _, h, w) = map.dims4()?;
        let t = self.embed_norm.forward(&map_to_tokens(&map)?)?;
        let b = &self.block;
        let t = (&t + b.attn.forward(&b.norm1.forward(&t)?, h, w)?)?;
        let t = (&t + b.ffn.forward(&b.norm2.forward(&t)?, h, w)?)?;
        tokens_to_map(&self.norm.forward(&t)?, h, w)
    }
}

fn map_to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

fn tokens_to_map(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    if n != h * w {
        return Err(NetError::Shape(format!("{n} tokens cannot form a {h}x{w} map")));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Four-stage pyramid transformer with overlapping patch embeddings and
/// spatial-reduction attention.
pub struct PyramidEncoder {
    stages: Vec<Stage>,
}

impl PyramidEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = cfg.in_channels;
        for s in 0..4 {
            let c = cfg.stage_channels[s];
            let n = format!("{name}.stage{}", s + 1);
            let embed = if s == 0 { Conv2d::new(ps, &format!("{n}.embed"), cin, c, 7, 4, 3)? } else { Conv2d::new(ps, &format!("{n}.embed"), cin, c, 3, 2, 1)? };
            stages.push(Stage {
                embed,
                embed_norm: LayerNorm::new(ps, &format!("{n}.embed_norm"), c)?,
                block: Block {
                    norm1: LayerNorm::new(ps, &format!("{n}.block.norm1"), c)?,
                    attn: Attention::new(ps, &format!("{n}.block.attn"), c, cfg.heads[s], cfg.sr_ratios[s])?,
                    norm2: LayerNorm::new(ps, &format!("{n}.block.norm2"), c)?,
                    ffn: MixFfn::new(ps, &format!("{n}.block.ffn"), c, c * cfg.mlp_ratio)?,
                },
                norm: LayerNorm::new(ps, &format!("{n}.norm"), c)?,
            });
            cin = c;
        }
        Ok(Self { stages })
    }

    /// `(B, 3, H, W)` with `H`, `W` divisible by 32 → `f_1..f_4`.
    pub fn extract_multiscale(&self, x: &Tensor) -> Result<FeaturePyramid> {
        let (_, _, h, w) = x.dims4()?;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(NetError::Shape(format!("input {h}x{w} is not divisible by 32")));
        }
        let mut levels = Vec::with_capacity(4);
        let mut cur = x.clone();
        for stage in &self.stages {
            cur = stage.forward(&cur)?;
            levels.push(cur.clone());
        }
        let levels: [Tensor; 4] = levels.try_into().expect("four stages");
        Ok(FeaturePyramid { levels })
    }
}

/// Two 3×3 conv + ReLU layers, then bilinear upsampling to `(H/4, W/4)`.
pub struct LocalEmphasis {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl LocalEmphasis {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1, 1)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1, 1)?,
        })
    }

    /// Response before upsampling.
    pub fn emphasize(&self, f: &Tensor) -> Result<Tensor> {
        Ok(self.conv2.forward(&self.conv1.forward(f)?.relu()?)?.relu()?)
    }

    pub fn forward(&self, f: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        ops::resize_bilinear(&self.emphasize(f)?, out_h, out_w)
    }
}

/// `z_4 = f_up_4`; `z_s = ReLU(Conv1x1(concat(z_{s+1}, f_up_s)))` for s = 3, 2, 1.
pub struct StepwiseAggregation {
    /// Fusion convs for s = 3, 2, 1, in that order.
    pub fuse: Vec<Conv2d>,
}

impl StepwiseAggregation {
    pub fn new(ps: &mut ParamStore, name: &str, widths: [usize; 4]) -> Result<Self> {
        let mut fuse = Vec::with_capacity(3);
        for s in (0..3).rev() {
            let cin = widths[s + 1] + widths[s];
            fuse.push(Conv2d::new(ps, &format!("{name}.fuse{}", s + 1), cin, widths[s], 1, 1, 0)?);
        }
        Ok(Self { fuse })
    }

    pub fn forward(&self, f_up: &[Tensor; 4]) -> Result<Tensor> {
        let dims = f_up[0].dims4()?;
        for f in f_up.iter().skip(1) {
            let d = f.dims4()?;
            if (d.0, d.2, d.3) != (dims.0, dims.2, dims.3) {
                return Err(NetError::Shape(format!("aggregation inputs differ in size: {:?} vs {:?}", f.dims(), f_up[0].dims())));
            }
        }
        let mut z = f_up[3].clone();
        for (conv, s) in self.fuse.iter().zip([2usize, 1, 0]) {
            z = conv.forward(&Tensor::cat(&[&z, &f_up[s]], 1)?)?.relu()?;
        }
        Ok(z)
    }
}

/// Blurred image → condition map `z1` at quarter resolution.
pub struct ConditionEncoder {
    cfg: EncoderConfig,
    pub pyramid: PyramidEncoder,
    /// One module per stage; `None` for stages the aggregation ignores.
    pub emphasis: [Option<LocalEmphasis>; 4],
    pub aggregate: Option<StepwiseAggregation>,
}

impl ConditionEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let pyramid = PyramidEncoder::new(ps, &format!("{name}.pvt"), cfg)?;
        let widths = cfg.le_widths();
        let used = |s: usize| match cfg.aggregation {
            Aggregation::Stepwise => true,
            Aggregation::SingleScale { stage } => stage == s + 1,
        };
        let mut emphasis: [Option<LocalEmphasis>; 4] = Default::default();
        for s in 0..4 {
            if used(s) {
                emphasis[s] = Some(LocalEmphasis::new(ps, &format!("{name}.le{}", s + 1), cfg.stage_channels[s], widths[s])?);
            }
        }
        let aggregate = match cfg.aggregation {
            Aggregation::Stepwise => Some(StepwiseAggregation::new(ps, &format!("{name}.sfa"), widths)?),
            Aggregation::SingleScale { .. } => None,
        };
        Ok(Self { cfg: cfg.clone(), pyramid, emphasis, aggregate })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn forward(&self, blurred: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        Ok(self.features(blurred, ctx)?.1)
    }

    /// Pyramid levels and the condition map.
    pub fn features(&self, blurred: &Tensor, _ctx: &Ctx) -> Result<(FeaturePyramid, Tensor)> {
        let (_, c, h, w) = blurred.dims4()?;
        let pyr = self.pyramid.extract_multiscale(&normalize_input(blurred, c)?)?;
        let up = |s: usize| -> Result<Tensor> {
            self.emphasis[s].as_ref().expect("module exists for used stage").forward(&pyr.levels[s], h / 4, w / 4)
        };
        let z1 = match (&self.aggregate, self.cfg.aggregation) {
            (Some(sfa), _) => sfa.forward(&[up(0)?, up(1)?, up(2)?, up(3)?])?,
            (None, Aggregation::SingleScale { stage }) => up(stage - 1)?,
            (None, Aggregation::Stepwise) => unreachable!("stepwise always builds an aggregator"),
        };
        Ok((pyr, z1))
    }
}

/// Per-channel standardization with the usual RGB statistics.
fn normalize_input(x: &Tensor, channels: usize) -> Result<Tensor> {
    if channels != 3 {
        return Ok(x.clone());
    }
    let mean = Tensor::new(&RGB_MEAN, x.device())?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
    let inv = Tensor::new(&RGB_STD.map(|v| 1.0 / v), x.device())?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
    Ok(x.broadcast_sub(&mean)?.broadcast_mul(&inv)?)
}

const RGB_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const RGB_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Mean over channels, `(B, C, H, W)` → `(B, H, W)`; used for feature plots.
pub fn channel_mean(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn image(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let v: Vec<f64> = (0..b * 3 * h * w).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0).collect();
        Tensor::from_vec(v, (b, 3, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn pyramid_shapes_follow_strides() {
        let mut ps = ParamStore::new(0, DType::F32);
        let enc = PyramidEncoder::new(&mut ps, "e", &EncoderConfig::default()).unwrap();
        let x = image(1, 64, 96, 1).to_dtype(DType::F32).unwrap();
        let pyr = enc.extract_multiscale(&x).unwrap();
        let want = [(32, 16, 24), (64, 8, 12), (128, 4, 6), (256, 2, 3)];
        for (f, (c, h, w)) in pyr.levels.iter().zip(want) {
            assert_eq!(f.dims(), &[1, c, h, w]);
        }
        let tiny = enc.extract_multiscale(&image(1, 32, 32, 2).to_dtype(DType::F32).unwrap()).unwrap();
        assert_eq!(tiny.levels[3].dims(), &[1, 256, 1, 1]);
        assert!(matches!(enc.extract_multiscale(&image(1, 48, 64, 0).to_dtype(DType::F32).unwrap()), Err(NetError::Shape(_))));
    }

    #[test]
    fn local_emphasis_sizes_and_zero_input() {
        let mut ps = ParamStore::new(0, DType::F64);
        let mut le = LocalEmphasis::new(&mut ps, "le", 4, 4).unwrap();
        let f1 = Tensor::ones((1, 4, 16, 16), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(le.forward(&f1, 16, 16).unwrap().dims(), &[1, 4, 16, 16]);
        let f4 = Tensor::ones((1, 4, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(le.forward(&f4, 16, 16).unwrap().dims(), &[1, 4, 16, 16]);
        le.conv1.bias = Some(Tensor::zeros(4, DType::F64, &Device::Cpu).unwrap());
        le.conv2.bias = Some(Tensor::zeros(4, DType::F64, &Device::Cpu).unwrap());
        let out = le.forward(&Tensor::zeros((1, 4, 2, 2), DType::F64, &Device::Cpu).unwrap(), 16, 16).unwrap();
        assert_eq!(out.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn local_emphasis_is_translation_equivariant_inside() {
        let mut ps = ParamStore::new(4, DType::F64);
        let le = LocalEmphasis::new(&mut ps, "le", 2, 3).unwrap();
        let v: Vec<f64> = (0..2 * 12 * 12).map(|i| (i as f64 * 0.77).sin()).collect();
        let f = Tensor::from_vec(v, (1, 2, 12, 12), &Device::Cpu).unwrap();
        let shifted = f.narrow(3, 1, 11).unwrap().pad_with_zeros(3, 0, 1).unwrap();
        let a = le.emphasize(&f).unwrap();
        let b = le.emphasize(&shifted).unwrap();
        // response at column x+1 of f equals response at column x of the shift
        let a_in = a.narrow(2, 2, 8).unwrap().narrow(3, 3, 6).unwrap();
        let b_in = b.narrow(2, 2, 8).unwrap().narrow(3, 2, 6).unwrap();
        let diff = (a_in - b_in).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
    }

    fn constant_map(v: f64) -> Tensor {
        Tensor::full(v, (1, 1, 4, 4), &Device::Cpu).unwrap()
    }

    #[test]
    fn aggregation_consumes_deep_to_shallow() {
        // z_s = 10 * z_{s+1} + f_s, so the digits of z1 spell the order
        let dev = Device::Cpu;
        let conv = || Conv2d {
            weight: Tensor::from_vec(vec![10.0, 1.0], (1, 2), &dev).unwrap(),
            bias: Some(Tensor::zeros(1, DType::F64, &dev).unwrap()),
            kernel: 1,
            stride: 1,
            pad: 0,
        };
        let sfa = StepwiseAggregation { fuse: vec![conv(), conv(), conv()] };
        let z = sfa.forward(&[constant_map(1.0), constant_map(2.0), constant_map(3.0), constant_map(4.0)]).unwrap();
        let v = z.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|&x| x == 4321.0));
    }

    #[test]
    fn aggregation_channel_bookkeeping_and_zero_weights() {
        let mut ps = ParamStore::new(0, DType::F64);
        let mut sfa = StepwiseAggregation::new(&mut ps, "sfa", [8, 8, 8, 8]).unwrap();
        for c in &sfa.fuse {
            assert_eq!(c.weight.dims(), &[8, 16]);
        }
        let f: [Tensor; 4] = std::array::from_fn(|i| Tensor::full(i as f64 + 1.0, (2, 8, 4, 4), &Device::Cpu).unwrap());
        assert_eq!(sfa.forward(&f).unwrap().dims(), &[2, 8, 4, 4]);
        for c in sfa.fuse.iter_mut() {
            c.weight = c.weight.zeros_like().unwrap();
            c.bias = Some(c.bias.as_ref().unwrap().zeros_like().unwrap());
        }
        assert_eq!(sfa.forward(&f).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let bad = [f[0].clone(), f[1].clone(), f[2].clone(), Tensor::zeros((2, 8, 2, 2), DType::F64, &Device::Cpu).unwrap()];
        assert!(matches!(sfa.forward(&bad), Err(NetError::Shape(_))));
    }

    #[test]
    fn aggregation_gradient_matches_finite_differences() {
        let mut ps = ParamStore::new(7, DType::F64);
        let sfa = StepwiseAggregation::new(&mut ps, "sfa", [3, 3, 3, 3]).unwrap();
        let base: [Vec<f64>; 4] = std::array::from_fn(|s| (0..3 * 16).map(|i| ((i + 13 * s) as f64 * 0.61).sin() + 0.5).collect());
        let probe = Tensor::from_vec((0..48).map(|i| (i as f64 * 0.29).cos()).collect::<Vec<_>>(), (1, 3, 4, 4), &Device::Cpu).unwrap();
        let make = |v: &Vec<f64>| Tensor::from_vec(v.clone(), (1, 3, 4, 4), &Device::Cpu).unwrap();
        let f4 = Var::from_tensor(&make(&base[3])).unwrap();
        let loss = |f4: &Tensor| {
            sfa.forward(&[make(&base[0]), make(&base[1]), make(&base[2]), f4.clone()]).unwrap().mul(&probe).unwrap().sum_all().unwrap()
        };
        let g = loss(f4.as_tensor()).backward().unwrap();
        let grad: Vec<f64> = g.get(f4.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for idx in [0, 5, 17, 40] {
            let h = 1e-6;
            let mut p = base[3].clone();
            p[idx] += h;
            let mut m = base[3].clone();
            m[idx] -= h;
            let fd = (loss(&make(&p)).to_scalar::<f64>().unwrap() - loss(&make(&m)).to_scalar::<f64>().unwrap()) / (2.0 * h);
            assert!((fd - grad[idx]).abs() <= 1e-4 * fd.abs().max(1e-8), "{idx}: {fd} vs {}", grad[idx]);
        }
    }

    #[test]
    fn condition_map_is_quarter_resolution_and_deterministic() {
        for aggregation in [Aggregation::Stepwise, Aggregation::SingleScale { stage: 2 }, Aggregation::SingleScale { stage: 4 }] {
            let cfg = EncoderConfig { aggregation, ..Default::default() };
            let mut ps = ParamStore::new(1, DType::F32);
            let enc = ConditionEncoder::new(&mut ps, "cond", &cfg).unwrap();
            let x = image(2, 64, 64, 5).to_dtype(DType::F32).unwrap();
            let a = enc.forward(&x, &Ctx::eval()).unwrap();
            assert_eq!(a.dims(), &[2, cfg.condition_channels(), 16, 16]);
            let b = enc.forward(&x, &Ctx::eval()).unwrap();
            assert_eq!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(6))]
        #[test]
        fn shape_contract_holds_for_multiples_of_32(hm in 1usize..4, wm in 1usize..4) {
            let mut ps = ParamStore::new(0, DType::F32);
            let cfg = EncoderConfig { stage_channels: [8, 16, 16, 32], heads: [1, 1, 2, 2], ..Default::default() };
            let enc = ConditionEncoder::new(&mut ps, "c", &cfg).unwrap();
            let (h, w) = (32 * hm, 32 * wm);
            let z = enc.forward(&image(1, h, w, 0).to_dtype(DType::F32).unwrap(), &Ctx::eval()).unwrap();
            proptest::prop_assert_eq!(z.dims(), &[1, cfg.condition_channels(), h / 4, w / 4]);
        }
    }
}
