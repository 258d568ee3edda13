//! Pixel-weighted BCE and IoU losses on `(B, 1, H, W)` probability maps.
//! Each loss is computed per sample and averaged over the batch.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};

pub const PROB_CLAMP: f64 = 1e-7;

/// `w = lambda * x0 + 1`.
pub fn weight_map(x0: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(NetError::Param(format!("lambda must be a non-negative number, got {lambda}")));
    }
    Ok(((x0 * lambda)? + 1.0)?)
}

fn check(pred: &Tensor, x0: &Tensor, w: &Tensor) -> Result<()> {
    if pred.dims() != x0.dims() || pred.dims() != w.dims() || pred.rank() != 4 {
        return Err(NetError::Shape(format!("pred {:?}, target {:?}, weights {:?}", pred.dims(), x0.dims(), w.dims())));
    }
    Ok(())
}

fn per_sample_sum(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0)?;
    Ok(x.reshape((b, ()))?.sum(1)?)
}

/// `-sum w (x0 log p + (1 - x0) log(1 - p)) / sum w`, `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn wbce(pred: &Tensor, x0: &Tensor, w: &Tensor) -> Result<Tensor> {
    check(pred, x0, w)?;
    let p = pred.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let ll = ((x0 * p.log()?)? + ((1.0 - x0)? * (1.0 - &p)?.log()?)?)?;
    let num = per_sample_sum(&(ll * w)?)?;
    let den = per_sample_sum(w)?;
    Ok(num.div(&den)?.neg()?.mean(0)?)
}

/// `1 - (sum w p x0 + eps) / (sum w (p + x0 - p x0) + eps)`.
pub fn wiou(pred: &Tensor, x0: &Tensor, w: &Tensor, eps: f64) -> Result<Tensor> {
    check(pred, x0, w)?;
    let inter = (pred * x0)?;
    let union = ((pred + x0)? - &inter)?;
    let num = (per_sample_sum(&(inter * w)?)? + eps)?;
    let den = (per_sample_sum(&(union * w)?)? + eps)?;
    Ok((1.0 - num.div(&den)?)?.mean(0)?)
}

/// Unweighted mean squared error, the loss of the ablation without the
/// weighted BCE + IoU objective.
pub fn mse(pred: &Tensor, x0: &Tensor) -> Result<Tensor> {
    if pred.dims() != x0.dims() {
        return Err(NetError::Shape(format!("pred {:?}, target {:?}", pred.dims(), x0.dims())));
    }
    Ok((pred - x0)?.sqr()?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Weighted BCE + weighted IoU.
    #[default]
    Weighted,
    Mse,
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub wbce: f64,
    pub wiou: f64,
}

pub fn objective(kind: LossKind, pred: &Tensor, x0: &Tensor, lambda: f64, iou_eps: f64) -> Result<LossTerms> {
    let w = weight_map(x0, lambda)?;
    let b = wbce(pred, x0, &w)?;
    let i = wiou(pred, x0, &w, iou_eps)?;
    let (bv, iv) = (scalar(&b)?, scalar(&i)?);
    let total = match kind {
        LossKind::Weighted => (b + i)?,
        LossKind::Mse => mse(pred, x0)?,
    };
    Ok(LossTerms { total, wbce: bv, wiou: iv })
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Soft IoU `sum(p x) / sum(p + x - p x)` averaged over maps; 1 when both are empty.
pub fn soft_iou(pred: &[f64], target: &[f64]) -> f64 {
    let inter: f64 = pred.iter().zip(target).map(|(p, x)| p * x).sum();
    let union: f64 = pred.iter().zip(target).map(|(p, x)| p + x - p * x).sum();
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec(), (1, 1, 8, 8), &Device::Cpu).unwrap()
    }

    fn random_case(seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = (0..64).map(|_| rng.gen_range(0.01..0.99)).collect();
        let x = (0..64).map(|_| if rng.gen::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect();
        (p, x)
    }

    fn ref_wbce(p: &[f64], x: &[f64], lambda: f64) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..p.len() {
            let w = lambda * x[i] + 1.0;
            let q = p[i].clamp(1e-7, 1.0 - 1e-7);
            num += w * (x[i] * q.ln() + (1.0 - x[i]) * (1.0 - q).ln());
            den += w;
        }
        -num / den
    }

    fn ref_wiou(p: &[f64], x: &[f64], lambda: f64, eps: f64) -> f64 {
        let (mut inter, mut union) = (0.0, 0.0);
        for i in 0..p.len() {
            let w = lambda * x[i] + 1.0;
            inter += w * p[i] * x[i];
            union += w * (p[i] + x[i] - p[i] * x[i]);
        }
        1.0 - (inter + eps) / (union + eps)
    }

    #[test]
    fn weight_map_arithmetic() {
        let x = t(&[[1.0, 0.0]; 32].concat());
        let w: Vec<f64> = weight_map(&x, 10.0).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(w[0], 11.0);
        assert_eq!(w[1], 1.0);
        let w0: Vec<f64> = weight_map(&x, 0.0).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(w0.iter().all(|&v| v == 1.0));
        assert!(weight_map(&x, -1.0).is_err());
    }

    #[test]
    fn losses_match_scalar_loops() {
        for seed in 0..10 {
            let (p, x) = random_case(seed);
            let w = weight_map(&t(&x), 5.0).unwrap();
            let b = scalar(&wbce(&t(&p), &t(&x), &w).unwrap()).unwrap();
            let i = scalar(&wiou(&t(&p), &t(&x), &w, 1.0).unwrap()).unwrap();
            assert!((b - ref_wbce(&p, &x, 5.0)).abs() < 1e-10);
            assert!((i - ref_wiou(&p, &x, 5.0, 1.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn loss_examples() {
        let (_, x) = random_case(3);
        let w = weight_map(&t(&x), 5.0).unwrap();
        assert!(scalar(&wbce(&t(&x), &t(&x), &w).unwrap()).unwrap() <= 1e-6);
        assert!(scalar(&wiou(&t(&x), &t(&x), &w, 1.0).unwrap()).unwrap().abs() < 1e-15);
        let half = vec![0.5; 64];
        let b = scalar(&wbce(&t(&half), &t(&x), &w).unwrap()).unwrap();
        assert!((b - 2f64.ln()).abs() < 1e-12);
        let zero = vec![0.0; 64];
        let n = x.iter().sum::<f64>() * 6.0;
        let i = scalar(&wiou(&t(&zero), &t(&x), &w, 1.0).unwrap()).unwrap();
        assert!((i - (1.0 - 1.0 / (n + 1.0))).abs() < 1e-12 && i > 0.9);
    }

    #[test]
    fn lambda_zero_is_unweighted() {
        let (p, x) = random_case(4);
        let ones = Tensor::ones((1, 1, 8, 8), candle_core::DType::F64, &Device::Cpu).unwrap();
        let w0 = weight_map(&t(&x), 0.0).unwrap();
        assert_eq!(scalar(&wbce(&t(&p), &t(&x), &w0).unwrap()).unwrap(), scalar(&wbce(&t(&p), &t(&x), &ones).unwrap()).unwrap());
        assert_eq!(scalar(&wiou(&t(&p), &t(&x), &w0, 1.0).unwrap()).unwrap(), scalar(&wiou(&t(&p), &t(&x), &ones, 1.0).unwrap()).unwrap());
    }

    fn fd_check(f: impl Fn(&Tensor, &Tensor) -> Tensor, p: &[f64], w: &[f64]) {
        let pv = Var::from_tensor(&t(p)).unwrap();
        let wv = Var::from_tensor(&t(w)).unwrap();
        let grads = f(pv.as_tensor(), wv.as_tensor()).backward().unwrap();
        let gp: Vec<f64> = grads.get(pv.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let gw: Vec<f64> = grads.get(wv.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let h = 1e-6;
        for idx in [0, 9, 31, 50, 63] {
            for (which, analytic) in [(0, gp[idx]), (1, gw[idx])] {
                let bump = |d: f64| {
                    let (mut a, mut b) = (p.to_vec(), w.to_vec());
                    if which == 0 { a[idx] += d } else { b[idx] += d }
                    scalar(&f(&t(&a), &t(&b))).unwrap()
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                assert!((fd - analytic).abs() <= 1e-4 * fd.abs().max(1e-6), "idx {idx} arg {which}: {fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (p, x) = random_case(5);
        let w: Vec<f64> = x.iter().map(|v| 5.0 * v + 1.0).collect();
        fd_check(|p, w| wiou(p, &t(&x), w, 1.0).unwrap(), &p, &w);
        fd_check(|p, w| wbce(p, &t(&x), w).unwrap(), &p, &w);
        fd_check(|p, w| (wbce(p, &t(&x), w).unwrap() + wiou(p, &t(&x), w, 1.0).unwrap()).unwrap(), &p, &w);
    }

    #[test]
    fn losses_are_bounded_below() {
        for seed in 0..20 {
            let (p, x) = random_case(100 + seed);
            let w = weight_map(&t(&x), 5.0).unwrap();
            let b = scalar(&wbce(&t(&p), &t(&x), &w).unwrap()).unwrap();
            let i = scalar(&wiou(&t(&p), &t(&x), &w, 1.0).unwrap()).unwrap();
            assert!(b >= 0.0 && (0.0..1.0).contains(&i));
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::zeros((1, 1, 8, 8), candle_core::DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 1, 4, 8), candle_core::DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(wbce(&a, &b, &a), Err(NetError::Shape(_))));
        assert!(matches!(wiou(&a, &a, &b, 1.0), Err(NetError::Shape(_))));
    }
}
