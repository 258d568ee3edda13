//! Tensor primitives missing from candle or too slow there on CPU.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, D};

use crate::error::{NetError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    /// Append a constant-one column (folds the bias into the matmul).
    ones: bool,
}

impl Geometry {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ones: bool) -> Result<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return Err(NetError::Shape(format!("{k}x{k} kernel does not fit {h}x{w} input with padding {pad}")));
        }
        Ok(Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
            ones,
        })
    }

    fn taps_len(&self) -> usize {
        self.c * self.k * self.k
    }

    fn row_len(&self) -> usize {
        self.taps_len() + usize::from(self.ones)
    }

    /// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad`
    /// lies inside the image.
    #[inline]
    fn valid_range(&self, kx: usize, out: usize, size: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(s) };
        let hi = if size + self.pad > kx { ((size + self.pad - kx - 1) / s + 1).min(out) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Calls `f(dst_row_offset, src_row_offset, lo, hi)` for every tap row
    /// `(c, ky, kx)`, batch element and output row, where output columns
    /// `lo..hi` read input column `ox * stride + kx - pad`.
    #[inline]
    fn rows(&self, batch: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let l = self.oh * self.ow;
        let plane = self.c * self.h * self.w;
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ci * self.k + ky) * self.k + kx;
                    let (lo, hi) = self.valid_range(kx, self.ow, self.w);
                    let (ylo, yhi) = self.valid_range(ky, self.oh, self.h);
                    for b in 0..batch {
                        for oy in ylo..yhi {
                            let iy = oy * self.stride + ky - self.pad;
                            let dst = (r * batch + b) * l + oy * self.ow;
                            let src = b * plane + (ci * self.h + iy) * self.w;
                            f(dst, src, lo, hi, kx);
                        }
                    }
                }
            }
        }
    }
}

/// Patch matrix `(C*K*K [+1], B*OH*OW)`: row `(c, ky, kx)`, column `(b, oy, ox)`.
fn im2col<T: Copy + Default>(g: &Geometry, src: &[T], batch: usize, one: T) -> Vec<T> {
    let cols = batch * g.oh * g.ow;
    let mut out = vec![T::default(); g.row_len() * cols];
    let (s, p) = (g.stride, g.pad);
    g.rows(batch, |dst, src_row, lo, hi, kx| {
        if lo >= hi {
            return;
        }
        let d = &mut out[dst + lo..dst + hi];
        if s == 1 {
            let start = src_row + lo + kx - p;
            d.copy_from_slice(&src[start..start + (hi - lo)]);
        } else {
            for (i, v) in d.iter_mut().enumerate() {
                *v = src[src_row + (lo + i) * s + kx - p];
            }
        }
    });
    if g.ones {
        out[g.taps_len() * cols..].fill(one);
    }
    out
}

fn col2im<T: Copy + Default + std::ops::AddAssign>(g: &Geometry, src: &[T], batch: usize) -> Vec<T> {
    let mut out = vec![T::default(); batch * g.c * g.h * g.w];
    let (s, p) = (g.stride, g.pad);
    g.rows(batch, |col_row, dst_row, lo, hi, kx| {
        for i in lo..hi {
            out[dst_row + i * s + kx - p] += src[col_row + i];
        }
    });
    out
}

/// `(B, C, H, W)` → `(C*K*K [+1], B*OH*OW)` patch matrix; differentiable.
struct Im2Col(Geometry);

/// Adjoint of [`Im2Col`].
struct Col2Im(Geometry);

fn contiguous_slice<'a, T: candle_core::WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let Some((start, end)) = l.contiguous_offsets() else {
        candle_core::bail!("im2col expects a contiguous input")
    };
    Ok(&s.as_slice::<T>()?[start..end])
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let b = l.dims()[0];
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(im2col(g, contiguous_slice::<f32>(s, l)?, b, 1.0)),
            CpuStorage::F64(_) => CpuStorage::F64(im2col(g, contiguous_slice::<f64>(s, l)?, b, 1.0)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, Shape::from((g.row_len(), b * g.oh * g.ow))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let b = l.dims()[1] / (g.oh * g.ow);
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(col2im(g, contiguous_slice::<f32>(s, l)?, b)),
            CpuStorage::F64(_) => CpuStorage::F64(col2im(g, contiguous_slice::<f64>(s, l)?, b)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from((b, g.c, g.h, g.w))))
    }
}

/// 2-D convolution (cross-correlation). `weight` is `(O, C*K*K)` with taps
/// ordered `(c, ky, kx)`, `bias` is `(O,)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, kk) = weight.dims2()?;
    if kk != c * k * k {
        return Err(NetError::Shape(format!("conv weight has {kk} taps, input needs {c}x{k}x{k}")));
    }
    let g = Geometry::new(c, h, w, k, stride, pad, bias.is_some())?;
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let weight = match bias {
        Some(bias) => Tensor::cat(&[weight, &bias.reshape((o, 1))?], 1)?,
        None => weight.clone(),
    };
    Ok(weight.matmul(&cols)?.reshape((o, b, g.oh * g.ow))?.transpose(0, 1)?.reshape((b, o, g.oh, g.ow))?)
}

/// `x @ weight^T + bias` over the last dimension, with the bias folded into
/// a single matmul.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (out, inp) = weight.dims2()?;
    if dims.last() != Some(&inp) {
        return Err(NetError::Shape(format!("linear expects last dim {inp}, got {dims:?}")));
    }
    let n = x.elem_count() / inp;
    let ones = Tensor::ones((n, 1), x.dtype(), x.device())?;
    let x1 = Tensor::cat(&[&x.reshape((n, inp))?, &ones], 1)?;
    let w1 = Tensor::cat(&[weight, &bias.reshape((out, 1))?], 1)?;
    let mut shape = dims;
    *shape.last_mut().expect("non-empty") = out;
    Ok(x1.matmul(&w1.t()?)?.reshape(shape)?)
}

#[derive(Debug, Clone, Copy)]
struct Depthwise {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl Depthwise {
    /// Calls `f(plane, channel, tap, dst_offset, src_offset, len)` for every
    /// run of output pixels `dst..dst+len` reading input `src..src+len`
    /// through tap `(ky, kx)`.
    #[inline]
    fn runs(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let (h, w) = (self.h, self.w);
        for p in 0..self.b * self.c {
            let ch = p % self.c;
            for ky in 0..3 {
                for kx in 0..3 {
                    let (x0, x1) = (usize::from(kx == 0), if kx == 2 { w - 1 } else { w });
                    let (y0, y1) = (usize::from(ky == 0), if ky == 2 { h - 1 } else { h });
                    if x1 <= x0 {
                        continue;
                    }
                    for y in y0..y1 {
                        let dst = p * h * w + y * w + x0;
                        let src = p * h * w + (y + ky - 1) * w + x0 + kx - 1;
                        f(p, ch, ky * 3 + kx, dst, src, x1 - x0);
                    }
                }
            }
        }
    }

    fn forward<T: candle_core::WithDType>(&self, x: &[T], wt: &[T], bias: &[T]) -> Vec<T> {
        let hw = self.h * self.w;
        let mut out = vec![T::zero(); self.b * self.c * hw];
        for (p, plane) in out.chunks_mut(hw).enumerate() {
            plane.fill(bias[p % self.c]);
        }
        self.runs(|_, ch, tap, dst, src, n| {
            let k = wt[ch * 9 + tap];
            for (o, i) in out[dst..dst + n].iter_mut().zip(&x[src..src + n]) {
                *o += k * *i;
            }
        });
        out
    }

    fn backward<T: candle_core::WithDType>(&self, x: &[T], wt: &[T], g: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let hw = self.h * self.w;
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); self.c * 9];
        let mut db = vec![T::zero(); self.c];
        for (p, plane) in g.chunks(hw).enumerate() {
            db[p % self.c] += plane.iter().fold(T::zero(), |a, &v| a + v);
        }
        self.runs(|_, ch, tap, dst, src, n| {
            let k = wt[ch * 9 + tap];
            let mut acc = T::zero();
            for ((d, i), gv) in dx[src..src + n].iter_mut().zip(&x[src..src + n]).zip(&g[dst..dst + n]) {
                *d += k * *gv;
                acc += *gv * *i;
            }
            dw[ch * 9 + tap] += acc;
        });
        (dx, dw, db)
    }

    fn bwd_typed<T: candle_core::WithDType>(&self, x: &Tensor, wt: &Tensor, grad: &Tensor) -> candle_core::Result<[Tensor; 3]> {
        let host = |t: &Tensor| t.contiguous()?.flatten_all()?.to_vec1::<T>();
        let (dx, dw, db) = self.backward(&host(x)?, &host(wt)?, &host(grad)?);
        let dev = x.device();
        Ok([
            Tensor::from_vec(dx, x.shape(), dev)?,
            Tensor::from_vec(dw, (self.c, 9), dev)?,
            Tensor::from_vec(db, self.c, dev)?,
        ])
    }
}

impl candle_core::CustomOp3 for Depthwise {
    fn name(&self) -> &'static str {
        "depthwise3x3"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(self.forward(
                contiguous_slice::<f32>(s1, l1)?,
                contiguous_slice(s2, l2)?,
                contiguous_slice(s3, l3)?,
            )),
            CpuStorage::F64(_) => CpuStorage::F64(self.forward(
                contiguous_slice::<f64>(s1, l1)?,
                contiguous_slice(s2, l2)?,
                contiguous_slice(s3, l3)?,
            )),
            _ => candle_core::bail!("depthwise3x3 supports f32 and f64 only"),
        };
        Ok((out, Shape::from((self.b, self.c, self.h, self.w))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        wt: &Tensor,
        _bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let [dx, dw, db] = match x.dtype() {
            DType::F32 => self.bwd_typed::<f32>(x, wt, grad)?,
            DType::F64 => self.bwd_typed::<f64>(x, wt, grad)?,
            dt => candle_core::bail!("depthwise3x3 does not support {dt:?}"),
        };
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

/// Depthwise 3×3 convolution with zero padding 1; `weight` is `(C, 9)`.
pub fn depthwise3x3(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if weight.dims() != [c, 9] || bias.dims() != [c] {
        return Err(NetError::Shape(format!("depthwise weights {:?}/{:?} for {c} channels", weight.dims(), bias.dims())));
    }
    let x = x.contiguous()?;
    let (weight, bias) = (weight.contiguous()?, bias.contiguous()?);
    Ok(x.apply_op3(&weight, &bias, Depthwise { b, c, h, w })?)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

struct Gelu;

/// `tanh` through one `exp`; saturates cleanly at both ends.
#[inline]
fn fast_tanh<T: num_traits::Float>(u: T) -> T {
    let two = T::one() + T::one();
    T::one() - two / ((two * u).exp() + T::one())
}

fn gelu_fwd<T: candle_core::WithDType + num_traits::Float>(x: &[T]) -> Vec<T> {
    let (c, a, half) = (T::from(GELU_C).unwrap(), T::from(GELU_A).unwrap(), T::from(0.5).unwrap());
    x.iter().map(|&v| half * v * (T::one() + fast_tanh(c * (v + a * v * v * v)))).collect()
}

fn gelu_bwd<T: candle_core::WithDType + num_traits::Float>(x: &[T], g: &[T]) -> Vec<T> {
    let (c, a, half) = (T::from(GELU_C).unwrap(), T::from(GELU_A).unwrap(), T::from(0.5).unwrap());
    let three = T::from(3.0).unwrap();
    x.iter()
        .zip(g)
        .map(|(&v, &gv)| {
            let t = fast_tanh(c * (v + a * v * v * v));
            let d = half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v);
            gv * d
        })
        .collect()
}

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu_tanh"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(gelu_fwd(contiguous_slice::<f32>(s, l)?)),
            CpuStorage::F64(_) => CpuStorage::F64(gelu_fwd(contiguous_slice::<f64>(s, l)?)),
            _ => candle_core::bail!("gelu supports f32 and f64 only"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad.contiguous()?;
        let dx = match arg.dtype() {
            DType::F32 => Tensor::from_vec(gelu_bwd(&arg.flatten_all()?.to_vec1::<f32>()?, &g.flatten_all()?.to_vec1()?), arg.shape(), arg.device())?,
            DType::F64 => Tensor::from_vec(gelu_bwd(&arg.flatten_all()?.to_vec1::<f64>()?, &g.flatten_all()?.to_vec1()?), arg.shape(), arg.device())?,
            dt => candle_core::bail!("gelu does not support {dt:?}"),
        };
        Ok(Some(dx))
    }
}

/// GELU, tanh approximation.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Gelu)?)
}

/// Depth-to-space by 2: `(B, 4C, H, W)` → `(B, C, 2H, 2W)`.
pub fn pixel_shuffle2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c % 4 != 0 {
        return Err(NetError::Shape(format!("pixel shuffle needs channels divisible by 4, got {c}")));
    }
    Ok(x.reshape((b, c / 4, 2, 2, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, c / 4, h * 2, w * 2))?)
}

/// Row-stochastic `(out, inp)` matrix for half-pixel bilinear resampling.
pub fn bilinear_matrix(inp: usize, out: usize) -> Vec<f64> {
    let mut m = vec![0.0; inp * out];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        let f = src - i0 as f64;
        m[o * inp + i0] += 1.0 - f;
        m[o * inp + i1] += f;
    }
    m
}

/// Bilinear resize of `(B, C, H, W)` to `(B, C, oh, ow)`.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let mh = Tensor::from_vec(bilinear_matrix(h, oh), (oh, h), dev)?.to_dtype(x.dtype())?;
    let mw = Tensor::from_vec(bilinear_matrix(w, ow), (ow, w), dev)?.to_dtype(x.dtype())?;
    let y = x.contiguous()?.broadcast_matmul(&mw.t()?)?;
    Ok(mh.broadcast_matmul(&y)?)
}

/// Normalizes over the last dimension.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? * 0.5)? + 0.5)?)
}

/// Builds a tensor of `dtype` from `f64` values.
pub fn tensor_from(values: Vec<f64>, shape: impl Into<Shape>, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn naive_conv(x: &[f64], c: usize, h: usize, w: usize, wt: &[f64], o: usize, k: usize, stride: usize, pad: usize) -> Vec<f64> {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; o * oh * ow];
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += x[(ci * h + iy as usize) * w + ix as usize] * wt[oc * c * k * k + (ci * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_nested_loops() {
        for &(c, h, w, o, k, stride, pad) in &[(2, 9, 7, 3, 3, 1, 1), (3, 16, 16, 4, 7, 4, 3), (1, 8, 8, 2, 3, 2, 1), (4, 5, 5, 2, 1, 1, 0)] {
            let xs: Vec<f64> = (0..c * h * w).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
            let ws: Vec<f64> = (0..o * c * k * k).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
            let got = conv2d(&t(xs.clone(), &[1, c, h, w]), &t(ws.clone(), &[o, c * k * k]), None, k, stride, pad).unwrap();
            let want = naive_conv(&xs, c, h, w, &ws, o, k, stride, pad);
            let got: Vec<f64> = got.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let (c, h, w, o, k) = (2, 6, 5, 3, 3);
        let xs: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let ws = t((0..o * c * k * k).map(|i| (i as f64 * 0.91).cos()).collect(), &[o, c * k * k]);
        let probe = t((0..o * 3 * 3).map(|i| (i as f64 * 0.5).sin()).collect(), &[1, o, 3, 3]);
        let f = |x: &Tensor| conv2d(x, &ws, None, k, 2, 1).unwrap().mul(&probe).unwrap().sum_all().unwrap();
        let x = Var::from_tensor(&t(xs.clone(), &[1, c, h, w])).unwrap();
        let grads = f(x.as_tensor()).backward().unwrap();
        let g: Vec<f64> = grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for i in [0, 7, 19, 33, 59] {
            let mut p = xs.clone();
            p[i] += 1e-6;
            let mut m = xs.clone();
            m[i] -= 1e-6;
            let fp = f(&t(p, &[1, c, h, w])).to_scalar::<f64>().unwrap();
            let fm = f(&t(m, &[1, c, h, w])).to_scalar::<f64>().unwrap();
            let fd = (fp - fm) / 2e-6;
            assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn pixel_shuffle_places_sub_pixels() {
        let x = t((0..8).map(f64::from).collect(), &[1, 4, 1, 2]);
        let y: Vec<Vec<f64>> = pixel_shuffle2(&x).unwrap().squeeze(0).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        // channel 2*dy + dx holds sub-pixel (dy, dx)
        assert_eq!(y, vec![vec![0.0, 2.0, 1.0, 3.0], vec![4.0, 6.0, 5.0, 7.0]]);
    }

    #[test]
    fn bilinear_keeps_constants_and_identity() {
        for (i, o) in [(2, 16), (8, 16), (16, 16), (5, 3)] {
            let m = bilinear_matrix(i, o);
            for r in 0..o {
                assert!((m[r * i..(r + 1) * i].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let x = t((0..32).map(f64::from).collect(), &[1, 2, 4, 4]);
        let y = resize_bilinear(&x, 4, 4).unwrap();
        assert_eq!(x.to_vec3::<f64>().ok(), y.to_vec3::<f64>().ok());
        let up = resize_bilinear(&t(vec![3.0; 4], &[1, 1, 2, 2]), 16, 16).unwrap();
        assert!(up.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn depthwise_matches_per_channel_conv() {
        let (c, h, w) = (3, 5, 6);
        let xs: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.3).sin()).collect();
        let ws: Vec<f64> = (0..c * 9).map(|i| (i as f64 * 0.7).cos()).collect();
        let got = depthwise3x3(&t(xs.clone(), &[1, c, h, w]), &t(ws.clone(), &[c, 9]), &t(vec![0.0; c], &[c])).unwrap();
        let got: Vec<f64> = got.flatten_all().unwrap().to_vec1().unwrap();
        for ci in 0..c {
            let want = naive_conv(&xs[ci * h * w..(ci + 1) * h * w], 1, h, w, &ws[ci * 9..(ci + 1) * 9], 1, 3, 1, 1);
            for (a, b) in got[ci * h * w..(ci + 1) * h * w].iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_and_sigmoid() {
        let x = t(vec![1.0, 2.0, 3.0, -1.0], &[2, 2]);
        let s: Vec<Vec<f64>> = softmax_last(&x).unwrap().to_vec2().unwrap();
        assert!((s[0][0] - 1.0 / (1.0 + 1f64.exp())).abs() < 1e-12);
        assert!((s[1][0] + s[1][1] - 1.0).abs() < 1e-12);
        let g: Vec<f64> = sigmoid(&t(vec![0.0, 2.0], &[2])).unwrap().to_vec1().unwrap();
        assert!((g[0] - 0.5).abs() < 1e-15);
        assert!((g[1] - 1.0 / (1.0 + (-2f64).exp())).abs() < 1e-12);
    }

    /// Central-difference check of `d sum(f(inputs) * probe) / d input` for
    /// every input at a few indices.
    fn check_grads(f: impl Fn(&[Tensor]) -> Tensor, inputs: &[(Vec<f64>, Vec<usize>)]) {
        let vars: Vec<Var> = inputs.iter().map(|(v, s)| Var::from_tensor(&t(v.clone(), s)).unwrap()).collect();
        let tensors: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
        let out = f(&tensors);
        let n = out.elem_count();
        let probe = t((0..n).map(|i| (i as f64 * 0.61).sin()).collect(), out.dims());
        let scalar = |ts: &[Tensor]| f(ts).mul(&probe).unwrap().sum_all().unwrap();
        let grads = scalar(&tensors).backward().unwrap();
        for (k, (vals, shape)) in inputs.iter().enumerate() {
            let g: Vec<f64> = grads.get(vars[k].as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            for i in (0..vals.len()).step_by(vals.len().div_ceil(7).max(1)) {
                let eval = |d: f64| {
                    let mut ts: Vec<Tensor> = inputs.iter().map(|(v, s)| t(v.clone(), s)).collect();
                    let mut p = vals.clone();
                    p[i] += d;
                    ts[k] = t(p, shape);
                    scalar(&ts).to_scalar::<f64>().unwrap()
                };
                let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
                assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "input {k} index {i}: {fd} vs {}", g[i]);
            }
        }
    }

    fn wave(n: usize, f: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * f).sin()).collect()
    }

    #[test]
    fn batched_conv_with_bias_matches_loops_and_differences() {
        let (b, c, h, w, o) = (2, 3, 7, 6, 4);
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 4, 0)] {
            let (xs, ws, bs) = (wave(b * c * h * w, 0.31), wave(o * c * k * k, 0.83), wave(o, 1.7));
            let got: Vec<f64> = conv2d(&t(xs.clone(), &[b, c, h, w]), &t(ws.clone(), &[o, c * k * k]), Some(&t(bs.clone(), &[o])), k, stride, pad)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1()
                .unwrap();
            let per = got.len() / (b * o);
            for bi in 0..b {
                let want = naive_conv(&xs[bi * c * h * w..(bi + 1) * c * h * w], c, h, w, &ws, o, k, stride, pad);
                for (j, wv) in want.iter().enumerate() {
                    let oc = j / per;
                    assert!((got[bi * o * per + j] - wv - bs[oc]).abs() < 1e-12);
                }
            }
            check_grads(
                |ts| conv2d(&ts[0], &ts[1], Some(&ts[2]), k, stride, pad).unwrap(),
                &[(xs, vec![b, c, h, w]), (ws, vec![o, c * k * k]), (bs, vec![o])],
            );
        }
    }

    #[test]
    fn depthwise_gradients_match_finite_differences() {
        let (b, c, h, w) = (2, 3, 5, 4);
        check_grads(
            |ts| depthwise3x3(&ts[0], &ts[1], &ts[2]).unwrap(),
            &[(wave(b * c * h * w, 0.29), vec![b, c, h, w]), (wave(c * 9, 0.77), vec![c, 9]), (wave(c, 1.3), vec![c])],
        );
    }

    #[test]
    fn gelu_matches_tanh_formula_and_gradient() {
        let xs: Vec<f64> = (0..41).map(|i| -4.0 + 0.2 * i as f64).collect();
        let got: Vec<f64> = gelu(&t(xs.clone(), &[41])).unwrap().to_vec1().unwrap();
        let want: Vec<f64> = t(xs.clone(), &[41]).gelu().unwrap().to_vec1().unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        check_grads(|ts| gelu(&ts[0]).unwrap(), &[(xs, vec![41])]);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        check_grads(
            |ts| linear(&ts[0], &ts[1], &ts[2]).unwrap(),
            &[(wave(2 * 3 * 5, 0.4), vec![2, 3, 5]), (wave(4 * 5, 0.9), vec![4, 5]), (wave(4, 1.1), vec![4])],
        );
    }
}
