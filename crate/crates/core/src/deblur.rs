//! Non-blind deconvolution.
//!
//! Both solvers share the forward model of [`crate::blursim`]: per-channel
//! correlation with a unit-mass kernel. Internally they work with circular
//! boundaries; quality is measured on a central crop that drops a K-pixel
//! frame (see [`crate::metrics::central_crop`]).

use ndarray::{s, Array2, Array3, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::blursim::mirror;
use crate::error::{Error, Result};
use crate::fft::{fft2, ifft2, kernel_to_origin, to_complex};
use crate::trajkit::Psf;

/// `|K|^2` below this counts as a spectral zero when `reg = 0`.
const SPECTRAL_ZERO: f64 = 1e-12;

/// Transfer function of correlation with `psf` on an `h×w` torus. The
/// correlation spectrum is `conj(F) * X`, where `F` is returned here.
fn kernel_spectrum(psf: &Psf, h: usize, w: usize) -> Array2<Complex64> {
    let mut f = to_complex(&kernel_to_origin(psf.grid(), h, w));
    fft2(&mut f);
    f
}

/// Regularized frequency-domain inverse: `X = conj(K) B / (|K|^2 + reg)`
/// with `K` the transfer function of the blur. Output clipped to `[0, 1]`.
pub fn inverse_filter(blurred: &Array3<f64>, psf: &Psf, reg: f64) -> Result<Array3<f64>> {
    if !(reg >= 0.0 && reg.is_finite()) {
        return Err(Error::Param(format!("reg must be non-negative, got {reg}")));
    }
    let (h, w, ch) = blurred.dim();
    if psf.size() > h.min(w) {
        return Err(Error::KernelSize { kernel: psf.size(), height: h, width: w });
    }
    let f = kernel_spectrum(psf, h, w);
    if reg == 0.0 && f.iter().any(|v| v.norm_sqr() < SPECTRAL_ZERO) {
        return Err(Error::Numeric(
            "kernel spectrum has a zero; inverse filtering needs a positive reg".into(),
        ));
    }
    let mut out = Array3::zeros((h, w, ch));
    for c in 0..ch {
        let mut spec = to_complex(&blurred.index_axis(Axis(2), c).to_owned());
        fft2(&mut spec);
        ndarray::Zip::from(&mut spec).and(&f).for_each(|b, k| {
            *b = *b * *k / (k.norm_sqr() + reg);
        });
        ifft2(&mut spec);
        out.index_axis_mut(Axis(2), c).assign(&spec.mapv(|v| v.re.clamp(0.0, 1.0)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeconvParams {
    /// Prior weight.
    pub mu: f64,
    /// Hyper-Laplacian exponent.
    pub alpha: f64,
    /// Smoothing of `|t|^alpha` near zero: `(t^2 + eps^2)^(alpha/2)`.
    pub epsilon: f64,
    pub outer_iters: usize,
    pub cg_iters: usize,
    /// Mirror padding added before solving; `None` pads by the kernel size.
    pub pad: Option<usize>,
}

impl Default for DeconvParams {
    fn default() -> Self {
        Self {
            mu: 2e-3,
            alpha: 0.8,
            epsilon: 1e-2,
            outer_iters: 20,
            cg_iters: 15,
            pad: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeconvOutput {
    pub image: Array3<f64>,
    /// Objective after initialization and after each outer iteration.
    pub objective: Vec<f64>,
}

/// Circular forward differences and their adjoints.
fn grad_h(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((h, w), |(i, j)| x[[i, (j + 1) % w]] - x[[i, j]])
}

fn grad_v(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((h, w), |(i, j)| x[[(i + 1) % h, j]] - x[[i, j]])
}

fn grad_h_adj(g: &Array2<f64>) -> Array2<f64> {
    let (h, w) = g.dim();
    Array2::from_shape_fn((h, w), |(i, j)| g[[i, (j + w - 1) % w]] - g[[i, j]])
}

fn grad_v_adj(g: &Array2<f64>) -> Array2<f64> {
    let (h, w) = g.dim();
    Array2::from_shape_fn((h, w), |(i, j)| g[[(i + h - 1) % h, j]] - g[[i, j]])
}

/// Multiplies a real field by a real spectral filter.
fn apply_spectral(x: &Array2<f64>, filter: &Array2<f64>) -> Array2<f64> {
    let mut spec = to_complex(x);
    fft2(&mut spec);
    ndarray::Zip::from(&mut spec).and(filter).for_each(|v, f| *v *= *f);
    ifft2(&mut spec);
    spec.mapv(|v| v.re)
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

struct ChannelProblem<'a> {
    spectrum: &'a Array2<Complex64>,
    ktk: &'a Array2<f64>,
    params: DeconvParams,
}

impl ChannelProblem<'_> {
    fn penalty(&self, t: f64) -> f64 {
        (t * t + self.params.epsilon * self.params.epsilon).powf(self.params.alpha / 2.0)
    }

    fn blur(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut spec = to_complex(x);
        fft2(&mut spec);
        ndarray::Zip::from(&mut spec).and(self.spectrum).for_each(|v, f| *v *= f.conj());
        ifft2(&mut spec);
        spec.mapv(|v| v.re)
    }

    fn objective(&self, x: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let r = self.blur(x) - b;
        let data = 0.5 * dot(&r, &r);
        let prior: f64 = grad_h(x).iter().chain(grad_v(x).iter()).map(|&t| self.penalty(t)).sum();
        data + self.params.mu * prior
    }

    /// MM weights: the penalty is concave in `t^2`, so its tangent at the
    /// current gradients majorizes it.
    fn weights(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let (a, e2) = (self.params.alpha, self.params.epsilon * self.params.epsilon);
        let w = |t: f64| 0.5 * a * (t * t + e2).powf(a / 2.0 - 1.0);
        (grad_h(x).mapv(w), grad_v(x).mapv(w))
    }

    /// Preconditioned CG on `(K^T K + 2 mu D^T W D) x = K^T b`, warm-started.
    fn solve(&self, x0: &Array2<f64>, ktb: &Array2<f64>, wh: &Array2<f64>, wv: &Array2<f64>, precond: &Array2<f64>) -> Array2<f64> {
        let mu2 = 2.0 * self.params.mu;
        let apply = |x: &Array2<f64>| -> Array2<f64> {
            let data = apply_spectral(x, self.ktk);
            let gh = grad_h(x) * wh;
            let gv = grad_v(x) * wv;
            data + (grad_h_adj(&gh) + grad_v_adj(&gv)) * mu2
        };
        let mut x = x0.clone();
        let mut r = ktb - &apply(&x);
        let mut z = apply_spectral(&r, precond);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        for _ in 0..self.params.cg_iters {
            if rz.abs() < 1e-30 {
                break;
            }
            let ap = apply(&p);
            let pap = dot(&p, &ap);
            if pap <= 0.0 {
                break;
            }
            let step = rz / pap;
            x.scaled_add(step, &p);
            r.scaled_add(-step, &ap);
            z = apply_spectral(&r, precond);
            let rz_next = dot(&r, &z);
            p = &z + &(p * (rz_next / rz));
            rz = rz_next;
        }
        x
    }
}

/// Mirror-pads every channel by `pad` pixels.
fn pad_symmetric(img: &Array3<f64>, pad: usize) -> Array3<f64> {
    let (h, w, ch) = img.dim();
    Array3::from_shape_fn((h + 2 * pad, w + 2 * pad, ch), |(y, x, c)| {
        img[[mirror(y as isize - pad as isize, h), mirror(x as isize - pad as isize, w), c]]
    })
}

/// Hyper-Laplacian regularized deconvolution by multiplicative half-quadratic
/// iterations.
///
/// Minimizes `0.5 |k * x - b|^2 + mu * sum (|grad x|^2 + eps^2)^(alpha/2)`
/// over a mirror-padded domain. Each outer iteration fixes the half-quadratic
/// weights at the current estimate and decreases the resulting quadratic with
/// warm-started PCG, so the objective never increases.
pub fn nonblind_deconv(blurred: &Array3<f64>, psf: &Psf, params: &DeconvParams) -> Result<DeconvOutput> {
    if !(params.mu >= 0.0) || !(params.alpha > 0.0 && params.alpha <= 2.0) || !(params.epsilon > 0.0) {
        return Err(Error::Param("need mu >= 0, 0 < alpha <= 2 and epsilon > 0".into()));
    }
    let (h, w, ch) = blurred.dim();
    let k = psf.size();
    if k > h.min(w) {
        return Err(Error::KernelSize { kernel: k, height: h, width: w });
    }
    let pad = params.pad.unwrap_or(k).min(h.min(w));
    let padded = pad_symmetric(blurred, pad);
    let (ph, pw, _) = padded.dim();
    let spectrum = kernel_spectrum(psf, ph, pw);
    let ktk = spectrum.mapv(|v| v.norm_sqr());

    // Fourier-diagonal preconditioner from the mean weight at eps.
    let (a, e) = (params.alpha, params.epsilon);
    let w_ref = 0.5 * a * e.powf(a - 2.0);
    let lap = Array2::from_shape_fn((ph, pw), |(i, j)| {
        let u = 2.0 * std::f64::consts::PI * i as f64 / ph as f64;
        let v = 2.0 * std::f64::consts::PI * j as f64 / pw as f64;
        (2.0 - 2.0 * u.cos()) + (2.0 - 2.0 * v.cos())
    });
    let precond = Array2::from_shape_fn((ph, pw), |ix| 1.0 / (ktk[ix] + 2.0 * params.mu * w_ref.min(1e4) * lap[ix] + 1e-8));

    let problem = ChannelProblem { spectrum: &spectrum, ktk: &ktk, params: *params };
    let mut xs: Vec<Array2<f64>> = Vec::with_capacity(ch);
    let mut bs: Vec<Array2<f64>> = Vec::with_capacity(ch);
    let mut ktbs = Vec::with_capacity(ch);
    for c in 0..ch {
        let b = padded.index_axis(Axis(2), c).to_owned();
        let mut spec = to_complex(&b);
        fft2(&mut spec);
        ndarray::Zip::from(&mut spec).and(&spectrum).for_each(|v, f| *v *= *f);
        ifft2(&mut spec);
        ktbs.push(spec.mapv(|v| v.re));
        xs.push(b.clone());
        bs.push(b);
    }
    let total = |xs: &[Array2<f64>]| -> f64 { xs.iter().zip(&bs).map(|(x, b)| problem.objective(x, b)).sum() };
    let mut objective = vec![total(&xs)];
    for it in 0..params.outer_iters {
        for c in 0..ch {
            let (wh, wv) = problem.weights(&xs[c]);
            xs[c] = problem.solve(&xs[c], &ktbs[c], &wh, &wv, &precond);
        }
        let f = total(&xs);
        if !f.is_finite() || f > 10.0 * objective[0] {
            return Err(Error::Numeric(format!(
                "deconvolution diverged at outer iteration {it}: objective {f:.6e} vs initial {:.6e}",
                objective[0]
            )));
        }
        objective.push(f);
    }
    let mut image = Array3::zeros((h, w, ch));
    for (c, x) in xs.iter().enumerate() {
        image
            .index_axis_mut(Axis(2), c)
            .assign(&x.slice(s![pad..pad + h, pad..pad + w]).mapv(|v| v.clamp(0.0, 1.0)));
    }
    Ok(DeconvOutput { image, objective })
}
