//! Coded exposure: shutter codes, coded PSFs, MTF analysis and code search.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blursim::{render_blurred, SharpImage};
use crate::deblur::inverse_filter;
use crate::error::{Error, Result};
use crate::fft::{fft2, to_complex};
use crate::metrics::{central_crop, psnr, ssim};
use crate::seed::derive_seed;
use crate::trajkit::{resample_psf, splat_path, PathSource, Psf, PsfGeometry};

/// Binary shutter sequence over the exposure; `true` = open.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ShutterCode {
    bits: Vec<bool>,
}

impl ShutterCode {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if !bits.iter().any(|&b| b) {
            return Err(Error::Param("shutter code must have at least one open chunk".into()));
        }
        Ok(Self { bits })
    }

    pub fn all_open(len: usize) -> Self {
        Self { bits: vec![true; len.max(1)] }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn duty_cycle(&self) -> f64 {
        self.bits.iter().filter(|&&b| b).count() as f64 / self.bits.len() as f64
    }

    /// Whether the shutter is open at time fraction `tau`; the exposure is
    /// split into `len()` equal chunks.
    pub fn is_open_at(&self, tau: f64) -> bool {
        let l = self.bits.len();
        let idx = ((tau * l as f64).floor() as usize).min(l - 1);
        self.bits[idx]
    }
}

impl fmt::Display for ShutterCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for ShutterCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::Param(format!("invalid code character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits)
    }
}

impl Serialize for ShutterCode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ShutterCode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// PSF of the path with samples in closed chunks removed. With an all-open
/// code this is bit-identical to [`crate::trajkit::resample_psf`].
pub fn coded_psf(source: &impl PathSource, code: &ShutterCode, geom: PsfGeometry) -> Result<Psf> {
    splat_path(&source.sampling_path(), geom, |tau| code.is_open_at(tau))
        .map_err(|e| match e {
            Error::Numeric(_) => Error::Numeric("coded PSF has no mass: every sample fell in a closed chunk".into()),
            other => other,
        })
}

/// `|DFT|` of a PSF zero-padded to `size×size`, DC moved to `(size/2, size/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MtfGrid {
    magnitudes: Array2<f64>,
}

impl MtfGrid {
    pub fn magnitudes(&self) -> &Array2<f64> {
        &self.magnitudes
    }

    pub fn size(&self) -> usize {
        self.magnitudes.nrows()
    }

    pub fn dc(&self) -> f64 {
        let c = self.size() / 2;
        self.magnitudes[[c, c]]
    }

    pub fn min(&self) -> f64 {
        self.magnitudes.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.magnitudes.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Magnitude at signed frequency `(u, v)` (row, column), wrapped.
    pub fn at(&self, u: isize, v: isize) -> f64 {
        let n = self.size() as isize;
        let c = n / 2;
        self.magnitudes[[(u + c).rem_euclid(n) as usize, (v + c).rem_euclid(n) as usize]]
    }
}

pub const DEFAULT_ANALYSIS_SIZE: usize = 64;

pub fn mtf(psf: &Psf, size: usize) -> Result<MtfGrid> {
    let k = psf.size();
    if size < k {
        return Err(Error::Param(format!("analysis size {size} smaller than kernel {k}")));
    }
    let mut padded = Array2::zeros((size, size));
    padded.slice_mut(ndarray::s![..k, ..k]).assign(psf.grid());
    let mut spec = to_complex(&padded);
    fft2(&mut spec);
    let c = size / 2;
    let magnitudes = Array2::from_shape_fn((size, size), |(i, j)| spec[[(i + size - c) % size, (j + size - c) % size]].norm());
    Ok(MtfGrid { magnitudes })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreConfig {
    pub analysis_size: usize,
    /// Weight of the `max - min` spread penalty; 0 scores by min MTF alone.
    pub beta: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { analysis_size: DEFAULT_ANALYSIS_SIZE, beta: 0.0 }
    }
}

/// `min(MTF) - beta * (max(MTF) - min(MTF))`; higher means easier to invert.
pub fn invertibility_score(psf: &Psf, cfg: &ScoreConfig) -> Result<f64> {
    let m = mtf(psf, cfg.analysis_size)?;
    let (lo, hi) = (m.min(), m.max());
    Ok(lo - cfg.beta * (hi - lo))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodeSearchConfig {
    pub length: usize,
    pub duty: f64,
    pub budget: usize,
    pub score: ScoreConfig,
}

impl Default for CodeSearchConfig {
    fn default() -> Self {
        Self { length: 32, duty: 0.5, budget: 1000, score: ScoreConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeSearchResult {
    pub code: ShutterCode,
    pub score: f64,
    /// Score of the all-open code, always part of the candidate set.
    pub baseline_score: f64,
    /// Index of the winner among the sampled candidates; `None` when the
    /// all-open baseline won.
    pub winner: Option<usize>,
}

/// Randomized code search along a motion path.
///
/// Draws `budget` codes with `ceil(duty * L)` open chunks placed uniformly at
/// random, evaluates them in draw order followed by the all-open baseline and
/// keeps the first candidate with the highest invertibility score.
pub fn optimize_code(
    source: &impl PathSource,
    geom: PsfGeometry,
    cfg: &CodeSearchConfig,
    seed: u64,
) -> Result<CodeSearchResult> {
    if cfg.length == 0 {
        return Err(Error::Param("code length must be at least 1".into()));
    }
    if !(cfg.duty > 0.0 && cfg.duty <= 1.0) {
        return Err(Error::Param(format!("duty must lie in (0, 1], got {}", cfg.duty)));
    }
    if cfg.budget == 0 {
        return Err(Error::Param("budget must be at least 1".into()));
    }
    let open = (cfg.duty * cfg.length as f64).ceil() as usize;
    if open == 0 {
        return Err(Error::Param("duty leaves no open chunk".into()));
    }
    let open = open.min(cfg.length);
    let path = source.sampling_path();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let score_of = |code: &ShutterCode| -> Result<f64> {
        let psf = splat_path(&path, geom, |tau| code.is_open_at(tau));
        match psf {
            Ok(psf) => invertibility_score(&psf, &cfg.score),
            // every sample fell in a closed chunk
            Err(Error::Numeric(_)) => Ok(f64::NEG_INFINITY),
            Err(e) => Err(e),
        }
    };

    let mut best: Option<(ShutterCode, f64, Option<usize>)> = None;
    for i in 0..cfg.budget {
        let mut bits = vec![false; cfg.length];
        for idx in sample(&mut rng, cfg.length, open) {
            bits[idx] = true;
        }
        let code = ShutterCode { bits };
        let s = score_of(&code)?;
        if best.as_ref().map_or(true, |(_, b, _)| s > *b) {
            best = Some((code, s, Some(i)));
        }
    }
    let baseline = ShutterCode::all_open(cfg.length);
    let baseline_score = score_of(&baseline)?;
    let (code, score, winner) = best.expect("budget >= 1");
    if baseline_score > score {
        return Ok(CodeSearchResult { code: baseline, score: baseline_score, baseline_score, winner: None });
    }
    Ok(CodeSearchResult { code, score, baseline_score, winner })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrialConfig {
    pub search: CodeSearchConfig,
    /// Read noise added to both the coded and the uncoded blur.
    pub noise_sigma: f64,
    /// Regularizer of the inverse filter.
    pub reg: f64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self { search: CodeSearchConfig::default(), noise_sigma: 0.005, reg: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub code: ShutterCode,
    /// Invertibility of the code and of the all-open code on the true path.
    pub coded_score: f64,
    pub baseline_score: f64,
    pub psnr_coded: f64,
    pub psnr_uncoded: f64,
    pub ssim_coded: f64,
    pub ssim_uncoded: f64,
}

/// One coded-exposure trial. The code is searched along `planning` (an
/// estimated path, or the true one); blur is then rendered from the true
/// path with and without the code, with the same noise draw, and each
/// image is inverse-filtered with its own PSF. Quality is measured on the
/// central crop without a K-pixel frame.
pub fn run_trial(
    sharp: &SharpImage,
    truth: &impl PathSource,
    planning: &impl PathSource,
    geom: PsfGeometry,
    cfg: &TrialConfig,
    seed: u64,
) -> Result<TrialResult> {
    let search = optimize_code(planning, geom, &cfg.search, derive_seed(seed, "code", 0))?;
    let coded = coded_psf(truth, &search.code, geom)?;
    let plain = resample_psf(truth, geom)?;
    let noise_seed = derive_seed(seed, "noise", 0);
    let restore = |psf: &Psf| -> Result<(f64, f64)> {
        let blurred = render_blurred(sharp, psf, cfg.noise_sigma, noise_seed)?;
        let out = inverse_filter(&blurred, psf, cfg.reg)?;
        let k = geom.kernel_size;
        let (a, b) = (central_crop(&out, k)?, central_crop(sharp.pixels(), k)?);
        Ok((psnr(&a, &b, 1.0)?, ssim(&a, &b)?))
    };
    let (psnr_coded, ssim_coded) = restore(&coded)?;
    let (psnr_uncoded, ssim_uncoded) = restore(&plain)?;
    Ok(TrialResult {
        coded_score: invertibility_score(&coded, &cfg.search.score)?,
        baseline_score: invertibility_score(&plain, &cfg.search.score)?,
        code: search.code,
        psnr_coded,
        psnr_uncoded,
        ssim_coded,
        ssim_uncoded,
    })
}
