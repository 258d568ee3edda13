//! Spatially invariant blur synthesis and paired dataset generation.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::seed::derive_seed;
use crate::trajkit::{
    rasterize_hr, resample_psf, simulate_trajectory, ContinuousTrajectory, HrTrajectoryMap, Psf, PsfGeometry,
    TrajectoryParams,
};

/// Attempts per trajectory index before giving up on fitting the HR grid.
const MAX_FIT_ATTEMPTS: u64 = 64;

/// `H×W×3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SharpImage {
    pixels: Array3<f64>,
}

impl SharpImage {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        if pixels.dim().2 != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {:?}", pixels.dim())));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Param("sharp image values must lie in [0, 1]".into()));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    /// `size`×`size` window with top-left corner `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, size: usize) -> Result<SharpImage> {
        if row + size > self.height() || col + size > self.width() {
            return Err(Error::Shape(format!(
                "crop {size}x{size} at ({row}, {col}) exceeds {}x{}",
                self.height(),
                self.width()
            )));
        }
        let view = self.pixels.slice(ndarray::s![row..row + size, col..col + size, ..]);
        Ok(SharpImage { pixels: view.to_owned() })
    }
}

// ---------------------------------------------------------------------------
// Forward operator
// ---------------------------------------------------------------------------

/// Mirror index with edge repetition (`-1 -> 0`, `n -> n - 1`).
#[inline]
pub fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Per-channel 2-D correlation with symmetric padding of `K/2` pixels:
/// `out(y, x) = sum_{i,j} k(i, j) * img(y + i - K/2, x + j - K/2)`.
pub fn convolve_symmetric(image: &Array3<f64>, psf: &Psf) -> Result<Array3<f64>> {
    let (h, w, ch) = image.dim();
    let k = psf.size();
    if k > h.min(w) {
        return Err(Error::KernelSize { kernel: k, height: h, width: w });
    }
    let half = (k / 2) as isize;
    let taps: Vec<(isize, isize, f64)> = psf
        .grid()
        .indexed_iter()
        .filter(|(_, &v)| v != 0.0)
        .map(|((i, j), &v)| (i as isize - half, j as isize - half, v))
        .collect();
    let mut out = Array3::<f64>::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            for &(di, dj, v) in &taps {
                let sy = mirror(y as isize + di, h);
                let sx = mirror(x as isize + dj, w);
                for c in 0..ch {
                    out[[y, x, c]] += v * image[[sy, sx, c]];
                }
            }
        }
    }
    Ok(out)
}

/// Blur plus optional Gaussian read noise, clamped to `[0, 1]`.
pub fn render_blurred(sharp: &SharpImage, psf: &Psf, noise_sigma: f64, seed: u64) -> Result<Array3<f64>> {
    let mut out = convolve_symmetric(sharp.pixels(), psf)?;
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "noise", 0));
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::Param(e.to_string()))?;
        out.mapv_inplace(|v| v + normal.sample(&mut rng));
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Sharp sources
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SharpSource {
    /// Synthetic scene drawn from a seed.
    Procedural { seed: u64, size: usize },
    File { path: PathBuf },
}

impl SharpSource {
    pub fn load(&self) -> Result<SharpImage> {
        match self {
            SharpSource::Procedural { seed, size } => Ok(procedural_sharp(*seed, *size, *size)),
            SharpSource::File { path } => SharpImage::new(io::load_rgb(path)?),
        }
    }
}

/// Piecewise-smooth synthetic scene: a color gradient overlaid with random
/// rectangles, discs and stripe patches. Values are 8-bit quantized.
pub fn procedural_sharp(seed: u64, h: usize, w: usize) -> SharpImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rgb = |rng: &mut ChaCha8Rng| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
    let c0 = rgb(&mut rng);
    let c1 = rgb(&mut rng);
    let angle: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
    let mut img = Array3::<f64>::zeros((h, w, 3));
    let diag = ((h * h + w * w) as f64).sqrt();
    for y in 0..h {
        for x in 0..w {
            let t = ((x as f64 * angle.cos() + y as f64 * angle.sin()) / diag + 1.0) / 2.0;
            for c in 0..3 {
                img[[y, x, c]] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }
    let shapes = 12 + rng.gen_range(0..12);
    for _ in 0..shapes {
        let color = rgb(&mut rng);
        let cy = rng.gen::<f64>() * h as f64;
        let cx = rng.gen::<f64>() * w as f64;
        let ry = (0.04 + 0.2 * rng.gen::<f64>()) * h as f64;
        let rx = (0.04 + 0.2 * rng.gen::<f64>()) * w as f64;
        let kind = rng.gen_range(0..3);
        let period = 2.0 + rng.gen::<f64>() * 6.0;
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = match kind {
                    0 => dy.abs() <= 1.0 && dx.abs() <= 1.0,
                    1 => dy * dy + dx * dx <= 1.0,
                    _ => dy.abs() <= 1.0 && dx.abs() <= 1.0 && ((x as f64 + y as f64) / period).floor() as i64 % 2 == 0,
                };
                if inside {
                    for c in 0..3 {
                        img[[y, x, c]] = color[c];
                    }
                }
            }
        }
    }
    img.mapv_inplace(|v| f64::from(io::quantize8(v)) / 255.0);
    SharpImage { pixels: img }
}

// ---------------------------------------------------------------------------
// Dataset synthesis
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_trajectories: usize,
    pub pairs_per_combination: usize,
    pub crop_size: usize,
    pub hr_size: usize,
    pub kernel_size: usize,
    pub read_noise_sigma: f64,
    pub seed: u64,
    pub trajectory: TrajectoryParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_trajectories: 100,
            pairs_per_combination: 1,
            crop_size: 64,
            hr_size: 64,
            kernel_size: 16,
            read_noise_sigma: 0.0,
            seed: 0,
            trajectory: TrajectoryParams::default(),
        }
    }
}

impl SynthConfig {
    pub fn geometry(&self) -> PsfGeometry {
        PsfGeometry::new(self.kernel_size, self.hr_size)
    }
}

/// One manifest line. Paths are relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: usize,
    pub sharp_index: usize,
    pub traj_index: usize,
    pub repeat: usize,
    pub master_seed: u64,
    pub pair_seed: u64,
    pub traj_seed: u64,
    pub crop: [usize; 2],
    pub noise_sigma: f64,
    pub sharp: String,
    pub blurred: String,
    pub psf: String,
    pub map: String,
    pub traj: String,
}

/// A fully loaded pair.
#[derive(Debug, Clone)]
pub struct BlurPair {
    pub record: PairRecord,
    pub blurred: Array3<f64>,
    pub sharp: SharpImage,
    pub psf: Psf,
    pub hr_map: HrTrajectoryMap,
    pub traj: ContinuousTrajectory,
}

impl BlurPair {
    pub fn load(root: &Path, record: &PairRecord) -> Result<Self> {
        Ok(Self {
            record: record.clone(),
            blurred: io::load_rgb(&root.join(&record.blurred))?,
            sharp: SharpImage::new(io::load_rgb(&root.join(&record.sharp))?)?,
            psf: io::load_psf(&root.join(&record.psf))?,
            hr_map: io::load_map(&root.join(&record.map))?,
            traj: io::load_trajectory(&root.join(&record.traj))?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<PairRecord>,
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest.jsonl";

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e).map_err(|err| Error::format(path, err))?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
            entries.push(rec);
        }
        Ok(Self { entries })
    }
}

/// Simulates trajectory `index`, re-drawing until its HR map fits the grid.
pub fn simulate_fitting(
    cfg: &SynthConfig,
    index: u64,
) -> Result<(u64, ContinuousTrajectory, HrTrajectoryMap, Psf)> {
    let base = derive_seed(cfg.seed, "traj", index);
    for attempt in 0..MAX_FIT_ATTEMPTS {
        let seed = if attempt == 0 { base } else { derive_seed(base, "retry", attempt) };
        let params = TrajectoryParams { rng_seed: seed, ..cfg.trajectory };
        let traj = simulate_trajectory(&params)?;
        match rasterize_hr(&traj, cfg.hr_size, cfg.hr_size) {
            Ok(map) => {
                let psf = io::psf_as_stored(&resample_psf(&traj, cfg.geometry())?);
                return Ok((seed, traj, map, psf));
            }
            Err(Error::Extent(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Extent(format!(
        "trajectory {index}: no draw fit a {0}x{0} grid in {MAX_FIT_ATTEMPTS} attempts",
        cfg.hr_size
    )))
}

/// Writes every (sharp source, trajectory, repeat) combination under `out`
/// and returns the manifest (also written to `out/manifest.jsonl`).
pub fn synthesize_dataset(sources: &[SharpSource], cfg: &SynthConfig, out: &Path) -> Result<Manifest> {
    if sources.is_empty() {
        return Err(Error::Param("at least one sharp source is required".into()));
    }
    if cfg.n_trajectories == 0 || cfg.pairs_per_combination == 0 {
        return Err(Error::Param("n_trajectories and pairs_per_combination must be at least 1".into()));
    }
    if cfg.kernel_size > cfg.crop_size {
        return Err(Error::KernelSize { kernel: cfg.kernel_size, height: cfg.crop_size, width: cfg.crop_size });
    }
    cfg.trajectory.validate()?;
    for d in ["sharp", "blurred", "trajs", "maps", "psfs"] {
        let p = out.join(d);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }

    let mut trajs = Vec::with_capacity(cfg.n_trajectories);
    for ti in 0..cfg.n_trajectories {
        let (seed, traj, map, psf) = simulate_fitting(cfg, ti as u64)?;
        let names = (format!("trajs/t{ti:05}.npy"), format!("maps/t{ti:05}.png"), format!("psfs/t{ti:05}.npy"));
        io::save_trajectory(&out.join(&names.0), &traj)?;
        io::save_map(&out.join(&names.1), map.grid())?;
        io::save_psf(&out.join(&names.2), &psf)?;
        trajs.push((seed, psf, names));
    }

    let mut entries = Vec::new();
    for (si, source) in sources.iter().enumerate() {
        let image = source.load()?;
        if image.height() < cfg.crop_size || image.width() < cfg.crop_size {
            return Err(Error::Shape(format!(
                "sharp source {si} ({}x{}) is smaller than the {} crop",
                image.height(),
                image.width(),
                cfg.crop_size
            )));
        }
        for (ti, (traj_seed, psf, names)) in trajs.iter().enumerate() {
            for repeat in 0..cfg.pairs_per_combination {
                let id = entries.len();
                let pair_seed = derive_seed(cfg.seed, "pair", id as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(pair_seed);
                let row = rng.gen_range(0..=image.height() - cfg.crop_size);
                let col = rng.gen_range(0..=image.width() - cfg.crop_size);
                let sharp = image.crop(row, col, cfg.crop_size)?;
                let blurred = render_blurred(&sharp, psf, cfg.read_noise_sigma, pair_seed)?;
                let rec = PairRecord {
                    id,
                    sharp_index: si,
                    traj_index: ti,
                    repeat,
                    master_seed: cfg.seed,
                    pair_seed,
                    traj_seed: *traj_seed,
                    crop: [row, col],
                    noise_sigma: cfg.read_noise_sigma,
                    sharp: format!("sharp/p{id:06}.png"),
                    blurred: format!("blurred/p{id:06}.png"),
                    psf: names.2.clone(),
                    map: names.1.clone(),
                    traj: names.0.clone(),
                };
                io::save_rgb8(&out.join(&rec.sharp), sharp.pixels())?;
                io::save_rgb16(&out.join(&rec.blurred), &blurred)?;
                entries.push(rec);
            }
        }
    }
    let manifest = Manifest { entries };
    manifest.write(&out.join(Manifest::FILE_NAME))?;
    Ok(manifest)
}

/// Re-renders a stored pair from its sharp crop and PSF and checks the
/// stored blurred image bit for bit (at the stored 16-bit depth).
pub fn audit_pair(root: &Path, rec: &PairRecord) -> Result<bool> {
    let sharp = SharpImage::new(io::load_rgb(&root.join(&rec.sharp))?)?;
    let psf = io::load_psf(&root.join(&rec.psf))?;
    let stored = io::load_rgb(&root.join(&rec.blurred))?;
    let again = render_blurred(&sharp, &psf, rec.noise_sigma, rec.pair_seed)?;
    Ok(stored.dim() == again.dim()
        && stored.iter().zip(again.iter()).all(|(s, a)| (s * 65535.0).round() as u16 == io::quantize16(*a)))
}

/// Channel mean of an `H×W×3` image.
pub fn luminance(img: &Array3<f64>) -> Array2<f64> {
    let (h, w, c) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| (0..c).map(|k| img[[y, x, k]]).sum::<f64>() / c as f64)
}
