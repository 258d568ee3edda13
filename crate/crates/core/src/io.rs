//! On-disk formats.
//!
//! * trajectories: `.npy`, `N×2` float64, row-major `(x, y)` rows
//! * PSFs and MTF grids: `.npy`, float32
//! * trajectory maps: 8-bit grayscale PNG, 0 / 255
//! * images: RGB PNG, 8-bit for sharp crops, 16-bit for blurred renders

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};
use ndarray_npy::{ReadNpyExt, WriteNpyExt};

use crate::error::{Error, Result};
use crate::trajkit::{ContinuousTrajectory, HrTrajectoryMap, Psf};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

pub fn save_trajectory(path: &Path, traj: &ContinuousTrajectory) -> Result<()> {
    let pts = traj.points();
    let arr = Array2::from_shape_fn((pts.len(), 2), |(i, j)| pts[i][j]);
    arr.write_npy(create(path)?).map_err(|e| Error::format(path, e))
}

pub fn load_trajectory(path: &Path) -> Result<ContinuousTrajectory> {
    let arr = Array2::<f64>::read_npy(open(path)?).map_err(|e| Error::format(path, e))?;
    if arr.ncols() != 2 {
        return Err(Error::format(path, format!("expected N×2 points, got {:?}", arr.dim())));
    }
    ContinuousTrajectory::new(arr.rows().into_iter().map(|r| [r[0], r[1]]).collect())
}

pub fn save_f32_grid(path: &Path, grid: &Array2<f64>) -> Result<()> {
    grid.mapv(|v| v as f32).write_npy(create(path)?).map_err(|e| Error::format(path, e))
}

pub fn load_f32_grid(path: &Path) -> Result<Array2<f64>> {
    let arr = Array2::<f32>::read_npy(open(path)?).map_err(|e| Error::format(path, e))?;
    Ok(arr.mapv(f64::from))
}

/// Stores the PSF as float32. [`load_psf`] restores exactly what was written.
pub fn save_psf(path: &Path, psf: &Psf) -> Result<()> {
    save_f32_grid(path, psf.grid())
}

pub fn load_psf(path: &Path) -> Result<Psf> {
    Psf::new(load_f32_grid(path)?).map_err(|e| Error::format(path, e))
}

/// Rounds a PSF through float32, matching what [`save_psf`] persists.
pub fn psf_as_stored(psf: &Psf) -> Psf {
    Psf::new(psf.grid().mapv(|v| f64::from(v as f32))).expect("float32 rounding keeps unit mass within tolerance")
}

pub fn save_map(path: &Path, map: &Array2<u8>) -> Result<()> {
    let (h, w) = map.dim();
    let img = ImageBuffer::<Luma<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        Luma([if map[[y as usize, x as usize]] > 0 { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

/// Loads a binary map (pixels >= 128 are set); may be empty.
pub fn load_map_grid(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| u8::from(img.get_pixel(c as u32, r as u32)[0] >= 128)))
}

pub fn load_map(path: &Path) -> Result<HrTrajectoryMap> {
    HrTrajectoryMap::new(load_map_grid(path)?).map_err(|e| Error::format(path, e))
}

/// Quantizes `[0, 1]` values to 8 bits (round to nearest).
pub fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn save_rgb8(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (h, w, _) = img.dim();
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        Rgb([quantize8(img[[r, c, 0]]), quantize8(img[[r, c, 1]]), quantize8(img[[r, c, 2]])])
    });
    buf.save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

pub fn save_rgb16(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (h, w, _) = img.dim();
    let buf = ImageBuffer::<Rgb<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        Rgb([quantize16(img[[r, c, 0]]), quantize16(img[[r, c, 1]]), quantize16(img[[r, c, 2]])])
    });
    buf.save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

/// Loads an RGB image as `H×W×3` values in `[0, 1]`, dividing by the
/// native bit depth's maximum.
pub fn load_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?;
    Ok(match img {
        DynamicImage::ImageRgb8(buf) => {
            let (w, h) = buf.dimensions();
            Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, ch)| {
                f64::from(buf.get_pixel(c as u32, r as u32)[ch]) / 255.0
            })
        }
        other => {
            let buf = other.into_rgb16();
            let (w, h) = buf.dimensions();
            Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, ch)| {
                f64::from(buf.get_pixel(c as u32, r as u32)[ch]) / 65535.0
            })
        }
    })
}

/// Saves a scalar field as an 8-bit grayscale PNG after min-max normalization.
pub fn save_gray_normalized(path: &Path, field: &Array2<f64>) -> Result<()> {
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (h, w) = field.dim();
    let img = ImageBuffer::<Luma<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        Luma([quantize8((field[[y as usize, x as usize]] - lo) / span)])
    });
    img.save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajkit::{rasterize_hr, resample_psf, simulate_trajectory, PsfGeometry, TrajectoryParams};

    #[test]
    fn trajectory_psf_and_map_reload() {
        let dir = tempfile::tempdir().unwrap();
        let t = simulate_trajectory(&TrajectoryParams { rng_seed: 5, num_points: 200, ..Default::default() }).unwrap();
        save_trajectory(&dir.path().join("t.npy"), &t).unwrap();
        assert_eq!(load_trajectory(&dir.path().join("t.npy")).unwrap(), t);

        let psf = resample_psf(&t, PsfGeometry::new(16, 64)).unwrap();
        save_psf(&dir.path().join("k.npy"), &psf).unwrap();
        assert_eq!(load_psf(&dir.path().join("k.npy")).unwrap(), psf_as_stored(&psf));

        let m = rasterize_hr(&t, 64, 64).unwrap();
        save_map(&dir.path().join("m.png"), m.grid()).unwrap();
        assert_eq!(load_map(&dir.path().join("m.png")).unwrap(), m);
    }

    #[test]
    fn rgb_depths_reload_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let img8 = Array3::from_shape_fn((4, 5, 3), |(r, c, ch)| ((r * 31 + c * 7 + ch * 50) % 256) as f64 / 255.0);
        save_rgb8(&dir.path().join("a.png"), &img8).unwrap();
        assert_eq!(load_rgb(&dir.path().join("a.png")).unwrap(), img8);

        let img16 = img8.mapv(|v| f64::from(quantize16(v * 0.77)) / 65535.0);
        save_rgb16(&dir.path().join("b.png"), &img16).unwrap();
        assert_eq!(load_rgb(&dir.path().join("b.png")).unwrap(), img16);
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_psf(Path::new("/nonexistent/k.npy")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/k.npy"));
    }
}
