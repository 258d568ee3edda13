//! Panel layouts rendered to PNG.

use std::path::Path;

use ndarray::{Array2, Array3};
use trajdiff_core::io;

use crate::error::Result;

/// RGB raster in `[0, 1]`, `H×W×3`.
pub type Panel = Array3<f64>;

/// Min-max normalized grayscale; a constant field renders black.
pub fn gray(field: &Array2<f64>) -> Panel {
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (h, w) = field.dim();
    Array3::from_shape_fn((h, w, 3), |(y, x, _)| (field[[y, x]] - lo) / span)
}

pub fn binary(map: &Array2<u8>) -> Panel {
    gray(&map.mapv(f64::from))
}

/// Normalized field through a dark-blue → yellow ramp.
pub fn heat(field: &Array2<f64>) -> Panel {
    const STOPS: [[f64; 3]; 5] = [[0.27, 0.00, 0.33], [0.23, 0.32, 0.55], [0.13, 0.57, 0.55], [0.37, 0.79, 0.38], [0.99, 0.91, 0.14]];
    let g = gray(field);
    let (h, w, _) = g.dim();
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let t = g[[y, x, 0]] * (STOPS.len() - 1) as f64;
            let i = (t.floor() as usize).min(STOPS.len() - 2);
            let f = t - i as f64;
            for c in 0..3 {
                out[[y, x, c]] = STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f;
            }
        }
    }
    out
}

/// Nearest-neighbour resize to `h×w`.
pub fn resize(p: &Panel, h: usize, w: usize) -> Panel {
    let (ph, pw, _) = p.dim();
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| p[[(y * ph / h).min(ph - 1), (x * pw / w).min(pw - 1), c]])
}

/// Panels side by side, each scaled to `size×size`, on a white background.
pub fn row(panels: &[Panel], size: usize) -> Panel {
    const GAP: usize = 4;
    let n = panels.len();
    let mut out = Array3::from_elem((size, n * size + (n.saturating_sub(1)) * GAP, 3), 1.0);
    for (i, p) in panels.iter().enumerate() {
        let r = resize(p, size, size);
        let x0 = i * (size + GAP);
        out.slice_mut(ndarray::s![.., x0..x0 + size, ..]).assign(&r);
    }
    out
}

/// Rows stacked top to bottom and left-aligned.
pub fn column(rows: &[Panel]) -> Panel {
    const GAP: usize = 4;
    let w = rows.iter().map(|r| r.dim().1).max().unwrap_or(0);
    let h = rows.iter().map(|r| r.dim().0).sum::<usize>() + rows.len().saturating_sub(1) * GAP;
    let mut out = Array3::from_elem((h, w, 3), 1.0);
    let mut y = 0;
    for r in rows {
        let (rh, rw, _) = r.dim();
        out.slice_mut(ndarray::s![y..y + rh, ..rw, ..]).assign(r);
        y += rh + GAP;
    }
    out
}

/// Open (white) and closed (black) chunks of a shutter code as a strip.
pub fn code_strip(bits: &[bool], width: usize, height: usize) -> Panel {
    let n = bits.len().max(1);
    Array3::from_shape_fn((height, width, 3), |(y, x, _)| {
        let chunk = x * n / width;
        // thin separators between chunks
        if y == 0 || y + 1 == height || (x * n) % width < n && x > 0 {
            0.5
        } else if bits.get(chunk).copied().unwrap_or(false) {
            1.0
        } else {
            0.0
        }
    })
}

/// Polyline of `values` over their index, autoscaled, with a light frame.
pub fn line_plot(values: &[f64], width: usize, height: usize) -> Panel {
    let mut out = Array3::from_elem((height, width, 3), 1.0);
    for x in 0..width {
        for c in 0..3 {
            out[[0, x, c]] = 0.8;
            out[[height - 1, x, c]] = 0.8;
        }
    }
    for y in 0..height {
        for c in 0..3 {
            out[[y, 0, c]] = 0.8;
            out[[y, width - 1, c]] = 0.8;
        }
    }
    let finite: Vec<f64> = values.iter().cloned().filter(|v| v.is_finite()).collect();
    if finite.len() < 2 {
        return out;
    }
    let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pad = 4.0;
    let to_px = |i: usize, v: f64| -> (f64, f64) {
        let x = pad + (width as f64 - 2.0 * pad) * i as f64 / (values.len() - 1) as f64;
        let y = pad + (height as f64 - 2.0 * pad) * (1.0 - (v - lo) / span);
        (x, y)
    };
    let mut prev: Option<(f64, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            prev = None;
            continue;
        }
        let p = to_px(i, v);
        if let Some(q) = prev {
            let steps = ((p.0 - q.0).abs().max((p.1 - q.1).abs()).ceil() as usize).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let (x, y) = ((q.0 + (p.0 - q.0) * t).round() as usize, (q.1 + (p.1 - q.1) * t).round() as usize);
                if x < width && y < height {
                    out[[y, x, 0]] = 0.1;
                    out[[y, x, 1]] = 0.3;
                    out[[y, x, 2]] = 0.7;
                }
            }
        }
        prev = Some(p);
    }
    out
}

pub fn save(path: &Path, panel: &Panel) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        crate::cmd::create_dir(dir)?;
    }
    Ok(io::save_rgb8(path, panel)?)
}
