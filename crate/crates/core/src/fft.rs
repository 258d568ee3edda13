//! 2-D FFT helpers on row-major complex grids.

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rustfft::FftPlanner;

fn fft_axis(data: &mut Array2<Complex64>, axis: Axis, inverse: bool, planner: &mut FftPlanner<f64>) {
    let n = data.len_of(axis);
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for mut lane in data.lanes_mut(axis) {
        for (b, v) in buf.iter_mut().zip(lane.iter()) {
            *b = *v;
        }
        fft.process(&mut buf);
        for (v, b) in lane.iter_mut().zip(buf.iter()) {
            *v = *b;
        }
    }
}

/// Unnormalized forward 2-D DFT.
pub fn fft2(data: &mut Array2<Complex64>) {
    let mut planner = FftPlanner::new();
    fft_axis(data, Axis(1), false, &mut planner);
    fft_axis(data, Axis(0), false, &mut planner);
}

/// Inverse 2-D DFT, scaled by 1/(rows*cols).
pub fn ifft2(data: &mut Array2<Complex64>) {
    let mut planner = FftPlanner::new();
    fft_axis(data, Axis(1), true, &mut planner);
    fft_axis(data, Axis(0), true, &mut planner);
    let scale = 1.0 / data.len() as f64;
    data.mapv_inplace(|v| v * scale);
}

pub fn to_complex(real: &Array2<f64>) -> Array2<Complex64> {
    real.mapv(|v| Complex64::new(v, 0.0))
}

/// Places a K×K kernel on an `rows`×`cols` grid with its center cell
/// (K/2, K/2) at the origin, wrapping negative offsets.
pub fn kernel_to_origin(kernel: &Array2<f64>, rows: usize, cols: usize) -> Array2<f64> {
    let (kh, kw) = kernel.dim();
    let (ch, cw) = (kh / 2, kw / 2);
    let mut out = Array2::zeros((rows, cols));
    for ((i, j), &v) in kernel.indexed_iter() {
        if v == 0.0 {
            continue;
        }
        let r = (i as isize - ch as isize).rem_euclid(rows as isize) as usize;
        let c = (j as isize - cw as isize).rem_euclid(cols as isize) as usize;
        out[[r, c]] += v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let real = Array2::from_shape_fn((6, 10), |(i, j)| (i * 10 + j) as f64 * 0.1);
        let mut c = to_complex(&real);
        fft2(&mut c);
        assert!((c[[0, 0]].re - real.sum()).abs() < 1e-9);
        ifft2(&mut c);
        for (a, b) in c.iter().zip(real.iter()) {
            assert!((a.re - b).abs() < 1e-12 && a.im.abs() < 1e-12);
        }
    }
}
