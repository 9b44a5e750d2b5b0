//! 2D discrete Fourier transforms on square grids.
//!
//! Convention used throughout the crate: the forward transform is
//! unnormalized, the inverse carries `1/N^2`, and the power spectrum of a
//! field is `|F|^2 / N^2`, so that its sum equals the sum of squared pixels.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::Result;
use crate::grid::Grid;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

fn transpose(buf: &mut [Complex64], n: usize) {
    for y in 0..n {
        for x in y + 1..n {
            buf.swap(y * n + x, x * n + y);
        }
    }
}

fn fft2_in_place(buf: &mut [Complex64], n: usize, inverse: bool) {
    if n == 1 {
        return;
    }
    let fft = plan(n, inverse);
    fft.process(buf);
    transpose(buf, n);
    fft.process(buf);
    transpose(buf, n);
}

/// Unnormalized forward transform of one channel, indexed `ky * n + kx`.
pub fn fft2(g: &Grid, channel: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = g
        .data()
        .iter()
        .skip(channel)
        .step_by(g.channels())
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    fft2_in_place(&mut buf, g.side(), false);
    buf
}

/// Inverse transform with the `1/N^2` factor, keeping the real part.
pub fn ifft2_real(spec: &[Complex64], n: usize) -> Vec<f64> {
    let mut buf = spec.to_vec();
    fft2_in_place(&mut buf, n, true);
    let k = 1.0 / (n * n) as f64;
    buf.iter().map(|c| c.re * k).collect()
}

/// Multiplies every channel's spectrum by a real, conjugate-symmetric `gain[ky * n + kx]`.
pub fn apply_gain(g: &Grid, gain: &[f64]) -> Result<Grid> {
    let n = g.side();
    assert_eq!(gain.len(), n * n, "gain table does not match the grid");
    let parts: Vec<Grid> = (0..g.channels())
        .map(|c| {
            let mut spec = fft2(g, c);
            for (s, k) in spec.iter_mut().zip(gain) {
                *s *= *k;
            }
            Grid::from_vec(n, 1, ifft2_real(&spec, n))
        })
        .collect::<Result<_>>()?;
    if parts.len() == 1 {
        Ok(parts.into_iter().next().unwrap())
    } else {
        Grid::from_channels(&parts)
    }
}

/// Frequency index mapped into `(-n/2, n/2]`.
pub fn signed_index(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Euclidean radius of bin `(ky, kx)` in index units.
pub fn radius(ky: usize, kx: usize, n: usize) -> f64 {
    let (a, b) = (signed_index(ky, n) as f64, signed_index(kx, n) as f64);
    (a * a + b * b).sqrt()
}
