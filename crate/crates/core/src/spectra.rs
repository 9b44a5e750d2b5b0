//! Power spectra, radial averages and PSD trajectories of posterior changes.

use std::io::Write;

use serde::Serialize;

use crate::diffusion::{ddim_sample_with, initial_noise, wiener_denoiser};
use crate::error::{Error, Result};
use crate::fourier::{fft2, radius};
use crate::grid::Grid;
use crate::model::GaussianImageModel;
use crate::rng::monte_carlo;
use crate::schedule::NoiseSchedule;

/// Default number of averaged trajectories.
pub const DEFAULT_SAMPLES: usize = 500;

/// `|FFT(g)|^2 / N^2` per bin and channel.
pub fn psd2d(g: &Grid) -> Grid {
    let n = g.side();
    let n2 = (n * n) as f64;
    let parts: Vec<Grid> = (0..g.channels())
        .map(|c| {
            let p = fft2(g, c).iter().map(|v| v.norm_sqr() / n2).collect();
            Grid::from_vec(n, 1, p).expect("powers are finite")
        })
        .collect();
    if parts.len() == 1 {
        parts.into_iter().next().unwrap()
    } else {
        Grid::from_channels(&parts).expect("equal sides")
    }
}

/// Radial bin of each frequency: the integer-rounded radius.
pub fn radial_bins(n: usize) -> Vec<usize> {
    (0..n * n).map(|i| radius(i / n, i % n, n).round() as usize).collect()
}

/// Mean power per integer radius.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadialPSD {
    /// `(radius, mean power)`, radii strictly increasing; empty radii are skipped.
    pub bins: Vec<(f64, f64)>,
    pub n_samples: usize,
}

impl RadialPSD {
    /// Radial mean of per-bin values indexed `ky * n + kx`.
    pub fn from_bins(values: &[f64], n: usize) -> Self {
        let idx = radial_bins(n);
        let top = idx.iter().copied().max().unwrap_or(0);
        let mut sum = vec![0.0; top + 1];
        let mut count = vec![0usize; top + 1];
        for (v, &r) in values.iter().zip(&idx) {
            sum[r] += v;
            count[r] += 1;
        }
        let bins = (0..=top)
            .filter(|&r| count[r] > 0)
            .map(|r| (r as f64, sum[r] / count[r] as f64))
            .collect();
        Self { bins, n_samples: 1 }
    }

    pub fn powers(&self) -> Vec<f64> {
        self.bins.iter().map(|b| b.1).collect()
    }

    /// Power-weighted mean radius.
    pub fn centroid(&self) -> f64 {
        let (num, den) = self
            .bins
            .iter()
            .fold((0.0, 0.0), |(a, b), &(r, p)| (a + r * p, b + p));
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }

    /// Elementwise mean of equally binned profiles, reduced in the given order.
    pub fn average(profiles: &[RadialPSD]) -> Result<Self> {
        let first = profiles
            .first()
            .ok_or_else(|| Error::Argument("nothing to average".into()))?;
        let mut bins = first.bins.clone();
        let mut n = first.n_samples;
        for p in &profiles[1..] {
            if p.bins.len() != bins.len() {
                return Err(Error::Size("radial profiles have different binning".into()));
            }
            for (acc, b) in bins.iter_mut().zip(&p.bins) {
                acc.1 += b.1;
            }
            n += p.n_samples;
        }
        let k = profiles.len() as f64;
        bins.iter_mut().for_each(|b| b.1 /= k);
        Ok(Self { bins, n_samples: n })
    }
}

/// Radial average of a power grid, pooled over channels.
pub fn radial_average(p: &Grid) -> RadialPSD {
    let n = p.side();
    let ch = p.channels();
    let pooled: Vec<f64> = p
        .data()
        .chunks_exact(ch)
        .map(|c| c.iter().sum::<f64>() / ch as f64)
        .collect();
    RadialPSD::from_bins(&pooled, n)
}

/// Radial PSD of the change of `E[x0 | x_t]` over each sampling interval,
/// averaged over `n_samples` DDIM trajectories of the Wiener denoiser.
///
/// Entry `k` pairs the estimate at `t_k` with the next one; its time label is `t_k`.
/// The last estimate is the sample itself.
pub fn change_psd_trajectory(
    model: &GaussianImageModel,
    s: &NoiseSchedule,
    steps: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<(f64, RadialPSD)>> {
    if n_samples == 0 {
        return Err(Error::Argument("at least one sample is required".into()));
    }
    let d = wiener_denoiser(model.clone(), s.clone());
    let n = model.side();
    let per_sample = monte_carlo(seed, n_samples, |i, _| {
        let x_t = initial_noise(n, model.channels(), seed, i as u64)?;
        let mut estimates: Vec<(f64, Grid)> = Vec::with_capacity(steps + 1);
        let sample = ddim_sample_with(&d, s, steps, x_t, None, |rec| {
            estimates.push((rec.t, rec.x0.clone()));
        })?;
        estimates.push((s.domain().0, sample));
        estimates
            .windows(2)
            .map(|w| Ok((w[0].0, radial_average(&psd2d(&w[1].1.sub(&w[0].1)?)))))
            .collect::<Result<Vec<_>>>()
    })?;
    let pairs = per_sample[0].len();
    (0..pairs)
        .map(|k| {
            let profiles: Vec<RadialPSD> = per_sample.iter().map(|v| v[k].1.clone()).collect();
            Ok((per_sample[0][k].0, RadialPSD::average(&profiles)?))
        })
        .collect()
}

/// Writes a PSD trajectory as long-form `t,r,power`.
pub fn write_psd_csv<W: Write>(trajectory: &[(f64, RadialPSD)], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["t", "r", "power"])?;
    for (t, psd) in trajectory {
        for (r, p) in &psd.bins {
            wtr.write_record([t.to_string(), r.to_string(), p.to_string()])?;
        }
    }
    wtr.flush()?;
    Ok(())
}
