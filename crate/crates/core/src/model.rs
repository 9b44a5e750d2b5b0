//! Gaussian image priors with exactly computable denoisers.
//!
//! Two covariance families are supported:
//!
//! - **stationary**: diagonal in the Fourier basis with power spectrum `S(k)`
//!   (so `E|X(k)|^2 = N^2 S(k)` and a spectrum of mean one has unit pixel variance);
//! - **band-separable**: `C = sum_j c_j Pi_j`, where `Pi_j = P_j - P_{j+1}` are the
//!   pyramid band projections (`P_j = U^j D^j`) and the last one is the mean projection.
//!
//! Any function of the covariance, such as its square root or a Wiener gain,
//! is applied through [`GaussianImageModel::filter`].

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fourier::{apply_gain, fft2, radius, signed_index};
use crate::grid::{check_side, Grid};
use crate::pyramid::{band_decompose, downsample, max_levels};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Covariance {
    /// `S(k)` indexed `ky * side + kx`.
    Stationary { spectrum: Vec<f64> },
    /// `c_j` for the projections `Pi_0 .. Pi_{L-1}`, `L = log2(side) + 1`.
    BandSeparable { variances: Vec<f64> },
}

/// Zero-mean (or fixed-mean) Gaussian prior over `side x side x channels` fields.
/// Channels are independent and share the covariance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianImageModel {
    side: usize,
    channels: usize,
    covariance: Covariance,
    #[serde(skip)]
    mean: Option<Grid>,
}

/// Projections `Pi_0 .. Pi_{L-1}` of `g`; they sum to `g`.
pub fn band_projections(g: &Grid) -> Vec<Grid> {
    let levels = max_levels(g.side());
    let stack = band_decompose(g, levels).expect("full pyramid depth is always valid");
    let mut out = stack.bands;
    // The top band of a full-depth pyramid is identically zero; the mean replaces it.
    *out.last_mut().unwrap() = stack.residual_mean;
    out
}

/// `(sin(pi k b / n) / (b sin(pi k / n)))^2`: squared response of a width-`b` box average.
fn box_response(k: usize, b: usize, n: usize) -> f64 {
    if k.is_multiple_of(n) {
        return 1.0;
    }
    let x = std::f64::consts::PI * k as f64 / n as f64;
    let r = (x * b as f64).sin() / (b as f64 * x.sin());
    r * r
}

impl GaussianImageModel {
    pub fn stationary(side: usize, channels: usize, spectrum: Vec<f64>) -> Result<Self> {
        check_side(side)?;
        if channels == 0 {
            return Err(Error::Size("a model needs at least one channel".into()));
        }
        if spectrum.len() != side * side {
            return Err(Error::Size(format!(
                "spectrum has {} bins, expected {}",
                spectrum.len(),
                side * side
            )));
        }
        for ky in 0..side {
            for kx in 0..side {
                let v = spectrum[ky * side + kx];
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::Argument(format!("spectrum bin ({ky}, {kx}) = {v} is not a finite non-negative value")));
                }
                let mirror = spectrum[((side - ky) % side) * side + (side - kx) % side];
                if (v - mirror).abs() > 1e-12 * v.abs().max(1.0) {
                    return Err(Error::Argument(format!(
                        "spectrum bin ({ky}, {kx}) breaks conjugate symmetry"
                    )));
                }
            }
        }
        Ok(Self {
            side,
            channels,
            covariance: Covariance::Stationary { spectrum },
            mean: None,
        })
    }

    /// `S(k) ~ 1 / (|k|^2 + f0^2)` scaled to unit pixel variance; `S(0) = 0` when `f0 = 0`.
    pub fn power_law(side: usize, channels: usize, f0: f64) -> Result<Self> {
        check_side(side)?;
        if !(f0 >= 0.0) || !f0.is_finite() {
            return Err(Error::Argument(format!("f0 = {f0} must be finite and non-negative")));
        }
        let mut spectrum: Vec<f64> = (0..side * side)
            .map(|i| {
                let r = radius(i / side, i % side, side);
                let d = r * r + f0 * f0;
                if d == 0.0 {
                    0.0
                } else {
                    1.0 / d
                }
            })
            .collect();
        let mean = spectrum.iter().sum::<f64>() / spectrum.len() as f64;
        if mean > 0.0 {
            spectrum.iter_mut().for_each(|v| *v /= mean);
        }
        Self::stationary(side, channels, spectrum)
    }

    /// White prior with unit spectrum.
    pub fn white(side: usize, channels: usize) -> Result<Self> {
        Self::stationary(side, channels, vec![1.0; side * side])
    }

    pub fn band_separable(side: usize, channels: usize, variances: Vec<f64>) -> Result<Self> {
        check_side(side)?;
        if channels == 0 {
            return Err(Error::Size("a model needs at least one channel".into()));
        }
        let levels = max_levels(side);
        if variances.len() != levels {
            return Err(Error::Size(format!(
                "side {side} has {levels} bands, got {} variances",
                variances.len()
            )));
        }
        if let Some(j) = variances.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Argument(format!("band variance {j} = {} is invalid", variances[j])));
        }
        Ok(Self {
            side,
            channels,
            covariance: Covariance::BandSeparable { variances },
            mean: None,
        })
    }

    /// Band-separable model with `c_j ~ 4^j`, the band analogue of a `1/|k|^2`
    /// spectrum, scaled so the pixel standard deviation is `pixel_std`.
    pub fn band_power_law(side: usize, channels: usize, pixel_std: f64) -> Result<Self> {
        check_side(side)?;
        let levels = max_levels(side);
        let raw: Vec<f64> = (0..levels).map(|j| 4f64.powi(j as i32)).collect();
        let model = Self::band_separable(side, channels, raw.clone())?;
        let k = pixel_std * pixel_std / model.pixel_variance();
        Self::band_separable(side, channels, raw.into_iter().map(|c| c * k).collect())
    }

    /// Attaches a fixed mean image.
    pub fn with_mean(mut self, mean: Grid) -> Result<Self> {
        if mean.side() != self.side || mean.channels() != self.channels {
            return Err(Error::Size("mean image does not match the model shape".into()));
        }
        self.mean = Some(mean);
        Ok(self)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn covariance(&self) -> &Covariance {
        &self.covariance
    }

    pub fn mean(&self) -> Option<&Grid> {
        self.mean.as_ref()
    }

    pub fn mean_or_zero(&self) -> Grid {
        self.mean
            .clone()
            .unwrap_or_else(|| Grid::zeros(self.side, self.channels).expect("validated shape"))
    }

    /// Average pixel variance of the zero-mean part.
    pub fn pixel_variance(&self) -> f64 {
        let n2 = (self.side * self.side) as f64;
        match &self.covariance {
            Covariance::Stationary { spectrum } => spectrum.iter().sum::<f64>() / n2,
            Covariance::BandSeparable { variances } => {
                let last = variances.len() - 1;
                variances
                    .iter()
                    .enumerate()
                    .map(|(j, c)| {
                        let dim = if j == last {
                            1.0
                        } else {
                            n2 * (4f64.powi(-(j as i32)) - 4f64.powi(-(j as i32 + 1)))
                        };
                        c * dim
                    })
                    .sum::<f64>()
                    / n2
            }
        }
    }

    /// Applies `f(eigenvalue)` of the covariance to `g`, channel-wise.
    pub fn filter(&self, g: &Grid, f: impl Fn(f64) -> f64) -> Result<Grid> {
        if g.side() != self.side {
            return Err(Error::Size(format!(
                "grid side {} does not match model side {}",
                g.side(),
                self.side
            )));
        }
        match &self.covariance {
            Covariance::Stationary { spectrum } => {
                let gain: Vec<f64> = spectrum.iter().map(|&s| f(s)).collect();
                apply_gain(g, &gain)
            }
            Covariance::BandSeparable { variances } => {
                let mut out = Grid::zeros(g.side(), g.channels())?;
                for (p, &c) in band_projections(g).iter().zip(variances) {
                    out.axpy(f(c), p)?;
                }
                Ok(out)
            }
        }
    }

    /// Draws `x_0 = mean + C^{1/2} z` from the standard-normal field `z`.
    pub fn sample_from_white(&self, z: &Grid) -> Result<Grid> {
        if z.channels() != self.channels {
            return Err(Error::Size("noise channels do not match the model".into()));
        }
        let x = self.filter(z, f64::sqrt)?;
        match &self.mean {
            Some(m) => x.add(m),
            None => Ok(x),
        }
    }

    /// A class mean `C w` with pixel standard deviation `pixel_std`, where `w` is `z`
    /// with every detail band rescaled to its expected energy under white noise.
    ///
    /// The band energies of the mean are then exactly proportional to `c_j^2 dim_j`
    /// on band-separable models, whatever the draw of `z`.
    pub fn class_mean(&self, z: &Grid, pixel_std: f64) -> Result<Grid> {
        if z.side() != self.side || z.channels() != self.channels {
            return Err(Error::Size("noise shape does not match the model".into()));
        }
        if !(pixel_std > 0.0 && pixel_std.is_finite()) {
            return Err(crate::error::domain("pixel_std", pixel_std, "(0, inf)"));
        }
        let n2 = (self.side * self.side * self.channels) as f64;
        let mut parts = band_projections(z);
        let last = parts.len() - 1;
        for (j, p) in parts.iter_mut().enumerate().take(last) {
            let e = p.norm_sq();
            if e > 0.0 {
                let dim = n2 * (4f64.powi(-(j as i32)) - 4f64.powi(-(j as i32 + 1)));
                *p = p.scale((dim / e).sqrt());
            }
        }
        let mut w = Grid::zeros(self.side, self.channels)?;
        for p in &parts {
            w.axpy(1.0, p)?;
        }
        let mu = self.filter(&w, |c| c)?;
        let sd = mu.std();
        if sd == 0.0 {
            return Err(Error::Argument("class mean vanishes".into()));
        }
        Ok(mu.scale(pixel_std / sd))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Grid> {
        let z = Grid::standard_normal(self.side, self.channels, rng)?;
        self.sample_from_white(&z)
    }

    /// Law of `D x_0` for `x_0` drawn from this model.
    pub fn downsample(&self) -> Result<Self> {
        if self.side < 2 {
            return Err(Error::Size("cannot downsample a 1x1 model".into()));
        }
        let n = self.side;
        let h = n / 2;
        let covariance = match &self.covariance {
            Covariance::Stationary { spectrum } => {
                let pi = std::f64::consts::PI;
                let mut out = vec![0.0; h * h];
                for ky in 0..n {
                    let wy = (pi * ky as f64 / n as f64).cos().powi(2);
                    for kx in 0..n {
                        let wx = (pi * kx as f64 / n as f64).cos().powi(2);
                        out[(ky % h) * h + kx % h] += 0.25 * wx * wy * spectrum[ky * n + kx];
                    }
                }
                Covariance::Stationary { spectrum: out }
            }
            Covariance::BandSeparable { variances } => Covariance::BandSeparable {
                variances: variances[1..].iter().map(|c| c / 4.0).collect(),
            },
        };
        let mean = match &self.mean {
            Some(m) => Some(downsample(m)?),
            None => None,
        };
        Ok(Self {
            side: h,
            channels: self.channels,
            covariance,
            mean,
        })
    }

    pub fn downsample_times(&self, k: usize) -> Result<Self> {
        let mut m = self.clone();
        for _ in 0..k {
            m = m.downsample()?;
        }
        Ok(m)
    }

    /// Expected power spectrum `E|X(k)|^2 / N^2` per bin, mean term included.
    pub fn expected_psd(&self) -> Vec<f64> {
        let n = self.side;
        let mut psd = match &self.covariance {
            Covariance::Stationary { spectrum } => spectrum.clone(),
            Covariance::BandSeparable { variances } => {
                let last = variances.len() - 1;
                let proj = |ky: usize, kx: usize, j: usize| {
                    let b = 1usize << j;
                    box_response(ky, b, n) * box_response(kx, b, n)
                };
                (0..n * n)
                    .map(|i| {
                        let (ky, kx) = (i / n, i % n);
                        variances
                            .iter()
                            .enumerate()
                            .map(|(j, c)| {
                                let upper = if j == last { 0.0 } else { proj(ky, kx, j + 1) };
                                c * (proj(ky, kx, j) - upper)
                            })
                            .sum()
                    })
                    .collect()
            }
        };
        if let Some(m) = &self.mean {
            let n2 = (n * n) as f64;
            for c in 0..self.channels {
                for (p, v) in psd.iter_mut().zip(fft2(m, c)) {
                    *p += v.norm_sqr() / n2 / self.channels as f64;
                }
            }
        }
        psd
    }
}

/// Frequency `(ky, kx)` of a flat bin index, in signed index units.
pub fn bin_frequency(i: usize, n: usize) -> (i64, i64) {
    (signed_index(i / n, n), signed_index(i % n, n))
}
