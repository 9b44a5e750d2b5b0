//! Cross-resolution SNR matching and resolution chromatography.
//!
//! Downsampling a diffused field `m` times with 2x2 average pooling leaves the
//! signal untouched but divides the noise variance by `4^m`. The coarse field
//! therefore sits at a higher SNR, and to feed it to a model trained at native
//! coarse resolution one must move to the adjusted time `tau_m` with
//! `SNR(tau_m) = 4^m SNR(t)` and rescale intensities by `lambda_m` so the total
//! variance is one again.
//!
//! The chromatography `r_m(t)` is the normalized rate `|d alpha(tau_m) / dt|`
//! per level. Since it only depends on `t` through `alpha(t)`, every schedule's
//! profile is the natural schedule's profile read at `t* = -ln alpha(t)`.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::schedule::{natural_remap, NoiseSchedule};

/// Default number of points on a profile's time grid.
pub const DEFAULT_PROFILE_POINTS: usize = 256;

/// Default central-difference step, as a fraction of the domain length.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

fn four_pow(m: u32) -> f64 {
    4f64.powi(m as i32)
}

/// Number of levels of a full pyramid: `log2(side) + 1`.
pub fn default_levels(side: usize) -> usize {
    side.trailing_zeros() as usize + 1
}

/// `alpha` at the adjusted time: `4^m alpha / ((4^m - 1) alpha + 1)`.
pub fn alpha_adjusted(alpha: f64, m: u32) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(domain("alpha", alpha, "the open interval (0, 1)"));
    }
    if m == 0 {
        return Ok(alpha);
    }
    let q = four_pow(m);
    Ok(q * alpha / ((q - 1.0) * alpha + 1.0))
}

/// Intensity rescaling `lambda = 2^m / sqrt(1 + (4^m - 1) alpha)`, in `[1, 2^m]`.
pub fn intensity_scale(alpha: f64, m: u32) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(domain("alpha", alpha, "the half-open interval (0, 1]"));
    }
    let q = four_pow(m);
    Ok(q.sqrt() / (1.0 + (q - 1.0) * alpha).sqrt())
}

/// Adjusted time `tau_m` with `SNR(tau_m) = 4^m SNR(t)`.
///
/// Adjusted levels beyond the clamp margin saturate at the start of the domain.
pub fn time_adjust(s: &NoiseSchedule, t: f64, m: u32) -> Result<f64> {
    let alpha = s.alpha(t)?;
    if m == 0 {
        return Ok(t);
    }
    let (lo, hi) = s.alpha_range();
    let target = alpha_adjusted(alpha, m)?.clamp(lo, hi);
    s.time_at_alpha(target)
}

/// Closed form of [`time_adjust`] on the natural schedule: `ln(e^t + 4^m - 1) - m ln 4`.
pub fn natural_time_adjust(t: f64, m: u32) -> f64 {
    let q = four_pow(m);
    // ln(e^t + q - 1) = t + ln(1 + (q - 1) e^{-t})
    t + ((q - 1.0) * (-t).exp()).ln_1p() - q.ln()
}

/// Normalized chromatography of the natural schedule at `t_star`.
///
/// `r_m` is proportional to `4^m e^{t*} / (e^{t*} + 4^m - 1)^2`, evaluated as
/// `4^m x / (1 + (4^m - 1) x)^2` with `x = e^{-t*}` to avoid overflow.
pub fn natural_chromatography(t_star: f64, levels: usize) -> Result<Vec<f64>> {
    if levels == 0 {
        return Err(Error::Argument("at least one level is required".into()));
    }
    if !(t_star >= 0.0) || !t_star.is_finite() {
        return Err(domain("t*", t_star, "[0, inf)"));
    }
    let x = (-t_star).exp();
    let mut w: Vec<f64> = (0..levels as u32)
        .map(|m| {
            let q = four_pow(m);
            let k = 1.0 + (q - 1.0) * x;
            q * x / (k * k)
        })
        .collect();
    normalize(&mut w);
    Ok(w)
}

fn normalize(w: &mut [f64]) -> bool {
    let z: f64 = w.iter().sum();
    if z > 0.0 && z.is_finite() {
        for v in w.iter_mut() {
            *v /= z;
        }
        true
    } else {
        w.iter_mut().for_each(|v| *v = 0.0);
        false
    }
}

/// Curves `r_m(t)` sampled on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChromatographyProfile {
    pub times: Vec<f64>,
    /// `values[m][i]` is `r_m(times[i])`.
    pub values: Vec<Vec<f64>>,
    /// Columns whose normalization constant vanished; stored as zeros.
    pub degenerate: Vec<bool>,
    /// Residual-mean share per time, present when measured with the residual included.
    pub residual: Option<Vec<f64>>,
}

impl ChromatographyProfile {
    /// Builds a profile from per-time columns, normalizing each one.
    pub fn from_columns(times: Vec<f64>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() != columns.len() {
            return Err(Error::Size(format!(
                "{} times but {} columns",
                times.len(),
                columns.len()
            )));
        }
        let levels = columns.first().map_or(0, Vec::len);
        if levels == 0 || columns.iter().any(|c| c.len() != levels) {
            return Err(Error::Size("columns must share a positive level count".into()));
        }
        let mut values = vec![Vec::with_capacity(times.len()); levels];
        let mut degenerate = Vec::with_capacity(times.len());
        for mut col in columns {
            degenerate.push(!normalize(&mut col));
            for (m, v) in col.into_iter().enumerate() {
                values[m].push(v);
            }
        }
        Ok(Self {
            times,
            values,
            degenerate,
            residual: None,
        })
    }

    pub fn levels(&self) -> usize {
        self.values.len()
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[i]).collect()
    }

    /// Time of the maximum of each level's curve; the first maximum wins ties.
    pub fn peak_times(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                self.times[best]
            })
            .collect()
    }

    /// Writes `t,r0,...,r{M-1}` (plus `residual` when present).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.levels()).map(|m| format!("r{m}")));
        if self.residual.is_some() {
            header.push("residual".into());
        }
        wtr.write_record(&header)?;
        for (i, t) in self.times.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(self.values.iter().map(|r| r[i].to_string()));
            if let Some(res) = &self.residual {
                row.push(res[i].to_string());
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Closed-form chromatography of any schedule, via the natural remap.
pub fn chromatography(s: &NoiseSchedule, times: &[f64], levels: usize) -> Result<ChromatographyProfile> {
    if levels == 0 {
        return Err(Error::Argument("at least one level is required".into()));
    }
    let columns = times
        .par_iter()
        .map(|&t| natural_chromatography(natural_remap(s, t)?, levels))
        .collect::<Result<Vec<_>>>()?;
    ChromatographyProfile::from_columns(times.to_vec(), columns)
}

/// Chromatography by central differences of `alpha(tau_m(t))` with step `h`.
pub fn chromatography_numeric(
    s: &NoiseSchedule,
    times: &[f64],
    levels: usize,
    h: f64,
) -> Result<ChromatographyProfile> {
    if levels == 0 {
        return Err(Error::Argument("at least one level is required".into()));
    }
    if !(h > 0.0) {
        return Err(domain("h", h, "(0, inf)"));
    }
    let (lo, hi) = s.domain();
    let columns = times
        .par_iter()
        .map(|&t| {
            if t - h < lo || t + h > hi {
                return Err(domain(
                    "t",
                    t,
                    format!("[{}, {}] (one step inside the domain)", lo + h, hi - h),
                ));
            }
            (0..levels as u32)
                .map(|m| {
                    let plus = s.alpha(time_adjust(s, t + h, m)?)?;
                    let minus = s.alpha(time_adjust(s, t - h, m)?)?;
                    Ok(((plus - minus) / (2.0 * h)).abs())
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    ChromatographyProfile::from_columns(times.to_vec(), columns)
}
