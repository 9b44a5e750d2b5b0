//! Noise schedules and their signal-to-noise algebra.
//!
//! A schedule maps diffusion time `t` to the signal fraction `alpha` in
//! `x_t = sqrt(alpha) x_0 + sqrt(1 - alpha) eps`. Four families are provided:
//!
//! - **linear**: the continuous-time limit of the usual per-step variance ramp
//!   `beta_k` composed into `prod(1 - beta_k)`, on `t in [0, 1]`;
//! - **cosine**: `f(t) / f(0)` with `f(t) = cos^2((t + s) / (1 + s) * pi / 2)`, on `t in [0, 1]`;
//! - **natural**: `alpha = exp(-t)`, the variance schedule of an Ornstein-Uhlenbeck
//!   process with drift 1/2 and unit diffusion, on `t in [0, t_max]`;
//! - **tabulated**: knots `(t, alpha)` interpolated linearly in log-SNR.
//!
//! Every `alpha` returned here is clamped to `[ALPHA_EPS, 1 - ALPHA_EPS]` so the
//! SNR and its inverse stay finite at the endpoints.

use std::io::Read;
use std::path::Path;

use serde::Serialize;

use crate::error::{domain, Error, Result};

/// Clamp margin applied to every schedule value.
pub const ALPHA_EPS: f64 = 1e-9;

/// Default end of the natural schedule's time domain (`exp(-14) ~ 8e-7`).
pub const DEFAULT_NATURAL_T_MAX: f64 = 14.0;

/// Offset `s` of the cosine schedule as used in the improved-DDPM reference implementation.
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;

/// Per-step variance ramp defaults of the DDPM literature.
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;
pub const DEFAULT_TRAIN_STEPS: u32 = 1000;

/// Signal-to-noise ratio `alpha / (1 - alpha)`.
pub fn snr(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(domain("alpha", alpha, "the open interval (0, 1)"));
    }
    Ok(alpha / (1.0 - alpha))
}

/// Inverse of [`snr`]: `v / (1 + v)`.
pub fn snr_inverse(v: f64) -> Result<f64> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(domain("snr", v, "(0, inf)"));
    }
    Ok(v / (1.0 + v))
}

fn clamp_alpha(alpha: f64) -> f64 {
    alpha.clamp(ALPHA_EPS, 1.0 - ALPHA_EPS)
}

/// Knot table for a tabulated schedule. Interpolation happens in log-SNR.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tabulated {
    knots: Vec<(f64, f64)>,
    #[serde(skip)]
    log_snr: Vec<f64>,
}

impl Tabulated {
    /// Validates the knots: at least two, `t` strictly increasing, `alpha`
    /// strictly decreasing and inside `(0, 1)`.
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::Schedule(format!(
                "a tabulated schedule needs at least two knots, got {}",
                knots.len()
            )));
        }
        for (i, &(t, a)) in knots.iter().enumerate() {
            if !t.is_finite() || !a.is_finite() {
                return Err(Error::Schedule(format!(
                    "knot {i} (t={t}, alpha={a}) is not finite"
                )));
            }
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Schedule(format!(
                    "knot {i} (t={t}, alpha={a}) has alpha outside (0, 1)"
                )));
            }
            if i > 0 {
                let (tp, ap) = knots[i - 1];
                if t <= tp {
                    return Err(Error::Schedule(format!(
                        "knot {i} (t={t}, alpha={a}) does not increase in t (previous t={tp})"
                    )));
                }
                if a >= ap {
                    return Err(Error::Schedule(format!(
                        "knot {i} (t={t}, alpha={a}) does not decrease in alpha (previous alpha={ap})"
                    )));
                }
            }
        }
        let log_snr = knots.iter().map(|&(_, a)| (a / (1.0 - a)).ln()).collect();
        Ok(Self { knots, log_snr })
    }

    /// Reads a `t,alpha` CSV table.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "t" || &headers[1] != "alpha" {
            return Err(Error::Schedule(format!(
                "expected header `t,alpha`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut knots = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            let parse = |idx: usize| -> Result<f64> {
                record[idx].parse::<f64>().map_err(|e| {
                    Error::Schedule(format!("row {}: cannot parse `{}`: {e}", row + 1, &record[idx]))
                })
            };
            knots.push((parse(0)?, parse(1)?));
        }
        Self::new(knots)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file)
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    fn log_snr_at(&self, t: f64) -> f64 {
        let idx = match self.knots.iter().position(|&(tk, _)| tk >= t) {
            Some(0) => return self.log_snr[0],
            Some(i) => i,
            None => return *self.log_snr.last().unwrap(),
        };
        let (t0, t1) = (self.knots[idx - 1].0, self.knots[idx].0);
        let (l0, l1) = (self.log_snr[idx - 1], self.log_snr[idx]);
        l0 + (l1 - l0) * (t - t0) / (t1 - t0)
    }

    fn time_at_log_snr(&self, target: f64) -> f64 {
        let n = self.knots.len();
        if target >= self.log_snr[0] {
            return self.knots[0].0;
        }
        if target <= self.log_snr[n - 1] {
            return self.knots[n - 1].0;
        }
        let idx = self.log_snr.iter().position(|&l| l <= target).unwrap();
        let (t0, t1) = (self.knots[idx - 1].0, self.knots[idx].0);
        let (l0, l1) = (self.log_snr[idx - 1], self.log_snr[idx]);
        t0 + (target - l0) / (l1 - l0) * (t1 - t0)
    }
}

/// A monotonically decreasing signal schedule `alpha(t)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseSchedule {
    Linear {
        beta_start: f64,
        beta_end: f64,
        train_steps: u32,
    },
    Cosine {
        offset: f64,
    },
    Natural {
        t_max: f64,
    },
    Tabulated(Tabulated),
}

impl NoiseSchedule {
    pub fn linear() -> Self {
        Self::Linear {
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            train_steps: DEFAULT_TRAIN_STEPS,
        }
    }

    pub fn linear_with(beta_start: f64, beta_end: f64, train_steps: u32) -> Result<Self> {
        let ok = |b: f64| b > 0.0 && b < 1.0;
        if !ok(beta_start) || !ok(beta_end) || train_steps == 0 {
            return Err(Error::Schedule(format!(
                "linear ramp needs betas in (0, 1) and a positive step count, got ({beta_start}, {beta_end}, {train_steps})"
            )));
        }
        Ok(Self::Linear {
            beta_start,
            beta_end,
            train_steps,
        })
    }

    pub fn cosine() -> Self {
        Self::Cosine {
            offset: DEFAULT_COSINE_OFFSET,
        }
    }

    pub fn cosine_with(offset: f64) -> Result<Self> {
        if !(offset > 0.0) || !offset.is_finite() {
            return Err(Error::Schedule(format!("cosine offset must be positive, got {offset}")));
        }
        Ok(Self::Cosine { offset })
    }

    pub fn natural() -> Self {
        Self::Natural {
            t_max: DEFAULT_NATURAL_T_MAX,
        }
    }

    pub fn natural_with(t_max: f64) -> Result<Self> {
        if !(t_max > 0.0) || !t_max.is_finite() {
            return Err(Error::Schedule(format!("natural t_max must be positive, got {t_max}")));
        }
        Ok(Self::Natural { t_max })
    }

    pub fn tabulated(knots: Vec<(f64, f64)>) -> Result<Self> {
        Tabulated::new(knots).map(Self::Tabulated)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Linear { .. } => "linear",
            Self::Cosine { .. } => "cosine",
            Self::Natural { .. } => "natural",
            Self::Tabulated(_) => "tabulated",
        }
    }

    /// Closed time interval `[t_min, t_max]` on which the schedule is defined.
    pub fn domain(&self) -> (f64, f64) {
        match self {
            Self::Linear { .. } | Self::Cosine { .. } => (0.0, 1.0),
            Self::Natural { t_max } => (0.0, *t_max),
            Self::Tabulated(tab) => (tab.knots[0].0, tab.knots[tab.knots.len() - 1].0),
        }
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        let (lo, hi) = self.domain();
        if t >= lo && t <= hi {
            Ok(())
        } else {
            Err(domain("t", t, format!("the schedule domain [{lo}, {hi}]")))
        }
    }

    /// `ln alpha(t)` before clamping.
    fn log_alpha_raw(&self, t: f64) -> f64 {
        match self {
            Self::Natural { .. } => -t,
            Self::Cosine { offset } => {
                let f = |t: f64| ((t + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2).cos();
                2.0 * (f(t).ln() - f(0.0).ln())
            }
            Self::Linear {
                beta_start,
                beta_end,
                train_steps,
            } => {
                // T * int_0^t ln(1 - beta(s)) ds with beta(s) linear from beta_start to beta_end.
                let steps = f64::from(*train_steps);
                let slope = beta_end - beta_start;
                if slope.abs() < 1e-15 {
                    return steps * t * (1.0 - beta_start).ln_1p_neg();
                }
                let antiderivative = |u: f64| u * u.ln() - u;
                let u0 = 1.0 - beta_start;
                let ut = 1.0 - beta_start - slope * t;
                steps * (antiderivative(u0) - antiderivative(ut)) / slope
            }
            Self::Tabulated(tab) => {
                let l = tab.log_snr_at(t);
                // ln sigmoid(l)
                -softplus(-l)
            }
        }
    }

    /// Signal fraction `alpha(t)`, clamped to `[ALPHA_EPS, 1 - ALPHA_EPS]`.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(clamp_alpha(self.log_alpha_raw(t).exp()))
    }

    /// Range of `alpha` values the schedule attains, as `(alpha(t_max), alpha(t_min))`.
    pub fn alpha_range(&self) -> (f64, f64) {
        let (lo, hi) = self.domain();
        (
            clamp_alpha(self.log_alpha_raw(hi).exp()),
            clamp_alpha(self.log_alpha_raw(lo).exp()),
        )
    }

    /// Inverse of [`alpha`](Self::alpha): the time at which the schedule reaches `alpha`.
    ///
    /// Natural, cosine and tabulated schedules are inverted in closed form; the
    /// linear schedule is inverted by bisection, which is guaranteed by monotonicity.
    pub fn time_at_alpha(&self, alpha: f64) -> Result<f64> {
        let (lo_a, hi_a) = self.alpha_range();
        if !(alpha >= lo_a && alpha <= hi_a) {
            return Err(Error::Range {
                alpha,
                lo: lo_a,
                hi: hi_a,
            });
        }
        let (t_min, t_max) = self.domain();
        let t = match self {
            Self::Natural { .. } => -alpha.ln(),
            Self::Cosine { offset } => {
                let f0 = (offset / (1.0 + offset) * std::f64::consts::FRAC_PI_2).cos();
                let x = (alpha.sqrt() * f0).min(1.0).acos();
                x / std::f64::consts::FRAC_PI_2 * (1.0 + offset) - offset
            }
            Self::Tabulated(tab) => tab.time_at_log_snr((alpha / (1.0 - alpha)).ln()),
            Self::Linear { .. } => {
                let target = alpha.ln();
                bisect_decreasing(|t| self.log_alpha_raw(t), target, t_min, t_max)
            }
        };
        Ok(t.clamp(t_min, t_max))
    }

    /// Signal-to-noise ratio at time `t`.
    pub fn snr_at(&self, t: f64) -> Result<f64> {
        snr(self.alpha(t)?)
    }

    /// Uniformly spaced times covering the whole domain, endpoints included.
    pub fn uniform_times(&self, points: usize) -> Vec<f64> {
        let (lo, hi) = self.domain();
        match points {
            0 => Vec::new(),
            1 => vec![lo],
            n => (0..n)
                .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }
}

trait Ln1pNeg {
    fn ln_1p_neg(self) -> f64;
}

impl Ln1pNeg for f64 {
    /// `ln(self)` for `self` close to one, evaluated as `ln_1p(self - 1)`.
    fn ln_1p_neg(self) -> f64 {
        (self - 1.0).ln_1p()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Finds `t` in `[lo, hi]` with `f(t) = target` for a decreasing `f`, to the
/// resolution of the floating-point grid.
pub(crate) fn bisect_decreasing(f: impl Fn(f64) -> f64, target: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `t* = -ln alpha(t)`: the time at which the natural schedule has the same `alpha`.
pub fn natural_remap(s: &NoiseSchedule, t: f64) -> Result<f64> {
    Ok(-s.alpha(t)?.ln())
}

/// Maps `t` on schedule `a` to the time `t'` on schedule `b` with `alpha_b(t') = alpha_a(t)`.
pub fn remap_between(a: &NoiseSchedule, b: &NoiseSchedule, t: f64) -> Result<f64> {
    a.check_time(t)?;
    if a == b {
        return Ok(t);
    }
    b.time_at_alpha(a.alpha(t)?)
}
