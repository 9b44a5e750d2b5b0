//! Multi-resolution composition of noise predictors.
//!
//! Level `m` of a bank sees the `m`-times downsampled input `lambda_m D^m x_t`
//! at the adjusted time `tau_m`. All levels but the coarsest predict residual
//! noise (`eps - UD eps` at their own resolution); the coarsest predicts full
//! noise. The full-resolution prediction is
//! `sum_m 2^{-m} U^m[eps_m(lambda_m D^m x_t, tau_m)]`.

use rayon::prelude::*;
use serde::Serialize;

use crate::chroma::{alpha_adjusted, intensity_scale, time_adjust};
use crate::diffusion::{
    ddim_sample_with, initial_noise, wiener_denoiser, ConditionId, Denoiser, StepRecord, X0Correction,
};
use crate::error::{domain, Error, Result};
use crate::grid::Grid;
use crate::model::GaussianImageModel;
use crate::pyramid::{downsample, downsample_times, upsample, upsample_times};
use crate::schedule::NoiseSchedule;

/// `eps - UD eps`: the residual-noise target of a non-coarsest level.
pub fn residual_target(eps: &Grid) -> Result<Grid> {
    eps.sub(&upsample(&downsample(eps)?))
}

/// Which cross-resolution corrections are applied. Disabling one gives the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Adjustments {
    pub time: bool,
    pub intensity: bool,
}

impl Default for Adjustments {
    fn default() -> Self {
        Self {
            time: true,
            intensity: true,
        }
    }
}

/// Input `(lambda_m D^m x_t, tau_m)` for level `m`.
pub fn level_input(x_t: &Grid, t: f64, s: &NoiseSchedule, m: u32, adjust: Adjustments) -> Result<(Grid, f64)> {
    let alpha = s.alpha(t)?;
    let lambda = if adjust.intensity {
        intensity_scale(alpha, m)?
    } else {
        1.0
    };
    let tau = if adjust.time { time_adjust(s, t, m)? } else { t };
    Ok((downsample_times(x_t, m as usize).scale(lambda), tau))
}

/// Two-level merge `1/2 U[eps_low(lambda D x_t, tau)] + eps_res(x_t, t)`.
pub fn combine_two(
    low: &dyn Denoiser,
    res: &dyn Denoiser,
    x_t: &Grid,
    t: f64,
    s: &NoiseSchedule,
) -> Result<Grid> {
    combine_two_with(low, res, x_t, t, s, Adjustments::default())
}

pub fn combine_two_with(
    low: &dyn Denoiser,
    res: &dyn Denoiser,
    x_t: &Grid,
    t: f64,
    s: &NoiseSchedule,
    adjust: Adjustments,
) -> Result<Grid> {
    if low.side() * 2 != x_t.side() || res.side() != x_t.side() {
        return Err(Error::Size(format!(
            "low ({}) must take half and residual ({}) full side of {}",
            low.side(),
            res.side(),
            x_t.side()
        )));
    }
    let (x_low, tau) = level_input(x_t, t, s, 1, adjust)?;
    let coarse = low.predict(&x_low, tau, None)?;
    upsample(&coarse).lincomb(0.5, &res.predict(x_t, t, None)?, 1.0)
}

/// Wraps a predictor so it only outputs the residual `eps - UD eps`.
pub struct ResidualDenoiser<D> {
    name: String,
    inner: D,
}

impl<D: Denoiser> ResidualDenoiser<D> {
    pub fn new(inner: D) -> Result<Self> {
        if inner.side() < 2 {
            return Err(Error::Size("a residual predictor needs side >= 2".into()));
        }
        Ok(Self {
            name: format!("residual({})", inner.name()),
            inner,
        })
    }
}

impl<D: Denoiser> Denoiser for ResidualDenoiser<D> {
    fn name(&self) -> &str {
        &self.name
    }

    fn side(&self) -> usize {
        self.inner.side()
    }

    fn channels(&self) -> usize {
        self.inner.channels()
    }

    fn predict(&self, x: &Grid, t: f64, condition: Option<ConditionId>) -> Result<Grid> {
        residual_target(&self.inner.predict(x, t, condition)?)
    }
}

/// Level `m` predictors over `side / 2^m` grids, `m = 0 .. M-1`.
pub struct ResolutionDenoiserBank {
    levels: Vec<Box<dyn Denoiser>>,
    schedule: NoiseSchedule,
}

impl ResolutionDenoiserBank {
    pub fn new(levels: Vec<Box<dyn Denoiser>>, schedule: NoiseSchedule) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::Argument("a bank needs at least one level".into()))?;
        let side = first.side();
        let channels = first.channels();
        for (m, d) in levels.iter().enumerate() {
            if side >> m == 0 || d.side() != side >> m || d.channels() != channels {
                return Err(Error::Size(format!(
                    "level {m} ({}) takes side {}, expected {}",
                    d.name(),
                    d.side(),
                    side >> m
                )));
            }
        }
        Ok(Self { levels, schedule })
    }

    /// Exact analytic bank for `model`: level `m` denoises the `m`-times
    /// downsampled model, residual-only except at the coarsest level.
    pub fn wiener(model: &GaussianImageModel, s: &NoiseSchedule, levels: usize) -> Result<Self> {
        let max = model.side().trailing_zeros() as usize + 1;
        if levels == 0 || levels > max {
            return Err(Error::Size(format!(
                "{levels} levels requested for side {}; allowed 1..={max}",
                model.side()
            )));
        }
        let mut bank: Vec<Box<dyn Denoiser>> = Vec::with_capacity(levels);
        let mut current = model.clone();
        for m in 0..levels {
            let d = wiener_denoiser(current.clone(), s.clone()).with_name(format!("wiener-level{m}"));
            if m + 1 < levels {
                bank.push(Box::new(ResidualDenoiser::new(d)?));
                current = current.downsample()?;
            } else {
                bank.push(Box::new(d));
            }
        }
        Self::new(bank, s.clone())
    }

    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    pub fn side(&self) -> usize {
        self.levels[0].side()
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels()
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn level(&self, m: usize) -> Option<&dyn Denoiser> {
        self.levels.get(m).map(|d| d.as_ref())
    }
}

/// Full-resolution prediction `sum_m 2^{-m} U^m[eps_m(lambda_m D^m x_t, tau_m)]`.
pub fn combine_multi(bank: &ResolutionDenoiserBank, x_t: &Grid, t: f64) -> Result<Grid> {
    combine_multi_with(bank, x_t, t, Adjustments::default())
}

pub fn combine_multi_with(bank: &ResolutionDenoiserBank, x_t: &Grid, t: f64, adjust: Adjustments) -> Result<Grid> {
    if x_t.side() != bank.side() || x_t.channels() != bank.channels() {
        return Err(Error::Size(format!(
            "bank takes side {}, got {}",
            bank.side(),
            x_t.side()
        )));
    }
    let s = &bank.schedule;
    let parts = bank
        .levels
        .par_iter()
        .enumerate()
        .map(|(m, d)| {
            let (x_m, tau) = level_input(x_t, t, s, m as u32, adjust)?;
            let eps = d.predict(&x_m, tau, None)?;
            Ok(upsample_times(&eps, m))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Grid::zeros(x_t.side(), x_t.channels())?;
    for (m, p) in parts.iter().enumerate() {
        out.axpy(0.5f64.powi(m as i32), p)?;
    }
    Ok(out)
}

/// A bank with fixed adjustments, usable wherever a single predictor is expected.
pub struct CascadeDenoiser<'a> {
    pub bank: &'a ResolutionDenoiserBank,
    pub adjust: Adjustments,
}

impl Denoiser for CascadeDenoiser<'_> {
    fn name(&self) -> &str {
        "cascade"
    }

    fn side(&self) -> usize {
        self.bank.side()
    }

    fn channels(&self) -> usize {
        self.bank.channels()
    }

    fn predict(&self, x: &Grid, t: f64, _condition: Option<ConditionId>) -> Result<Grid> {
        combine_multi_with(self.bank, x, t, self.adjust)
    }
}

/// Largest admissible top level of [`multiresolution_threshold`]: `floor(log2 side)`.
pub fn max_cascade(side: usize) -> usize {
    side.trailing_zeros() as usize
}

/// Posterior `E[x0^{(m)} | x_{tau_m}^{(m)}] =
/// (lambda_m D^m x_t - 2^m sqrt(1 - alpha_{tau_m}) D^m eps) / sqrt(alpha_{tau_m})`.
pub fn level_posterior(x_t: &Grid, eps: &Grid, alpha: f64, m: u32) -> Result<Grid> {
    x_t.check_shape(eps)?;
    let a_m = alpha_adjusted(alpha, m)?;
    let lambda = intensity_scale(alpha, m)?;
    let k = m as usize;
    let xd = downsample_times(x_t, k);
    let ed = downsample_times(eps, k);
    let scale = 1.0 / a_m.sqrt();
    xd.lincomb(lambda * scale, &ed, -(2f64.powi(m as i32)) * (1.0 - a_m).sqrt() * scale)
}

/// Static threshold applied level by level, coarse to fine.
///
/// Level `top` seeds the estimate with its clamped posterior; each finer level
/// `m` upsamples the running estimate, adds the residual `y - UD y` of its own
/// posterior `y`, and clamps to `[-1, 1]` again. Without active clamps the
/// result is the plain posterior, because each level posterior is `D^m` of it.
pub fn multiresolution_threshold(x_t: &Grid, eps: &Grid, alpha: f64, top: usize) -> Result<Grid> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(domain("alpha", alpha, "the open interval (0, 1)"));
    }
    let max = max_cascade(x_t.side());
    if top > max {
        return Err(Error::Size(format!(
            "top level {top} exceeds the cascade depth {max} of side {}",
            x_t.side()
        )));
    }
    let mut acc = level_posterior(x_t, eps, alpha, top as u32)?.clamp(-1.0, 1.0);
    for m in (0..top).rev() {
        let y = level_posterior(x_t, eps, alpha, m as u32)?;
        acc = upsample(&acc).add(&residual_target(&y)?)?.clamp(-1.0, 1.0);
    }
    Ok(acc)
}

/// Options of [`cascaded_sample`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CascadeOptions {
    pub steps: usize,
    pub seed: u64,
    /// Noise stream under `seed`; distinct streams give independent samples.
    pub stream: u64,
    pub threshold: bool,
    pub adjust: Adjustments,
}

impl CascadeOptions {
    pub fn new(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            seed,
            stream: 0,
            threshold: true,
            adjust: Adjustments::default(),
        }
    }
}

/// Deterministic DDIM sampling with the composed predictor of `bank`.
pub fn cascaded_sample(bank: &ResolutionDenoiserBank, opts: &CascadeOptions) -> Result<Grid> {
    let x_t = initial_noise(bank.side(), bank.channels(), opts.seed, opts.stream)?;
    cascaded_sample_from(bank, opts, x_t, |_| {})
}

/// [`cascaded_sample`] from a given `x_T`, with a step observer.
pub fn cascaded_sample_from(
    bank: &ResolutionDenoiserBank,
    opts: &CascadeOptions,
    x_t: Grid,
    observer: impl FnMut(&StepRecord<'_>),
) -> Result<Grid> {
    let d = CascadeDenoiser {
        bank,
        adjust: opts.adjust,
    };
    let top = max_cascade(bank.side());
    let fix = move |x: &Grid, eps: &Grid, alpha: f64| multiresolution_threshold(x, eps, alpha, top);
    let correction: Option<&X0Correction<'_>> = if opts.threshold { Some(&fix) } else { None };
    ddim_sample_with(&d, &bank.schedule, opts.steps, x_t, correction, observer)
}
