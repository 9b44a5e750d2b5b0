//! Forward process, posterior expectation, deterministic DDIM sampling,
//! analytic Wiener denoisers and guidance composition.

use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::grid::Grid;
use crate::model::GaussianImageModel;
use crate::rng::stream_rng;
use crate::schedule::NoiseSchedule;

/// Default number of DDIM steps.
pub const DEFAULT_STEPS: usize = 50;

/// Opaque identifier of a condition (prompt) bound to an analytic model.
pub type ConditionId = usize;

/// `sqrt(alpha) x0 + sqrt(1 - alpha) noise` at the schedule's `alpha(t)`.
pub fn forward(x0: &Grid, t: f64, noise: &Grid, s: &NoiseSchedule) -> Result<Grid> {
    forward_with_alpha(x0, noise, s.alpha(t)?)
}

/// Forward interpolation for a raw `alpha` in `[0, 1]`.
pub fn forward_with_alpha(x0: &Grid, noise: &Grid, alpha: f64) -> Result<Grid> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(domain("alpha", alpha, "[0, 1]"));
    }
    x0.lincomb(alpha.sqrt(), noise, (1.0 - alpha).sqrt())
}

/// `E[x0 | x_t] = (x_t - sqrt(1 - alpha) eps) / sqrt(alpha)`.
pub fn posterior_expectation(x_t: &Grid, eps_pred: &Grid, alpha: f64) -> Result<Grid> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(domain("alpha", alpha, "(0, 1]"));
    }
    let a = alpha.sqrt();
    x_t.lincomb(1.0 / a, eps_pred, -(1.0 - alpha).sqrt() / a)
}

/// A noise predictor `eps(x_t, t[, c])`.
pub trait Denoiser: Send + Sync {
    fn name(&self) -> &str;
    /// Side of the grids the predictor accepts.
    fn side(&self) -> usize;
    fn channels(&self) -> usize {
        1
    }
    fn predict(&self, x: &Grid, t: f64, condition: Option<ConditionId>) -> Result<Grid>;
}

fn check_input(d: &dyn Denoiser, x: &Grid) -> Result<()> {
    if x.side() != d.side() || x.channels() != d.channels() {
        return Err(Error::Size(format!(
            "{} expects {}x{}x{} grids, got {}x{}x{}",
            d.name(),
            d.side(),
            d.side(),
            d.channels(),
            x.side(),
            x.side(),
            x.channels()
        )));
    }
    Ok(())
}

/// Exact posterior-mean noise predictor for a Gaussian prior.
///
/// Per covariance eigenvalue `c` the prediction is
/// `sqrt(1 - alpha) / (alpha c + 1 - alpha)` applied to `x_t - sqrt(alpha) mean`.
#[derive(Debug, Clone)]
pub struct WienerDenoiser {
    name: String,
    model: GaussianImageModel,
    schedule: NoiseSchedule,
}

pub fn wiener_denoiser(model: GaussianImageModel, s: NoiseSchedule) -> WienerDenoiser {
    WienerDenoiser {
        name: format!("wiener-{}x{}", model.side(), model.side()),
        model,
        schedule: s,
    }
}

impl WienerDenoiser {
    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn model(&self) -> &GaussianImageModel {
        &self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Prediction at an explicit `alpha`, bypassing the schedule.
    pub fn predict_at_alpha(&self, x: &Grid, alpha: f64) -> Result<Grid> {
        check_input(self, x)?;
        let y = match self.model.mean() {
            Some(m) => x.lincomb(1.0, m, -alpha.sqrt())?,
            None => x.clone(),
        };
        let noise = (1.0 - alpha).sqrt();
        self.model.filter(&y, |c| noise / (alpha * c + 1.0 - alpha))
    }

    /// Posterior mean of `x0` at an explicit `alpha`.
    pub fn x0_at_alpha(&self, x: &Grid, alpha: f64) -> Result<Grid> {
        check_input(self, x)?;
        let mean = self.model.mean_or_zero();
        let y = x.lincomb(1.0, &mean, -alpha.sqrt())?;
        let g = self.model.filter(&y, |c| alpha.sqrt() * c / (alpha * c + 1.0 - alpha))?;
        g.add(&mean)
    }

    /// Expected squared error `sum_k alpha c / (alpha c + 1 - alpha)` of the noise prediction,
    /// summed over pixels and channels.
    pub fn analytic_mmse(&self, alpha: f64) -> f64 {
        let n2 = (self.model.side() * self.model.side()) as f64;
        let f = |c: f64| alpha * c / (alpha * c + 1.0 - alpha);
        let per_channel = match self.model.covariance() {
            crate::model::Covariance::Stationary { spectrum } => spectrum.iter().map(|&s| f(s)).sum(),
            crate::model::Covariance::BandSeparable { variances } => {
                let last = variances.len() - 1;
                variances
                    .iter()
                    .enumerate()
                    .map(|(j, &c)| {
                        let dim = if j == last {
                            1.0
                        } else {
                            n2 * (4f64.powi(-(j as i32)) - 4f64.powi(-(j as i32 + 1)))
                        };
                        dim * f(c)
                    })
                    .sum::<f64>()
            }
        };
        per_channel * self.model.channels() as f64
    }
}

impl Denoiser for WienerDenoiser {
    fn name(&self) -> &str {
        &self.name
    }

    fn side(&self) -> usize {
        self.model.side()
    }

    fn channels(&self) -> usize {
        self.model.channels()
    }

    fn predict(&self, x: &Grid, t: f64, _condition: Option<ConditionId>) -> Result<Grid> {
        self.predict_at_alpha(x, self.schedule.alpha(t)?)
    }
}

/// Dispatches on the condition: `None` goes to the unconditional predictor.
pub struct ConditionalDenoiser<D> {
    name: String,
    unconditional: D,
    conditional: Vec<D>,
}

impl<D: Denoiser> ConditionalDenoiser<D> {
    pub fn new(unconditional: D, conditional: Vec<D>) -> Result<Self> {
        for d in &conditional {
            if d.side() != unconditional.side() || d.channels() != unconditional.channels() {
                return Err(Error::Size("conditional predictors must share the unconditional shape".into()));
            }
        }
        Ok(Self {
            name: format!("conditional({})", unconditional.name()),
            unconditional,
            conditional,
        })
    }

    pub fn unconditional(&self) -> &D {
        &self.unconditional
    }

    pub fn conditional(&self, id: ConditionId) -> Option<&D> {
        self.conditional.get(id)
    }

    pub fn conditions(&self) -> usize {
        self.conditional.len()
    }
}

impl<D: Denoiser> Denoiser for ConditionalDenoiser<D> {
    fn name(&self) -> &str {
        &self.name
    }

    fn side(&self) -> usize {
        self.unconditional.side()
    }

    fn channels(&self) -> usize {
        self.unconditional.channels()
    }

    fn predict(&self, x: &Grid, t: f64, condition: Option<ConditionId>) -> Result<Grid> {
        match condition {
            None => self.unconditional.predict(x, t, None),
            Some(id) => self
                .conditional
                .get(id)
                .ok_or_else(|| Error::Argument(format!("unknown condition {id}")))?
                .predict(x, t, None),
        }
    }
}

/// A guidance weight as a function of time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightFn {
    Constant { value: f64 },
    /// `H(t - threshold)` with `H(0) = 0`.
    StepOn { threshold: f64 },
    /// `1 - H(t - threshold)`.
    StepOff { threshold: f64 },
}

impl WeightFn {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            Self::Constant { value } => value,
            Self::StepOn { threshold } => {
                if t > threshold {
                    1.0
                } else {
                    0.0
                }
            }
            Self::StepOff { threshold } => {
                if t > threshold {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }
}

/// One weight function per condition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionWeights {
    pub weights: Vec<(ConditionId, WeightFn)>,
}

impl ConditionWeights {
    pub fn constant(values: &[f64]) -> Self {
        Self {
            weights: values
                .iter()
                .enumerate()
                .map(|(i, &value)| (i, WeightFn::Constant { value }))
                .collect(),
        }
    }

    /// Prompt switch at `eta * T`: condition 1 gets `1 - H(t - eta T)`,
    /// condition 2 gets `H(t - eta T)`, with `T` spanning the schedule domain.
    pub fn prompt_switch(eta: f64, s: &NoiseSchedule) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(domain("eta", eta, "[0, 1]"));
        }
        let (lo, hi) = s.domain();
        let threshold = lo + eta * (hi - lo);
        Ok(Self {
            weights: vec![
                (0, WeightFn::StepOff { threshold }),
                (1, WeightFn::StepOn { threshold }),
            ],
        })
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        self.weights.iter().map(|(_, w)| w.eval(t)).collect()
    }
}

/// `eps_u + sum_i w_i(t) (eps_i - eps_u)`.
///
/// When exactly one weight is one and the rest are zero, the conditional
/// prediction is returned as is, so pure single-condition runs reproduce bitwise.
pub fn compose_guidance(
    d_uncond: &dyn Denoiser,
    d_conds: &[&dyn Denoiser],
    weights: &ConditionWeights,
    x: &Grid,
    t: f64,
) -> Result<Grid> {
    if d_conds.len() != weights.weights.len() {
        return Err(Error::Argument(format!(
            "{} conditional predictors but {} weights",
            d_conds.len(),
            weights.weights.len()
        )));
    }
    let w = weights.eval(t);
    let active: Vec<usize> = (0..w.len()).filter(|&i| w[i] != 0.0).collect();
    if active.len() == 1 && w[active[0]] == 1.0 {
        return d_conds[active[0]].predict(x, t, None);
    }
    let eps_u = d_uncond.predict(x, t, None)?;
    let mut out = eps_u.clone();
    for &i in &active {
        let eps_c = d_conds[i].predict(x, t, None)?;
        out.axpy(w[i], &eps_c.sub(&eps_u)?)?;
    }
    Ok(out)
}

/// `eps(x, t; c) - eps(x, t)`.
pub fn guidance_field(d_uncond: &dyn Denoiser, d_cond: &dyn Denoiser, x: &Grid, t: f64) -> Result<Grid> {
    d_cond.predict(x, t, None)?.sub(&d_uncond.predict(x, t, None)?)
}

/// Guidance composition packaged as a denoiser.
pub struct GuidedDenoiser<'a> {
    pub unconditional: &'a dyn Denoiser,
    pub conditional: Vec<&'a dyn Denoiser>,
    pub weights: ConditionWeights,
}

impl Denoiser for GuidedDenoiser<'_> {
    fn name(&self) -> &str {
        "guided"
    }

    fn side(&self) -> usize {
        self.unconditional.side()
    }

    fn channels(&self) -> usize {
        self.unconditional.channels()
    }

    fn predict(&self, x: &Grid, t: f64, _condition: Option<ConditionId>) -> Result<Grid> {
        compose_guidance(self.unconditional, &self.conditional, &self.weights, x, t)
    }
}

/// DDIM update from `alpha` to `alpha_prev` given a noise prediction.
pub fn ddim_update(x_t: &Grid, eps: &Grid, alpha: f64, alpha_prev: f64) -> Result<Grid> {
    let ratio = (alpha_prev / alpha).sqrt();
    let c_eps = (1.0 - alpha_prev).sqrt() - ratio * (1.0 - alpha).sqrt();
    x_t.lincomb(ratio, eps, c_eps)
}

/// `alpha` used as the target of a step; the start of the domain is treated as clean data.
pub fn target_alpha(s: &NoiseSchedule, t_prev: f64) -> Result<f64> {
    s.check_time(t_prev)?;
    if t_prev <= s.domain().0 {
        Ok(1.0)
    } else {
        s.alpha(t_prev)
    }
}

/// One deterministic DDIM step from `t` to `t_prev <= t`.
pub fn ddim_step(x_t: &Grid, t: f64, t_prev: f64, d: &dyn Denoiser, s: &NoiseSchedule) -> Result<Grid> {
    if t_prev > t {
        return Err(Error::Argument(format!("t_prev = {t_prev} lies after t = {t}")));
    }
    let alpha = s.alpha(t)?;
    let alpha_prev = target_alpha(s, t_prev)?;
    if alpha_prev == alpha {
        return Ok(x_t.clone());
    }
    let eps = d.predict(x_t, t, None)?;
    ddim_update(x_t, &eps, alpha, alpha_prev)
}

/// Sampling times `t_N > ... > t_0` uniformly covering the domain.
pub fn time_grid(s: &NoiseSchedule, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Argument("at least one step is required".into()));
    }
    let (lo, hi) = s.domain();
    Ok((0..=steps)
        .rev()
        .map(|k| lo + (hi - lo) * k as f64 / steps as f64)
        .collect())
}

/// What the sampler saw at one step.
pub struct StepRecord<'a> {
    pub step: usize,
    pub t: f64,
    pub t_prev: f64,
    pub alpha: f64,
    pub alpha_prev: f64,
    pub x: &'a Grid,
    pub eps: &'a Grid,
    /// Estimate of `x0` used for the update (after any thresholding).
    pub x0: &'a Grid,
}

/// Maps `(x_t, eps, alpha)` to a corrected estimate of `x0`.
pub type X0Correction<'a> = dyn Fn(&Grid, &Grid, f64) -> Result<Grid> + Sync + 'a;

/// Deterministic DDIM from `x_T` over `steps` uniform steps.
///
/// With `correction`, every step re-derives the noise from the corrected
/// `x0` estimate before moving to `t_prev`. `observer` sees every step.
pub fn ddim_sample_with(
    d: &dyn Denoiser,
    s: &NoiseSchedule,
    steps: usize,
    x_t: Grid,
    correction: Option<&X0Correction<'_>>,
    mut observer: impl FnMut(&StepRecord<'_>),
) -> Result<Grid> {
    let times = time_grid(s, steps)?;
    let mut x = x_t;
    for (k, pair) in times.windows(2).enumerate() {
        let (t, t_prev) = (pair[0], pair[1]);
        let alpha = s.alpha(t)?;
        let alpha_prev = target_alpha(s, t_prev)?;
        let eps = d.predict(&x, t, None)?;
        let next = match correction {
            None => {
                let x0 = posterior_expectation(&x, &eps, alpha)?;
                observer(&StepRecord {
                    step: k,
                    t,
                    t_prev,
                    alpha,
                    alpha_prev,
                    x: &x,
                    eps: &eps,
                    x0: &x0,
                });
                ddim_update(&x, &eps, alpha, alpha_prev)?
            }
            Some(fix) => {
                let x0 = fix(&x, &eps, alpha)?;
                let eps = x.lincomb(1.0, &x0, -alpha.sqrt())?.scale(1.0 / (1.0 - alpha).sqrt());
                observer(&StepRecord {
                    step: k,
                    t,
                    t_prev,
                    alpha,
                    alpha_prev,
                    x: &x,
                    eps: &eps,
                    x0: &x0,
                });
                x0.lincomb(alpha_prev.sqrt(), &eps, (1.0 - alpha_prev).sqrt())?
            }
        };
        x = next;
    }
    Ok(x)
}

/// Initial noise for a seeded run.
pub fn initial_noise(side: usize, channels: usize, seed: u64, stream: u64) -> Result<Grid> {
    Grid::standard_normal(side, channels, &mut stream_rng(seed, stream))
}

/// Plain DDIM sample from seeded standard-normal noise.
pub fn ddim_sample(d: &dyn Denoiser, s: &NoiseSchedule, steps: usize, seed: u64) -> Result<Grid> {
    let x_t = initial_noise(d.side(), d.channels(), seed, 0)?;
    ddim_sample_with(d, s, steps, x_t, None, |_| {})
}

/// `(x_t, t)` bound to a schedule.
#[derive(Debug, Clone)]
pub struct DiffusionState<'a> {
    pub x: Grid,
    pub t: f64,
    pub schedule: &'a NoiseSchedule,
}

impl<'a> DiffusionState<'a> {
    pub fn new(x: Grid, t: f64, schedule: &'a NoiseSchedule) -> Result<Self> {
        schedule.check_time(t)?;
        Ok(Self { x, t, schedule })
    }

    /// Advances the state to `t_prev` with one DDIM step.
    pub fn step(&mut self, d: &dyn Denoiser, t_prev: f64) -> Result<()> {
        self.x = ddim_step(&self.x, self.t, t_prev, d, self.schedule)?;
        self.t = t_prev;
        Ok(())
    }
}
