use anyhow::Context;
use serde::Serialize;

use reschroma::cascade::{
    cascaded_sample_from, max_cascade, multiresolution_threshold, Adjustments, CascadeOptions,
    ResolutionDenoiserBank,
};
use reschroma::chroma::{alpha_adjusted, chromatography, chromatography_numeric, DEFAULT_FD_STEP};
use reschroma::diffusion::{
    ddim_sample_with, guidance_field, initial_noise, wiener_denoiser, ConditionWeights, Denoiser, GuidedDenoiser,
    X0Correction,
};
use reschroma::model::GaussianImageModel;
use reschroma::pyramid::{band_decompose, band_energies, measured_chromatography};
use reschroma::rng::{monte_carlo, stream_rng};
use reschroma::spectra::{change_psd_trajectory, psd2d, radial_average, write_psd_csv, RadialPSD};
use reschroma::{Grid, NoiseSchedule};

use crate::config::RunConfig;
use crate::output::Staged;

/// Pixel standard deviation of the class means used by `measure` and `compose`.
const CLASS_MEAN_STD: f64 = 0.5;
/// Pixel standard deviation of the `upscale` model.
const UPSCALE_STD: f64 = 0.3;

/// Band-separable model with `c_j = 4^j`: band `j` has the SNR of level `j`
/// of a matched cascade, so guidance shares follow the theoretical profile.
pub fn condition_model(side: usize) -> reschroma::Result<GaussianImageModel> {
    let variances = (0..=side.trailing_zeros()).map(|j| 4f64.powi(j as i32)).collect();
    GaussianImageModel::band_separable(side, 1, variances)
}

fn class_mean(model: &GaussianImageModel, seed: u64, stream: u64) -> reschroma::Result<Grid> {
    let z = Grid::standard_normal(model.side(), model.channels(), &mut stream_rng(seed, stream))?;
    model.class_mean(&z, CLASS_MEAN_STD)
}

fn fmt(v: f64) -> String {
    v.to_string()
}

/// Times at which the finite-difference check is meaningful: the stencil stays
/// inside the domain and off table knots, and no level is clamped.
fn verifiable(s: &NoiseSchedule, t: f64, levels: usize, h: f64) -> reschroma::Result<bool> {
    let (lo, hi) = s.domain();
    if t - h < lo || t + h > hi {
        return Ok(false);
    }
    if let NoiseSchedule::Tabulated(tab) = s {
        if tab.knots().iter().any(|(k, _)| (k - t).abs() <= h) {
            return Ok(false);
        }
    }
    let (a_lo, a_hi) = s.alpha_range();
    let early = s.alpha(t - h)?;
    let late = s.alpha(t + h)?;
    if !(late > a_lo && early < a_hi) {
        return Ok(false);
    }
    let top = (levels - 1) as u32;
    Ok(alpha_adjusted(early, top)? < a_hi)
}

pub struct ChromaReport {
    pub max_deviation: Option<f64>,
    pub checked: usize,
}

pub fn chroma(cfg: &RunConfig, out: &mut Staged) -> anyhow::Result<ChromaReport> {
    let s = &cfg.schedule;
    let times = s.uniform_times(cfg.points);
    let profile = chromatography(s, &times, cfg.levels)?;
    out.add_csv("chromatography.csv", |w| Ok(profile.write_csv(w)?))?;
    if !cfg.verify {
        return Ok(ChromaReport {
            max_deviation: None,
            checked: 0,
        });
    }
    let h = DEFAULT_FD_STEP;
    let mut checked = Vec::new();
    for &t in &times {
        if verifiable(s, t, cfg.levels, h)? {
            checked.push(t);
        }
    }
    if checked.is_empty() {
        anyhow::bail!("no time point admits a finite-difference check at step {h}");
    }
    let exact = chromatography(s, &checked, cfg.levels)?;
    let numeric = chromatography_numeric(s, &checked, cfg.levels, h)?;
    let mut max_dev = 0.0f64;
    out.add_csv("verify.csv", |w| {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "max_abs_deviation"])?;
        for (i, t) in checked.iter().enumerate() {
            let d = (0..cfg.levels)
                .map(|m| (exact.values[m][i] - numeric.values[m][i]).abs())
                .fold(0.0f64, f64::max);
            max_dev = max_dev.max(d);
            wtr.write_record([fmt(*t), fmt(d)])?;
        }
        wtr.flush()?;
        Ok(())
    })?;
    Ok(ChromaReport {
        max_deviation: Some(max_dev),
        checked: checked.len(),
    })
}

pub struct MeasureReport {
    pub degenerate: usize,
    pub total: usize,
    pub ordering_matches: Option<bool>,
}

fn ordering(v: &[f64]) -> Vec<std::cmp::Ordering> {
    let mut out = Vec::new();
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            out.push(v[i].total_cmp(&v[j]));
        }
    }
    out
}

pub fn measure(cfg: &RunConfig, out: &mut Staged) -> anyhow::Result<MeasureReport> {
    let s = &cfg.schedule;
    let model = condition_model(cfg.side)?;
    let uncond = wiener_denoiser(model.clone(), s.clone()).with_name("unconditional");
    let cond_model = if cfg.identical {
        model.clone()
    } else {
        model.clone().with_mean(class_mean(&model, cfg.seed, 0)?)?
    };
    let cond = wiener_denoiser(cond_model, s.clone()).with_name("conditional");
    let guided = GuidedDenoiser {
        unconditional: &uncond,
        conditional: vec![&cond],
        weights: ConditionWeights::constant(&[cfg.guidance]),
    };
    let x_t = initial_noise(cfg.side, 1, cfg.seed, 1)?;
    let mut fields = Vec::with_capacity(cfg.steps);
    let mut failure = None;
    ddim_sample_with(&guided, s, cfg.steps, x_t, None, |rec| {
        if failure.is_none() {
            match guidance_field(&uncond, &cond, rec.x, rec.t) {
                Ok(g) => fields.push((rec.t, g)),
                Err(e) => failure = Some(e),
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    let energies = fields
        .iter()
        .map(|(_, g)| Ok(band_energies(&band_decompose(g, cfg.levels)?)))
        .collect::<reschroma::Result<Vec<_>>>()?;
    let profile = measured_chromatography(&fields, cfg.levels, false)?;
    let theory = chromatography(s, &profile.times, cfg.levels)?;
    let degenerate = profile.degenerate.iter().filter(|d| **d).count();
    let usable = degenerate < profile.times.len();

    out.add_csv("measure.csv", |w| {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((0..cfg.levels).map(|m| format!("e{m}")));
        header.extend((0..cfg.levels).map(|m| format!("r{m}")));
        header.push("status".into());
        wtr.write_record(&header)?;
        for (i, t) in profile.times.iter().enumerate() {
            let mut row = vec![fmt(*t)];
            row.extend(energies[i].iter().map(|e| fmt(*e)));
            row.extend(profile.column(i).into_iter().map(fmt));
            row.push(if profile.degenerate[i] { "degenerate" } else { "ok" }.into());
            wtr.write_record(&row)?;
        }
        if degenerate > 0 {
            let mut row = vec!["warning".to_string()];
            row.extend(std::iter::repeat_n(String::new(), 2 * cfg.levels));
            row.push(format!(
                "zero guidance energy at {degenerate} of {} times; shares set to 0",
                profile.times.len()
            ));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    })?;

    let measured_peaks = profile.peak_times();
    let theory_peaks = theory.peak_times();
    out.add_csv("peaks.csv", |w| {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["level", "measured_peak_t", "theoretical_peak_t"])?;
        for m in 0..cfg.levels {
            let measured = if usable { fmt(measured_peaks[m]) } else { String::new() };
            wtr.write_record([m.to_string(), measured, fmt(theory_peaks[m])])?;
        }
        wtr.flush()?;
        Ok(())
    })?;
    Ok(MeasureReport {
        degenerate,
        total: profile.times.len(),
        ordering_matches: usable.then(|| ordering(&measured_peaks) == ordering(&theory_peaks)),
    })
}

pub fn simulate(cfg: &RunConfig, out: &mut Staged) -> anyhow::Result<usize> {
    let s = &cfg.schedule;
    let model = GaussianImageModel::power_law(cfg.side, 1, 1.0)?;
    let trajectory = change_psd_trajectory(&model, s, cfg.steps, cfg.samples, cfg.seed)?;
    out.add_csv("psd.csv", |w| Ok(write_psd_csv(&trajectory, w)?))?;
    out.add_csv("centroid.csv", |w| {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "centroid"])?;
        for (t, p) in &trajectory {
            wtr.write_record([fmt(*t), fmt(p.centroid())])?;
        }
        wtr.flush()?;
        Ok(())
    })?;
    if cfg.dump_grids {
        let d = wiener_denoiser(model.clone(), s.clone());
        let x_t = initial_noise(cfg.side, 1, cfg.seed, 0)?;
        let mut estimates = Vec::with_capacity(cfg.steps);
        let sample = ddim_sample_with(&d, s, cfg.steps, x_t, None, |rec| estimates.push(rec.x0.clone()))?;
        for (k, g) in estimates.iter().enumerate() {
            out.add_grid(format!("grids/x0_{k:04}.rcg"), g);
        }
        out.add_grid("grids/sample.rcg", &sample);
    }
    Ok(trajectory.len())
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Variant {
    pub name: &'static str,
    pub adjust: Adjustments,
    pub threshold: bool,
}

pub const VARIANTS: [Variant; 4] = [
    Variant {
        name: "full",
        adjust: Adjustments {
            time: true,
            intensity: true,
        },
        threshold: true,
    },
    Variant {
        name: "no-time-adjust",
        adjust: Adjustments {
            time: false,
            intensity: true,
        },
        threshold: true,
    },
    Variant {
        name: "no-intensity-rescale",
        adjust: Adjustments {
            time: true,
            intensity: false,
        },
        threshold: true,
    },
    Variant {
        name: "no-threshold",
        adjust: Adjustments {
            time: true,
            intensity: true,
        },
        threshold: false,
    },
];

#[derive(Debug, Clone, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub max_abs_deviation: f64,
    pub max_abs_spectrum_deviation: f64,
    pub trivial: bool,
    pub matches_plain_ddim: Option<bool>,
}

fn mean_psd(gs: &[Grid]) -> reschroma::Result<RadialPSD> {
    let profiles: Vec<RadialPSD> = gs.iter().map(|g| radial_average(&psd2d(g))).collect();
    RadialPSD::average(&profiles)
}

pub fn upscale(cfg: &RunConfig, out: &mut Staged) -> anyhow::Result<Vec<VariantSummary>> {
    let s = &cfg.schedule;
    let model = GaussianImageModel::band_power_law(cfg.side, 1, UPSCALE_STD)?;
    let bank = ResolutionDenoiserBank::wiener(&model, s, cfg.levels)?;
    let variants: Vec<Variant> = if cfg.ablation_selected {
        vec![Variant {
            name: "selected",
            adjust: Adjustments {
                time: cfg.time_adjust,
                intensity: cfg.intensity_rescale,
            },
            threshold: cfg.threshold,
        }]
    } else {
        VARIANTS.to_vec()
    };

    // Model spectrum and the exact samples paired with each noise draw.
    let n = cfg.side;
    let spectrum = RadialPSD::from_bins(&model.expected_psd(), n);
    let exact = monte_carlo(cfg.seed, cfg.samples, |i, _| {
        model.sample_from_white(&initial_noise(n, 1, cfg.seed, i as u64)?)
    })?;
    let reference = mean_psd(&exact)?;

    let trivial = cfg.levels == 1;
    let plain = wiener_denoiser(model.clone(), s.clone());
    let top = max_cascade(n);
    let mut summaries = Vec::new();
    let mut rows = Vec::new();
    for v in &variants {
        let opts = CascadeOptions {
            adjust: v.adjust,
            threshold: v.threshold,
            ..CascadeOptions::new(cfg.steps, cfg.seed)
        };
        let samples = monte_carlo(cfg.seed, cfg.samples, |i, _| {
            let x_t = initial_noise(n, 1, cfg.seed, i as u64)?;
            cascaded_sample_from(&bank, &CascadeOptions { stream: i as u64, ..opts }, x_t, |_| {})
        })?;
        let psd = mean_psd(&samples)?;
        let mut max_dev = 0.0f64;
        let mut max_spec = 0.0f64;
        for ((&(r, p), &(_, q)), &(_, m)) in psd.bins.iter().zip(&reference.bins).zip(&spectrum.bins) {
            let dev = p / q - 1.0;
            let spec = p / m - 1.0;
            max_dev = max_dev.max(dev.abs());
            max_spec = max_spec.max(spec.abs());
            rows.push([v.name.to_string(), fmt(r), fmt(m), fmt(q), fmt(p), fmt(dev), fmt(spec)]);
        }
        let matches_plain_ddim = if trivial {
            let fix = move |x: &Grid, eps: &Grid, alpha: f64| multiresolution_threshold(x, eps, alpha, top);
            let correction: Option<&X0Correction<'_>> = if v.threshold { Some(&fix) } else { None };
            let x_t = initial_noise(n, 1, cfg.seed, 0)?;
            let direct = ddim_sample_with(&plain as &dyn Denoiser, s, cfg.steps, x_t, correction, |_| {})?;
            Some(direct.data() == samples[0].data())
        } else {
            None
        };
        out.add_grid(format!("samples/{}.rcg", v.name), &samples[0]);
        summaries.push(VariantSummary {
            variant: v.name.to_string(),
            max_abs_deviation: max_dev,
            max_abs_spectrum_deviation: max_spec,
            trivial,
            matches_plain_ddim,
        });
    }
    out.add_csv("psd_report.csv", |w| {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "variant",
            "r",
            "model_power",
            "reference_power",
            "sample_power",
            "deviation",
            "spectrum_deviation",
        ])?;
        for row in &rows {
            wtr.write_record(row)?;
        }
        wtr.flush()?;
        Ok(())
    })?;
    out.add_csv("summary.csv", |w| {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "variant",
            "max_abs_deviation",
            "max_abs_spectrum_deviation",
            "trivial",
            "matches_plain_ddim",
        ])?;
        for sm in &summaries {
            wtr.write_record([
                sm.variant.clone(),
                fmt(sm.max_abs_deviation),
                fmt(sm.max_abs_spectrum_deviation),
                sm.trivial.to_string(),
                sm.matches_plain_ddim.map_or(String::new(), |b| b.to_string()),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    })?;
    Ok(summaries)
}

fn band_correlation(a: &Grid, b: &Grid) -> f64 {
    let den = (a.norm_sq() * b.norm_sq()).sqrt();
    if den > 0.0 {
        a.dot(b).expect("bands share a shape") / den
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ComposeSummary {
    pub eta: f64,
    pub identical_to_condition1: bool,
    pub identical_to_condition2: bool,
}

pub fn compose(cfg: &RunConfig, out: &mut Staged) -> anyhow::Result<Vec<ComposeSummary>> {
    let s = &cfg.schedule;
    let model = condition_model(cfg.side)?;
    let uncond = wiener_denoiser(model.clone(), s.clone()).with_name("unconditional");
    let c1 = wiener_denoiser(model.clone().with_mean(class_mean(&model, cfg.seed, 1)?)?, s.clone())
        .with_name("condition1");
    let c2 = wiener_denoiser(model.clone().with_mean(class_mean(&model, cfg.seed, 2)?)?, s.clone())
        .with_name("condition2");
    let x_t = initial_noise(cfg.side, 1, cfg.seed, 0)?;
    let run = |weights: ConditionWeights| -> reschroma::Result<Grid> {
        let guided = GuidedDenoiser {
            unconditional: &uncond,
            conditional: vec![&c1, &c2],
            weights,
        };
        ddim_sample_with(&guided, s, cfg.steps, x_t.clone(), None, |_| {})
    };
    let pure1 = run(ConditionWeights::constant(&[1.0, 0.0]))?;
    let pure2 = run(ConditionWeights::constant(&[0.0, 1.0]))?;
    let ref0 = run(ConditionWeights::prompt_switch(0.0, s)?)?;
    let ref1 = run(ConditionWeights::prompt_switch(1.0, s)?)?;
    out.add_grid("condition1.rcg", &pure1);
    out.add_grid("condition2.rcg", &pure2);

    let bands = |g: &Grid| band_decompose(g, cfg.levels).map(|b| b.bands);
    let (b0, b1) = (bands(&ref0)?, bands(&ref1)?);
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for &eta in &cfg.etas {
        let x = run(ConditionWeights::prompt_switch(eta, s)?)?;
        out.add_grid(format!("eta_{eta}.rcg"), &x);
        for (m, b) in bands(&x)?.iter().enumerate() {
            rows.push([
                fmt(eta),
                m.to_string(),
                fmt(b.sub(&b0[m])?.norm_sq()),
                fmt(b.sub(&b1[m])?.norm_sq()),
                fmt(band_correlation(b, &b0[m])),
                fmt(band_correlation(b, &b1[m])),
            ]);
        }
        summaries.push(ComposeSummary {
            eta,
            identical_to_condition1: x.data() == pure1.data(),
            identical_to_condition2: x.data() == pure2.data(),
        });
    }
    out.add_csv("compose.csv", |w| {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "eta",
            "band",
            "energy_diff_eta0",
            "energy_diff_eta1",
            "corr_eta0",
            "corr_eta1",
        ])?;
        for row in &rows {
            wtr.write_record(row)?;
        }
        wtr.flush()?;
        Ok(())
    })?;
    out.add_csv("summary.csv", |w| {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["eta", "identical_to_condition1", "identical_to_condition2"])?;
        for sm in &summaries {
            wtr.write_record([
                fmt(sm.eta),
                sm.identical_to_condition1.to_string(),
                sm.identical_to_condition2.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    })
    .context("writing compose summary")?;
    Ok(summaries)
}
