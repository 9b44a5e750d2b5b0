use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use reschroma::chroma::DEFAULT_PROFILE_POINTS;
use reschroma::diffusion::DEFAULT_STEPS;
use reschroma::schedule::Tabulated;
use reschroma::NoiseSchedule;

use crate::error::CliError;

pub const DEFAULT_ETAS: [f64; 7] = [0.0, 0.2, 0.4, 0.6, 0.8, 0.9, 1.0];
pub const DEFAULT_UPSCALE_STEPS: usize = 500;
pub const DEFAULT_UPSCALE_SAMPLES: usize = 200;
pub const DEFAULT_GUIDANCE: f64 = 3.0;
pub const MAX_SIDE: usize = 1024;

/// Resolution chromatography toolkit: schedule profiles, guided and cascaded
/// sampling with exact Gaussian denoisers, and CSV reports.
#[derive(Debug, Parser)]
#[command(name = "reschroma", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    #[command(flatten)]
    pub global: GlobalArgs,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed of every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Output directory; created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,

    /// Grid side, a power of two.
    #[arg(long, global = true, value_name = "N", default_value_t = 32)]
    pub side: usize,

    /// Resolution levels M [default: log2(side)].
    #[arg(long, global = true, value_name = "M")]
    pub levels: Option<usize>,

    /// Sampling steps [default: 50; 500 for upscale].
    #[arg(long, global = true, value_name = "N")]
    pub steps: Option<usize>,

    /// Monte Carlo trajectories [default: 500 for simulate, 200 for upscale].
    #[arg(long, global = true, value_name = "N")]
    pub samples: Option<usize>,

    /// Noise schedule.
    #[arg(long, global = true, value_enum, default_value_t = ScheduleKind::Cosine)]
    pub schedule: ScheduleKind,

    /// CSV with header `t,alpha` for the tabulated schedule.
    #[arg(long, global = true, value_name = "PATH")]
    pub file: Option<PathBuf>,

    /// Points of the profile time grid.
    #[arg(long, global = true, value_name = "N", default_value_t = DEFAULT_PROFILE_POINTS)]
    pub points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Natural,
    Cosine,
    Linear,
    Tabulated,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Theoretical chromatography of a schedule.
    Chroma {
        /// Cross-check against finite differences and report the max deviation.
        #[arg(long)]
        verify: bool,
    },
    /// Measured chromatography of classifier-free guidance.
    Measure {
        /// Guidance weight.
        #[arg(long, default_value_t = DEFAULT_GUIDANCE)]
        guidance: f64,
        /// Use the unconditional model as the condition (zero guidance).
        #[arg(long)]
        identical: bool,
    },
    /// Power spectra of posterior-expectation changes along DDIM trajectories.
    Simulate {
        /// Also write the estimates of the first trajectory as grid files.
        #[arg(long)]
        dump_grids: bool,
    },
    /// Cascaded sampling with ablations of the cross-resolution adjustments.
    Upscale {
        /// Run only the configuration without time adjustment.
        #[arg(long)]
        no_time_adjust: bool,
        /// Run only the configuration without intensity rescaling.
        #[arg(long)]
        no_intensity_rescale: bool,
        /// Run only the configuration without the multiresolution threshold.
        #[arg(long)]
        no_threshold: bool,
    },
    /// Two-condition prompt switch at eta * T.
    Compose {
        /// Switch points in [0, 1], comma separated [default: 0,0.2,0.4,0.6,0.8,0.9,1].
        #[arg(long, value_delimiter = ',', value_name = "ETA")]
        eta: Vec<f64>,
    },
}

/// Fully resolved settings of one invocation; written as `config.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: &'static str,
    pub schedule: NoiseSchedule,
    pub schedule_file: Option<PathBuf>,
    pub side: usize,
    pub levels: usize,
    pub steps: usize,
    pub samples: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub points: usize,
    pub verify: bool,
    pub guidance: f64,
    pub identical: bool,
    pub dump_grids: bool,
    pub time_adjust: bool,
    pub intensity_rescale: bool,
    pub threshold: bool,
    /// Whether any ablation flag was given.
    pub ablation_selected: bool,
    pub etas: Vec<f64>,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(msg.into())
}

fn load_schedule(kind: ScheduleKind, file: Option<&PathBuf>) -> Result<NoiseSchedule, CliError> {
    if kind != ScheduleKind::Tabulated && file.is_some() {
        return Err(invalid("--file is only used with --schedule tabulated"));
    }
    Ok(match kind {
        ScheduleKind::Natural => NoiseSchedule::natural(),
        ScheduleKind::Cosine => NoiseSchedule::cosine(),
        ScheduleKind::Linear => NoiseSchedule::linear(),
        ScheduleKind::Tabulated => {
            let path = file.ok_or_else(|| invalid("--schedule tabulated needs --file"))?;
            let table = Tabulated::from_csv_path(path)
                .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            NoiseSchedule::Tabulated(table)
        }
    })
}

impl RunConfig {
    /// Resolves defaults and validates every field; nothing is written here.
    pub fn resolve(cli: &Cli) -> Result<Self, CliError> {
        let g = &cli.global;
        if !g.side.is_power_of_two() || g.side < 2 || g.side > MAX_SIDE {
            return Err(invalid(format!(
                "--side {} must be a power of two in [2, {MAX_SIDE}]",
                g.side
            )));
        }
        let log2 = g.side.trailing_zeros() as usize;
        let schedule = load_schedule(g.schedule, g.file.as_ref())?;

        let mut cfg = RunConfig {
            command: "",
            schedule,
            schedule_file: g.file.clone(),
            side: g.side,
            levels: g.levels.unwrap_or(log2),
            steps: g.steps.unwrap_or(DEFAULT_STEPS),
            samples: g.samples.unwrap_or(1),
            seed: g.seed,
            out: g.out.clone(),
            points: g.points,
            verify: false,
            guidance: DEFAULT_GUIDANCE,
            identical: false,
            dump_grids: false,
            time_adjust: true,
            intensity_rescale: true,
            threshold: true,
            ablation_selected: false,
            etas: Vec::new(),
        };

        // Largest level count each command accepts.
        let max_levels = match &cli.command {
            Command::Chroma { verify } => {
                cfg.command = "chroma";
                cfg.verify = *verify;
                if g.points < 2 {
                    return Err(invalid("--points must be at least 2"));
                }
                16
            }
            Command::Measure { guidance, identical } => {
                cfg.command = "measure";
                if !guidance.is_finite() {
                    return Err(invalid("--guidance must be finite"));
                }
                cfg.guidance = *guidance;
                cfg.identical = *identical;
                log2
            }
            Command::Simulate { dump_grids } => {
                cfg.command = "simulate";
                cfg.dump_grids = *dump_grids;
                cfg.samples = g.samples.unwrap_or(reschroma::spectra::DEFAULT_SAMPLES);
                log2
            }
            Command::Upscale {
                no_time_adjust,
                no_intensity_rescale,
                no_threshold,
            } => {
                cfg.command = "upscale";
                cfg.time_adjust = !no_time_adjust;
                cfg.intensity_rescale = !no_intensity_rescale;
                cfg.threshold = !no_threshold;
                cfg.ablation_selected = *no_time_adjust || *no_intensity_rescale || *no_threshold;
                cfg.steps = g.steps.unwrap_or(DEFAULT_UPSCALE_STEPS);
                cfg.samples = g.samples.unwrap_or(DEFAULT_UPSCALE_SAMPLES);
                log2 + 1
            }
            Command::Compose { eta } => {
                cfg.command = "compose";
                cfg.etas = if eta.is_empty() { DEFAULT_ETAS.to_vec() } else { eta.clone() };
                if let Some(bad) = cfg.etas.iter().find(|e| !(0.0..=1.0).contains(*e)) {
                    return Err(invalid(format!("--eta {bad} is outside [0, 1]")));
                }
                log2
            }
        };
        if cfg.levels == 0 || cfg.levels > max_levels {
            return Err(invalid(format!(
                "--levels {} is outside 1..={max_levels} for {} at side {}",
                cfg.levels, cfg.command, cfg.side
            )));
        }
        if cfg.steps == 0 {
            return Err(invalid("--steps must be positive"));
        }
        if cfg.samples == 0 {
            return Err(invalid("--samples must be positive"));
        }
        Ok(cfg)
    }
}
