//! Command-line driver: each subcommand resolves a [`RunConfig`], computes all
//! artifacts in memory and only then writes them, together with `config.json`,
//! into the output directory.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::ffi::OsString;

use clap::Parser;

pub use config::{Cli, Command, RunConfig};
pub use error::CliError;
use output::Staged;

/// Parses `args` (program name first), runs the command and returns the exit code.
/// Messages go to stdout; warnings and errors to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs one invocation and returns the report lines.
pub fn run(cli: &Cli) -> Result<Vec<String>, CliError> {
    let cfg = RunConfig::resolve(cli)?;
    let mut out = Staged::default();
    let mut lines = Vec::new();
    match cfg.command {
        "chroma" => {
            let r = commands::chroma(&cfg, &mut out)?;
            if let Some(d) = r.max_deviation {
                lines.push(format!(
                    "finite-difference check: max deviation {d:.3e} over {} of {} times",
                    r.checked, cfg.points
                ));
            }
        }
        "measure" => {
            let r = commands::measure(&cfg, &mut out)?;
            if r.degenerate > 0 {
                eprintln!(
                    "warning: guidance energy is zero at {} of {} times; normalization is degenerate there",
                    r.degenerate, r.total
                );
            }
            if let Some(ok) = r.ordering_matches {
                lines.push(format!("peak ordering matches theory: {ok}"));
            }
        }
        "simulate" => {
            let k = commands::simulate(&cfg, &mut out)?;
            lines.push(format!("{k} sampling intervals, {} trajectories", cfg.samples));
        }
        "upscale" => {
            for s in commands::upscale(&cfg, &mut out)? {
                let mut l = format!(
                    "{}: max per-bin deviation {:.2}% (vs model spectrum {:.2}%)",
                    s.variant,
                    100.0 * s.max_abs_deviation,
                    100.0 * s.max_abs_spectrum_deviation
                );
                if let Some(same) = s.matches_plain_ddim {
                    l.push_str(&format!("; single level, identical to plain DDIM: {same}"));
                }
                lines.push(l);
            }
        }
        "compose" => {
            for s in commands::compose(&cfg, &mut out)? {
                lines.push(format!(
                    "eta {}: identical to condition 1: {}, to condition 2: {}",
                    s.eta, s.identical_to_condition1, s.identical_to_condition2
                ));
            }
        }
        other => unreachable!("unknown command {other}"),
    }
    out.add_json("config.json", &cfg)?;
    out.commit(&cfg.out)?;
    lines.push(format!("wrote {} files to {}", out.names().count(), cfg.out.display()));
    Ok(lines)
}
