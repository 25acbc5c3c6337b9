//! Command-line entry points.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid config or arguments.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use super::checkpoint::{Checkpoint, MANIFEST, TENSORS};
use super::config::{parse_plan, RunConfig};
use super::sweep::{parse_grid, run_sweep};
use super::train::run_training;
use crate::diagnostics::compute_cost;
use crate::error::{Error, Result};
use crate::expansion::expand_model;
use crate::optim::expand_states;

#[derive(Parser, Debug)]
#[command(name = "widegrow", about = "Width expansion experiments for small MoE transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from a config file.
    Train {
        config: PathBuf,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Expand a checkpoint with a plan file.
    Expand {
        checkpoint: PathBuf,
        plan: PathBuf,
        out: PathBuf,
        /// Overrides the plan's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every cell of a grid on top of a base config.
    Sweep {
        config: PathBuf,
        grid: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Training compute with and without a small-model phase.
    Cost {
        n_small: f64,
        n_large: f64,
        tokens: f64,
        expansion_tokens: f64,
    },
    /// Validate a checkpoint directory.
    Check { checkpoint: PathBuf },
}

fn load_config(path: &PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    Ok(cfg)
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train { config, seed, out: dir } => {
            let cfg = load_config(&config, seed, dir)?;
            let res = run_training(&cfg)?;
            let s = &res.summary;
            writeln!(
                out,
                "trained {} steps; final eval loss {}; outputs in {}",
                s.steps_completed,
                s.final_eval_loss.map_or_else(|| "n/a".into(), |l| format!("{l:.6}")),
                cfg.output_dir.display()
            )?;
        }
        Command::Expand {
            checkpoint,
            plan,
            out: dir,
            seed,
        } => {
            let mut plan = parse_plan(&std::fs::read_to_string(&plan)?)?;
            if let Some(s) = seed {
                plan.seed = s;
            }
            let ck = Checkpoint::load(&checkpoint)?;
            let (model, regions) = expand_model(&ck.model, &plan)?;
            let optimizer = match &ck.optimizer {
                Some(st) => Some(expand_states(st, &regions, plan.state_policy)?),
                None => None,
            };
            let before = ck.model.parameter_count();
            let grown = Checkpoint {
                step: ck.step,
                config_text: ck.config_text,
                model,
                regions,
                optimizer,
            };
            grown.save(&dir)?;
            writeln!(
                out,
                "expanded {before} -> {} parameters; written to {}",
                grown.model.parameter_count(),
                dir.display()
            )?;
        }
        Command::Sweep {
            config,
            grid,
            seed,
            out: dir,
        } => {
            let cfg = load_config(&config, seed, dir)?;
            let axes = parse_grid(&std::fs::read_to_string(&grid)?)?;
            let rows = run_sweep(&cfg, &axes)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            writeln!(
                out,
                "{} cells ({failed} failed); results in {}",
                rows.len(),
                cfg.output_dir.join("sweep.csv").display()
            )?;
        }
        Command::Cost {
            n_small,
            n_large,
            tokens,
            expansion_tokens,
        } => {
            let r = compute_cost(n_small, n_large, tokens, expansion_tokens)?;
            writeln!(
                out,
                "c_scratch={:.3e} c_star={:.3e} saved={:.1}%",
                r.c_scratch,
                r.c_star,
                100.0 * r.flops_saved
            )?;
        }
        Command::Check { checkpoint } => {
            let ck = Checkpoint::load(&checkpoint)?;
            if !ck.model.params().is_finite() {
                return Err(Error::Numeric("checkpoint holds non-finite parameters".into()));
            }
            let (manifest, blob) = ck.encode()?;
            let on_disk = std::fs::read(checkpoint.join(TENSORS))?;
            let manifest_disk = std::fs::read_to_string(checkpoint.join(MANIFEST))?;
            if blob != on_disk || manifest != manifest_disk {
                return Err(Error::Format("checkpoint does not re-encode to identical bytes".into()));
            }
            writeln!(
                out,
                "ok: step {}, {} parameters, {} tensors, optimizer {}",
                ck.step,
                ck.model.parameter_count(),
                ck.model.params().len(),
                ck.optimizer.as_ref().map_or("none".into(), |o| o.kind().to_string())
            )?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Config(_) | Error::ConfigField { .. } => 2,
                _ => 1,
            }
        }
    }
}
