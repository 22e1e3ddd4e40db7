//! Command-line shell: train / eval / sweep / modes / inspect.
//!
//! Exit codes: 0 on success, 1 on runtime errors, 2 on usage errors.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::checkpoint;
use crate::config::Config;
use crate::env::{self, MismatchSpec};
use crate::eval::{self, EvalContext, SweepKind};
use crate::learn::{self, derive_seed};

#[derive(Parser)]
#[command(
    name = "pushrec",
    about = "Planar push-recovery RL: transformer policy with latent recovery modes",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy with PPO.
    Train {
        /// Config file (INI); missing keys fall back to defaults.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for config echo, metrics, and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's run.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run evaluation episodes against a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Fixed push force (N); defaults to the config's mismatch force.
        #[arg(long)]
        force: Option<f64>,
        /// Add a wall at this x-position (m).
        #[arg(long)]
        wall: Option<f64>,
        /// Apply a dynamics mismatch: nominal|friction|latency|mass|compound.
        #[arg(long)]
        mismatch: Option<String>,
        /// Write a per-step CSV trace of the first episode.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Sample actions instead of using the deterministic mean.
        #[arg(long)]
        sample: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a sweep and write its CSV table.
    Sweep {
        /// force | wall | mismatch
        kind: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Episodes per sweep cell (default from the config).
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export per-episode mode vectors across the force grid.
    Modes {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 300)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the tensor census and config echo of a checkpoint.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

/// Parse arguments and dispatch; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(msg) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), String> {
    match cmd {
        Command::Train { config, out, seed } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| format!("cannot read {}: {e}", config.display()))?;
            let mut cfg = Config::parse(&text).map_err(|e| e.to_string())?;
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            cfg.run.out_dir = out.display().to_string();
            let report = learn::train(&cfg, &out).map_err(|e| e.to_string())?;
            println!(
                "trained {} updates / {} steps; final mean return {:.1}; checkpoint {}",
                report.updates,
                report.global_steps,
                report.final_mean_return,
                report.checkpoint_path.display()
            );
            Ok(())
        }
        Command::Eval {
            ckpt,
            episodes,
            force,
            wall,
            mismatch,
            trace,
            sample,
            seed,
        } => {
            let state = checkpoint::load(&ckpt).map_err(|e| e.to_string())?;
            let default_force = state.config.eval.mismatch_force;
            let mut ctx = load_context(&ckpt)?;
            ctx.deterministic = !sample;
            if let Some(spec) = &mismatch {
                let spec: MismatchSpec = spec.parse().map_err(|e: env::EnvError| e.to_string())?;
                ctx.env_params = env::apply_mismatch(&ctx.env_params, spec);
            }
            if let Some(x) = wall {
                ctx.env_params.wall_present = true;
                ctx.env_params.wall_x = x;
            }
            let force = force.unwrap_or(default_force);

            let mut results = Vec::with_capacity(episodes);
            for i in 0..episodes {
                let ep_seed = derive_seed(seed, i as u64);
                use rand_chacha::rand_core::SeedableRng;
                let mut rng =
                    rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(ep_seed, 0x9999));
                let push = env::sample_push_with_force(&mut rng, &ctx.env_params, force, true);
                if i == 0 {
                    if let Some(path) = &trace {
                        let mut rows = Vec::new();
                        let r = eval::run_episode_traced(&ctx, push, ep_seed, &mut rows);
                        write_trace(path, &rows).map_err(|e| e.to_string())?;
                        results.push(r);
                        continue;
                    }
                }
                results.push(eval::run_episode(&ctx, push, ep_seed));
            }
            let rate = eval::rsr(&results).map_err(|e| e.to_string())?;
            let mean_peak =
                results.iter().map(|r| r.peak_tilt).sum::<f64>() / results.len() as f64;
            println!(
                "episodes {episodes} force {force} N: RSR {rate:.3}, mean peak tilt {mean_peak:.3} rad"
            );
            Ok(())
        }
        Command::Sweep {
            kind,
            ckpt,
            out,
            episodes,
            seed,
        } => {
            let kind: SweepKind = kind.parse().map_err(|e: eval::EvalError| e.to_string())?;
            let ctx = load_context(&ckpt)?;
            let state = checkpoint::load(&ckpt).map_err(|e| e.to_string())?;
            let eval_cfg = &state.config.eval;
            let n = episodes.unwrap_or(eval_cfg.episodes_per_cell);
            let table = match kind {
                SweepKind::Force => eval::force_sweep(&ctx, &eval_cfg.force_grid, n, seed),
                SweepKind::Wall => eval::wall_sweep(
                    &ctx,
                    &eval_cfg.wall_distances,
                    eval_cfg.wall_force,
                    n,
                    seed,
                ),
                SweepKind::Mismatch => {
                    eval::mismatch_sweep(&ctx, eval_cfg.mismatch_force, n, seed)
                }
            }
            .map_err(|e| e.to_string())?;
            std::fs::write(&out, table.to_csv()).map_err(|e| e.to_string())?;
            println!("wrote {} rows to {}", table.rows.len(), out.display());
            Ok(())
        }
        Command::Modes {
            ckpt,
            episodes,
            out,
            seed,
        } => {
            let ctx = load_context(&ckpt)?;
            let state = checkpoint::load(&ckpt).map_err(|e| e.to_string())?;
            let grid = &state.config.eval.force_grid;
            if episodes % grid.len() != 0 {
                return Err(format!(
                    "episodes {} must be a multiple of the force-grid size {}",
                    episodes,
                    grid.len()
                ));
            }
            let per_level = episodes / grid.len();
            let rows = eval::export_modes(&ctx, grid, per_level, seed).map_err(|e| e.to_string())?;
            let mut csv = eval::modes_csv_header(ctx.params.cfg.modes);
            csv.push('\n');
            for row in &rows {
                csv.push_str(&row.to_csv());
                csv.push('\n');
            }
            std::fs::write(&out, csv).map_err(|e| e.to_string())?;
            println!("wrote {} rows to {}", rows.len(), out.display());
            Ok(())
        }
        Command::Inspect { ckpt } => {
            let insp = checkpoint::inspect(&ckpt).map_err(|e| e.to_string())?;
            println!(
                "version {} | step {} | update {} | tau {} | seed {}",
                insp.version, insp.global_step, insp.update, insp.tau, insp.seed
            );
            println!("tensor census:");
            let mut total = 0usize;
            for (name, rows, cols) in &insp.tensors {
                println!("  {name:<24} [{rows} x {cols}] = {}", rows * cols);
                total += rows * cols;
            }
            println!("total parameters (incl. normalizer): {total}");
            println!("\nconfig echo:\n{}", insp.config_echo);
            Ok(())
        }
    }
}

fn load_context(ckpt: &Path) -> Result<EvalContext, String> {
    let state = checkpoint::load(ckpt).map_err(|e| e.to_string())?;
    let mut ctx = EvalContext::new(
        state.params,
        state.norm,
        state.config.env.clone(),
        state.config.reward.clone(),
        state.tau,
    );
    ctx.deterministic = state.config.eval.deterministic;
    ctx.hard_modes = state.config.eval.hard_modes;
    Ok(ctx)
}

fn write_trace(path: &Path, rows: &[eval::TraceRow]) -> std::io::Result<()> {
    let mut s = String::from(eval::TRACE_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    std::fs::write(path, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_usage_error() {
        let code = run(["pushrec", "train", "--bogus", "x"]);
        assert_eq!(code, 2);
    }

    #[test]
    fn help_exits_zero() {
        let code = run(["pushrec", "--help"]);
        assert_eq!(code, 0);
    }

    #[test]
    fn missing_checkpoint_is_runtime_error() {
        let code = run(["pushrec", "inspect", "--ckpt", "/nonexistent/x.rcvf"]);
        assert_eq!(code, 1);
    }
}
