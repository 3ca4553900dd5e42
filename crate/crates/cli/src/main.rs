use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gaidrl_core::env::ActionSpace;
use gaidrl_core::harness::{compare, emit_curves, run_experiment, sweep, validate_config, Executor};
use gaidrl_core::oracle::{build_tabular_mdp, greedy_rollout, value_iteration};
use gaidrl_core::Error;

#[derive(Parser)]
#[command(name = "gaidrl", version, about = "TD3 with generative enhancements on a UAV relay task")]
struct Cli {
    /// Root for relative output directories.
    #[arg(long, env = "GAIDRL_OUTPUT_ROOT", global = true)]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a run config, apply defaults and report every violation.
    Validate { config: PathBuf },
    /// Train every seed of a config and write metrics, summaries and checkpoints.
    Run { config: PathBuf },
    /// Run the stacks x spaces x seeds matrix and write a manifest.
    Sweep {
        config: PathBuf,
        /// Comma-separated stack names, e.g. vanilla,gdm,gdm-gan.
        #[arg(long, value_delimiter = ',', required = true)]
        stacks: Vec<String>,
        /// Comma-separated action spaces.
        #[arg(long, value_delimiter = ',', default_value = "continuous,discrete,hybrid")]
        spaces: Vec<String>,
        /// One run at a time.
        #[arg(long)]
        sequential: bool,
    },
    /// Curve bundles, training-time table and ordering verdicts for a manifest.
    Compare {
        manifest: PathBuf,
        /// Report directory; defaults to `report/` next to the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit with status 1 when any verdict fails.
        #[arg(long)]
        strict: bool,
    },
    /// Per-metric CSV curves (episode, raw, smoothed) for one metrics file.
    Curves {
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact value iteration on a tabular config; writes the value table CSV.
    Oracle {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn report(e: &Error) -> ExitCode {
    match e {
        Error::Invalid(list) => {
            eprintln!("invalid configuration:");
            for v in list {
                eprintln!("  {v}");
            }
        }
        other => eprintln!("error: {other}"),
    }
    match e {
        Error::Invalid(_) | Error::Config(_) | Error::Parse { .. } => ExitCode::from(2),
        Error::Io(_) | Error::Reference(_) => ExitCode::from(3),
        _ => ExitCode::FAILURE,
    }
}

fn default_sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn execute(cli: Cli) -> Result<bool, Error> {
    let root = cli.output_root.as_deref();
    match cli.command {
        Command::Validate { config } => {
            let cfg = validate_config(&config)?;
            println!(
                "valid: stack {} in the {} space, {} episodes, seeds {:?}",
                cfg.stack.name(),
                cfg.env.action_space,
                cfg.episodes,
                cfg.seeds
            );
        }
        Command::Run { config } => {
            let cfg = validate_config(&config)?;
            let dir = cfg.resolve_output(root);
            for (rec, files) in run_experiment(&cfg, &dir)? {
                println!(
                    "seed {}: final-window reward {:.4}, {:.1}s -> {}",
                    rec.summary.seed,
                    rec.summary.final_window_reward,
                    rec.total_wall_clock(),
                    files.metrics.display()
                );
            }
        }
        Command::Sweep {
            config,
            stacks,
            spaces,
            sequential,
        } => {
            let cfg = validate_config(&config)?;
            let spaces = spaces.iter().map(|s| ActionSpace::parse(s)).collect::<Result<Vec<_>, _>>()?;
            let dir = cfg.resolve_output(root);
            let exec = if sequential {
                Executor::Sequential
            } else {
                Executor::Parallel
            };
            let m = sweep(&cfg, &stacks, &spaces, &dir, exec)?;
            println!("{} runs -> {}", m.runs.len(), dir.join(gaidrl_core::harness::MANIFEST_FILE).display());
        }
        Command::Compare { manifest, out, strict } => {
            let out = out.unwrap_or_else(|| default_sibling(&manifest, "report"));
            let rep = compare(&manifest, &out)?;
            println!("{:<12} {:<28} {:>12} {:>12}", "space", "stack", "s/episode", "final");
            for (t, g) in rep.times.iter().zip(&rep.groups) {
                println!(
                    "{:<12} {:<28} {:>12.4} {:>12.4}",
                    t.space,
                    t.stack,
                    t.median_seconds_per_episode,
                    g.median_final()
                );
            }
            let mut all = true;
            for v in &rep.verdicts {
                all &= v.pass;
                let measured: Vec<String> = v.measured.iter().map(|(k, x)| format!("{k}={x:.4}")).collect();
                println!(
                    "[{}] {} ({}): {}",
                    if v.pass { "PASS" } else { "FAIL" },
                    v.name,
                    v.space,
                    measured.join(", ")
                );
            }
            println!("report -> {}", out.display());
            return Ok(all || !strict);
        }
        Command::Curves { metrics, out } => {
            let out = out.unwrap_or_else(|| {
                let stem = metrics.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                default_sibling(&metrics, &format!("{stem}_curves"))
            });
            for p in emit_curves(&metrics, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Oracle { config, out } => {
            let cfg = validate_config(&config)?;
            let mdp = build_tabular_mdp(&cfg.env)?;
            let table = value_iteration(&mdp);
            let optimum = table.value(mdp.start, mdp.horizon);
            let rollout = greedy_rollout(&cfg.env, &mdp, &table)?;
            let out = match out {
                Some(p) => p,
                None => cfg.resolve_output(root).join("value_table.csv"),
            };
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            table.write_csv(&out)?;
            println!(
                "{} cells x {} actions, horizon {}: optimum {optimum:.6}, greedy rollout {rollout:.6}, bellman residual {:.1e}",
                mdp.cells(),
                mdp.actions,
                mdp.horizon,
                table.bellman_residual(&mdp)
            );
            println!("value table -> {}", out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => report(&e),
    }
}
