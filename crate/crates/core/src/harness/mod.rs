//! Experiment configuration, seeded runs, sweeps and reports.

mod report;
mod sweep;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gaidrl_nn::checkpoint::write_checkpoint;
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, UavRelayEnv};
use crate::error::{Error, Result, Violation};
use crate::plugins::stack::{compose_stack, EnhancementStack};
use crate::rl::{train_loop, Agent, EpisodeRow, EvalRow, ReplayBuffer, Schedule, Td3Config};

pub use report::{
    compare, emit_curves, episodes_to_fraction, final_window, median, moving_average, quantile, read_metrics,
    CompareReport, TimeRow, Verdict, SMOOTHING_WINDOW,
};
pub use sweep::{sweep, Executor, Manifest, ManifestEntry, MANIFEST_FILE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub td3: Td3Config,
    pub stack: EnhancementStack,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = Schedule::default();
        Self {
            env: EnvConfig::default(),
            td3: Td3Config::default(),
            stack: EnhancementStack::vanilla(),
            episodes: s.episodes,
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            eval_every: s.eval_every,
            eval_episodes: s.eval_episodes,
        }
    }
}

impl RunConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            episodes: self.episodes,
            eval_every: self.eval_every,
            eval_episodes: self.eval_episodes,
        }
    }

    /// Every invariant violation, each with a path into the document.
    pub fn violations(&self) -> Vec<Violation> {
        let mut v = self.env.violations("/env");
        v.extend(self.td3.violations("/td3"));
        v.extend(self.stack.violations("/stack", self.env.action_space, self.env.obs_dim()));
        if self.episodes == 0 {
            v.push(Violation {
                path: "/episodes".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.seeds.is_empty() {
            v.push(Violation {
                path: "/seeds".into(),
                message: "must list at least one seed".into(),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        if self.seeds.iter().any(|s| !seen.insert(*s)) {
            v.push(Violation {
                path: "/seeds".into(),
                message: "seeds must be distinct".into(),
            });
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(v))
        }
    }

    /// `output_dir`, placed under `root` when it is relative.
    pub fn resolve_output(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(r) if self.output_dir.is_relative() => r.join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

/// Parses a JSON document, fills defaults and checks every invariant.
pub fn parse_config(text: &str, origin: &Path) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        source: e,
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn validate_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    parse_config(&text, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRow {
    Episode(EpisodeRow),
    Eval(EvalRow),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub stack: String,
    pub space: String,
    pub seed: u64,
    pub episodes: usize,
    pub env_steps: usize,
    pub critic_updates: u64,
    pub actor_updates: u64,
    pub final_window_episodes: usize,
    pub final_window_reward: f64,
    pub final_window_rate: f64,
    pub final_window_power: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub episode: usize,
    pub wall_clock_s: f64,
}

/// Everything one seeded run produced.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub episodes: Vec<EpisodeRow>,
    pub evals: Vec<EvalRow>,
    pub wall_clock: Vec<f64>,
    pub summary: RunSummary,
}

impl RunRecord {
    pub fn total_wall_clock(&self) -> f64 {
        self.wall_clock.last().copied().unwrap_or(0.0)
    }

    pub fn metric_rows(&self) -> Vec<MetricRow> {
        let mut rows = Vec::with_capacity(self.episodes.len() + self.evals.len());
        let mut evals = self.evals.iter().peekable();
        for e in &self.episodes {
            rows.push(MetricRow::Episode(e.clone()));
            while evals.peek().is_some_and(|v| v.episode == e.episode) {
                rows.push(MetricRow::Eval(evals.next().expect("peeked").clone()));
            }
        }
        rows
    }
}

/// Paths of the files a seeded run writes into its directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFiles {
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub timing: PathBuf,
    pub checkpoint: PathBuf,
    pub td3: PathBuf,
}

impl RunFiles {
    pub fn new(dir: &Path, seed: u64) -> Self {
        Self {
            metrics: dir.join(format!("metrics_seed{seed}.jsonl")),
            summary: dir.join(format!("summary_seed{seed}.json")),
            timing: dir.join(format!("timing_seed{seed}.jsonl")),
            checkpoint: dir.join(format!("checkpoint_seed{seed}.bin")),
            td3: dir.join(format!("td3_seed{seed}.json")),
        }
    }
}

/// Trains one seed in memory and returns the record and the trained agent.
pub fn run_seed(cfg: &RunConfig, seed: u64) -> Result<(RunRecord, Agent)> {
    cfg.validate()?;
    let env_cfg = EnvConfig {
        seed,
        ..cfg.env.clone()
    };
    let mut env = UavRelayEnv::new(env_cfg.clone())?;
    let mut agent = compose_stack(&cfg.stack, &env_cfg, &cfg.td3, seed)?;
    let mut buffer = ReplayBuffer::new(cfg.td3.buffer_capacity, gaidrl_nn::derive_seed(seed, 99))?;
    let rec = train_loop(&mut env, &mut agent, &mut buffer, &cfg.schedule(), seed, |_, _| {})?;
    let (w, reward) = final_window(&rec.episodes.iter().map(|r| r.reward).collect::<Vec<_>>());
    let (_, rate) = final_window(&rec.episodes.iter().map(|r| r.mean_rate).collect::<Vec<_>>());
    let (_, power) = final_window(&rec.episodes.iter().map(|r| r.mean_power).collect::<Vec<_>>());
    let last = rec.episodes.last().expect("at least one episode");
    let summary = RunSummary {
        stack: cfg.stack.name(),
        space: cfg.env.action_space.name().to_string(),
        seed,
        episodes: rec.episodes.len(),
        env_steps: last.env_steps,
        critic_updates: last.critic_updates,
        actor_updates: last.actor_updates,
        final_window_episodes: w,
        final_window_reward: reward,
        final_window_rate: rate,
        final_window_power: power,
    };
    Ok((
        RunRecord {
            episodes: rec.episodes,
            evals: rec.evals,
            wall_clock: rec.wall_clock,
            summary,
        },
        agent,
    ))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, &r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Writes metrics, summary, timing sidecar, checkpoint and TD3 sidecar for
/// one finished run.
pub fn write_run(dir: &Path, record: &RunRecord, agent: &Agent) -> Result<RunFiles> {
    fs::create_dir_all(dir)?;
    let files = RunFiles::new(dir, record.summary.seed);
    write_jsonl(&files.metrics, record.metric_rows())?;
    write_json(&files.summary, &record.summary)?;
    write_jsonl(
        &files.timing,
        record.episodes.iter().zip(&record.wall_clock).map(|(e, &t)| TimingRow {
            episode: e.episode,
            wall_clock_s: t,
        }),
    )?;
    let groups = agent.checkpoint_groups();
    let refs: Vec<(&str, &gaidrl_nn::ParamSet)> = groups.iter().map(|(n, p)| (n.as_str(), *p)).collect();
    write_checkpoint(&files.checkpoint, &refs)?;
    write_json(&files.td3, agent.config())?;
    Ok(files)
}

/// Runs every seed of `cfg` sequentially into `dir`, plus the resolved
/// config as `config.json`.
pub fn run_experiment(cfg: &RunConfig, dir: &Path) -> Result<Vec<(RunRecord, RunFiles)>> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    cfg.seeds
        .iter()
        .map(|&seed| {
            let (rec, agent) = run_seed(cfg, seed)?;
            let files = write_run(dir, &rec, &agent)?;
            Ok((rec, files))
        })
        .collect()
}

pub(crate) fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}
