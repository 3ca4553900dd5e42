use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{run_seed, write_json_file, write_run, RunConfig, RunFiles};
use crate::env::ActionSpace;
use crate::error::{Error, Result, Violation};
use crate::par::map_slice;
use crate::plugins::stack::EnhancementStack;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Executor {
    /// Runs go to the rayon pool when the `parallel` feature is on.
    Parallel,
    Sequential,
}

/// One run; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stack: String,
    pub space: String,
    pub seed: u64,
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub timing: PathBuf,
    pub checkpoint: PathBuf,
    pub td3: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stacks: Vec<String>,
    pub spaces: Vec<String>,
    pub seeds: Vec<u64>,
    pub runs: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_json_file(path, self)
    }

    /// Joins manifests written under subdirectories of one root; each part
    /// pairs a manifest with its directory relative to that root.
    pub fn merge(parts: &[(PathBuf, Manifest)]) -> Manifest {
        let mut out = Manifest {
            stacks: Vec::new(),
            spaces: Vec::new(),
            seeds: Vec::new(),
            runs: Vec::new(),
        };
        for (sub, m) in parts {
            for (dst, src) in [(&mut out.stacks, &m.stacks), (&mut out.spaces, &m.spaces)] {
                for x in src {
                    if !dst.contains(x) {
                        dst.push(x.clone());
                    }
                }
            }
            for s in &m.seeds {
                if !out.seeds.contains(s) {
                    out.seeds.push(*s);
                }
            }
            for r in &m.runs {
                out.runs.push(ManifestEntry {
                    metrics: sub.join(&r.metrics),
                    summary: sub.join(&r.summary),
                    timing: sub.join(&r.timing),
                    checkpoint: sub.join(&r.checkpoint),
                    td3: sub.join(&r.td3),
                    ..r.clone()
                });
            }
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| Error::Reference(path.to_path_buf()))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

struct Job {
    config: RunConfig,
    seed: u64,
    dir: PathBuf,
}

fn relative(base: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}

/// Runs stacks x spaces x seeds, each run in its own directory
/// `dir/<space>/<stack>/`, then writes `dir/manifest.json`.
pub fn sweep(
    base: &RunConfig,
    stacks: &[String],
    spaces: &[ActionSpace],
    dir: &Path,
    executor: Executor,
) -> Result<Manifest> {
    if stacks.is_empty() || spaces.is_empty() {
        return Err(Error::Usage("sweep needs at least one stack and one space".into()));
    }
    let mut combos = Vec::new();
    let mut problems = Vec::new();
    for name in stacks {
        let flags = EnhancementStack::from_name(name)?;
        for &space in spaces {
            let mut cfg = base.clone();
            cfg.stack = base.stack.with_flags_of(&flags);
            cfg.env.action_space = space;
            let at = format!("/sweep/{}/{}", cfg.stack.name(), space);
            problems.extend(cfg.violations().into_iter().map(|v| Violation {
                path: format!("{at}{}", v.path),
                message: v.message,
            }));
            combos.push(cfg);
        }
    }
    if !problems.is_empty() {
        return Err(Error::Invalid(problems));
    }
    fs::create_dir_all(dir)?;
    let mut jobs = Vec::new();
    for cfg in &combos {
        let run_dir = dir.join(cfg.env.action_space.name()).join(cfg.stack.name());
        fs::create_dir_all(&run_dir)?;
        write_json_file(&run_dir.join("config.json"), cfg)?;
        for &seed in &cfg.seeds {
            jobs.push(Job {
                config: cfg.clone(),
                seed,
                dir: run_dir.clone(),
            });
        }
    }
    let execute = |job: &Job| -> Result<RunFiles> {
        let (rec, agent) = run_seed(&job.config, job.seed)?;
        write_run(&job.dir, &rec, &agent)
    };
    let results: Vec<Result<RunFiles>> = match executor {
        Executor::Parallel => map_slice(&jobs, execute),
        Executor::Sequential => jobs.iter().map(execute).collect(),
    };
    let mut runs = Vec::with_capacity(jobs.len());
    for (job, res) in jobs.iter().zip(results) {
        let f = res?;
        runs.push(ManifestEntry {
            stack: job.config.stack.name(),
            space: job.config.env.action_space.name().to_string(),
            seed: job.seed,
            metrics: relative(dir, &f.metrics),
            summary: relative(dir, &f.summary),
            timing: relative(dir, &f.timing),
            checkpoint: relative(dir, &f.checkpoint),
            td3: relative(dir, &f.td3),
        });
    }
    let manifest = Manifest {
        stacks: combos.iter().step_by(spaces.len()).map(|c| c.stack.name()).collect(),
        spaces: spaces.iter().map(|s| s.name().to_string()).collect(),
        seeds: base.seeds.clone(),
        runs,
    };
    write_json_file(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}
