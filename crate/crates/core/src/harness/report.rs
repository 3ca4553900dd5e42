use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::sweep::Manifest;
use super::{write_json_file, MetricRow, TimingRow};
use crate::error::{Error, Result};
use crate::rl::{EpisodeRow, EvalRow};

pub const SMOOTHING_WINDOW: usize = 20;
/// Share of trailing episodes in the final window.
pub const FINAL_FRACTION: f64 = 0.1;
/// Relative band for "no significant change" comparisons.
pub const SAME_BAND: f64 = 0.05;

/// Trailing mean over up to `window` entries ending at each index.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for i in 0..xs.len() {
        sum += xs[i];
        if i >= w {
            sum -= xs[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// Linearly interpolated quantile; NaN for an empty slice.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// Size of the final window and the median over it.
pub fn final_window(xs: &[f64]) -> (usize, f64) {
    let n = ((xs.len() as f64 * FINAL_FRACTION).ceil() as usize).clamp(1, xs.len().max(1));
    (n, median(&xs[xs.len().saturating_sub(n)..]))
}

/// First episode (1-based) whose smoothed reward reaches
/// `final - (1 - fraction) * |final|`, `final` being the run's own
/// final-window reward; the episode count when never reached.
pub fn episodes_to_fraction(rewards: &[f64], fraction: f64) -> usize {
    let (_, fin) = final_window(rewards);
    let threshold = fin - (1.0 - fraction) * fin.abs();
    moving_average(rewards, SMOOTHING_WINDOW)
        .iter()
        .position(|&v| v >= threshold)
        .map_or(rewards.len(), |i| i + 1)
}

pub fn read_metrics(path: &Path) -> Result<(Vec<EpisodeRow>, Vec<EvalRow>)> {
    let f = File::open(path).map_err(|_| Error::Reference(path.to_path_buf()))?;
    let mut episodes = Vec::new();
    let mut evals = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            source: e,
        })? {
            MetricRow::Episode(e) => episodes.push(e),
            MetricRow::Eval(e) => evals.push(e),
        }
    }
    Ok((episodes, evals))
}

fn read_timing(path: &Path) -> Result<Vec<TimingRow>> {
    let f = File::open(path).map_err(|_| Error::Reference(path.to_path_buf()))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                source: e,
            })?);
        }
    }
    Ok(out)
}

type Metric = (&'static str, fn(&EpisodeRow) -> f64);

const METRICS: [Metric; 3] = [
    ("reward", |r| r.reward),
    ("rate", |r| r.mean_rate),
    ("power", |r| r.mean_power),
];

/// `reward.csv`, `rate.csv`, `power.csv` with `episode,raw,smoothed`.
pub fn emit_curves(metrics: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (rows, _) = read_metrics(metrics)?;
    if rows.is_empty() {
        return Err(Error::Usage(format!("{} holds no episode rows", metrics.display())));
    }
    fs::create_dir_all(out_dir)?;
    let mut paths = Vec::new();
    for (name, get) in METRICS {
        let raw: Vec<f64> = rows.iter().map(get).collect();
        let smooth = moving_average(&raw, SMOOTHING_WINDOW);
        let path = out_dir.join(format!("{name}.csv"));
        let mut f = BufWriter::new(File::create(&path)?);
        writeln!(f, "episode,raw,smoothed")?;
        for (r, (x, s)) in rows.iter().zip(raw.iter().zip(&smooth)) {
            writeln!(f, "{},{x},{s}", r.episode)?;
        }
        f.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub space: String,
    pub pass: bool,
    pub measured: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeRow {
    pub space: String,
    pub stack: String,
    pub median_seconds_per_episode: f64,
    pub median_total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub space: String,
    pub stack: String,
    pub seeds: Vec<u64>,
    pub final_window: Vec<f64>,
    pub episodes_to_90: Vec<usize>,
    pub seconds_per_episode: Vec<f64>,
}

impl GroupStats {
    pub fn median_final(&self) -> f64 {
        median(&self.final_window)
    }

    pub fn median_episodes_to_90(&self) -> f64 {
        median(&self.episodes_to_90.iter().map(|&e| e as f64).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub groups: Vec<GroupStats>,
    pub times: Vec<TimeRow>,
    pub verdicts: Vec<Verdict>,
    pub curves: Vec<PathBuf>,
}

impl CompareReport {
    pub fn group(&self, space: &str, stack: &str) -> Option<&GroupStats> {
        self.groups.iter().find(|g| g.space == space && g.stack == stack)
    }

    pub fn verdict(&self, name: &str, space: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name && v.space == space)
    }
}

fn write_bundle(path: &Path, series: &[Vec<f64>]) -> Result<()> {
    let len = series.iter().map(Vec::len).min().unwrap_or(0);
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "episode,median,q25,q75,iqr")?;
    for i in 0..len {
        let col: Vec<f64> = series.iter().map(|s| s[i]).collect();
        let (q1, q3) = (quantile(&col, 0.25), quantile(&col, 0.75));
        writeln!(f, "{},{},{q1},{q3},{}", i + 1, median(&col), q3 - q1)?;
    }
    f.flush()?;
    Ok(())
}

fn verdict(name: &str, space: &str, pass: bool, measured: &[(&str, f64)]) -> Verdict {
    Verdict {
        name: name.into(),
        space: space.into(),
        pass,
        measured: measured.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

/// Evaluates every ordering hypothesis whose stacks are present.
fn verdicts(groups: &[GroupStats], spaces: &[String]) -> Vec<Verdict> {
    let find = |space: &str, stack: &str| groups.iter().find(|g| g.space == space && g.stack == stack);
    let mut out = Vec::new();
    let mut gdm_vs_vanilla = Vec::new();
    for space in spaces {
        if let (Some(v), Some(g)) = (find(space, "vanilla"), find(space, "gdm")) {
            let (a, b) = (g.median_final(), v.median_final());
            gdm_vs_vanilla.push((a, b));
            out.push(verdict("gdm>=vanilla", space, a >= b, &[("gdm", a), ("vanilla", b)]));
        }
        if let (Some(v), Some(g)) = (find(space, "vanilla"), find(space, "gan")) {
            let (a, b) = (g.median_episodes_to_90(), v.median_episodes_to_90());
            out.push(verdict("gan-converges-no-slower", space, a <= b, &[("gan", a), ("vanilla", b)]));
        }
        if let (Some(g), Some(gg)) = (find(space, "gdm"), find(space, "gdm-gan")) {
            let (a, b) = (gg.median_final(), g.median_final());
            out.push(verdict("gdm-gan>=gdm", space, a >= b, &[("gdm-gan", a), ("gdm", b)]));
        }
        if let (Some(gg), Some(t)) = (find(space, "gdm-gan"), find(space, "gdm-gan-transformer")) {
            let (a, b) = (t.median_final(), gg.median_final());
            out.push(verdict(
                "gdm-gan-transformer~gdm-gan",
                space,
                (a - b).abs() <= SAME_BAND * b.abs(),
                &[("gdm-gan-transformer", a), ("gdm-gan", b)],
            ));
        }
        if let (Some(t), Some(tv)) = (find(space, "gdm-gan-transformer"), find(space, "gdm-gan-transformer-vae")) {
            let (a, b) = (tv.median_final(), t.median_final());
            out.push(verdict(
                "gdm-gan-transformer-vae<=gdm-gan-transformer",
                space,
                a <= b,
                &[("gdm-gan-transformer-vae", a), ("gdm-gan-transformer", b)],
            ));
        }
        if let (Some(v), Some(g), Some(gg)) = (find(space, "vanilla"), find(space, "gdm"), find(space, "gdm-gan")) {
            let mut ok = true;
            let mut worst = f64::INFINITY;
            let mut compared = 0.0;
            for (i, seed) in v.seeds.iter().enumerate() {
                let pick = |s: &GroupStats| s.seeds.iter().position(|x| x == seed).map(|j| s.seconds_per_episode[j]);
                if let (Some(b), Some(c)) = (pick(g), pick(gg)) {
                    let a = v.seconds_per_episode[i];
                    ok &= a < b && b < c;
                    worst = worst.min((b - a).min(c - b));
                    compared += 1.0;
                }
            }
            out.push(verdict(
                "time:vanilla<gdm<gdm-gan",
                space,
                ok && compared > 0.0,
                &[("seeds", compared), ("smallest_gap_s", worst)],
            ));
        }
    }
    if !gdm_vs_vanilla.is_empty() {
        let n = gdm_vs_vanilla.len();
        let strict = gdm_vs_vanilla.iter().filter(|(a, b)| a > b).count();
        let all = gdm_vs_vanilla.iter().all(|(a, b)| a >= b);
        out.push(verdict(
            "gdm>=vanilla-everywhere,strict-in-two",
            "all",
            all && strict >= n.min(2),
            &[("spaces", n as f64), ("strictly_better", strict as f64)],
        ));
    }
    out
}

/// Reads every run of a manifest (never writing to them) and writes curve
/// bundles, a training-time table and the verdicts under `out_dir`.
pub fn compare(manifest_path: &Path, out_dir: &Path) -> Result<CompareReport> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    for r in &manifest.runs {
        for p in [&r.metrics, &r.timing] {
            let full = base.join(p);
            if !full.is_file() {
                return Err(Error::Reference(full));
            }
        }
    }
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in &manifest.runs {
        let k = (r.space.clone(), r.stack.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut groups = Vec::new();
    let mut curves = Vec::new();
    let mut times = Vec::new();
    for (space, stack) in &keys {
        let runs: Vec<_> = manifest.runs.iter().filter(|r| &r.space == space && &r.stack == stack).collect();
        let mut per_metric: Vec<Vec<Vec<f64>>> = vec![Vec::new(); METRICS.len()];
        let mut stats = GroupStats {
            space: space.clone(),
            stack: stack.clone(),
            seeds: Vec::new(),
            final_window: Vec::new(),
            episodes_to_90: Vec::new(),
            seconds_per_episode: Vec::new(),
        };
        let mut totals = Vec::new();
        for r in runs {
            let (rows, _) = read_metrics(&base.join(&r.metrics))?;
            let timing = read_timing(&base.join(&r.timing))?;
            if rows.is_empty() {
                return Err(Error::Reference(base.join(&r.metrics)));
            }
            for (m, (_, get)) in METRICS.iter().enumerate() {
                let raw: Vec<f64> = rows.iter().map(get).collect();
                per_metric[m].push(moving_average(&raw, SMOOTHING_WINDOW));
            }
            let rewards: Vec<f64> = rows.iter().map(|r| r.reward).collect();
            let total = timing.last().map_or(0.0, |t| t.wall_clock_s);
            stats.seeds.push(r.seed);
            stats.final_window.push(final_window(&rewards).1);
            stats.episodes_to_90.push(episodes_to_fraction(&rewards, 0.9));
            stats.seconds_per_episode.push(total / rows.len() as f64);
            totals.push(total);
        }
        let dir = out_dir.join(space);
        fs::create_dir_all(&dir)?;
        for (m, (name, _)) in METRICS.iter().enumerate() {
            let path = dir.join(format!("{stack}_{name}.csv"));
            write_bundle(&path, &per_metric[m])?;
            curves.push(path);
        }
        times.push(TimeRow {
            space: space.clone(),
            stack: stack.clone(),
            median_seconds_per_episode: median(&stats.seconds_per_episode),
            median_total_seconds: median(&totals),
        });
        groups.push(stats);
    }
    let verdicts = verdicts(&groups, &manifest.spaces);
    fs::create_dir_all(out_dir)?;
    let mut f = BufWriter::new(File::create(out_dir.join("training_time.csv"))?);
    writeln!(f, "space,stack,median_seconds_per_episode,median_total_seconds")?;
    for t in &times {
        writeln!(
            f,
            "{},{},{},{}",
            t.space, t.stack, t.median_seconds_per_episode, t.median_total_seconds
        )?;
    }
    f.flush()?;
    let mut f = BufWriter::new(File::create(out_dir.join("final_window.csv"))?);
    writeln!(f, "space,stack,median_final_window_reward,median_episodes_to_90")?;
    for g in &groups {
        writeln!(
            f,
            "{},{},{},{}",
            g.space,
            g.stack,
            g.median_final(),
            g.median_episodes_to_90()
        )?;
    }
    f.flush()?;
    write_json_file(&out_dir.join("verdicts.json"), &verdicts)?;
    Ok(CompareReport {
        groups,
        times,
        verdicts,
        curves,
    })
}
