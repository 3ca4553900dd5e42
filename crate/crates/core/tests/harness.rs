use std::fs;
use std::path::{Path, PathBuf};

use gaidrl_core::env::{ActionSpace, EnvConfig};
use gaidrl_core::harness::{
    compare, emit_curves, parse_config, read_metrics, run_experiment, sweep, Executor, Manifest, RunConfig,
    MANIFEST_FILE,
};
use gaidrl_core::rl::Td3Config;
use gaidrl_core::Error;

fn quick(episodes: usize, seeds: Vec<u64>) -> RunConfig {
    RunConfig {
        env: EnvConfig {
            antennas: 8,
            horizon: 10,
            ..EnvConfig::default()
        },
        td3: Td3Config {
            hidden: vec![16, 16],
            batch_size: 16,
            warmup_steps: 30,
            ..Td3Config::default()
        },
        episodes,
        seeds,
        eval_every: 2,
        eval_episodes: 1,
        ..RunConfig::default()
    }
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.file_name().unwrap().to_string_lossy().starts_with("timing_") {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn empty_document_gives_defaults() {
    assert_eq!(parse_config("{}", Path::new("x.json")).unwrap(), RunConfig::default());
    assert!(matches!(parse_config("{\"bogus\": 1}", Path::new("x.json")), Err(Error::Parse { .. })));
}

#[test]
fn every_violation_is_listed_with_its_path() {
    let text = r#"{"stack": {"gdm_policy": true, "transformer_actor": true, "vae_hybrid_action": true},
                   "episodes": 0, "seeds": [1, 1]}"#;
    match parse_config(text, Path::new("c.json")) {
        Err(Error::Invalid(v)) => {
            let paths: Vec<_> = v.iter().map(|x| x.path.as_str()).collect();
            for want in ["/stack/transformer_actor", "/stack/vae_hybrid_action", "/episodes", "/seeds"] {
                assert!(paths.contains(&want), "{want} missing from {paths:?}");
            }
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn experiment_writes_files_per_seed_and_reproduces_them() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = quick(3, vec![4, 7]);
    let out = run_experiment(&cfg, a.path()).unwrap();
    assert_eq!(out.len(), 2);
    for (rec, files) in &out {
        for p in [&files.metrics, &files.summary, &files.timing, &files.checkpoint, &files.td3] {
            assert!(p.is_file(), "{}", p.display());
        }
        assert_eq!(rec.summary.env_steps, 30);
        assert!(rec.wall_clock.windows(2).all(|w| w[0] <= w[1]));
        let (eps, evals) = read_metrics(&files.metrics).unwrap();
        assert_eq!(eps, rec.episodes);
        assert_eq!(evals, rec.evals);
    }
    run_experiment(&cfg, b.path()).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), 1 + 2 * 4);
    assert_eq!(ta, tb);
}

#[test]
fn sweep_manifest_is_complete_and_executor_independent() {
    let stacks: Vec<String> = vec!["vanilla".into(), "gdm".into()];
    let cfg = quick(2, vec![0, 1, 2, 3, 4]);
    let par = tempfile::tempdir().unwrap();
    let seq = tempfile::tempdir().unwrap();
    let m = sweep(&cfg, &stacks, &ActionSpace::ALL, par.path(), Executor::Parallel).unwrap();
    assert_eq!(m.runs.len(), 30);
    assert_eq!(Manifest::read(&par.path().join(MANIFEST_FILE)).unwrap(), m);
    for r in &m.runs {
        for p in [&r.metrics, &r.summary, &r.timing, &r.checkpoint, &r.td3] {
            assert!(par.path().join(p).is_file());
        }
    }
    let m2 = sweep(&cfg, &stacks, &ActionSpace::ALL, seq.path(), Executor::Sequential).unwrap();
    assert_eq!(m, m2);
    assert_eq!(tree(par.path()), tree(seq.path()));
}

#[test]
fn sweep_rejects_invalid_combinations_up_front() {
    let dir = tempfile::tempdir().unwrap();
    let stacks = vec!["latent".to_string()];
    match sweep(&quick(2, vec![0]), &stacks, &ActionSpace::ALL, &dir.path().join("s"), Executor::Sequential) {
        Err(Error::Invalid(v)) => {
            assert_eq!(v.len(), 2);
            assert!(v[0].path.starts_with("/sweep/latent/"));
        }
        other => panic!("{other:?}"),
    }
    assert!(!dir.path().join("s").exists());
}

#[test]
fn compare_of_identical_runs_has_no_spread() {
    let dir = tempfile::tempdir().unwrap();
    let stacks = vec!["vanilla".to_string()];
    let mut m = sweep(&quick(4, vec![0]), &stacks, &[ActionSpace::Continuous], dir.path(), Executor::Sequential).unwrap();
    let one = m.runs[0].clone();
    m.runs = (0..5).map(|seed| gaidrl_core::harness::ManifestEntry { seed, ..one.clone() }).collect();
    let path = dir.path().join("copies.json");
    m.write(&path).unwrap();
    let before = tree(dir.path());
    let report = compare(&path, &dir.path().join("report")).unwrap();
    let after: Vec<_> = tree(dir.path()).into_iter().filter(|(p, _)| !p.starts_with("report")).collect();
    assert_eq!(before, after);
    let g = report.group("continuous", "vanilla").unwrap();
    assert!(g.final_window.windows(2).all(|w| w[0] == w[1]));
    let bundle = fs::read_to_string(dir.path().join("report/continuous/vanilla_reward.csv")).unwrap();
    let mut lines = bundle.lines();
    assert_eq!(lines.next().unwrap(), "episode,median,q25,q75,iqr");
    for l in lines {
        assert_eq!(l.rsplit(',').next().unwrap().parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn compare_reports_missing_runs() {
    let dir = tempfile::tempdir().unwrap();
    let stacks = vec!["vanilla".to_string()];
    let m = sweep(&quick(2, vec![0]), &stacks, &[ActionSpace::Discrete], dir.path(), Executor::Sequential).unwrap();
    fs::remove_file(dir.path().join(&m.runs[0].metrics)).unwrap();
    let out = compare(&dir.path().join(MANIFEST_FILE), &dir.path().join("r"));
    assert!(matches!(out, Err(Error::Reference(_))));
    assert!(matches!(compare(&dir.path().join("nope.json"), dir.path()), Err(Error::Reference(_))));
}

#[test]
fn curves_are_smoothed_and_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&quick(100, vec![3]), &dir.path().join("run")).unwrap();
    let metrics = &out[0].1.metrics;
    let cd = dir.path().join("curves");
    let paths = emit_curves(metrics, &cd).unwrap();
    assert_eq!(paths.len(), 3);
    let first: Vec<Vec<u8>> = paths.iter().map(|p| fs::read(p).unwrap()).collect();
    for p in &paths {
        let text = fs::read_to_string(p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 101);
        assert_eq!(lines[0], "episode,raw,smoothed");
        let row: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(row[1], row[2]);
    }
    let again = emit_curves(metrics, &cd).unwrap();
    assert_eq!(again, paths);
    assert_eq!(first, paths.iter().map(|p| fs::read(p).unwrap()).collect::<Vec<_>>());
}
