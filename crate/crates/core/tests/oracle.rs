use gaidrl_core::env::{table_entry, Action, ActionSpace, EnvConfig, UavRelayEnv};
use gaidrl_core::oracle::{build_tabular_mdp, exhaustive_one_step, greedy_rollout, value_iteration};
use proptest::prelude::*;

fn tiny() -> EnvConfig {
    EnvConfig {
        antennas: 8,
        action_space: ActionSpace::Discrete,
        power_levels: 2,
        grid_cells: Some(3),
        horizon: 10,
        user_position: Some([90.0, 60.0]),
        ..EnvConfig::default()
    }
}

/// Best return over every action sequence, by exhaustive search on env clones.
fn brute_force(env: &UavRelayEnv, actions: usize) -> f64 {
    if env.is_done() {
        return 0.0;
    }
    (0..actions)
        .map(|a| {
            let mut e = env.clone();
            let r = e.step(&Action::Discrete { index: a }).unwrap().reward;
            r + brute_force(&e, actions)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn value_iteration_matches_exhaustive_search() {
    let cfg = EnvConfig { horizon: 3, ..tiny() };
    let mdp = build_tabular_mdp(&cfg).unwrap();
    let v = value_iteration(&mdp);
    let env = UavRelayEnv::new(cfg.clone()).unwrap();
    let best = brute_force(&env, mdp.actions);
    let exact = v.value(mdp.start, 3);
    assert!((best - exact).abs() <= 1e-9 * best.abs().max(1.0), "{best} vs {exact}");
}

#[test]
fn greedy_rollout_attains_the_optimum() {
    let cfg = tiny();
    let mdp = build_tabular_mdp(&cfg).unwrap();
    let v = value_iteration(&mdp);
    assert!(v.bellman_residual(&mdp) <= 1e-9);
    let ret = greedy_rollout(&cfg, &mdp, &v).unwrap();
    assert!((ret - v.value(mdp.start, cfg.horizon)).abs() <= 1e-9);
}

#[test]
fn mdp_rewards_match_environment_steps() {
    let cfg = tiny();
    let mdp = build_tabular_mdp(&cfg).unwrap();
    let mut env = UavRelayEnv::new(cfg).unwrap();
    // every cell of a 3x3 lattice is within two moves of the center
    for first in 0..mdp.actions {
        for second in 0..mdp.actions {
            env.reset(0).unwrap();
            let mut s = mdp.start;
            for a in [first, second] {
                let r = env.step(&Action::Discrete { index: a }).unwrap().reward;
                assert_eq!(r, mdp.reward(s, a));
                s = mdp.successor(s, a);
                assert_eq!(s, mdp.cell_index(env.state().cell.unwrap()));
            }
        }
    }
}

#[test]
fn free_power_means_full_power() {
    let cfg = EnvConfig { w_power: 0.0, ..tiny() };
    let mdp = build_tabular_mdp(&cfg).unwrap();
    let v = value_iteration(&mdp);
    for s in 0..mdp.cells() {
        for rem in 1..=cfg.horizon {
            // the decode-and-forward rate can saturate, so lower levels may tie
            let (mv, _, _) = table_entry(cfg.power_levels, v.greedy_action(s, rem).unwrap()).unwrap();
            let l = cfg.power_levels;
            let full = mv.index() * l * l + l * l - 1;
            let q = mdp.reward(s, full) + v.value(mdp.successor(s, full), rem - 1);
            assert!((q - v.value(s, rem)).abs() <= 1e-12);
        }
    }
}

#[test]
fn heavy_penalty_avoids_the_boundary() {
    let cfg = EnvConfig { penalty: 1e6, ..tiny() };
    let mdp = build_tabular_mdp(&cfg).unwrap();
    let v = value_iteration(&mdp);
    let mut env = UavRelayEnv::new(cfg.clone()).unwrap();
    let mut t = 0;
    while !env.is_done() {
        let s = mdp.cell_index(env.state().cell.unwrap());
        let a = v.greedy_action(s, cfg.horizon - t).unwrap();
        assert!(!env.step(&Action::Discrete { index: a }).unwrap().violation);
        t += 1;
    }
    // corner cell: the greedy action never walks off the lattice
    let corner = mdp.cell_index([0, 0]);
    for rem in 1..=cfg.horizon {
        let a = v.greedy_action(corner, rem).unwrap();
        assert!(mdp.reward(corner, a) > -1e5);
    }
}

#[test]
fn value_table_csv_has_one_row_per_state_and_step() {
    let cfg = tiny();
    let mdp = build_tabular_mdp(&cfg).unwrap();
    let v = value_iteration(&mdp);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.csv");
    v.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "state,t,value,greedy_action");
    assert_eq!(lines.len(), 1 + 9 * 11);
    assert!(lines.last().unwrap().ends_with(','));
}

fn grid_level(i: usize, r: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (r - 1) as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exhaustive_beats_any_grid_action(seed in 0u64..1000, idx in proptest::collection::vec(0usize..5, 4), mv in 0usize..5) {
        let r = 5;
        let cont = EnvConfig { antennas: 8, horizon: 5, ..EnvConfig::default() };
        let env = UavRelayEnv::new(EnvConfig { seed, ..cont.clone() }).unwrap();
        let best = exhaustive_one_step(&cont, env.state(), r).unwrap();
        let values = [grid_level(idx[0], r), grid_level(idx[1], r), grid_level(idx[2], r), grid_level(idx[3], r)];
        let mut e = env.clone();
        let got = e.step(&Action::Continuous { values }).unwrap().reward;
        prop_assert!(best.reward >= got);
        let mut e = env.clone();
        prop_assert_eq!(e.step(&best.action).unwrap().reward, best.reward);

        let hyb = EnvConfig { action_space: ActionSpace::Hybrid, ..cont };
        let env = UavRelayEnv::new(EnvConfig { seed, ..hyb.clone() }).unwrap();
        let best = exhaustive_one_step(&hyb, env.state(), r).unwrap();
        let mut e = env.clone();
        let got = e.step(&Action::Hybrid { move_index: mv, p_bs: values[0], p_uav: values[1] }).unwrap().reward;
        prop_assert!(best.reward >= got);
    }
}

#[test]
fn exhaustive_covers_the_whole_table() {
    let cfg = EnvConfig { user_position: None, grid_cells: None, ..tiny() };
    let env = UavRelayEnv::new(cfg.clone()).unwrap();
    let best = exhaustive_one_step(&cfg, env.state(), 2).unwrap();
    for index in 0..cfg.discrete_actions() {
        let mut e = env.clone();
        assert!(best.reward >= e.step(&Action::Discrete { index }).unwrap().reward);
    }
    assert!(exhaustive_one_step(&cfg, env.state(), 1).is_err());
    assert!(exhaustive_one_step(&cfg, env.state(), 22).is_err());
}
