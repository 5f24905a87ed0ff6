use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scout_core::env::*;

fn board(size: usize, pursuers: Vec<Pos>, evaders: Vec<Pos>) -> EnvState {
    EnvState {
        size,
        obstacles: vec![false; size * size],
        pursuers,
        evaders: evaders.into_iter().map(Some).collect(),
        step: 0,
    }
}

fn small_config(size: usize, p: usize, e: usize) -> PursuitConfig {
    PursuitConfig {
        map_size: size,
        n_pursuers: p,
        n_evaders: e,
        obs_range: 3,
        ..Default::default()
    }
}

/// Neighbors inside a `size x size` board, computed without the env helpers.
fn oracle_neighbors(size: i32, (x, y): Pos) -> Vec<Pos> {
    let mut v = Vec::new();
    if y > 0 {
        v.push((x, y - 1));
    }
    if y < size - 1 {
        v.push((x, y + 1));
    }
    if x > 0 {
        v.push((x - 1, y));
    }
    if x < size - 1 {
        v.push((x + 1, y));
    }
    v
}

#[test]
fn capture_enumeration_matches_rule_oracle() {
    let size = 5;
    let mut removals_by_open = [0usize; 5];
    for ex in 0..size {
        for ey in 0..size {
            let ev = (ex as i32, ey as i32);
            let nbrs = oracle_neighbors(size as i32, ev);
            let k = nbrs.len();
            for occ in 0u32..(1 << k) {
                let occupied: Vec<Pos> = (0..k).filter(|b| occ >> b & 1 == 1).map(|b| nbrs[b]).collect();
                let n = occupied.len();
                for tags in 0u32..(1 << n).max(1) {
                    let actions: Vec<Action> = (0..n)
                        .map(|b| if tags >> b & 1 == 1 { Action::Tag } else { Action::Stay })
                        .collect();
                    let st = board(size, occupied.clone(), vec![ev]);
                    let got = capture_events(&st, &actions);
                    let expect = n == k && tags != 0;
                    assert_eq!(!got.is_empty(), expect, "evader {ev:?} occ {occ:b} tags {tags:b}");
                    if expect {
                        assert_eq!(got[0].1, (0..n).collect::<Vec<_>>());
                        removals_by_open[k] += 1;
                    }
                }
            }
        }
    }
    // Exactly one occupancy pattern per cell is removable, with 2^n - 1 tag patterns.
    assert_eq!(removals_by_open[2], 4 * 3);
    assert_eq!(removals_by_open[3], 12 * 7);
    assert_eq!(removals_by_open[4], 9 * 15);
}

#[test]
fn corner_capture_via_step_pays_each_catcher() {
    let st = board(5, vec![(1, 0), (0, 1), (4, 4)], vec![(0, 0)]);
    let mut env = PursuitEnv::with_state(small_config(5, 3, 1), st).unwrap();
    let out = env.step(&[Action::Tag.index(), Action::Stay.index(), Action::Stay.index()]).unwrap();
    assert_eq!(out.rewards, vec![5.0, 5.0, 0.0]);
    assert_eq!(out.removed, vec![0]);
    assert!(out.done);
    assert_eq!(out.team_reward(), 10.0);
}

#[test]
fn wall_and_open_field_thresholds() {
    let wall = board(5, vec![(1, 0), (3, 0), (2, 1)], vec![(2, 0)]);
    let tag3 = [Action::Tag, Action::Stay, Action::Stay];
    assert_eq!(capture_events(&wall, &tag3).len(), 1);
    let open3 = board(5, vec![(1, 2), (3, 2), (2, 1)], vec![(2, 2)]);
    assert!(capture_events(&open3, &tag3).is_empty());
    let open4 = board(5, vec![(1, 2), (3, 2), (2, 1), (2, 3)], vec![(2, 2)]);
    let tag4 = [Action::Stay, Action::Stay, Action::Stay, Action::Tag];
    assert_eq!(capture_events(&open4, &tag4)[0].1, vec![0, 1, 2, 3]);
}

#[test]
fn surround_without_tag_does_not_capture() {
    let st = board(5, vec![(1, 0), (0, 1)], vec![(0, 0)]);
    assert!(capture_events(&st, &[Action::Stay, Action::Up]).is_empty());
}

#[test]
fn no_adjacent_pursuer_gives_zero_reward() {
    let st = board(7, vec![(0, 0), (6, 6)], vec![(3, 3)]);
    let mut env = PursuitEnv::with_state(small_config(7, 2, 1), st).unwrap();
    let out = env.step(&[Action::Tag.index(), Action::Tag.index()]).unwrap();
    assert_eq!(out.rewards, vec![0.0, 0.0]);
    assert!(!out.done);
}

#[test]
fn spawn_distribution_is_uniform() {
    let cfg = small_config(5, 2, 1);
    let cells = 25;
    let resets = 10_000;
    let mut counts = vec![0usize; cells];
    let mut env = PursuitEnv::new(cfg).unwrap();
    for _ in 0..resets {
        env.reset().unwrap();
        let st = env.state();
        let mut all: Vec<Pos> = st.pursuers.clone();
        all.extend(st.evaders.iter().flatten());
        let mut seen = all.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), all.len(), "agents share a cell");
        let (x, y) = st.pursuers[0];
        counts[y as usize * 5 + x as usize] += 1;
    }
    let p = 1.0 / cells as f64;
    let mean = resets as f64 * p;
    let sd = (resets as f64 * p * (1.0 - p)).sqrt();
    // Bonferroni-adjusted band keeps the family-wise false alarm rate small.
    for (c, &n) in counts.iter().enumerate() {
        assert!((n as f64 - mean).abs() < 4.0 * sd, "cell {c}: {n} vs {mean}");
    }
}

#[test]
fn random_play_invariants() {
    let cfg = PursuitConfig { max_cycles: 120, seed: 3, ..Default::default() };
    let mut env = PursuitEnv::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        env.reset().unwrap();
        let mut alive = env.state().alive_evaders();
        let mut total = 0.0;
        let mut catchers = 0usize;
        let mut steps = 0;
        loop {
            let acts: Vec<usize> = (0..cfg.n_pursuers).map(|_| rng.gen_range(0..N_ACTIONS)).collect();
            let before = env.state().clone();
            let out = env.step(&acts).unwrap();
            steps += 1;
            let st = env.state();
            assert!(st.alive_evaders() <= alive);
            for k in 0..st.evaders.len() {
                if before.evaders[k].is_none() {
                    assert!(st.evaders[k].is_none(), "evader {k} reappeared");
                }
            }
            alive = st.alive_evaders();
            if out.removed.is_empty() {
                assert!(out.rewards.iter().all(|r| *r == 0.0));
            }
            catchers += out.rewards.iter().filter(|r| **r > 0.0).count();
            total += out.team_reward();
            for p in &st.pursuers {
                assert!(st.is_open(*p));
            }
            assert_eq!(out.done, alive == 0 || st.step >= cfg.max_cycles);
            if out.done {
                break;
            }
        }
        assert!(steps <= cfg.max_cycles);
        // Every credited catcher receives exactly one catch reward per removal it joins.
        assert!(total >= 5.0 * catchers as f64 - 1e-12);
        assert_eq!(total % 5.0, 0.0);
    }
}

#[test]
fn episode_length_capped_at_default_max_cycles() {
    let mut env = PursuitEnv::new(PursuitConfig::default()).unwrap();
    let stay = vec![Action::Stay.index(); 8];
    let mut steps = 0;
    loop {
        steps += 1;
        if env.step(&stay).unwrap().done {
            break;
        }
    }
    assert_eq!(steps, 500);
}

#[test]
fn frame_line_lists_positions_and_removals() {
    let mut st = board(5, vec![(1, 0), (2, 3)], vec![(4, 4)]);
    st.evaders.push(None);
    st.step = 7;
    assert_eq!(frame_line(&st, 1), "7,1,0,2,3,4,4,-1,-1,1");
}

fn arb_state() -> impl Strategy<Value = EnvState> {
    (5usize..24, 1usize..9, 0usize..5, any::<u64>()).prop_map(|(size, p, e, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = rand::seq::index::sample(&mut rng, size * size, p + e);
        let pos: Vec<Pos> = cells
            .iter()
            .map(|c| ((c % size) as i32, (c / size) as i32))
            .collect();
        let mut st = board(size, pos[..p].to_vec(), pos[p..].to_vec());
        st.step = rng.gen_range(0..500);
        st
    })
}

proptest! {
    #[test]
    fn pooled_channels_preserve_counts(st in arb_state()) {
        let g = global_state_vector(&st, 500);
        prop_assert_eq!(g.len(), GLOBAL_STATE_DIM);
        let area = (st.size as f64 / POOL as f64).powi(2);
        let block = POOL * POOL;
        let pursuers: f64 = g[block..2 * block].iter().sum::<f64>() * area;
        let evaders: f64 = g[2 * block..3 * block].iter().sum::<f64>() * area;
        prop_assert!((pursuers - st.pursuers.len() as f64).abs() < 1e-9);
        prop_assert!((evaders - st.alive_evaders() as f64).abs() < 1e-9);
        prop_assert!((g[GLOBAL_STATE_DIM - 1] - st.step as f64 / 500.0).abs() < 1e-15);
    }

    #[test]
    fn observation_matches_brute_force_crop(st in arb_state(), range in prop::sample::select(vec![1usize, 3, 5, 7])) {
        let half = (range / 2) as i32;
        for agent in 0..st.pursuers.len() {
            let obs = st.observe(agent, range);
            let (cx, cy) = st.pursuers[agent];
            for dy in 0..range as i32 {
                for dx in 0..range as i32 {
                    let (x, y) = (cx - half + dx, cy - half + dy);
                    let inside = x >= 0 && y >= 0 && x < st.size as i32 && y < st.size as i32;
                    let base = (dy as usize * range + dx as usize) * 3;
                    let p = st.pursuers.iter().filter(|q| **q == (x, y)).count() as f64;
                    let e = st.evaders.iter().filter(|q| **q == Some((x, y))).count() as f64;
                    prop_assert_eq!(obs[base], if inside { 0.0 } else { 1.0 });
                    prop_assert_eq!(obs[base + 1], if inside { p } else { 0.0 });
                    prop_assert_eq!(obs[base + 2], if inside { e } else { 0.0 });
                }
            }
        }
    }
}
