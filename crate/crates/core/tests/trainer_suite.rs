mod support;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scout_core::autodiff::{Tape, Tensor};
use scout_core::env::N_ACTIONS;
use scout_core::trainer::{chunks, ppo_surrogate, LossSettings, Trainer};
use support::ppo::{assembled_gradcheck, config, evaluate, plain_ppo_gap, prepared};


#[test]
fn surrogate_examples_and_loop_oracle() {
    let mut t = Tape::new();
    let adv = [0.5, -1.0, 2.0];
    let old = [-0.3, -1.2, -0.7];
    let same = t.constant(Tensor::matrix(3, 1, old.to_vec()).unwrap());
    let l = ppo_surrogate(&mut t, same, &old, &adv, 0.2).unwrap();
    assert!((t.value(l).item() + adv.iter().sum::<f64>() / 3.0).abs() < 1e-15);

    let doubled = t.constant(Tensor::matrix(1, 1, vec![2f64.ln()]).unwrap());
    let l = ppo_surrogate(&mut t, doubled, &[0.0], &[1.5], 0.2).unwrap();
    assert!((t.value(l).item() + 1.2 * 1.5).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let r = rng.gen_range(1..20);
        let new: Vec<f64> = (0..r).map(|_| rng.gen_range(-3.0..0.0)).collect();
        let old: Vec<f64> = new.iter().map(|x| x + rng.gen_range(-0.5..0.5)).collect();
        let adv: Vec<f64> = (0..r).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let nv = t.constant(Tensor::matrix(r, 1, new.clone()).unwrap());
        let l = ppo_surrogate(&mut t, nv, &old, &adv, 0.2).unwrap();
        let mut want = 0.0;
        for k in 0..r {
            let rho = (new[k] - old[k]).exp();
            want += (rho * adv[k]).min(rho.clamp(0.8, 1.2) * adv[k]);
        }
        assert!((t.value(l).item() + want / r as f64).abs() < 1e-12);
    }
}

#[test]
fn replay_reproduces_rollout_log_probs() {
    let (trainer, prep) = prepared(config("horizon = 16"));
    let all = chunks(&prep.rollout);
    let (_, report) = evaluate(&trainer.model, &trainer.model.params, &prep, &all, &prep.settings);
    assert!(report.ratio_dev < 1e-12, "ratio deviation {}", report.ratio_dev);
}

#[test]
fn assembled_loss_passes_finite_differences() {
    let (rep, rep_c) = assembled_gradcheck();
    assert!(rep.passes(1e-3, 1e-6), "{rep:?}");
    assert!(rep_c.passes(1e-3, 1e-6), "{rep_c:?}");
}

#[test]
fn plain_ppo_reduction_matches_independent_loss() {
    let (a, b) = plain_ppo_gap();
    assert!(a < 1e-10 && b < 1e-10, "{a} {b}");
}

#[test]
fn non_senders_contribute_nothing_to_comm_surrogates() {
    let (trainer, mut prep) = prepared(config("horizon = 16"));
    let all = chunks(&prep.rollout);
    let (_, before) = evaluate(&trainer.model, &trainer.model.params, &prep, &all, &prep.settings);
    let n = 3;
    let mut changed = 0;
    for (k, traj) in prep.rollout.trajectories.iter_mut().enumerate() {
        for (t, st) in traj.steps.iter_mut().enumerate() {
            for i in 0..n {
                if prep.targets[k].adv_send[t * n + i].is_none() {
                    st.logp_send[i] += 0.7;
                    st.logp_recv[i] -= 1.3;
                    changed += 1;
                }
            }
        }
    }
    assert!(changed > 0);
    let (_, after) = evaluate(&trainer.model, &trainer.model.params, &prep, &all, &prep.settings);
    assert_eq!(before.send, after.send);
    assert_eq!(before.recv, after.recv);
}

#[test]
fn total_is_the_signed_sum_of_components_and_entropy_rewards_flatness() {
    let (trainer, prep) = prepared(config("horizon = 16\nlambda_edge_start = 0.5"));
    let all = chunks(&prep.rollout);
    let s = &prep.settings;
    let (total, r) = evaluate(&trainer.model, &trainer.model.params, &prep, &all, s);
    let want = r.env + r.send + r.recv + s.value_coef * r.value + s.comm_coef * r.comm + s.group_coef * r.group - r.entropy;
    assert!((total - want).abs() < 1e-12);
    assert!(r.group != 0.0);

    // Shrinking the head weights flattens all three distributions.
    let mut flat = trainer.model.params.clone();
    for name in ["actor.heads.action.w", "actor.heads.send.w", "actor.heads.recipient.w"] {
        flat.get_mut(name).unwrap().data_mut().iter_mut().for_each(|x| *x *= 0.1);
    }
    let zero = LossSettings {
        value_coef: 0.0,
        comm_coef: 0.0,
        group_coef: 0.0,
        ..*s
    };
    let mut no_adv = prep.clone();
    for tg in &mut no_adv.targets {
        tg.adv_env.iter_mut().for_each(|a| *a = 0.0);
        tg.adv_send.iter_mut().for_each(|a| *a = a.map(|_| 0.0));
        tg.adv_recv.iter_mut().for_each(|a| *a = a.map(|_| 0.0));
    }
    let (sharp_total, sharp) = evaluate(&trainer.model, &trainer.model.params, &no_adv, &all, &zero);
    let (flat_total, flat_r) = evaluate(&trainer.model, &flat, &no_adv, &all, &zero);
    assert!(flat_r.entropy > sharp.entropy);
    assert!(flat_total < sharp_total);
}

#[test]
fn zero_advantages_and_critics_leave_only_regularizers() {
    let (trainer, mut prep) = prepared(config("horizon = 16\nlambda_edge_start = 1"));
    let mut model = trainer.model.clone();
    for set in [&mut model.params, &mut model.comm_params] {
        let names: Vec<String> = set
            .names()
            .filter(|n| n.starts_with("actor.heads") || n.starts_with("critic"))
            .map(str::to_string)
            .collect();
        for name in names {
            set.get_mut(&name).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    for tg in &mut prep.targets {
        tg.adv_env.iter_mut().for_each(|a| *a = 0.0);
        tg.returns.iter_mut().for_each(|a| *a = 0.0);
        tg.adv_send.iter_mut().for_each(|a| *a = a.map(|_| 0.0));
        tg.adv_recv.iter_mut().for_each(|a| *a = a.map(|_| 0.0));
        tg.td_target.iter_mut().for_each(|a| *a = a.map(|_| 0.0));
        tg.group_adv.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|a| *a = 0.0));
    }
    let all = chunks(&prep.rollout);
    let params = model.params.clone();
    let (total, r) = evaluate(&model, &params, &prep, &all, &prep.settings);
    for v in [r.env, r.send, r.recv, r.value, r.comm] {
        assert!(v.abs() < 1e-15, "{r:?}");
    }
    assert!((total - (prep.settings.group_coef * r.group - r.entropy)).abs() < 1e-12);
    // Uniform action and send heads set a floor on the entropy term.
    let s = &prep.settings;
    assert!(r.entropy >= s.ent_action * (N_ACTIONS as f64).ln() + s.ent_send * 2f64.ln() - 1e-12);
}

#[test]
fn no_grouping_variant_has_zero_grouping_loss() {
    let c = config("variant = no_grouping\nhorizon = 8");
    assert_eq!(c.n_groups(), 1);
    let mut trainer = Trainer::new(c).unwrap();
    for _ in 0..2 {
        let out = trainer.run_update().unwrap();
        assert_eq!(out.metrics.losses.group, 0.0);
    }
}

#[test]
fn hundred_step_episode_has_ten_bundles() {
    let c = config("env.max_cycles = 100\nhorizon = 100\nK = 10\nenv.n_evaders = 1\nenv.map_size = 12");
    let (_, prep) = prepared(c);
    let traj = &prep.rollout.trajectories[0];
    assert_eq!(prep.rollout.episodes.len(), 1);
    assert_eq!(prep.rollout.episodes[0].length, 100);
    assert_eq!(traj.bundles.len(), 10);
    assert!(traj.bundles.iter().all(|b| b.fresh));
    for (k, b) in traj.bundles.iter().enumerate() {
        assert_eq!(b.start, 10 * k);
    }
}

#[test]
fn same_seed_gives_identical_updates() {
    let run = || {
        let mut t = Trainer::new(config("horizon = 12\ntotal_steps = 36")).unwrap();
        let mut rows = Vec::new();
        while !t.is_finished() {
            rows.push(t.run_update().unwrap().metrics.csv_row());
        }
        rows
    };
    let a = run();
    assert_eq!(a.len(), 3);
    assert_eq!(a, run());
}
