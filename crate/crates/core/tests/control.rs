use cqnet::control::*;
use cqnet::cq::cq_multistep;
use cqnet::linalg::distance;

/// Short horizon with two obstacle points near the path and targets that
/// pull the agents together, so halos, the pair projection and the learned
/// term are all active.
fn tiny_env() -> Environment {
    Environment {
        targets: [2.0, -1.0, 2.0, -1.6],
        obstacle_points: vec![[0.7, 0.1], [1.1, -2.4]],
        halo_radius: 1.0,
        min_agent_distance: 2.0,
        target_tolerance: 0.1,
        start_regions: vec![StartRegion {
            lo: [0.0, 0.0, 0.0, -2.5],
            hi: [0.5, 0.5, 0.5, -2.2],
        }],
        horizon: 5,
    }
}

fn tiny_controller(seed: u64) -> Controller {
    let mut ctrl = Controller::new_random(5, seed).unwrap();
    for a in &mut ctrl.a {
        for v in a.data_mut() {
            *v *= 3.0;
        }
    }
    ctrl
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let env = tiny_env();
    let mut ctrl = tiny_controller(7);
    let start = [0.1, 0.2, 0.3, -2.3];
    let (traj, grads) = objective_and_grad(&env, &ctrl, &start).unwrap();
    assert!(traj.states.iter().any(|s| env.min_obstacle_distance(s) < 1.0));

    let h = 1e-6;
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..ctrl.a.len() {
        for i in 0..ctrl.a[k].data().len() {
            let v = ctrl.a[k].data()[i];
            ctrl.a[k].data_mut()[i] = v + h;
            let fp = rollout(&env, &ctrl, &start).unwrap().objective;
            ctrl.a[k].data_mut()[i] = v - h;
            let fm = rollout(&env, &ctrl, &start).unwrap().objective;
            ctrl.a[k].data_mut()[i] = v;
            let fd = (fp - fm) / (2.0 * h);
            num += (fd - grads[k].data()[i]).powi(2);
            den += fd * fd;
        }
    }
    let rel = (num / den).sqrt();
    assert!(den > 1e-6, "gradient should not vanish");
    assert!(rel < 1e-4, "relative error {rel}");
}

#[test]
fn fixed_dynamics_reduce_to_multistep_cq() {
    let env = Environment::corridor();
    let mut ctrl = Controller::baseline(env.horizon);
    ctrl.beta1 = 0.0;
    let terms = env.fixed_terms(ctrl.alpha1, ctrl.alpha2);
    let c = env.constraint_set();
    let mut checked_in_halo = false;
    for start in env.sample_starts(16, 3).unwrap() {
        let traj = rollout(&env, &ctrl, &start).unwrap();
        for (t, x) in traj.states.iter().enumerate().take(30) {
            let direct = dynamics_step(&env, &ctrl, t + 1, x).unwrap();
            let generic = cq_multistep(x, &terms, &c).unwrap();
            assert_eq!(direct, generic, "step {t} from {start:?}");
            checked_in_halo |= env.min_obstacle_distance(x) < 1.0;
        }
    }
    assert!(checked_in_halo);
}

#[test]
fn agents_outside_halos_get_no_obstacle_push() {
    let env = Environment::corridor();
    let bare = Environment {
        obstacle_points: vec![],
        ..env.clone()
    };
    let ctrl = Controller::new_random(env.horizon, 2).unwrap();
    let x = [-1.0, 3.0, -1.0, -3.0];
    assert!(env.min_obstacle_distance(&x) > 1.0);
    for t in [1, 50, 99] {
        assert_eq!(
            dynamics_step(&env, &ctrl, t, &x).unwrap(),
            dynamics_step(&bare, &ctrl, t, &x).unwrap()
        );
    }
}

#[test]
fn every_state_keeps_the_agents_apart() {
    let env = Environment::corridor();
    for seed in 0..4 {
        let mut ctrl = Controller::new_random(env.horizon, seed).unwrap();
        // Large controls make the pair projection do real work.
        for a in &mut ctrl.a {
            for v in a.data_mut() {
                *v *= 4.0;
            }
        }
        for start in env.sample_starts(8, seed).unwrap() {
            let traj = rollout(&env, &ctrl, &start).unwrap();
            assert_eq!(traj.states.len(), env.horizon);
            for s in &traj.states {
                assert!(distance(&s[..2], &s[2..]) >= 2.0 - 1e-10);
            }
            assert!(traj.feasible.iter().all(|&f| f));
        }
    }
}

#[test]
fn tiny_problem_trains_and_stays_feasible() {
    let env = tiny_env();
    let mut ctrl = tiny_controller(1);
    let starts = env.sample_starts(3, 5).unwrap();
    let cfg = ControlTrainConfig {
        learning_rate: 0.01,
        epochs: 30,
        batch_size: 2,
        seed: 9,
    };
    let log = train_controller(&env, &mut ctrl, &starts, &cfg, |_| {}).unwrap();
    assert_eq!(log.len(), 31);
    assert!(log[30].mean_objective < log[0].mean_objective);
    for s in &starts {
        assert!(rollout(&env, &ctrl, s).unwrap().feasible.iter().all(|&f| f));
    }
}

#[test]
fn training_is_reproducible() {
    let env = Environment::corridor();
    let starts = env.sample_starts(3, 11).unwrap();
    assert_eq!(starts, env.sample_starts(3, 11).unwrap());
    let cfg = ControlTrainConfig {
        epochs: 20,
        seed: 4,
        ..Default::default()
    };
    let run = || {
        let mut ctrl = Controller::new_random(env.horizon, 11).unwrap();
        let log = train_controller(&env, &mut ctrl, &starts, &cfg, |_| {}).unwrap();
        let mut csv = Vec::new();
        rollout(&env, &ctrl, &starts[0])
            .unwrap()
            .write_csv(&env, &mut csv)
            .unwrap();
        (ctrl, log, csv)
    };
    assert_eq!(run(), run());
}

#[test]
fn bad_training_input_is_rejected() {
    let env = tiny_env();
    let mut ctrl = tiny_controller(1);
    let cfg = ControlTrainConfig::default();
    assert!(train_controller(&env, &mut ctrl, &[], &cfg, |_| {}).is_err());
    let starts = env.sample_starts(1, 0).unwrap();
    for bad in [
        ControlTrainConfig {
            learning_rate: 0.0,
            ..cfg.clone()
        },
        ControlTrainConfig {
            batch_size: 0,
            ..cfg.clone()
        },
    ] {
        assert!(train_controller(&env, &mut ctrl, &starts, &bad, |_| {}).is_err());
    }
    let mut short = tiny_controller(1);
    short.a.pop();
    assert!(rollout(&env, &short, &starts[0]).is_err());
}

#[test]
fn corridor_baseline_gets_stuck_and_training_fixes_it() {
    let env = Environment::corridor();
    let starts = env.sample_starts(4, 1).unwrap();
    let baseline = Controller::baseline(env.horizon);
    let stuck = starts
        .iter()
        .filter(|s| rollout(&env, &baseline, s).unwrap().terminal_distance > env.target_tolerance)
        .count();
    assert!(stuck > 0);

    let mut ctrl = Controller::new_random(env.horizon, 1).unwrap();
    let cfg = ControlTrainConfig {
        epochs: 150,
        seed: 1,
        ..Default::default()
    };
    let log = train_controller(&env, &mut ctrl, &starts, &cfg, |_| {}).unwrap();
    let last = log.last().unwrap();
    assert_eq!(last.reached, starts.len(), "{last:?}");
}
