use proptest::prelude::*;

use dtrl_core::envsim::{make_env, transition, EnvSpec, EnvState};
use dtrl_core::Error;

fn any_action() -> impl Strategy<Value = f64> {
    prop_oneof![-3.0..3.0f64, Just(f64::NAN), Just(f64::INFINITY), Just(-1e300)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dense_states_and_rewards_stay_bounded(actions in prop::collection::vec((any_action(), any_action()), 100), seed in any::<u64>()) {
        let spec = EnvSpec::dense(2);
        let mut env = make_env(spec.clone()).unwrap();
        env.reset(seed);
        for (i, (a, b)) in actions.iter().enumerate() {
            let res = env.step(&[*a, *b]).unwrap();
            let s = &res.next_state;
            prop_assert!(s.position.iter().chain(&s.velocity).all(|x| x.is_finite() && x.abs() <= 1.0));
            // |dx| <= |v| dt <= dt, and the action cost is at most 0.001 per dimension.
            prop_assert!(res.reward.is_finite() && res.reward <= 1.0 + 1e-12 && res.reward >= -1.002 - 1e-12);
            prop_assert_eq!(res.done, i + 1 == spec.horizon);
            prop_assert!(!res.terminal);
        }
        prop_assert!(env.step(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn step_matches_pure_transition(actions in prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64), 1..60), seed in any::<u64>()) {
        let spec = EnvSpec::sparse();
        let mut env = make_env(spec.clone()).unwrap();
        let mut state = env.reset(seed);
        for (a, b) in actions {
            let pure = transition(&spec, &state, &[a, b]).unwrap();
            let stepped = env.step(&[a, b]).unwrap();
            prop_assert_eq!(&pure, &stepped);
            state = stepped.next_state;
            if stepped.done {
                // Sparse success is worth exactly one and ends the episode.
                prop_assert!(!stepped.terminal || stepped.reward == 1.0);
                break;
            }
        }
    }
}

#[test]
fn resets_are_seeded() {
    let mut env = make_env(EnvSpec::dense(3)).unwrap();
    let a = env.reset(7);
    let b = env.reset(8);
    assert_eq!(a, env.reset(7));
    assert_ne!(a, b);
    assert!(a.position.iter().all(|p| p.abs() <= 0.1) && a.velocity.iter().all(|v| *v == 0.0));
}

#[test]
fn disabled_teleport_is_a_capability_error_and_is_counted() {
    let mut env = make_env(EnvSpec::dense(2)).unwrap();
    let s = env.reset(0);
    env.set_teleport(false);
    assert!(matches!(env.reset_to(&s), Err(Error::Capability(_))));
    assert_eq!(env.reset_to_calls(), 1);
    env.set_teleport(true);
    let far = EnvState { position: vec![0.5, -0.5], velocity: vec![0.2, 0.0], step_index: 40 };
    assert_eq!(env.reset_to(&far).unwrap(), far);
    assert_eq!(env.reset_to_calls(), 2);
}

#[test]
fn sparse_goal_is_reached_by_driving_toward_it() {
    let spec = EnvSpec::sparse();
    let mut env = make_env(spec.clone()).unwrap();
    env.reset(1);
    let mut reached = false;
    for _ in 0..spec.horizon {
        let s = env.state().clone();
        // Proportional-derivative controller toward the goal.
        let a: Vec<f64> = (0..2).map(|i| 4.0 * (spec.goal[i] - s.position[i]) - 3.0 * s.velocity[i]).collect();
        let r = env.step(&a).unwrap();
        if r.terminal {
            reached = true;
            assert_eq!(r.reward, 1.0);
            break;
        }
        assert_eq!(r.reward, 0.0);
    }
    assert!(reached);
}
