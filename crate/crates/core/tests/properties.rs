use proptest::prelude::*;

use nwi_core::agent::{
    exact_choice_values, policy_probs, run_learning, AgentConfig, LearningRateSchedule, PolicyMode,
};
use nwi_core::environment::{bellman_residual, solve_policy_values, Intervention, Mdp, StochasticPolicy};
use nwi_core::inference::{enumerate_joint, identifiability_gap};
use nwi_core::scenarios::{
    build_addiction, build_behavioral_twin, build_platform, build_scale_pair, run_platform_loop, AddictionParams,
    PlatformOptimizer, ENGAGE,
};
use nwi_core::welfare::{
    classify_mistake_states, evaluate_welfare, Components, Continuation, CriterionKind, Declaration, WelfareCriterion,
};
use nwi_core::seeded_rng;

fn values_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0..20.0f64, 2..7)
}

/// Random dense MDP with rows normalised to sum to one.
fn random_mdp(n_states: usize, n_actions: usize) -> impl Strategy<Value = Mdp> {
    let trans = prop::collection::vec(0.01..1.0f64, n_states * n_actions * n_states);
    let rew = prop::collection::vec(-3.0..3.0f64, n_states * n_actions);
    (trans, rew).prop_map(move |(t, r)| {
        let transition = (0..n_states)
            .map(|s| {
                (0..n_actions)
                    .map(|a| {
                        let row = &t[(s * n_actions + a) * n_states..][..n_states];
                        let z: f64 = row.iter().sum();
                        row.iter().map(|x| x / z).collect()
                    })
                    .collect()
            })
            .collect();
        let reward = (0..n_states).map(|s| r[s * n_actions..][..n_actions].to_vec()).collect();
        Mdp::new(transition, reward, vec![false; n_states], 0, vec![false; n_states]).unwrap()
    })
}

fn declaration() -> Declaration {
    Declaration { criterion_text: "custom table".into(), justification_text: "property check".into() }
}

fn addiction_params() -> impl Strategy<Value = AddictionParams> {
    // lambda_cue never exceeds lambda_base
    (0.0..4.0f64, 0.05..0.95f64, 0.0..1.0f64, 0.1..3.0f64, 0.1..4.0f64).prop_map(|(kappa, lb, frac, short, cost)| {
        AddictionParams {
            kappa,
            lambda_cue: lb * frac,
            lambda_base: lb,
            consumption_reward_short: short,
            long_run_cost: cost,
        }
    })
}

proptest! {
    #[test]
    fn softmax_sums_to_one(v in values_vec(), beta in 0.0..50.0f64) {
        let p = policy_probs(&v, beta, &vec![true; v.len()]).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn softmax_shift_invariant(v in values_vec(), beta in 0.0..10.0f64, k in -1e3..1e3f64) {
        let mask = vec![true; v.len()];
        let p = policy_probs(&v, beta, &mask).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + k).collect();
        let q = policy_probs(&shifted, beta, &mask).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_scale_pair(v in values_vec(), beta in 0.0..10.0f64, c in 0.1..10.0f64) {
        let mask = vec![true; v.len()];
        let p = policy_probs(&v, beta, &mask).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
        let q = policy_probs(&scaled, beta / c, &mask).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_monotone_in_value(v in values_vec(), beta in 0.01..10.0f64) {
        let p = policy_probs(&v, beta, &vec![true; v.len()]).unwrap();
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] > v[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn masked_actions_get_no_mass(v in values_vec(), beta in 0.0..10.0f64) {
        let mut mask = vec![true; v.len()];
        mask[0] = false;
        let p = policy_probs(&v, beta, &mask).unwrap();
        prop_assert_eq!(p[0], 0.0);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_values_satisfy_bellman(mdp in random_mdp(4, 2), gamma in 0.0..0.95f64) {
        let pol = StochasticPolicy::uniform(&mdp);
        let v = solve_policy_values(&mdp, &pol, gamma, &mdp.reward).unwrap();
        prop_assert!(bellman_residual(&mdp, &pol, gamma, &mdp.reward, &v) < 1e-9);
    }

    #[test]
    fn solve_commutes_with_state_permutation(mdp in random_mdp(4, 2), gamma in 0.0..0.95f64, rot in 1usize..4) {
        let n = mdp.n_states;
        let perm: Vec<usize> = (0..n).map(|s| (s + rot) % n).collect();
        let mut transition = vec![vec![vec![0.0; n]; mdp.n_actions]; n];
        let mut reward = vec![vec![0.0; mdp.n_actions]; n];
        for s in 0..n {
            for a in 0..mdp.n_actions {
                reward[perm[s]][a] = mdp.reward[s][a];
                for s2 in 0..n {
                    transition[perm[s]][a][perm[s2]] = mdp.transition[s][a][s2];
                }
            }
        }
        let permuted = Mdp::new(transition, reward, vec![false; n], perm[0], vec![false; n]).unwrap();
        let v = solve_policy_values(&mdp, &StochasticPolicy::uniform(&mdp), gamma, &mdp.reward).unwrap();
        let w = solve_policy_values(&permuted, &StochasticPolicy::uniform(&permuted), gamma, &permuted.reward).unwrap();
        for s in 0..n {
            prop_assert!((v[s] - w[perm[s]]).abs() < 1e-9);
        }
    }

    #[test]
    fn welfare_is_linear_in_utility(
        mdp in random_mdp(3, 2),
        other in prop::collection::vec(-2.0..2.0f64, 6),
        a in -3.0..3.0f64,
        b in -3.0..3.0f64,
        gw in 0.0..0.95f64,
    ) {
        let u1 = mdp.reward.clone();
        let u2: Vec<Vec<f64>> = other.chunks(2).map(|c| c.to_vec()).collect();
        let mixed: Vec<Vec<f64>> = u1
            .iter()
            .zip(&u2)
            .map(|(r1, r2)| r1.iter().zip(r2).map(|(x, y)| a * x + b * y).collect())
            .collect();
        let pol = StochasticPolicy::uniform(&mdp);
        let w = |table: Vec<Vec<f64>>| {
            let c = WelfareCriterion::new("t", CriterionKind::Custom { table }, gw, declaration()).unwrap();
            evaluate_welfare(&mdp, &pol, &c, &Components::default()).unwrap()
        };
        let lhs = w(mixed);
        let rhs = a * w(u1) + b * w(u2);
        prop_assert!((lhs - rhs).abs() < 1e-8 * (1.0 + lhs.abs()));
    }

    #[test]
    fn mistakes_ignore_constant_shift_of_implemented_values(
        p in addiction_params(),
        shift in -10.0..10.0f64,
    ) {
        let b = build_addiction(&p).unwrap();
        let (q, pol, _) = exact_choice_values(&b.mdp, &b.agent_config, b.cue_model.as_ref()).unwrap();
        let crit = b.criterion("long-run").unwrap();
        let shifted: Vec<Vec<f64>> = q.iter().map(|r| r.iter().map(|x| x + shift).collect()).collect();
        let m1 = classify_mistake_states(&b.mdp, &q, &pol, crit, &b.components(), Continuation::ImplementedPolicy).unwrap();
        let m2 = classify_mistake_states(&b.mdp, &shifted, &pol, crit, &b.components(), Continuation::ImplementedPolicy).unwrap();
        prop_assert_eq!(m1.mistake_states, m2.mistake_states);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn decaying_rate_td_settles_near_fixed_point(seed in 0u64..1000) {
        let mdp = nwi_core::scenarios::scale_pair_env();
        let gamma = 0.3;
        let config = AgentConfig {
            beta: 0.0,
            gamma,
            schedule: LearningRateSchedule::Decay,
            policy_mode: PolicyMode::QFromV,
            ..AgentConfig::default()
        };
        let (_, state) = run_learning(&mdp, &config, None, 1, 50_000, &mut seeded_rng(seed)).unwrap();
        let pol = StochasticPolicy::uniform(&mdp);
        prop_assert!(bellman_residual(&mdp, &pol, gamma, &mdp.reward, &state.v) < 0.05);
    }

    #[test]
    fn twins_match_on_choices(p in addiction_params()) {
        let b = build_addiction(&p).unwrap();
        let (m1, m2) = build_behavioral_twin(&b).unwrap();
        let iv = b.intervention("cue-removal").unwrap();
        let r = identifiability_gap(&b.mdp, (&m1, &m2), 3, 0, &b.components(), iv, None).unwrap();
        prop_assert!(r.tv_choice < 1e-9, "tv_choice {}", r.tv_choice);
    }

    #[test]
    fn scale_pair_matches_on_choices(c in 0.1..10.0f64, beta in 0.1..5.0f64) {
        prop_assume!((c - 1.0).abs() > 1e-3);
        let (a, b, env) = build_scale_pair(c, beta).unwrap();
        let r = identifiability_gap(&env, (&a, &b), 3, 0, &Components::default(), &Intervention::null(&env), None).unwrap();
        prop_assert!(r.tv_choice < 1e-9, "tv_choice {}", r.tv_choice);
    }

    #[test]
    fn enumeration_is_a_distribution(p in addiction_params(), bins in 1usize..4, horizon in 1usize..4) {
        let b = build_addiction(&p).unwrap();
        let (m1, _) = build_behavioral_twin(&b).unwrap();
        let joint = enumerate_joint(&b.mdp, &m1.spec, &m1.params, horizon, bins).unwrap();
        prop_assert!((joint.total_probability() - 1.0).abs() < 1e-9);
        // summing out the neural bins recovers the choice-only enumeration
        let choice = enumerate_joint(&b.mdp, &m1.spec, &m1.params, horizon, 0).unwrap().choice_marginal();
        let marginal = joint.choice_marginal();
        prop_assert_eq!(choice.len(), marginal.len());
        for (k, p) in &choice {
            prop_assert!((p - marginal[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn platform_never_overspends(step in 0.0..1.0f64, budget in 0.0..5.0f64, epochs in 0usize..6, seed in 0u64..100) {
        let b = build_platform().unwrap();
        let opt = PlatformOptimizer { target_action: ENGAGE, step_size: step, epochs, budget, run_length: 300 };
        let s = run_platform_loop(&b, &opt, &mut seeded_rng(seed)).unwrap();
        prop_assert!(s.total_added <= budget + 1e-12);
        prop_assert!(s.points.len() <= epochs + 1);
        prop_assert_eq!(s.points.last().unwrap().added, s.total_added);
    }
}
