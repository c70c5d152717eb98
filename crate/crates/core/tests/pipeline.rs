use std::collections::BTreeMap;

use nwi_core::agent::{AgentConfig, LearningRateSchedule};
use nwi_core::audit::{run_audit, AuditConfig, Overall, ScenarioSource, StepStatus};
use nwi_core::inference::{fit_mle, simulate_model, ParamName, SearchConfig};
use nwi_core::neural::{simulate_conditioning, ConditioningProtocol};
use nwi_core::scenarios::{bandit_recovery_spec, build_addiction, two_armed_bandit, AddictionParams, ScenarioBundle};
use nwi_core::welfare::{compare_interventions, Relearn};
use nwi_core::{seeded_rng, Error};

fn shipped_config() -> AuditConfig {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/addiction_audit.json");
    AuditConfig::load(&path).unwrap()
}

fn protocol(magnitude: f64, omission_probability: f64) -> ConditioningProtocol {
    ConditioningProtocol { cue_time: 1, reward_time: 3, reward_magnitude: magnitude, omission_probability, trials: 300 }
}

fn conditioning_config() -> AgentConfig {
    AgentConfig { gamma: 0.95, schedule: LearningRateSchedule::Decay, ..AgentConfig::default() }
}

#[test]
fn bundle_survives_json_round_trip() {
    let b = build_addiction(&AddictionParams::default()).unwrap();
    let back = ScenarioBundle::from_json(&b.to_json().unwrap()).unwrap();
    assert_eq!(b, back);
}

#[test]
fn malformed_bundle_is_rejected() {
    let b = build_addiction(&AddictionParams::default()).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&b.to_json().unwrap()).unwrap();
    v["scenario"]["mdp"]["transition"][0][0] = serde_json::json!([0.5, 0.2]);
    assert!(ScenarioBundle::from_json(&v.to_string()).is_err());
}

#[test]
fn audit_reads_scenario_from_relative_path() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = build_addiction(&AddictionParams::default()).unwrap();
    std::fs::write(dir.path().join("scenario.json"), bundle.to_json().unwrap()).unwrap();

    let mut cfg = shipped_config();
    cfg.scenario = ScenarioSource::Path("scenario.json".into());
    let text = serde_json::to_string(&cfg).unwrap();
    let cfg_path = dir.path().join("audit.json");
    std::fs::write(&cfg_path, text).unwrap();

    let from_file = run_audit(&AuditConfig::load(&cfg_path).unwrap(), &mut seeded_rng(7)).unwrap();
    let builtin = run_audit(&shipped_config(), &mut seeded_rng(7)).unwrap();
    assert_eq!(from_file, builtin);
    assert_eq!(from_file.overall, Overall::Pass);
}

#[test]
fn audit_with_missing_scenario_file_is_an_error() {
    let mut cfg = shipped_config();
    cfg.scenario = ScenarioSource::Path("/nonexistent/scenario.json".into());
    let err = run_audit(&cfg, &mut seeded_rng(7)).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
}

#[test]
fn audit_flags_missing_fairness_notes_for_review() {
    let mut cfg = shipped_config();
    cfg.implementation_notes = Default::default();
    let r = run_audit(&cfg, &mut seeded_rng(7)).unwrap();
    assert_ne!(r.steps[5].status, StepStatus::Pass);
}

#[test]
fn fit_recovers_bandit_parameters() {
    let env = two_armed_bandit([0.8, 0.2]).unwrap();
    let spec = bandit_recovery_spec(0.9);
    let truth = BTreeMap::from([(ParamName::Alpha, 0.1), (ParamName::Beta, 2.0)]);
    let (traj, traces) = simulate_model(&env, &spec, &truth, 200, 50, &mut seeded_rng(3)).unwrap();
    let fit = fit_mle(&traj, &traces, &env, &spec, &SearchConfig::default(), &mut seeded_rng(4)).unwrap();
    assert!((fit.best_params[&ParamName::Alpha] - 0.1).abs() < 0.1, "{:?}", fit.best_params);
    assert!((fit.best_params[&ParamName::Beta] - 2.0).abs() < 1.0, "{:?}", fit.best_params);
    assert!(fit.log_likelihood.is_finite());
}

#[test]
fn certain_omission_gives_negative_dip() {
    let (_, s) = simulate_conditioning(&protocol(1.0, 1.0), &conditioning_config(), &mut seeded_rng(1)).unwrap();
    assert!(s.late.omission.unwrap() < -0.5);
}

#[test]
fn zero_magnitude_gives_no_signal() {
    let (traj, s) = simulate_conditioning(&protocol(0.0, 0.0), &conditioning_config(), &mut seeded_rng(1)).unwrap();
    assert!(traj.records.iter().all(|r| r.delta == 0.0));
    assert_eq!(s.late.cue, Some(0.0));
    assert_eq!(s.late.reward, Some(0.0));
}

#[test]
fn commitment_does_not_lower_long_run_welfare() {
    let b = build_addiction(&AddictionParams::default()).unwrap();
    let relearn = Relearn { trials: 1, horizon: 3000, seed: 5 };
    let cmp = compare_interventions(
        &b.mdp,
        &b.agent_config,
        b.cue_model.as_ref(),
        &b.interventions,
        &b.criteria,
        &b.components(),
        &relearn,
    )
    .unwrap();
    let row = cmp.get("commitment", "long-run").unwrap();
    assert!(row.delta >= 0.0, "{row:?}");
}
