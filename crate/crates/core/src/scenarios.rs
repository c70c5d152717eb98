//! Canonical scenarios: classical conditioning, cue-driven consumption, a
//! behaviourally indistinguishable model pair, the softmax scale pair and a
//! platform that reshapes rewards.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{
    AgentConfig, CueModel, DeltaSource, DualSelfUtility, Latent, LearningRateSchedule, PolicyMode,
};
use crate::environment::{validate_mdp, Intervention, InterventionKind, Mdp};
use crate::error::{Error, Result};
use crate::inference::{ChannelSpec, ModelCandidate, ModelId, ModelSpec, ParamName, Params};
use crate::neural::LinkFunction;
use crate::welfare::{evaluate_welfare, learned_policy, Components, CriterionKind, Declaration, Relearn, WelfareCriterion};

/// Everything an audit or experiment needs about one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioBundle {
    pub label: String,
    pub mdp: Mdp,
    pub agent_config: AgentConfig,
    #[serde(default)]
    pub cue_model: Option<CueModel>,
    #[serde(default)]
    pub dual_self: Option<DualSelfUtility>,
    #[serde(default)]
    pub criteria: Vec<WelfareCriterion>,
    #[serde(default)]
    pub interventions: Vec<Intervention>,
    /// Candidate explanations of behaviour, each with its own criterion.
    #[serde(default)]
    pub models: Vec<ModelCandidate>,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    scenario: ScenarioBundle,
}

impl ScenarioBundle {
    pub fn validate(&self) -> Result<()> {
        validate_mdp(&self.mdp).into_result()?;
        self.agent_config.validate()?;
        if let Some(c) = &self.cue_model {
            c.validate(&self.mdp)?;
        }
        if let Some(u) = &self.dual_self {
            u.validate(self.mdp.n_actions)?;
        }
        for iv in &self.interventions {
            iv.validate_for(&self.mdp)?;
        }
        for m in &self.models {
            m.spec.validate(&self.mdp)?;
            m.spec.resolve(&m.params)?;
        }
        Ok(())
    }

    /// Dual-self tables and λ per state, for criteria that need them.
    pub fn components(&self) -> Components {
        Components {
            dual_self: self.dual_self.clone(),
            lambda_of_state: self.cue_model.as_ref().map(|c| c.lambda_of_state.clone()),
        }
    }

    pub fn criterion(&self, label: &str) -> Option<&WelfareCriterion> {
        self.criteria.iter().find(|c| c.label() == label)
    }

    pub fn intervention(&self, label: &str) -> Option<&Intervention> {
        self.interventions.iter().find(|i| i.label == label)
    }

    /// Serializes inside a `{"scenario": ...}` envelope.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Envelope { scenario: self.clone() })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let env: Envelope = serde_json::from_str(text)?;
        env.scenario.validate()?;
        Ok(env.scenario)
    }
}

fn declaration(criterion: &str, justification: &str) -> Declaration {
    Declaration { criterion_text: criterion.into(), justification_text: justification.into() }
}

fn experienced(gamma_w: f64) -> Result<WelfareCriterion> {
    WelfareCriterion::new(
        "experienced",
        CriterionKind::Experienced,
        gamma_w,
        declaration(
            "Discounted reward as experienced in each state",
            "Takes the person's in-the-moment hedonic response as the welfare standard",
        ),
    )
}

fn long_run(gamma_w: f64) -> Result<WelfareCriterion> {
    WelfareCriterion::new(
        "long-run",
        CriterionKind::LongRun,
        gamma_w,
        declaration(
            "Discounted long-run utility u^L of each action",
            "Reflective, planning-self preferences are treated as the person's considered interests",
        ),
    )
}

fn implemented(gamma_w: f64) -> Result<WelfareCriterion> {
    WelfareCriterion::new(
        "implemented",
        CriterionKind::Implemented,
        gamma_w,
        declaration(
            "Discounted dual-self mixture lambda(s) u^L + (1 - lambda(s)) u^S",
            "Weights both selves by the control each actually exerts in the state",
        ),
    )
}

// ── Conditioning ────────────────────────────────────────────────────────

/// Single-action chain: states `0..=reward_time` step forward one at a time,
/// `cue_time` is cue-flagged, `reward_time` pays `magnitude`, and state
/// `reward_time + 1` is terminal.
pub fn conditioning_chain(cue_time: usize, reward_time: usize, magnitude: f64) -> Result<Mdp> {
    if cue_time >= reward_time {
        return Err(Error::InvalidArgument("cue must precede reward".into()));
    }
    let n = reward_time + 2;
    let transition = (0..n)
        .map(|s| {
            let mut row = vec![0.0; n];
            row[(s + 1).min(n - 1)] = 1.0;
            vec![row]
        })
        .collect();
    let mut reward = vec![vec![0.0]; n];
    reward[reward_time][0] = magnitude;
    let mut cue = vec![false; n];
    cue[cue_time] = true;
    let mut terminal = vec![false; n];
    terminal[n - 1] = true;
    Mdp::new(transition, reward, cue, 0, terminal)
}

/// Inter-trial state, cue, `delay - 1` waiting states, reward state, then the
/// terminal end of the trial. With `omission_prob > 0` the last waiting step
/// branches to an unrewarded omission state with that probability.
pub fn build_conditioning(delay: usize, magnitude: f64, omission_prob: f64) -> Result<ScenarioBundle> {
    if delay == 0 {
        return Err(Error::Precondition("delay must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&omission_prob) || !magnitude.is_finite() {
        return Err(Error::InvalidArgument("need omission_prob in [0,1] and finite magnitude".into()));
    }
    let reward_time = 1 + delay;
    let mut mdp = conditioning_chain(1, reward_time, magnitude)?;
    if omission_prob > 0.0 {
        // insert the omission state before the terminal
        let n = mdp.n_states + 1;
        let (omit, end) = (n - 2, n - 1);
        let mut transition: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; n]]; n];
        for s in 0..reward_time {
            transition[s][0][s + 1] = 1.0;
        }
        transition[reward_time - 1][0][reward_time] = 1.0 - omission_prob;
        transition[reward_time - 1][0][omit] = omission_prob;
        transition[reward_time][0][end] = 1.0;
        transition[omit][0][end] = 1.0;
        transition[end][0][end] = 1.0;
        let mut reward = vec![vec![0.0]; n];
        reward[reward_time][0] = magnitude;
        let mut cue = vec![false; n];
        cue[1] = true;
        let mut terminal = vec![false; n];
        terminal[end] = true;
        mdp = Mdp::new(transition, reward, cue, 0, terminal)?;
    }
    let agent_config = AgentConfig {
        alpha_critic: 0.1,
        alpha_actor: 0.1,
        beta: 1.0,
        gamma: 0.95,
        policy_mode: PolicyMode::QFromV,
        initial_value: 0.0,
        schedule: LearningRateSchedule::Decay,
        delta_source: DeltaSource::ChoiceValues,
    };
    let bundle = ScenarioBundle {
        label: "conditioning".into(),
        interventions: vec![Intervention::null(&mdp)],
        mdp,
        agent_config,
        cue_model: None,
        dual_self: None,
        criteria: vec![experienced(0.95)?],
        models: vec![],
    };
    bundle.validate()?;
    Ok(bundle)
}

// ── Cue-driven consumption ──────────────────────────────────────────────

pub const BASELINE: usize = 0;
pub const CUE: usize = 1;
pub const ABSTAIN: usize = 0;
pub const CONSUME: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AddictionParams {
    pub kappa: f64,
    pub lambda_cue: f64,
    pub lambda_base: f64,
    /// `u^S(consume)`
    pub consumption_reward_short: f64,
    /// `-u^L(consume)`
    pub long_run_cost: f64,
}

impl Default for AddictionParams {
    fn default() -> Self {
        AddictionParams {
            kappa: 1.6,
            lambda_cue: 0.6,
            lambda_base: 0.8,
            consumption_reward_short: 1.0,
            long_run_cost: 2.0,
        }
    }
}

impl AddictionParams {
    fn reward(&self, lambda: f64) -> [f64; 2] {
        let u = self.dual_self();
        [0, 1].map(|a| lambda * u.u_long[a] + (1.0 - lambda) * u.u_short[a])
    }

    fn dual_self(&self) -> DualSelfUtility {
        DualSelfUtility {
            u_long: vec![0.0, -self.long_run_cost],
            u_short: vec![0.0, self.consumption_reward_short],
        }
    }

    /// Smallest κ at which the distorted cue-state values tie abstain with
    /// consume. Transitions do not depend on the action, so the continuation
    /// cancels and the gap is the one-step reward gap.
    pub fn kappa_threshold(&self) -> f64 {
        let r = self.reward(self.lambda_cue);
        (r[ABSTAIN] - r[CONSUME]).max(0.0)
    }
}

pub const TWIN_SIGMA: f64 = 0.1;

/// Two contexts, baseline and cue, alternating deterministically whatever
/// the person does; actions abstain and consume. Consumption is cue-reactive
/// (`C(cue, consume) = 1`), and the experienced reward is the dual-self
/// mixture at the state's λ.
pub fn build_addiction(p: &AddictionParams) -> Result<ScenarioBundle> {
    if !(0.0..=1.0).contains(&p.lambda_cue) || !(0.0..=1.0).contains(&p.lambda_base) {
        return Err(Error::InvalidArgument("lambda values must lie in [0,1]".into()));
    }
    if p.lambda_cue > p.lambda_base {
        return Err(Error::Precondition("lambda_cue must not exceed lambda_base".into()));
    }
    if !(p.kappa.is_finite() && p.kappa >= 0.0) {
        return Err(Error::InvalidArgument("kappa must be finite and >= 0".into()));
    }
    if !(p.consumption_reward_short.is_finite() && p.long_run_cost.is_finite()) {
        return Err(Error::InvalidArgument("utilities must be finite".into()));
    }
    let to = |s: usize| {
        let mut row = vec![0.0; 2];
        row[s] = 1.0;
        vec![row.clone(), row]
    };
    let mdp = Mdp::new(
        vec![to(CUE), to(BASELINE)],
        vec![p.reward(p.lambda_base).to_vec(), p.reward(p.lambda_cue).to_vec()],
        vec![false, true],
        BASELINE,
        vec![false, false],
    )?;
    let cue_model = CueModel {
        c: vec![vec![0.0, 0.0], vec![0.0, 1.0]],
        kappa: vec![0.0, p.kappa],
        lambda_of_state: vec![p.lambda_base, p.lambda_cue],
    };
    let agent_config = AgentConfig {
        alpha_critic: 0.1,
        alpha_actor: 0.1,
        beta: 3.0,
        gamma: 0.9,
        policy_mode: PolicyMode::QFromV,
        initial_value: 0.0,
        schedule: LearningRateSchedule::Constant,
        delta_source: DeltaSource::ChoiceValues,
    };
    let interventions = vec![
        Intervention::new(
            "tax",
            InterventionKind::RewardShift { states: vec![CUE], actions: vec![CONSUME], amount: -0.5 },
        ),
        Intervention::new("cue-removal", InterventionKind::CueRemoval { states: vec![CUE] }),
        Intervention::new(
            "commitment",
            InterventionKind::ActionRestriction { states: vec![CUE], forbidden: vec![CONSUME] },
        ),
    ];
    let mut bundle = ScenarioBundle {
        label: "addiction".into(),
        mdp,
        agent_config,
        cue_model: Some(cue_model),
        dual_self: Some(p.dual_self()),
        criteria: vec![long_run(0.9)?, implemented(0.9)?, experienced(0.9)?],
        interventions,
        models: vec![],
    };
    let (m1, m2) = build_behavioral_twin(&bundle)?;
    bundle.models = vec![m1, m2];
    bundle.validate()?;
    Ok(bundle)
}

fn delta_channel() -> ChannelSpec {
    ChannelSpec { id: "delta".into(), latent: Latent::Delta, link: LinkFunction::Identity, sigma: TWIN_SIGMA }
}

/// Two explanations of the same choices.
///
/// M1 (cue distortion): rewards are as experienced, and the cue adds `κ C`
/// to choice values only; welfare is judged by long-run utility. M2 (taste
/// shift): the cue genuinely changes the reward to `r + κ C`; welfare is the
/// reward so experienced. Both learn with the same rates, initial values and
/// discount, and δ channel.
///
/// With action-independent transitions, M2's action values equal M1's
/// distorted values up to a per-state constant, so both softmax policies
/// coincide at every step of learning. The builder refuses environments where
/// the continuation could differ across actions, or where κ differs between
/// cue states.
pub fn build_behavioral_twin(base: &ScenarioBundle) -> Result<(ModelCandidate, ModelCandidate)> {
    let mdp = &base.mdp;
    let cue = base
        .cue_model
        .as_ref()
        .ok_or_else(|| Error::Precondition("twin construction needs a cue model".into()))?;
    if !mdp.has_action_independent_transitions() {
        return Err(Error::Precondition("twin construction needs action-independent transitions".into()));
    }
    let kappas: Vec<f64> = (0..mdp.n_states).filter(|&s| mdp.cue_flags[s]).map(|s| cue.kappa[s]).collect();
    let kappa = kappas.first().copied().unwrap_or(0.0);
    if kappas.iter().any(|&k| k != kappa) {
        return Err(Error::Precondition("twin construction needs one kappa across cue states".into()));
    }
    let cfg = &base.agent_config;
    if cfg.policy_mode != PolicyMode::QFromV {
        return Err(Error::Precondition("twin construction needs q-from-v choice".into()));
    }
    let fixed: Params = BTreeMap::from([
        (ParamName::Alpha, cfg.alpha_critic),
        (ParamName::Beta, cfg.beta),
        (ParamName::Gamma, cfg.gamma),
        (ParamName::Kappa, kappa),
    ]);
    let spec = |model_id| ModelSpec {
        model_id,
        free_parameters: BTreeMap::new(),
        fixed_parameters: fixed.clone(),
        neural_channels: vec![delta_channel()],
        policy_mode: PolicyMode::QFromV,
        schedule: cfg.schedule,
        initial_value: cfg.initial_value,
        cue_reactivity: Some(cue.c.clone()),
    };
    let gamma_w = cfg.gamma;
    let m1 = ModelCandidate {
        label: "cue-distortion".into(),
        spec: spec(ModelId::CueDistortion),
        params: Params::new(),
        criterion: long_run(gamma_w)?,
    };
    let m2 = ModelCandidate {
        label: "taste-shift".into(),
        spec: spec(ModelId::TasteShift),
        params: Params::new(),
        criterion: experienced(gamma_w)?,
    };
    Ok((m1, m2))
}

// ── Scale pair ──────────────────────────────────────────────────────────

/// State 0: stay (reward 1) or leave (0). State 1: return (0.5) or stay (0).
pub fn scale_pair_env() -> Mdp {
    Mdp::new(
        vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![1.0, 0.0], vec![0.0, 1.0]]],
        vec![vec![1.0, 0.0], vec![0.5, 0.0]],
        vec![false, false],
        0,
        vec![false, false],
    )
    .expect("scale-pair environment is valid")
}

/// `(values, β)` against `(c · values, β / c)`, both observed through a value
/// channel.
pub fn build_scale_pair(c: f64, base_beta: f64) -> Result<(ModelCandidate, ModelCandidate, Mdp)> {
    if !(c.is_finite() && c > 0.0) || c == 1.0 {
        return Err(Error::Precondition(format!("scale must be positive and != 1, got {c}")));
    }
    if !(base_beta.is_finite() && base_beta >= 0.0) {
        return Err(Error::InvalidArgument("base_beta must be finite and >= 0".into()));
    }
    let env = scale_pair_env();
    let spec = |model_id, extra: &[(ParamName, f64)], beta: f64| {
        let mut fixed: Params = BTreeMap::from([
            (ParamName::Alpha, 0.5),
            (ParamName::Beta, beta),
            (ParamName::Gamma, 0.9),
        ]);
        fixed.extend(extra.iter().copied());
        ModelSpec {
            model_id,
            free_parameters: BTreeMap::new(),
            fixed_parameters: fixed,
            neural_channels: vec![ChannelSpec {
                id: "value".into(),
                latent: Latent::Value,
                link: LinkFunction::Identity,
                sigma: TWIN_SIGMA,
            }],
            policy_mode: PolicyMode::QFromV,
            schedule: LearningRateSchedule::Constant,
            initial_value: 0.0,
            cue_reactivity: None,
        }
    };
    let crit = experienced(0.9)?;
    let a = ModelCandidate {
        label: "plain".into(),
        spec: spec(ModelId::PlainRl, &[], base_beta),
        params: Params::new(),
        criterion: crit.clone(),
    };
    let b = ModelCandidate {
        label: format!("scaled-x{c}"),
        spec: spec(ModelId::ScaledReward, &[(ParamName::Scale, c)], base_beta / c),
        params: Params::new(),
        criterion: crit,
    };
    Ok((a, b, env))
}

// ── Two-armed bandit ────────────────────────────────────────────────────

/// Continuing two-armed bandit. From the choice state 0, action `a` enters
/// arm state `1 + a`; an arm pays off by moving to the win state 3 (reward
/// 1 on leaving it) with its probability, else to the loss state 4; both
/// return to the choice state. Every action in a non-choice state is
/// equivalent.
pub fn two_armed_bandit(p_win: [f64; 2]) -> Result<Mdp> {
    if p_win.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidArgument("win probabilities must lie in [0,1]".into()));
    }
    let n = 5;
    let onto = |s: usize| {
        let mut row = vec![0.0; n];
        row[s] = 1.0;
        row
    };
    let arm = |p: f64| {
        let mut row = vec![0.0; n];
        row[3] = p;
        row[4] = 1.0 - p;
        vec![row.clone(), row]
    };
    Mdp::new(
        vec![
            vec![onto(1), onto(2)],
            arm(p_win[0]),
            arm(p_win[1]),
            vec![onto(0), onto(0)],
            vec![onto(0), onto(0)],
        ],
        vec![vec![0.0; 2], vec![0.0; 2], vec![0.0; 2], vec![1.0; 2], vec![0.0; 2]],
        vec![false; n],
        0,
        vec![false; n],
    )
}

/// Plain learner with free α and β and fixed γ, choosing from q-from-v.
pub fn bandit_recovery_spec(gamma: f64) -> ModelSpec {
    ModelSpec {
        model_id: ModelId::PlainRl,
        free_parameters: BTreeMap::from([
            (ParamName::Alpha, crate::inference::Bound::new(0.01, 1.0)),
            (ParamName::Beta, crate::inference::Bound::new(0.0, 10.0)),
        ]),
        fixed_parameters: BTreeMap::from([(ParamName::Gamma, gamma)]),
        neural_channels: vec![],
        policy_mode: PolicyMode::QFromV,
        schedule: LearningRateSchedule::Constant,
        initial_value: 0.0,
        cue_reactivity: None,
    }
}

// ── Platform reward shaping ─────────────────────────────────────────────

pub const OTHER: usize = 0;
pub const ENGAGE: usize = 1;

/// Feed and offline contexts alternate whatever the person does. Engaging
/// pleases the short-run self (`u^S = 1`) and costs the long-run self
/// (`u^L = -0.5`); the alternative is mildly good for both.
pub fn build_platform() -> Result<ScenarioBundle> {
    let dual = DualSelfUtility { u_long: vec![0.5, -0.5], u_short: vec![0.2, 1.0] };
    let lambda = 0.5;
    let r: Vec<f64> = (0..2).map(|a| lambda * dual.u_long[a] + (1.0 - lambda) * dual.u_short[a]).collect();
    let to = |s: usize| {
        let mut row = vec![0.0; 2];
        row[s] = 1.0;
        vec![row.clone(), row]
    };
    let mdp = Mdp::new(vec![to(1), to(0)], vec![r.clone(), r], vec![false, false], 0, vec![false, false])?;
    let agent_config = AgentConfig {
        alpha_critic: 0.1,
        alpha_actor: 0.1,
        beta: 3.0,
        gamma: 0.9,
        policy_mode: PolicyMode::QFromV,
        initial_value: 0.0,
        schedule: LearningRateSchedule::Constant,
        delta_source: DeltaSource::ChoiceValues,
    };
    let bundle = ScenarioBundle {
        label: "platform".into(),
        interventions: vec![Intervention::null(&mdp)],
        mdp,
        agent_config,
        cue_model: Some(CueModel {
            c: vec![vec![0.0; 2]; 2],
            kappa: vec![0.0; 2],
            lambda_of_state: vec![lambda; 2],
        }),
        dual_self: Some(dual),
        criteria: vec![long_run(0.9)?, experienced(0.9)?],
        models: vec![],
    };
    bundle.validate()?;
    Ok(bundle)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlatformOptimizer {
    pub target_action: usize,
    pub step_size: f64,
    pub epochs: usize,
    pub budget: f64,
    /// Length of each fresh learning run.
    #[serde(default = "default_run_length")]
    pub run_length: usize,
}

fn default_run_length() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformPoint {
    pub epoch: usize,
    pub engagement: f64,
    /// Reward added so far, summed over cells.
    pub added: f64,
    /// `(criterion label, welfare)` in bundle order.
    pub welfare: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformSeries {
    pub points: Vec<PlatformPoint>,
    pub budget_exhausted: bool,
    pub total_added: f64,
}

impl PlatformSeries {
    pub fn welfare(&self, criterion: &str) -> Vec<f64> {
        self.points
            .iter()
            .filter_map(|p| p.welfare.iter().find(|(c, _)| c == criterion).map(|(_, w)| *w))
            .collect()
    }

    pub fn engagement(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.engagement).collect()
    }

    /// Long format: one row per epoch and criterion.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "engagement", "criterion", "welfare"])?;
        for p in &self.points {
            for (c, v) in &p.welfare {
                w.write_record([p.epoch.to_string(), p.engagement.to_string(), c.clone(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn platform_point(bundle: &ScenarioBundle, mdp: &Mdp, target: usize, relearn: &Relearn, epoch: usize, added: f64) -> Result<PlatformPoint> {
    let mut rng = crate::seeded_rng(relearn.seed);
    let (traj, _) = crate::agent::run_learning(
        mdp,
        &bundle.agent_config,
        bundle.cue_model.as_ref(),
        relearn.trials,
        relearn.horizon,
        &mut rng,
    )?;
    let engagement = traj.records.iter().filter(|r| r.action == target).count() as f64 / traj.len() as f64;
    let policy = learned_policy(mdp, &bundle.agent_config, bundle.cue_model.as_ref(), relearn)?;
    let components = bundle.components();
    let welfare = bundle
        .criteria
        .iter()
        .map(|c| Ok((c.label().to_string(), evaluate_welfare(mdp, &policy, c, &components)?)))
        .collect::<Result<_>>()?;
    Ok(PlatformPoint { epoch, engagement, added, welfare })
}

/// Hill-climbing platform. Each epoch proposes raising `r(s, target)` by
/// `step_size` in every non-terminal state where the target is available,
/// measures engagement on a fresh learning run and keeps the change if
/// engagement did not fall. Every run reuses one seed drawn from `rng`, so
/// epochs differ only through the reward table. The loop ends early, and
/// records it, when the next step would overspend the budget.
pub fn run_platform_loop<R: Rng + ?Sized>(
    bundle: &ScenarioBundle,
    optimizer: &PlatformOptimizer,
    rng: &mut R,
) -> Result<PlatformSeries> {
    let mdp0 = &bundle.mdp;
    let target = optimizer.target_action;
    if target >= mdp0.n_actions {
        return Err(Error::OutOfRange(format!("target action {target}")));
    }
    if !(optimizer.step_size.is_finite() && optimizer.step_size >= 0.0) {
        return Err(Error::InvalidArgument("step_size must be finite and >= 0".into()));
    }
    if !(optimizer.budget.is_finite() && optimizer.budget >= 0.0) || optimizer.run_length == 0 {
        return Err(Error::InvalidArgument("need a finite budget >= 0 and run_length >= 1".into()));
    }
    let relearn = Relearn { trials: 1, horizon: optimizer.run_length, seed: rng.random() };
    let cells: Vec<usize> = (0..mdp0.n_states)
        .filter(|&s| !mdp0.is_terminal(s) && mdp0.is_available(s, target))
        .collect();
    let cost = optimizer.step_size * cells.len() as f64;

    let mut mdp = mdp0.clone();
    let mut spent = 0.0;
    let mut current = platform_point(bundle, &mdp, target, &relearn, 0, spent)?;
    let mut points = vec![current.clone()];
    let mut budget_exhausted = false;
    for epoch in 1..=optimizer.epochs {
        if spent + cost > optimizer.budget {
            budget_exhausted = true;
            break;
        }
        let mut proposal = mdp.clone();
        for &s in &cells {
            proposal.reward[s][target] += optimizer.step_size;
        }
        let candidate = platform_point(bundle, &proposal, target, &relearn, epoch, spent + cost)?;
        if candidate.engagement >= current.engagement {
            mdp = proposal;
            spent += cost;
            current = candidate;
        } else {
            current.epoch = epoch;
        }
        points.push(current.clone());
    }
    Ok(PlatformSeries { points, budget_exhausted, total_added: spent })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::exact_choice_values;
    use crate::inference::identifiability_gap;
    use crate::welfare::{classify_mistake_states, Continuation};

    #[test]
    fn conditioning_shapes() {
        let b = build_conditioning(2, 1.0, 0.0).unwrap();
        assert_eq!(b.mdp.n_states, 5);
        let nonzero: Vec<f64> = b.mdp.reward.iter().flatten().copied().filter(|&r| r != 0.0).collect();
        assert_eq!(nonzero, vec![1.0]);
        assert_eq!(b.mdp, conditioning_chain(1, 3, 1.0).unwrap());
        let b = build_conditioning(2, 1.0, 0.3).unwrap();
        assert_eq!(b.mdp.n_states, 6);
        assert!(validate_mdp(&b.mdp).is_ok());
        assert!(build_conditioning(0, 1.0, 0.0).is_err());
    }

    #[test]
    fn addiction_precondition() {
        let p = AddictionParams { lambda_cue: 0.9, lambda_base: 0.5, ..Default::default() };
        assert!(matches!(build_addiction(&p), Err(Error::Precondition(_))));
    }

    #[test]
    fn addiction_threshold() {
        let p = AddictionParams::default();
        assert!((p.kappa_threshold() - 0.8).abs() < 1e-12);
    }

    fn mistakes(p: &AddictionParams) -> Vec<usize> {
        let b = build_addiction(p).unwrap();
        let (q, pol, _) = exact_choice_values(&b.mdp, &b.agent_config, b.cue_model.as_ref()).unwrap();
        let crit = b.criterion("long-run").unwrap();
        classify_mistake_states(&b.mdp, &q, &pol, crit, &b.components(), Continuation::ImplementedPolicy)
            .unwrap()
            .mistake_states
            .into_iter()
            .collect()
    }

    #[test]
    fn mistakes_follow_kappa() {
        let p = AddictionParams { kappa: 0.0, lambda_cue: 0.8, ..Default::default() };
        assert!(mistakes(&p).is_empty());
        let mut p = AddictionParams::default();
        p.kappa = 2.0 * p.kappa_threshold();
        assert_eq!(mistakes(&p), vec![CUE]);
    }

    #[test]
    fn twin_identifiability() {
        let b = build_addiction(&AddictionParams::default()).unwrap();
        let iv = b.intervention("cue-removal").unwrap();
        let r = identifiability_gap(&b.mdp, (&b.models[0], &b.models[1]), 3, 3, &b.components(), iv, None).unwrap();
        assert!(r.tv_choice < 1e-9, "{}", r.tv_choice);
        assert!(r.tv_joint.unwrap() > 0.05);
        assert!(r.welfare_verdicts_diverge);
        assert!(r.verdicts[0].delta > 0.0 && r.verdicts[1].delta < 0.0);
    }

    #[test]
    fn twin_rejects_action_dependent_dynamics() {
        let mut b = build_addiction(&AddictionParams::default()).unwrap();
        b.mdp.transition[0][1] = vec![1.0, 0.0];
        assert!(build_behavioral_twin(&b).is_err());
    }

    #[test]
    fn scale_pair_precondition() {
        assert!(build_scale_pair(1.0, 1.0).is_err());
        assert!(build_scale_pair(-2.0, 1.0).is_err());
        assert!(build_scale_pair(2.0, 1.0).is_ok());
    }

    #[test]
    fn platform_edge_cases() {
        let b = build_platform().unwrap();
        let opt = PlatformOptimizer { target_action: ENGAGE, step_size: 0.25, epochs: 0, budget: 10.0, run_length: 200 };
        let s = run_platform_loop(&b, &opt, &mut crate::seeded_rng(1)).unwrap();
        assert_eq!(s.points.len(), 1);
        let flat = PlatformOptimizer { step_size: 0.0, epochs: 3, ..opt };
        let s = run_platform_loop(&b, &flat, &mut crate::seeded_rng(1)).unwrap();
        assert!(s.points.windows(2).all(|w| w[0].engagement == w[1].engagement && w[0].welfare == w[1].welfare));
        let tight = PlatformOptimizer { epochs: 10, budget: 1.2, ..opt };
        let s = run_platform_loop(&b, &tight, &mut crate::seeded_rng(1)).unwrap();
        assert!(s.budget_exhausted);
        assert_eq!(s.total_added, 1.0);
    }

    #[test]
    fn bundle_round_trip() {
        let b = build_addiction(&AddictionParams::default()).unwrap();
        let text = b.to_json().unwrap();
        assert!(text.contains("\"scenario\""));
        assert_eq!(ScenarioBundle::from_json(&text).unwrap(), b);
    }
}
