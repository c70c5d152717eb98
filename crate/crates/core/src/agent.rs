//! Tabular actor–critic learner.
//!
//! The critic keeps state values `v`, the actor keeps action preferences
//! `prefs`, and one TD error per step drives both. Choice is a softmax over
//! either the actor's preferences or action values derived from `v` and the
//! known dynamics ([`PolicyMode`]). Cue reactivity, when present, is added to
//! the action values of cue-flagged states before the softmax.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{sample_index, step, Mdp, StochasticPolicy};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyMode {
    ActorPreferences,
    QFromV,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LearningRateSchedule {
    #[default]
    Constant,
    /// Critic step `1/(1 + visits[s])`; the actor keeps `alpha_actor`.
    Decay,
}

/// Which values the teaching signal is computed from in cue states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaSource {
    /// The values used for choice: the cue bonus `κ C(s,a)` of the chosen
    /// action enters δ.
    #[default]
    ChoiceValues,
    /// Undistorted values: δ is computed from the environment reward alone.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub alpha_critic: f64,
    pub alpha_actor: f64,
    pub beta: f64,
    pub gamma: f64,
    pub policy_mode: PolicyMode,
    #[serde(default)]
    pub initial_value: f64,
    #[serde(default)]
    pub schedule: LearningRateSchedule,
    #[serde(default)]
    pub delta_source: DeltaSource,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            alpha_critic: 0.1,
            alpha_actor: 0.1,
            beta: 1.0,
            gamma: 0.9,
            policy_mode: PolicyMode::QFromV,
            initial_value: 0.0,
            schedule: LearningRateSchedule::Constant,
            delta_source: DeltaSource::ChoiceValues,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let rate = |x: f64| x > 0.0 && x <= 1.0;
        if !rate(self.alpha_critic) || !rate(self.alpha_actor) {
            return Err(Error::InvalidArgument("learning rates must lie in (0,1]".into()));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidArgument(format!("beta {} must be finite and >= 0", self.beta)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("gamma {} not in [0,1)", self.gamma)));
        }
        if !self.initial_value.is_finite() {
            return Err(Error::InvalidArgument("initial_value must be finite".into()));
        }
        Ok(())
    }

    fn critic_rate(&self, visits: u64) -> f64 {
        match self.schedule {
            LearningRateSchedule::Constant => self.alpha_critic,
            LearningRateSchedule::Decay => 1.0 / (1.0 + visits as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub v: Vec<f64>,
    pub prefs: Vec<Vec<f64>>,
    pub visit_counts: Vec<u64>,
}

impl AgentState {
    /// Values and preferences start at `initial_value`; terminal states hold 0.
    pub fn new(mdp: &Mdp, initial_value: f64) -> Self {
        let v = (0..mdp.n_states)
            .map(|s| if mdp.is_terminal(s) { 0.0 } else { initial_value })
            .collect();
        AgentState {
            v,
            prefs: vec![vec![initial_value; mdp.n_actions]; mdp.n_states],
            visit_counts: vec![0; mdp.n_states],
        }
    }

    pub fn critic_update(&mut self, s: usize, delta: f64, alpha: f64) {
        self.v[s] += alpha * delta;
        self.visit_counts[s] += 1;
    }

    pub fn actor_update(&mut self, s: usize, a: usize, delta: f64, alpha_actor: f64) {
        self.prefs[s][a] += alpha_actor * delta;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueModel {
    /// `C(s,a) >= 0`
    pub c: Vec<Vec<f64>>,
    /// `κ(s) >= 0`, zero on non-cue states.
    pub kappa: Vec<f64>,
    /// `λ(s)` in `[0,1]`.
    pub lambda_of_state: Vec<f64>,
}

impl CueModel {
    pub fn validate(&self, mdp: &Mdp) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("cue model: {m}")));
        if self.c.len() != mdp.n_states || self.c.iter().any(|r| r.len() != mdp.n_actions) {
            return bad("C table dimensions do not match mdp");
        }
        if self.kappa.len() != mdp.n_states || self.lambda_of_state.len() != mdp.n_states {
            return bad("per-state tables must have one entry per state");
        }
        if self.c.iter().flatten().any(|&x| !(x.is_finite() && x >= 0.0)) {
            return bad("C must be finite and nonnegative");
        }
        for s in 0..mdp.n_states {
            let k = self.kappa[s];
            if !(k.is_finite() && k >= 0.0) {
                return bad("kappa must be finite and nonnegative");
            }
            if k != 0.0 && !mdp.cue_flags[s] {
                return bad("kappa must be zero on non-cue states");
            }
            if !(0.0..=1.0).contains(&self.lambda_of_state[s]) {
                return bad("lambda must lie in [0,1]");
            }
        }
        Ok(())
    }

    /// The same model with κ zeroed wherever `mdp` has no cue flag, e.g.
    /// after a cue-removal intervention.
    pub fn restricted_to(&self, mdp: &Mdp) -> CueModel {
        let mut out = self.clone();
        for (k, &flag) in out.kappa.iter_mut().zip(&mdp.cue_flags) {
            if !flag {
                *k = 0.0;
            }
        }
        out
    }

    /// κ as seen by an environment: zero wherever the cue flag is cleared.
    pub fn active_kappa(&self, mdp: &Mdp, s: usize) -> f64 {
        if mdp.cue_flags[s] {
            self.kappa[s]
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSelfUtility {
    pub u_long: Vec<f64>,
    pub u_short: Vec<f64>,
}

impl DualSelfUtility {
    pub fn validate(&self, n_actions: usize) -> Result<()> {
        if self.u_long.len() != n_actions || self.u_short.len() != n_actions {
            return Err(Error::InvalidArgument("dual-self tables must have one entry per action".into()));
        }
        if self.u_long.iter().chain(&self.u_short).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("dual-self utilities must be finite".into()));
        }
        Ok(())
    }
}

// ── Elementary operations ───────────────────────────────────────────────

pub fn td_error(r: f64, gamma: f64, v_next: f64, v_cur: f64) -> f64 {
    r + gamma * v_next - v_cur
}

/// `Q(s,a) = r(s,a) + γ Σ P(s'|s,a) v[s']` for one state.
pub fn q_row(mdp: &Mdp, v: &[f64], gamma: f64, s: usize) -> Vec<f64> {
    (0..mdp.n_actions)
        .map(|a| {
            let cont: f64 = mdp.transition[s][a].iter().zip(v).map(|(p, x)| p * x).sum();
            mdp.reward[s][a] + gamma * cont
        })
        .collect()
}

pub fn q_from_v(mdp: &Mdp, v: &[f64], gamma: f64) -> Vec<Vec<f64>> {
    (0..mdp.n_states).map(|s| q_row(mdp, v, gamma, s)).collect()
}

/// Softmax with inverse temperature `beta` over the available actions.
/// Unavailable actions get probability 0.
pub fn policy_probs(values: &[f64], beta: f64, available: &[bool]) -> Result<Vec<f64>> {
    if values.len() != available.len() {
        return Err(Error::InvalidArgument("values and mask lengths differ".into()));
    }
    let max = values
        .iter()
        .zip(available)
        .filter(|(_, &ok)| ok)
        .map(|(&x, _)| beta * x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyActionSet(usize::MAX));
    }
    if !max.is_finite() {
        return Err(Error::InvalidArgument("non-finite action value".into()));
    }
    let mut out: Vec<f64> = values
        .iter()
        .zip(available)
        .map(|(&x, &ok)| if ok { (beta * x - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    Ok(out)
}

/// Greedy choice over available actions; ties go to the lowest index.
pub fn greedy_action(values: &[f64], available: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (a, &x) in values.iter().enumerate() {
        if available[a] && best.is_none_or(|b| x > values[b]) {
            best = Some(a);
        }
    }
    best
}

/// `base(s,·) + κ[s]·C(s,·)`
pub fn effective_values(base: &[f64], cue: &CueModel, s: usize) -> Vec<f64> {
    base.iter()
        .zip(&cue.c[s])
        .map(|(b, c)| b + cue.kappa[s] * c)
        .collect()
}

/// `λ u^L(a) + (1-λ) u^S(a)`
pub fn implemented_utility(a: usize, lambda_s: f64, u: &DualSelfUtility) -> f64 {
    lambda_s * u.u_long[a] + (1.0 - lambda_s) * u.u_short[a]
}

// ── Learning loop ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub trial: usize,
    pub t: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub delta: f64,
    pub v_state: f64,
    pub chosen_prob: f64,
    /// Successor state; not part of the CSV export.
    pub next_state: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<Record>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Latent {
    Delta,
    Value,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentSample {
    pub trial: usize,
    pub t: usize,
    pub value: f64,
}

impl Trajectory {
    pub const CSV_HEADER: [&'static str; 8] =
        ["trial", "t", "state", "action", "reward", "delta", "v_state", "chosen_prob"];

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn latents(&self, which: Latent) -> Vec<LatentSample> {
        self.records
            .iter()
            .map(|r| LatentSample {
                trial: r.trial,
                t: r.t,
                value: match which {
                    Latent::Delta => r.delta,
                    Latent::Value => r.v_state,
                },
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.trial.to_string(),
                r.t.to_string(),
                r.state.to_string(),
                r.action.to_string(),
                r.reward.to_string(),
                r.delta.to_string(),
                r.v_state.to_string(),
                r.chosen_prob.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One learner bound to an environment. Shared by simulation, likelihood
/// replay and exact enumeration so all three apply identical updates.
#[derive(Debug, Clone)]
pub struct Learner<'a> {
    pub mdp: &'a Mdp,
    pub config: &'a AgentConfig,
    pub cue: Option<&'a CueModel>,
    pub state: AgentState,
}

/// What one learning step produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub delta: f64,
    pub v_state: f64,
}

impl<'a> Learner<'a> {
    pub fn new(mdp: &'a Mdp, config: &'a AgentConfig, cue: Option<&'a CueModel>) -> Self {
        Learner { mdp, config, cue, state: AgentState::new(mdp, config.initial_value) }
    }

    /// Undistorted action values in state `s`.
    pub fn base_values(&self, s: usize) -> Vec<f64> {
        match self.config.policy_mode {
            PolicyMode::ActorPreferences => self.state.prefs[s].clone(),
            PolicyMode::QFromV => q_row(self.mdp, &self.state.v, self.config.gamma, s),
        }
    }

    fn cue_bonus(&self, s: usize, a: usize) -> f64 {
        self.cue.map_or(0.0, |c| c.active_kappa(self.mdp, s) * c.c[s][a])
    }

    /// Action values used for choice.
    pub fn choice_values(&self, s: usize) -> Vec<f64> {
        let base = self.base_values(s);
        match self.cue {
            Some(c) if c.active_kappa(self.mdp, s) != 0.0 => {
                base.iter().enumerate().map(|(a, b)| b + self.cue_bonus(s, a)).collect()
            }
            _ => base,
        }
    }

    pub fn probs(&self, s: usize) -> Result<Vec<f64>> {
        policy_probs(&self.choice_values(s), self.config.beta, &self.mdp.available_mask(s))
            .map_err(|e| match e {
                Error::EmptyActionSet(_) => Error::EmptyActionSet(s),
                e => e,
            })
    }

    /// Applies the TD update for the transition `(s, a, r, s_next)`.
    pub fn learn(&mut self, s: usize, a: usize, r: f64, s_next: usize) -> StepOutcome {
        let v_state = self.state.v[s];
        let v_next = if self.mdp.is_terminal(s_next) { 0.0 } else { self.state.v[s_next] };
        let bonus = match self.config.delta_source {
            DeltaSource::ChoiceValues => self.cue_bonus(s, a),
            DeltaSource::Baseline => 0.0,
        };
        let delta = td_error(r + bonus, self.config.gamma, v_next, v_state);
        let alpha = self.config.critic_rate(self.state.visit_counts[s]);
        self.state.critic_update(s, delta, alpha);
        if self.config.policy_mode == PolicyMode::ActorPreferences {
            self.state.actor_update(s, a, delta, self.config.alpha_actor);
        }
        StepOutcome { delta, v_state }
    }

    /// Softmax policy over the current choice values in every state.
    pub fn current_policy(&self) -> Result<StochasticPolicy> {
        let probs = (0..self.mdp.n_states)
            .map(|s| self.probs(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(StochasticPolicy { probs })
    }
}

pub fn run_learning<R: Rng + ?Sized>(
    mdp: &Mdp,
    config: &AgentConfig,
    cue: Option<&CueModel>,
    trials: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<(Trajectory, AgentState)> {
    if trials == 0 || horizon == 0 {
        return Err(Error::Precondition("trials and horizon must be >= 1".into()));
    }
    config.validate()?;
    if let Some(c) = cue {
        c.validate(mdp)?;
    }
    let mut learner = Learner::new(mdp, config, cue);
    let mut traj = Trajectory { records: Vec::with_capacity(trials * horizon.min(1024)) };
    for trial in 0..trials {
        let mut s = mdp.initial_state;
        for t in 0..horizon {
            if mdp.is_terminal(s) {
                break;
            }
            let probs = learner.probs(s)?;
            let a = sample_index(&probs, rng.random());
            let (s_next, r) = step(mdp, s, a, rng)?;
            let out = learner.learn(s, a, r, s_next);
            traj.records.push(Record {
                trial,
                t,
                state: s,
                action: a,
                reward: r,
                delta: out.delta,
                v_state: out.v_state,
                chosen_prob: probs[a],
                next_state: s_next,
            });
            s = s_next;
        }
    }
    Ok((traj, learner.state))
}

/// Values and policy at the fixed point of on-policy TD learning in
/// q-from-v mode: `V` solves the Bellman equation of the softmax policy it
/// induces. Found by alternating policy evaluation and softmax improvement.
pub fn exact_choice_values(
    mdp: &Mdp,
    config: &AgentConfig,
    cue: Option<&CueModel>,
) -> Result<(Vec<Vec<f64>>, StochasticPolicy, Vec<f64>)> {
    if config.policy_mode != PolicyMode::QFromV {
        return Err(Error::Precondition("exact values need policy_mode q-from-v".into()));
    }
    config.validate()?;
    let mut learner = Learner::new(mdp, config, cue);
    let utility: Vec<Vec<f64>> = (0..mdp.n_states)
        .map(|s| {
            (0..mdp.n_actions)
                .map(|a| match config.delta_source {
                    DeltaSource::ChoiceValues => mdp.reward[s][a] + learner.cue_bonus(s, a),
                    DeltaSource::Baseline => mdp.reward[s][a],
                })
                .collect()
        })
        .collect();
    for _ in 0..10_000 {
        let policy = learner.current_policy()?;
        let v = crate::environment::solve_policy_values(mdp, &policy, config.gamma, &utility)?;
        let scale = 1.0 + v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let change = v.iter().zip(&learner.state.v).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        learner.state.v = v;
        if change <= 1e-14 * scale {
            let values = (0..mdp.n_states).map(|s| learner.choice_values(s)).collect();
            let policy = learner.current_policy()?;
            return Ok((values, policy, learner.state.v));
        }
    }
    Err(Error::Precondition("softmax policy iteration did not converge".into()))
}
