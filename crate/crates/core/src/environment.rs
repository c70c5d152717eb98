//! Finite Markov decision processes.
//!
//! An [`Mdp`] holds a tabular transition kernel `P(s'|s,a)`, a deterministic
//! reward table `r(s,a)`, per-state cue and terminal flags and a per-state
//! action availability mask. Action restriction never deletes columns, so
//! action indices stay stable across interventions.
//!
//! Terminal states are absorbing and carry zero value: the exact solver pins
//! `V(terminal) = 0`, matching the learner, which bootstraps from zero when an
//! episode ends.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PROB_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[s][a][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a]`
    pub reward: Vec<Vec<f64>>,
    pub cue_flags: Vec<bool>,
    pub initial_state: usize,
    pub terminal_flags: Vec<bool>,
    /// `available[s][a]`; absent in a config means every action is available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub available: Option<Vec<Vec<bool>>>,
}

/// Outcome of [`validate_mdp`]. Diagnostics are data, never errors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Validation {
    pub violations: Vec<String>,
}

impl Validation {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::InvalidMdp(self.violations.join("; ")))
        }
    }
}

pub fn validate_mdp(mdp: &Mdp) -> Validation {
    let mut v = Vec::new();
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    if ns == 0 {
        v.push("n_states must be positive".to_string());
    }
    if na == 0 {
        v.push("n_actions must be positive".to_string());
    }
    if mdp.transition.len() != ns {
        v.push(format!("transition has {} state rows, expected {ns}", mdp.transition.len()));
    }
    if mdp.reward.len() != ns {
        v.push(format!("reward has {} rows, expected {ns}", mdp.reward.len()));
    }
    if mdp.cue_flags.len() != ns {
        v.push(format!("cue_flags has length {}, expected {ns}", mdp.cue_flags.len()));
    }
    if mdp.terminal_flags.len() != ns {
        v.push(format!("terminal_flags has length {}, expected {ns}", mdp.terminal_flags.len()));
    }
    if mdp.initial_state >= ns {
        v.push(format!("initial_state {} out of range", mdp.initial_state));
    }
    if let Some(avail) = &mdp.available {
        if avail.len() != ns {
            v.push(format!("available has {} rows, expected {ns}", avail.len()));
        }
        for (s, row) in avail.iter().enumerate() {
            if row.len() != na {
                v.push(format!("available row {s} has length {}, expected {na}", row.len()));
            } else if !row.iter().any(|&b| b) {
                v.push(format!("no available action at s={s}"));
            }
        }
    }
    for (s, rows) in mdp.transition.iter().enumerate() {
        if rows.len() != na {
            v.push(format!("transition state {s} has {} action rows, expected {na}", rows.len()));
            continue;
        }
        for (a, row) in rows.iter().enumerate() {
            if row.len() != ns {
                v.push(format!("transition row (s={s},a={a}) has length {}, expected {ns}", row.len()));
                continue;
            }
            for (s2, &p) in row.iter().enumerate() {
                if !p.is_finite() || p < 0.0 {
                    v.push(format!("negative or non-finite probability {p} at (s={s},a={a},s'={s2})"));
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_TOL {
                v.push(format!("row sum {sum} at (s={s},a={a})"));
            }
        }
    }
    for (s, row) in mdp.reward.iter().enumerate() {
        if row.len() != na {
            v.push(format!("reward row {s} has length {}, expected {na}", row.len()));
        } else if let Some(a) = row.iter().position(|r| !r.is_finite()) {
            v.push(format!("non-finite reward at (s={s},a={a})"));
        }
    }
    if v.is_empty() {
        for s in (0..ns).filter(|&s| mdp.terminal_flags[s]) {
            for a in 0..na {
                if mdp.transition[s][a][s] != 1.0 {
                    v.push(format!("terminal state {s} does not self-loop under a={a}"));
                }
                if mdp.reward[s][a] != 0.0 {
                    v.push(format!("terminal state {s} has nonzero reward under a={a}"));
                }
            }
        }
    }
    Validation { violations: v }
}

impl Mdp {
    /// Builds and validates.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        cue_flags: Vec<bool>,
        initial_state: usize,
        terminal_flags: Vec<bool>,
    ) -> Result<Self> {
        let n_states = transition.len();
        let n_actions = transition.first().map_or(0, Vec::len);
        let mdp = Mdp {
            n_states,
            n_actions,
            transition,
            reward,
            cue_flags,
            initial_state,
            terminal_flags,
            available: None,
        };
        validate_mdp(&mdp).into_result()?;
        Ok(mdp)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mdp: Mdp = serde_json::from_str(text)?;
        validate_mdp(&mdp).into_result()?;
        Ok(mdp)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn is_available(&self, s: usize, a: usize) -> bool {
        self.available.as_ref().is_none_or(|m| m[s][a])
    }

    pub fn available_mask(&self, s: usize) -> Vec<bool> {
        match &self.available {
            Some(m) => m[s].clone(),
            None => vec![true; self.n_actions],
        }
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal_flags[s]
    }

    /// True when no transition row depends on the chosen action.
    pub fn has_action_independent_transitions(&self) -> bool {
        self.transition
            .iter()
            .all(|rows| rows.iter().all(|row| row == &rows[0]))
    }

    pub(crate) fn check_state(&self, s: usize) -> Result<()> {
        if s >= self.n_states {
            return Err(Error::OutOfRange(format!("state {s} >= {}", self.n_states)));
        }
        Ok(())
    }

    pub(crate) fn check_action(&self, a: usize) -> Result<()> {
        if a >= self.n_actions {
            return Err(Error::OutOfRange(format!("action {a} >= {}", self.n_actions)));
        }
        Ok(())
    }
}

/// Samples a successor from `P(.|s,a)`. Consumes exactly one uniform draw so
/// runs that differ only in their policy stay aligned on the same stream.
pub fn step<R: Rng + ?Sized>(mdp: &Mdp, s: usize, a: usize, rng: &mut R) -> Result<(usize, f64)> {
    mdp.check_state(s)?;
    mdp.check_action(a)?;
    if mdp.is_terminal(s) {
        return Err(Error::TerminalStep(s));
    }
    let u: f64 = rng.random();
    let next = sample_index(&mdp.transition[s][a], u);
    Ok((next, mdp.reward[s][a]))
}

/// Inverse-CDF lookup; falls back to the last positive entry to absorb
/// rounding in the cumulative sum.
pub(crate) fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

// ── Policies ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticPolicy {
    pub probs: Vec<Vec<f64>>,
}

impl StochasticPolicy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        let p = StochasticPolicy { probs };
        p.validate()?;
        Ok(p)
    }

    /// Uniform over each state's available actions.
    pub fn uniform(mdp: &Mdp) -> Self {
        let probs = (0..mdp.n_states)
            .map(|s| {
                let mask = mdp.available_mask(s);
                let k = mask.iter().filter(|&&b| b).count() as f64;
                mask.iter().map(|&b| if b { 1.0 / k } else { 0.0 }).collect()
            })
            .collect();
        StochasticPolicy { probs }
    }

    pub fn validate(&self) -> Result<()> {
        for (s, row) in self.probs.iter().enumerate() {
            if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
                return Err(Error::InvalidArgument(format!("negative probability in policy row {s}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_TOL {
                return Err(Error::InvalidArgument(format!("policy row {s} sums to {sum}")));
            }
        }
        Ok(())
    }

    pub fn check_against(&self, mdp: &Mdp) -> Result<()> {
        self.validate()?;
        if self.probs.len() != mdp.n_states || self.probs.iter().any(|r| r.len() != mdp.n_actions) {
            return Err(Error::InvalidArgument("policy dimensions do not match mdp".into()));
        }
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                if self.probs[s][a] > 0.0 && !mdp.is_available(s, a) {
                    return Err(Error::InvalidArgument(format!(
                        "policy puts mass on unavailable action (s={s},a={a})"
                    )));
                }
            }
        }
        Ok(())
    }
}

// ── Exact policy evaluation ─────────────────────────────────────────────

/// Solves `V = Π(u + γ P V)` by a dense direct solve. Terminal states are
/// pinned to zero.
pub fn solve_policy_values(
    mdp: &Mdp,
    policy: &StochasticPolicy,
    gamma: f64,
    utility: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("discount {gamma} not in [0,1)")));
    }
    policy.check_against(mdp)?;
    check_table(mdp, utility, "utility")?;
    let n = mdp.n_states;
    let (p_pi, u_pi) = policy_kernel(mdp, policy, utility);
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for s in 0..n {
        if mdp.is_terminal(s) {
            continue;
        }
        for s2 in 0..n {
            if !mdp.is_terminal(s2) {
                a[(s, s2)] -= gamma * p_pi[s][s2];
            }
        }
        b[s] = u_pi[s];
    }
    let lu = a.clone().lu();
    let mut x = lu.solve(&b).ok_or(Error::Singular)?;
    // one round of iterative refinement
    let r = &b - &a * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    let values: Vec<f64> = x.iter().copied().collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular);
    }
    Ok(values)
}

/// `‖V − Π(u + γPV)‖∞` over non-terminal states, with terminal states read as zero.
pub fn bellman_residual(
    mdp: &Mdp,
    policy: &StochasticPolicy,
    gamma: f64,
    utility: &[Vec<f64>],
    values: &[f64],
) -> f64 {
    let (p_pi, u_pi) = policy_kernel(mdp, policy, utility);
    let v = |s: usize| if mdp.is_terminal(s) { 0.0 } else { values[s] };
    (0..mdp.n_states)
        .filter(|&s| !mdp.is_terminal(s))
        .map(|s| {
            let cont: f64 = (0..mdp.n_states).map(|s2| p_pi[s][s2] * v(s2)).sum();
            (values[s] - (u_pi[s] + gamma * cont)).abs()
        })
        .fold(0.0, f64::max)
}

fn policy_kernel(mdp: &Mdp, policy: &StochasticPolicy, utility: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = mdp.n_states;
    let mut p_pi = vec![vec![0.0; n]; n];
    let mut u_pi = vec![0.0; n];
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let w = policy.probs[s][a];
            if w == 0.0 {
                continue;
            }
            u_pi[s] += w * utility[s][a];
            for s2 in 0..n {
                p_pi[s][s2] += w * mdp.transition[s][a][s2];
            }
        }
    }
    (p_pi, u_pi)
}

pub(crate) fn check_table(mdp: &Mdp, table: &[Vec<f64>], what: &str) -> Result<()> {
    if table.len() != mdp.n_states || table.iter().any(|r| r.len() != mdp.n_actions) {
        return Err(Error::InvalidArgument(format!(
            "{what} table must be {}x{}",
            mdp.n_states, mdp.n_actions
        )));
    }
    Ok(())
}

/// Optimal values under `utility` by value iteration, respecting availability
/// masks. Used for criterion-optimal continuations and as a test oracle.
pub fn optimal_values(mdp: &Mdp, gamma: f64, utility: &[Vec<f64>], tol: f64) -> Vec<f64> {
    let n = mdp.n_states;
    let mut v = vec![0.0; n];
    loop {
        let mut diff = 0.0f64;
        let next: Vec<f64> = (0..n)
            .map(|s| {
                if mdp.is_terminal(s) {
                    return 0.0;
                }
                (0..mdp.n_actions)
                    .filter(|&a| mdp.is_available(s, a))
                    .map(|a| {
                        utility[s][a]
                            + gamma * (0..n).map(|s2| mdp.transition[s][a][s2] * v[s2]).sum::<f64>()
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        for s in 0..n {
            diff = diff.max((next[s] - v[s]).abs());
        }
        v = next;
        if diff < tol * (1.0 - gamma).max(1e-12) {
            return v;
        }
    }
}

// ── Interventions ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InterventionKind {
    RewardShift { states: Vec<usize>, actions: Vec<usize>, amount: f64 },
    ActionRestriction { states: Vec<usize>, forbidden: Vec<usize> },
    CueRemoval { states: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub label: String,
    #[serde(flatten)]
    pub kind: InterventionKind,
}

impl Intervention {
    pub fn new(label: impl Into<String>, kind: InterventionKind) -> Self {
        Intervention { label: label.into(), kind }
    }

    /// The identity intervention.
    pub fn null(mdp: &Mdp) -> Self {
        Intervention::new(
            "null",
            InterventionKind::RewardShift { states: (0..mdp.n_states).collect(), actions: vec![], amount: 0.0 },
        )
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidIntervention { label: self.label.clone(), reason: reason.into() }
    }

    pub fn validate_for(&self, mdp: &Mdp) -> Result<()> {
        let check_states = |states: &[usize]| {
            states
                .iter()
                .find(|&&s| s >= mdp.n_states)
                .map_or(Ok(()), |s| Err(self.invalid(format!("state {s} out of range"))))
        };
        let check_actions = |actions: &[usize]| {
            actions
                .iter()
                .find(|&&a| a >= mdp.n_actions)
                .map_or(Ok(()), |a| Err(self.invalid(format!("action {a} out of range"))))
        };
        match &self.kind {
            InterventionKind::RewardShift { states, actions, amount } => {
                check_states(states)?;
                check_actions(actions)?;
                if !amount.is_finite() {
                    return Err(self.invalid("non-finite amount"));
                }
            }
            InterventionKind::ActionRestriction { states, forbidden } => {
                check_states(states)?;
                check_actions(forbidden)?;
                for &s in states {
                    let left = (0..mdp.n_actions)
                        .filter(|a| mdp.is_available(s, *a) && !forbidden.contains(a))
                        .count();
                    if left == 0 {
                        return Err(self.invalid(format!("restriction empties the action set of state {s}")));
                    }
                }
            }
            InterventionKind::CueRemoval { states } => check_states(states)?,
        }
        Ok(())
    }
}

/// Returns a new environment with the intervention applied. Terminal states
/// are never reward-shifted, so the output keeps the terminal invariants.
pub fn apply_intervention(mdp: &Mdp, iv: &Intervention) -> Result<Mdp> {
    iv.validate_for(mdp)?;
    let mut out = mdp.clone();
    match &iv.kind {
        InterventionKind::RewardShift { states, actions, amount } => {
            for &s in states.iter().filter(|&&s| !mdp.is_terminal(s)) {
                for &a in actions {
                    out.reward[s][a] += amount;
                }
            }
        }
        InterventionKind::ActionRestriction { states, forbidden } => {
            let mut mask: Vec<Vec<bool>> = (0..mdp.n_states).map(|s| mdp.available_mask(s)).collect();
            for &s in states {
                for &a in forbidden {
                    mask[s][a] = false;
                }
            }
            out.available = Some(mask);
        }
        InterventionKind::CueRemoval { states } => {
            for &s in states {
                out.cue_flags[s] = false;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain2() -> Mdp {
        Mdp::new(
            vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]]],
            vec![vec![1.0], vec![0.0]],
            vec![false, true],
            0,
            vec![false, false],
        )
        .unwrap()
    }

    #[test]
    fn well_formed_chain_validates() {
        assert!(validate_mdp(&chain2()).is_ok());
    }

    #[test]
    fn row_sum_violation_names_cell() {
        let mut m = chain2();
        m.transition[0][0] = vec![0.5, 0.6];
        let v = validate_mdp(&m);
        assert!(v.violations.iter().any(|s| s == "row sum 1.1 at (s=0,a=0)"), "{v:?}");
    }

    #[test]
    fn negative_entry_violation() {
        let mut m = chain2();
        m.transition[1][0] = vec![1.5, -0.5];
        let v = validate_mdp(&m);
        assert!(v.violations.iter().any(|s| s.contains("(s=1,a=0,s'=1)")), "{v:?}");
    }

    #[test]
    fn terminal_must_self_loop_with_zero_reward() {
        let mut m = chain2();
        m.terminal_flags[1] = true;
        let v = validate_mdp(&m);
        assert!(v.violations.iter().any(|s| s.contains("self-loop")));
        m.transition[1][0] = vec![0.0, 1.0];
        m.reward[1][0] = 2.0;
        let v = validate_mdp(&m);
        assert!(v.violations.iter().any(|s| s.contains("nonzero reward")));
    }

    #[test]
    fn step_behaviour() {
        let m = chain2();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(step(&m, 0, 0, &mut rng).unwrap(), (1, 1.0));
        }
        let mut m2 = m.clone();
        m2.terminal_flags[1] = true;
        m2.transition[1][0] = vec![0.0, 1.0];
        assert!(matches!(step(&m2, 1, 0, &mut rng), Err(Error::TerminalStep(1))));
    }

    #[test]
    fn step_frequency_of_fair_row() {
        let m = Mdp::new(
            vec![vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5]]],
            vec![vec![1.0], vec![1.0]],
            vec![false; 2],
            0,
            vec![false; 2],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut zeros = 0;
        for _ in 0..n {
            let (s, r) = step(&m, 0, 0, &mut rng).unwrap();
            assert_eq!(r, 1.0);
            zeros += usize::from(s == 0);
        }
        let f = zeros as f64 / n as f64;
        assert!((0.49..=0.51).contains(&f), "{f}");
    }

    #[test]
    fn geometric_series_self_loop() {
        let m = Mdp::new(vec![vec![vec![1.0]]], vec![vec![1.0]], vec![false], 0, vec![false]).unwrap();
        let pi = StochasticPolicy::uniform(&m);
        let v = solve_policy_values(&m, &pi, 0.5, &m.reward).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_utility_gives_zero_values() {
        let m = chain2();
        let pi = StochasticPolicy::uniform(&m);
        let v = solve_policy_values(&m, &pi, 0.9, &[vec![0.0], vec![0.0]]).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn two_state_cycle_hand_solution() {
        let m = chain2();
        let pi = StochasticPolicy::uniform(&m);
        let v = solve_policy_values(&m, &pi, 0.9, &m.reward).unwrap();
        let d = 1.0 - 0.81;
        assert!((v[0] - 1.0 / d).abs() < 1e-10);
        assert!((v[1] - 0.9 / d).abs() < 1e-10);
        assert!((v[0] - 5.2632).abs() < 1e-4 && (v[1] - 4.7368).abs() < 1e-4);
        assert!(bellman_residual(&m, &pi, 0.9, &m.reward, &v) < 1e-10);
    }

    #[test]
    fn gamma_one_rejected() {
        let m = chain2();
        let pi = StochasticPolicy::uniform(&m);
        assert!(solve_policy_values(&m, &pi, 1.0, &m.reward).is_err());
    }

    #[test]
    fn interventions() {
        let m = chain2();
        let null = Intervention::null(&m);
        assert_eq!(apply_intervention(&m, &null).unwrap(), m);

        let clear = Intervention::new("clear", InterventionKind::CueRemoval { states: vec![0, 1] });
        assert!(apply_intervention(&m, &clear).unwrap().cue_flags.iter().all(|c| !c));

        let tax = Intervention::new(
            "tax",
            InterventionKind::RewardShift { states: vec![1], actions: vec![0], amount: -0.5 },
        );
        let t = apply_intervention(&m, &tax).unwrap();
        assert_eq!(t.reward[1][0], m.reward[1][0] - 0.5);
        assert_eq!(t.reward[0][0], m.reward[0][0]);

        let restrict = Intervention::new(
            "ban",
            InterventionKind::ActionRestriction { states: vec![0], forbidden: vec![0] },
        );
        assert!(matches!(apply_intervention(&m, &restrict), Err(Error::InvalidIntervention { .. })));
    }

    #[test]
    fn json_round_trip_and_validation_on_load() {
        let m = chain2();
        let text = m.to_json().unwrap();
        assert_eq!(Mdp::from_json(&text).unwrap(), m);
        let bad = text.replace("1.0,\n        0.0", "1.5,\n        0.0");
        assert_ne!(bad, text);
        assert!(Mdp::from_json(&bad).is_err());
    }
}
