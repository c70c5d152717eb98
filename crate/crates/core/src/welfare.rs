//! Welfare criteria and policy evaluation.
//!
//! A [`WelfareCriterion`] is a declared utility standard. It cannot be built
//! without both a criterion statement and a justification: the constructor
//! and the deserializer reject empty texts.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::agent::{greedy_action, implemented_utility, run_learning, AgentConfig, CueModel, DualSelfUtility, Learner};
use crate::environment::{
    apply_intervention, check_table, optimal_values, solve_policy_values, Intervention, Mdp, StochasticPolicy,
};
use crate::error::{Error, Result};
use crate::seeded_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CriterionKind {
    /// `u^L(a)` in every state.
    LongRun,
    /// `λ(s) u^L(a) + (1-λ(s)) u^S(a)`.
    Implemented,
    /// The environment reward `r(s,a)`.
    Experienced,
    Custom { table: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Declaration {
    pub criterion_text: String,
    pub justification_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCriterion")]
pub struct WelfareCriterion {
    label: String,
    kind: CriterionKind,
    gamma_w: f64,
    declaration: Declaration,
}

#[derive(Deserialize)]
struct RawCriterion {
    label: String,
    kind: CriterionKind,
    gamma_w: f64,
    declaration: Declaration,
}

impl TryFrom<RawCriterion> for WelfareCriterion {
    type Error = Error;

    fn try_from(raw: RawCriterion) -> Result<Self> {
        WelfareCriterion::new(raw.label, raw.kind, raw.gamma_w, raw.declaration)
    }
}

impl WelfareCriterion {
    pub fn new(label: impl Into<String>, kind: CriterionKind, gamma_w: f64, declaration: Declaration) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma_w) {
            return Err(Error::InvalidArgument(format!("gamma_w {gamma_w} not in [0,1)")));
        }
        if declaration.criterion_text.trim().is_empty() || declaration.justification_text.trim().is_empty() {
            return Err(Error::InvalidArgument(
                "a welfare criterion needs a nonempty statement and justification".into(),
            ));
        }
        Ok(WelfareCriterion { label: label.into(), kind, gamma_w, declaration })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn kind(&self) -> &CriterionKind {
        &self.kind
    }

    pub fn gamma_w(&self) -> f64 {
        self.gamma_w
    }

    pub fn declaration(&self) -> &Declaration {
        &self.declaration
    }

    /// Same criterion with another welfare discount.
    pub fn with_gamma_w(&self, gamma_w: f64) -> Result<Self> {
        WelfareCriterion::new(self.label.clone(), self.kind.clone(), gamma_w, self.declaration.clone())
    }
}

/// Inputs some criterion kinds need.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    #[serde(default)]
    pub dual_self: Option<DualSelfUtility>,
    #[serde(default)]
    pub lambda_of_state: Option<Vec<f64>>,
}

pub fn criterion_utility(criterion: &WelfareCriterion, components: &Components, mdp: &Mdp) -> Result<Vec<Vec<f64>>> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let dual = || {
        let u = components
            .dual_self
            .as_ref()
            .ok_or_else(|| Error::MissingComponent(format!("'{}' needs dual-self utilities", criterion.label)))?;
        u.validate(na)?;
        Ok::<_, Error>(u)
    };
    match &criterion.kind {
        CriterionKind::Experienced => Ok(mdp.reward.clone()),
        CriterionKind::LongRun => {
            let u = dual()?;
            Ok(vec![u.u_long.clone(); ns])
        }
        CriterionKind::Implemented => {
            let u = dual()?;
            let lambda = components
                .lambda_of_state
                .as_ref()
                .ok_or_else(|| Error::MissingComponent(format!("'{}' needs lambda per state", criterion.label)))?;
            if lambda.len() != ns {
                return Err(Error::InvalidArgument("lambda table must have one entry per state".into()));
            }
            Ok((0..ns)
                .map(|s| (0..na).map(|a| implemented_utility(a, lambda[s], u)).collect())
                .collect())
        }
        CriterionKind::Custom { table } => {
            check_table(mdp, table, "custom criterion")?;
            Ok(table.clone())
        }
    }
}

/// Expected discounted criterion utility from the initial state under `policy`.
pub fn evaluate_welfare(
    mdp: &Mdp,
    policy: &StochasticPolicy,
    criterion: &WelfareCriterion,
    components: &Components,
) -> Result<f64> {
    let u = criterion_utility(criterion, components, mdp)?;
    let v = solve_policy_values(mdp, policy, criterion.gamma_w, &u)?;
    Ok(v[mdp.initial_state])
}

// ── Mistake states ──────────────────────────────────────────────────────

/// How criterion action values continue after the first step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Continuation {
    /// What the person will actually go on to do.
    #[default]
    ImplementedPolicy,
    /// Optimal behaviour under the criterion, for sensitivity analysis.
    CriterionOptimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MistakeDetail {
    pub state: usize,
    pub implemented_best: usize,
    pub criterion_best: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MistakeClassification {
    pub mistake_states: BTreeSet<usize>,
    pub details: Vec<MistakeDetail>,
}

/// Compares, state by state, the best implemented action against the best
/// action under the criterion (one-step utility plus discounted criterion
/// continuation). Ties resolve to the lowest index on both sides.
pub fn classify_mistake_states(
    mdp: &Mdp,
    implemented_action_values: &[Vec<f64>],
    implemented_policy: &StochasticPolicy,
    criterion: &WelfareCriterion,
    components: &Components,
    continuation: Continuation,
) -> Result<MistakeClassification> {
    check_table(mdp, implemented_action_values, "implemented action values")?;
    let u = criterion_utility(criterion, components, mdp)?;
    let gw = criterion.gamma_w;
    let cont = match continuation {
        Continuation::ImplementedPolicy => solve_policy_values(mdp, implemented_policy, gw, &u)?,
        Continuation::CriterionOptimal => optimal_values(mdp, gw, &u, 1e-12),
    };
    let mut out = MistakeClassification::default();
    for s in (0..mdp.n_states).filter(|&s| !mdp.is_terminal(s)) {
        let mask = mdp.available_mask(s);
        let q: Vec<f64> = (0..mdp.n_actions)
            .map(|a| u[s][a] + gw * mdp.transition[s][a].iter().zip(&cont).map(|(p, v)| p * v).sum::<f64>())
            .collect();
        let (Some(imp), Some(crit)) = (greedy_action(&implemented_action_values[s], &mask), greedy_action(&q, &mask))
        else {
            return Err(Error::EmptyActionSet(s));
        };
        if imp != crit {
            out.mistake_states.insert(s);
            out.details.push(MistakeDetail { state: s, implemented_best: imp, criterion_best: crit });
        }
    }
    Ok(out)
}

// ── Intervention comparison ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Relearn {
    pub trials: usize,
    pub horizon: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub intervention: String,
    pub criterion: String,
    pub before: f64,
    pub after: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InterventionComparison {
    pub rows: Vec<ComparisonRow>,
}

impl InterventionComparison {
    pub fn get(&self, intervention: &str, criterion: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.intervention == intervention && r.criterion == criterion)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["intervention", "criterion", "before", "after", "delta"])?;
        for r in &self.rows {
            w.write_record([
                r.intervention.clone(),
                r.criterion.clone(),
                r.before.to_string(),
                r.after.to_string(),
                r.delta.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Learns on `mdp` from a fresh stream and returns the final softmax policy.
pub fn learned_policy(
    mdp: &Mdp,
    config: &AgentConfig,
    cue: Option<&CueModel>,
    relearn: &Relearn,
) -> Result<StochasticPolicy> {
    let mut rng = seeded_rng(relearn.seed);
    let (_, state) = run_learning(mdp, config, cue, relearn.trials, relearn.horizon, &mut rng)?;
    Learner { mdp, config, cue, state }.current_policy()
}

/// Welfare before and after each intervention under each criterion. The
/// learner re-learns from the same seed on both sides, so a null
/// intervention yields an exact zero.
#[allow(clippy::too_many_arguments)]
pub fn compare_interventions(
    mdp: &Mdp,
    config: &AgentConfig,
    cue: Option<&CueModel>,
    interventions: &[Intervention],
    criteria: &[WelfareCriterion],
    components: &Components,
    relearn: &Relearn,
) -> Result<InterventionComparison> {
    if interventions.is_empty() || criteria.is_empty() {
        return Err(Error::Precondition("interventions and criteria must be nonempty".into()));
    }
    let pre_policy = learned_policy(mdp, config, cue, relearn)?;
    let before: Vec<f64> = criteria
        .iter()
        .map(|c| evaluate_welfare(mdp, &pre_policy, c, components))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for iv in interventions {
        let post_mdp = apply_intervention(mdp, iv)?;
        let post_cue = cue.map(|c| c.restricted_to(&post_mdp));
        let post_policy = learned_policy(&post_mdp, config, post_cue.as_ref(), relearn)?;
        for (c, &b) in criteria.iter().zip(&before) {
            let after = evaluate_welfare(&post_mdp, &post_policy, c, components)?;
            rows.push(ComparisonRow {
                intervention: iv.label.clone(),
                criterion: c.label.clone(),
                before: b,
                after,
                delta: after - b,
            });
        }
    }
    Ok(InterventionComparison { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decl() -> Declaration {
        Declaration { criterion_text: "long-run utility".into(), justification_text: "reflective choice".into() }
    }

    fn self_loop() -> Mdp {
        Mdp::new(vec![vec![vec![1.0]; 2]], vec![vec![1.0, 3.0]], vec![false], 0, vec![false]).unwrap()
    }

    #[test]
    fn declarations_are_required() {
        let empty = Declaration { criterion_text: "x".into(), justification_text: "  ".into() };
        assert!(WelfareCriterion::new("c", CriterionKind::Experienced, 0.9, empty).is_err());
        assert!(WelfareCriterion::new("c", CriterionKind::Experienced, 1.0, decl()).is_err());
        let json = r#"{"label":"c","kind":{"kind":"experienced"},"gamma_w":0.5,
            "declaration":{"criterion_text":"","justification_text":"j"}}"#;
        assert!(serde_json::from_str::<WelfareCriterion>(json).is_err());
    }

    #[test]
    fn criterion_tables() {
        let m = self_loop();
        let comps = Components {
            dual_self: Some(DualSelfUtility { u_long: vec![2.0, 0.0], u_short: vec![10.0, 1.0] }),
            lambda_of_state: Some(vec![0.3]),
        };
        let exp = WelfareCriterion::new("e", CriterionKind::Experienced, 0.9, decl()).unwrap();
        assert_eq!(criterion_utility(&exp, &comps, &m).unwrap(), m.reward);
        let imp = WelfareCriterion::new("i", CriterionKind::Implemented, 0.9, decl()).unwrap();
        assert!((criterion_utility(&imp, &comps, &m).unwrap()[0][0] - 7.6).abs() < 1e-12);
        let ones = Components { lambda_of_state: Some(vec![1.0]), ..comps.clone() };
        let lr = WelfareCriterion::new("l", CriterionKind::LongRun, 0.9, decl()).unwrap();
        assert_eq!(criterion_utility(&imp, &ones, &m).unwrap(), criterion_utility(&lr, &ones, &m).unwrap());
        assert!(matches!(criterion_utility(&lr, &Components::default(), &m), Err(Error::MissingComponent(_))));
    }

    #[test]
    fn welfare_of_self_loop() {
        let m = Mdp::new(vec![vec![vec![1.0]]], vec![vec![1.0]], vec![false], 0, vec![false]).unwrap();
        let pi = StochasticPolicy::uniform(&m);
        let c = WelfareCriterion::new("e", CriterionKind::Experienced, 0.5, decl()).unwrap();
        assert!((evaluate_welfare(&m, &pi, &c, &Components::default()).unwrap() - 2.0).abs() < 1e-12);
        let zero = WelfareCriterion::new("z", CriterionKind::Custom { table: vec![vec![0.0]] }, 0.5, decl()).unwrap();
        assert_eq!(evaluate_welfare(&m, &pi, &zero, &Components::default()).unwrap(), 0.0);
    }

    #[test]
    fn experienced_matches_direct_solve_bitwise() {
        let m = self_loop();
        let pi = StochasticPolicy::new(vec![vec![0.25, 0.75]]).unwrap();
        let c = WelfareCriterion::new("e", CriterionKind::Experienced, 0.8, decl()).unwrap();
        let w = evaluate_welfare(&m, &pi, &c, &Components::default()).unwrap();
        let v = solve_policy_values(&m, &pi, 0.8, &m.reward).unwrap();
        assert_eq!(w.to_bits(), v[m.initial_state].to_bits());
    }

    #[test]
    fn self_comparison_has_no_mistakes() {
        let m = self_loop();
        let pi = StochasticPolicy::uniform(&m);
        let c = WelfareCriterion::new("e", CriterionKind::Experienced, 0.8, decl()).unwrap();
        let u = criterion_utility(&c, &Components::default(), &m).unwrap();
        let r = classify_mistake_states(&m, &u, &pi, &c, &Components::default(), Continuation::ImplementedPolicy)
            .unwrap();
        assert!(r.mistake_states.is_empty());
        let flipped = vec![vec![3.0, 1.0]];
        let r = classify_mistake_states(&m, &flipped, &pi, &c, &Components::default(), Continuation::CriterionOptimal)
            .unwrap();
        assert_eq!(r.mistake_states.into_iter().collect::<Vec<_>>(), vec![0]);
        assert_eq!(r.details[0], MistakeDetail { state: 0, implemented_best: 0, criterion_best: 1 });
    }
}
