//! Likelihoods, maximum-likelihood fitting and exact identifiability checks.
//!
//! A [`ModelSpec`] names a decision model and which of its parameters are
//! free. Instantiating it against an environment gives the learner that the
//! model believes generated the data: the same replay code drives
//! simulation, likelihood evaluation and exhaustive enumeration, so the three
//! can never disagree about the update rule.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::agent::{
    exact_choice_values, run_learning, AgentConfig, CueModel, DeltaSource, Latent, LearningRateSchedule, Learner,
    PolicyMode, Trajectory,
};
use crate::environment::{apply_intervention, Intervention, Mdp};
use crate::error::{Error, Result};
use crate::neural::{encode, LinkFunction, NeuralTrace, NoiseModel};
use crate::substream;
use crate::welfare::{evaluate_welfare, Components, WelfareCriterion};

// ── Model specification ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelId {
    /// Learns from environment reward; no cue distortion.
    PlainRl,
    /// Choice values are distorted by `κ C(s,a)` in cue states; δ is
    /// computed from environment reward.
    CueDistortion,
    /// Cue states genuinely change tastes: reward becomes `r + κ C(s,a)`.
    TasteShift,
    /// Reward is scaled by `scale`.
    ScaledReward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamName {
    Alpha,
    Beta,
    Gamma,
    Kappa,
    Scale,
    LinkSlope,
    Sigma,
}

impl ParamName {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamName::Alpha => "alpha",
            ParamName::Beta => "beta",
            ParamName::Gamma => "gamma",
            ParamName::Kappa => "kappa",
            ParamName::Scale => "scale",
            ParamName::LinkSlope => "link_slope",
            ParamName::Sigma => "sigma",
        }
    }
}

pub type Params = BTreeMap<ParamName, f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub lower: f64,
    pub upper: f64,
}

impl Bound {
    pub fn new(lower: f64, upper: f64) -> Self {
        Bound { lower, upper }
    }

    pub fn contains(&self, x: f64) -> bool {
        (self.lower..=self.upper).contains(&x)
    }

    fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lower, self.upper)
    }

    fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// An observed neural channel and the link/noise the model assumes for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub id: String,
    pub latent: Latent,
    pub link: LinkFunction,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_id: ModelId,
    #[serde(default)]
    pub free_parameters: BTreeMap<ParamName, Bound>,
    #[serde(default)]
    pub fixed_parameters: Params,
    #[serde(default)]
    pub neural_channels: Vec<ChannelSpec>,
    pub policy_mode: PolicyMode,
    #[serde(default)]
    pub schedule: LearningRateSchedule,
    #[serde(default)]
    pub initial_value: f64,
    /// `C(s,a)`, required by the cue-distortion and taste-shift models.
    #[serde(default)]
    pub cue_reactivity: Option<Vec<Vec<f64>>>,
}

impl ModelSpec {
    pub fn free_names(&self) -> Vec<ParamName> {
        self.free_parameters.keys().copied().collect()
    }

    fn required(&self) -> Vec<ParamName> {
        let mut req = vec![ParamName::Alpha, ParamName::Beta, ParamName::Gamma];
        match self.model_id {
            ModelId::CueDistortion | ModelId::TasteShift => req.push(ParamName::Kappa),
            ModelId::ScaledReward => req.push(ParamName::Scale),
            ModelId::PlainRl => {}
        }
        req
    }

    pub fn validate(&self, mdp: &Mdp) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("model spec: {m}")));
        for (name, b) in &self.free_parameters {
            if self.fixed_parameters.contains_key(name) {
                return bad(format!("{} is both free and fixed", name.as_str()));
            }
            if !(b.lower.is_finite() && b.upper.is_finite() && b.lower < b.upper) {
                return bad(format!("bounds for {} must be finite with lower < upper", name.as_str()));
            }
        }
        for name in self.required() {
            if !self.free_parameters.contains_key(&name) && !self.fixed_parameters.contains_key(&name) {
                return bad(format!("{} is neither free nor fixed", name.as_str()));
            }
        }
        if matches!(self.model_id, ModelId::CueDistortion | ModelId::TasteShift) {
            match &self.cue_reactivity {
                Some(c) if c.len() == mdp.n_states && c.iter().all(|r| r.len() == mdp.n_actions) => {}
                _ => return bad("cue_reactivity must be an n_states x n_actions table".into()),
            }
        }
        for ch in &self.neural_channels {
            ch.link.validate()?;
            NoiseModel { sigma: ch.sigma }.validate()?;
        }
        Ok(())
    }

    /// Fixed parameters merged with `free`, which must cover every free name
    /// and stay within its bounds.
    pub fn resolve(&self, free: &Params) -> Result<Params> {
        let mut all = self.fixed_parameters.clone();
        for (name, b) in &self.free_parameters {
            let x = *free
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing value for {}", name.as_str())))?;
            if !b.contains(x) {
                return Err(Error::Precondition(format!("{} = {x} outside [{}, {}]", name.as_str(), b.lower, b.upper)));
            }
            all.insert(*name, x);
        }
        Ok(all)
    }

    /// Builds the learner this model posits for `env`.
    pub fn instantiate(&self, env: &Mdp, free: &Params) -> Result<ModelInstance> {
        self.validate(env)?;
        let p = self.resolve(free)?;
        let get = |n: ParamName| p[&n];
        let alpha = get(ParamName::Alpha);
        let config = AgentConfig {
            alpha_critic: alpha,
            alpha_actor: alpha,
            beta: get(ParamName::Beta),
            gamma: get(ParamName::Gamma),
            policy_mode: self.policy_mode,
            initial_value: self.initial_value,
            schedule: self.schedule,
            delta_source: DeltaSource::Baseline,
        };
        let mut mdp = env.clone();
        let mut cue = None;
        let mut reward_scale = 1.0;
        let mut taste = None;
        match self.model_id {
            ModelId::PlainRl => {}
            ModelId::CueDistortion => {
                let kappa = get(ParamName::Kappa);
                let c = self.cue_reactivity.clone().unwrap_or_default();
                cue = Some(CueModel {
                    c,
                    kappa: env.cue_flags.iter().map(|&f| if f { kappa } else { 0.0 }).collect(),
                    lambda_of_state: vec![1.0; env.n_states],
                });
            }
            ModelId::TasteShift => {
                let kappa = get(ParamName::Kappa);
                let c = self.cue_reactivity.clone().unwrap_or_default();
                let shift: Vec<Vec<f64>> = (0..env.n_states)
                    .map(|s| {
                        let k = if env.cue_flags[s] && !env.is_terminal(s) { kappa } else { 0.0 };
                        c[s].iter().map(|x| k * x).collect()
                    })
                    .collect();
                taste = Some(shift);
            }
            ModelId::ScaledReward => reward_scale = get(ParamName::Scale),
        }
        config.validate()?;
        for s in 0..env.n_states {
            for a in 0..env.n_actions {
                mdp.reward[s][a] = subjective(reward_scale, taste.as_deref(), s, a, env.reward[s][a]);
            }
        }
        if let Some(c) = &cue {
            c.validate(env)?;
        }
        let channels = self
            .neural_channels
            .iter()
            .map(|ch| {
                let link = p.get(&ParamName::LinkSlope).map_or(ch.link, |&k| ch.link.with_slope(k));
                let sigma = p.get(&ParamName::Sigma).copied().unwrap_or(ch.sigma);
                ChannelSpec { id: ch.id.clone(), latent: ch.latent, link, sigma }
            })
            .collect();
        Ok(ModelInstance { mdp, config, cue, channels, reward_scale, taste })
    }
}

fn subjective(scale: f64, taste: Option<&[Vec<f64>]>, s: usize, a: usize, r: f64) -> f64 {
    scale * r + taste.map_or(0.0, |t| t[s][a])
}

/// A model with every parameter bound, ready to simulate or replay.
#[derive(Debug, Clone)]
pub struct ModelInstance {
    /// The environment as the model sees it (subjective rewards).
    pub mdp: Mdp,
    pub config: AgentConfig,
    pub cue: Option<CueModel>,
    pub channels: Vec<ChannelSpec>,
    reward_scale: f64,
    taste: Option<Vec<Vec<f64>>>,
}

impl ModelInstance {
    /// Maps an observed environment reward to the reward this model learns from.
    pub fn reward(&self, s: usize, a: usize, observed: f64) -> f64 {
        subjective(self.reward_scale, self.taste.as_deref(), s, a, observed)
    }

    pub fn learner(&self) -> Learner<'_> {
        Learner::new(&self.mdp, &self.config, self.cue.as_ref())
    }
}

/// Simulates data from a model: a trajectory that logs the environment's
/// rewards, plus one noisy trace per declared channel.
pub fn simulate_model<R: Rng + ?Sized>(
    env: &Mdp,
    spec: &ModelSpec,
    params: &Params,
    episodes: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<(Trajectory, Vec<NeuralTrace>)> {
    let inst = spec.instantiate(env, params)?;
    let (mut traj, _) = run_learning(&inst.mdp, &inst.config, inst.cue.as_ref(), episodes, horizon, rng)?;
    for r in &mut traj.records {
        r.reward = env.reward[r.state][r.action];
    }
    let traces = inst
        .channels
        .iter()
        .map(|ch| encode(&ch.id, &traj.latents(ch.latent), &ch.link, &NoiseModel { sigma: ch.sigma }, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((traj, traces))
}

// ── Likelihoods ─────────────────────────────────────────────────────────

/// Log probability of the recorded actions under the model, replaying its
/// updates on the recorded states and rewards. Returns `-inf` when a
/// recorded action has probability zero.
pub fn choice_log_likelihood(traj: &Trajectory, env: &Mdp, spec: &ModelSpec, params: &Params) -> Result<f64> {
    joint_log_likelihood(traj, &[], env, spec, params)
}

fn gaussian_log_density(x: f64, mean: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return if x == mean { 0.0 } else { f64::NEG_INFINITY };
    }
    let z = (x - mean) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Choice log-likelihood plus the Gaussian log-density of every neural
/// sample around the link of the replayed latent. Traces are matched to the
/// spec's channels by id; channels without a trace contribute nothing.
pub fn joint_log_likelihood(
    traj: &Trajectory,
    traces: &[NeuralTrace],
    env: &Mdp,
    spec: &ModelSpec,
    params: &Params,
) -> Result<f64> {
    let inst = spec.instantiate(env, params)?;
    let mut observed = Vec::new();
    for tr in traces {
        tr.check_aligned(traj)?;
        let ch = inst
            .channels
            .iter()
            .find(|c| c.id == tr.channel_id)
            .ok_or_else(|| Error::InvalidArgument(format!("no channel '{}' in model spec", tr.channel_id)))?;
        observed.push((ch, tr));
    }
    let mut learner = inst.learner();
    let mut ll = 0.0;
    for (i, rec) in traj.records.iter().enumerate() {
        env.check_state(rec.state)?;
        env.check_action(rec.action)?;
        let p = learner.probs(rec.state)?[rec.action];
        ll += p.ln();
        let r = inst.reward(rec.state, rec.action, rec.reward);
        let out = learner.learn(rec.state, rec.action, r, rec.next_state);
        for (ch, tr) in &observed {
            let latent = match ch.latent {
                Latent::Delta => out.delta,
                Latent::Value => out.v_state,
            };
            ll += gaussian_log_density(tr.samples[i].value, ch.link.apply(latent), ch.sigma);
        }
    }
    Ok(ll)
}

// ── Fitting ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub grid_points_per_dim: usize,
    pub n_restarts: usize,
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { grid_points_per_dim: 6, n_restarts: 2, tolerance: 1e-4, max_iters: 300 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub best_params: Params,
    pub log_likelihood: f64,
    pub n_restarts: usize,
    pub converged: bool,
    pub grid_stage_best: Params,
}

struct Box_ {
    names: Vec<ParamName>,
    bounds: Vec<Bound>,
}

impl Box_ {
    fn to_params(&self, x: &[f64]) -> Params {
        self.names.iter().copied().zip(x.iter().copied()).collect()
    }

    fn project(&self, x: &mut [f64]) {
        for (xi, b) in x.iter_mut().zip(&self.bounds) {
            *xi = b.clamp(*xi);
        }
    }
}

/// Result of one simplex run, in minimisation form.
struct SimplexRun {
    x: Vec<f64>,
    value: f64,
    diameter: f64,
}

/// Nelder–Mead on `f` (minimised) with every vertex projected into the box.
fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, start: &[f64], steps: &[f64], bx: &Box_, tol: f64, max_iters: usize) -> SimplexRun {
    let n = start.len();
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let mut x0 = start.to_vec();
    bx.project(&mut x0);
    simplex.push((x0.clone(), eval(&x0)));
    for i in 0..n {
        let mut x = x0.clone();
        x[i] += steps[i];
        if x[i] > bx.bounds[i].upper {
            x[i] = x0[i] - steps[i];
        }
        bx.project(&mut x);
        let v = eval(&x);
        simplex.push((x, v));
    }
    let diameter = |s: &[(Vec<f64>, f64)]| {
        s.iter()
            .skip(1)
            .map(|(x, _)| x.iter().zip(&s[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max)
    };
    for _ in 0..max_iters {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if diameter(&simplex) < tol {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| {
            let mut x: Vec<f64> = centroid.iter().zip(&simplex[n].0).map(|(c, w)| c + t * (w - c)).collect();
            bx.project(&mut x);
            x
        };
        let xr = along(-1.0);
        let fr = eval(&xr);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[n].1 {
            let x = along(-0.5);
            let v = eval(&x);
            (x, v)
        } else {
            let x = along(0.5);
            let v = eval(&x);
            (x, v)
        };
        if fc < simplex[n].1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        let best = simplex[0].0.clone();
        for v in simplex.iter_mut().skip(1) {
            let mut x: Vec<f64> = best.iter().zip(&v.0).map(|(b, y)| b + 0.5 * (y - b)).collect();
            bx.project(&mut x);
            v.1 = eval(&x);
            v.0 = x;
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let d = diameter(&simplex);
    let (x, value) = simplex.swap_remove(0);
    SimplexRun { x, value, diameter: d }
}

fn lexicographic_lt(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    false
}

/// Grid scan over the box, then simplex refinement from the best grid point
/// and from `n_restarts` uniform random points. Restarts run in parallel and
/// are reduced by likelihood, ties broken by lexicographic parameter order.
pub fn fit_mle<R: Rng + ?Sized>(
    traj: &Trajectory,
    traces: &[NeuralTrace],
    env: &Mdp,
    spec: &ModelSpec,
    search: &SearchConfig,
    rng: &mut R,
) -> Result<FitResult> {
    if spec.free_parameters.is_empty() {
        return Err(Error::Precondition("fit needs at least one free parameter".into()));
    }
    if traj.is_empty() {
        return Err(Error::Precondition("fit needs nonempty data".into()));
    }
    spec.validate(env)?;
    let bx = Box_ {
        names: spec.free_names(),
        bounds: spec.free_parameters.values().copied().collect(),
    };
    let dim = bx.names.len();
    let g = search.grid_points_per_dim.max(1);
    let total = (g as f64).powi(dim as i32);
    if total > 1e6 {
        return Err(Error::BudgetExceeded { needed: total, budget: 1e6 });
    }
    let neg_ll = |x: &[f64]| -> f64 {
        match joint_log_likelihood(traj, traces, env, spec, &bx.to_params(x)) {
            Ok(ll) => -ll,
            Err(_) => f64::INFINITY,
        }
    };

    let grid: Vec<Vec<f64>> = (0..total as usize)
        .map(|mut k| {
            bx.bounds
                .iter()
                .map(|b| {
                    let i = k % g;
                    k /= g;
                    b.lower + (i as f64 + 0.5) * b.width() / g as f64
                })
                .collect()
        })
        .collect();
    let grid_vals: Vec<f64> = grid.par_iter().map(|x| neg_ll(x)).collect();
    let mut gi = 0;
    for i in 1..grid.len() {
        if grid_vals[i] < grid_vals[gi] || (grid_vals[i] == grid_vals[gi] && lexicographic_lt(&grid[i], &grid[gi])) {
            gi = i;
        }
    }
    if grid_vals[gi] == f64::INFINITY {
        return Err(Error::DegenerateLikelihood);
    }

    let steps: Vec<f64> = bx.bounds.iter().map(|b| b.width() / g as f64).collect();
    let mut starts = vec![grid[gi].clone()];
    for _ in 0..search.n_restarts {
        starts.push(bx.bounds.iter().map(|b| b.lower + rng.random::<f64>() * b.width()).collect());
    }
    let runs: Vec<SimplexRun> = starts
        .par_iter()
        .map(|x0| nelder_mead(&neg_ll, x0, &steps, &bx, search.tolerance, search.max_iters))
        .collect();
    let mut best = &runs[0];
    for r in &runs[1..] {
        if r.value < best.value || (r.value == best.value && lexicographic_lt(&r.x, &best.x)) {
            best = r;
        }
    }
    let (x, value, diameter) = if grid_vals[gi] < best.value {
        (grid[gi].clone(), grid_vals[gi], f64::INFINITY)
    } else {
        (best.x.clone(), best.value, best.diameter)
    };
    if value == f64::INFINITY {
        return Err(Error::DegenerateLikelihood);
    }
    Ok(FitResult {
        best_params: bx.to_params(&x),
        log_likelihood: -value,
        n_restarts: search.n_restarts,
        converged: diameter < search.tolerance,
        grid_stage_best: bx.to_params(&grid[gi]),
    })
}

// ── Parameter recovery ──────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryStats {
    pub truth: f64,
    pub estimates: Vec<f64>,
    pub median_abs_error: f64,
    /// Fraction of replications within ±20% of the truth.
    pub coverage_20pct: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Simulate-then-fit loop. Replication `i` draws from substream `i` of
/// `seed`, so results do not depend on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn parameter_recovery(
    spec: &ModelSpec,
    true_params: &Params,
    env: &Mdp,
    n_replications: usize,
    episodes: usize,
    horizon: usize,
    search: &SearchConfig,
    seed: u64,
) -> Result<BTreeMap<ParamName, RecoveryStats>> {
    if n_replications == 0 {
        return Err(Error::Precondition("n_replications must be >= 1".into()));
    }
    let fits: Vec<FitResult> = (0..n_replications as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i);
            let (traj, traces) = simulate_model(env, spec, true_params, episodes, horizon, &mut rng)?;
            fit_mle(&traj, &traces, env, spec, search, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut out = BTreeMap::new();
    for name in spec.free_names() {
        let truth = true_params[&name];
        let estimates: Vec<f64> = fits.iter().map(|f| f.best_params[&name]).collect();
        let errs: Vec<f64> = estimates.iter().map(|e| (e - truth).abs()).collect();
        let covered = errs.iter().filter(|&&e| e <= 0.2 * truth.abs()).count();
        out.insert(
            name,
            RecoveryStats {
                truth,
                median_abs_error: median(errs),
                coverage_20pct: covered as f64 / n_replications as f64,
                estimates,
            },
        );
    }
    Ok(out)
}

// ── Exact enumeration ───────────────────────────────────────────────────

pub const ENUMERATION_BUDGET: f64 = 1e7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    /// States visited, one per step.
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    /// Neural bin per step and channel, step-major.
    pub bins: Vec<usize>,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDistributionTable {
    pub outcomes: Vec<Outcome>,
    pub horizon: usize,
    pub n_neural_bins: usize,
}

impl JointDistributionTable {
    pub fn total_probability(&self) -> f64 {
        self.outcomes.iter().map(|o| o.probability).sum()
    }

    /// Sums out the neural bins.
    pub fn choice_marginal(&self) -> BTreeMap<(Vec<usize>, Vec<usize>), f64> {
        let mut m = BTreeMap::new();
        for o in &self.outcomes {
            *m.entry((o.states.clone(), o.actions.clone())).or_insert(0.0) += o.probability;
        }
        m
    }
}

/// One leaf of the paired enumeration tree.
struct PairLeaf {
    states: Vec<usize>,
    actions: Vec<usize>,
    bins: Vec<usize>,
    p: [f64; 2],
}

/// Equal-probability cells of `N(mean, sigma²)`: interior edges only.
fn quantile_edges(mean: f64, sigma: f64, bins: usize) -> Vec<f64> {
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    (1..bins).map(|j| mean + sigma * std.inverse_cdf(j as f64 / bins as f64)).collect()
}

fn cell_probabilities(edges: &[f64], mean: f64, sigma: f64) -> Vec<f64> {
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let cdf: Vec<f64> = edges.iter().map(|e| std.cdf((e - mean) / sigma)).collect();
    let mut out = Vec::with_capacity(edges.len() + 1);
    let mut prev = 0.0;
    for c in cdf {
        out.push(c - prev);
        prev = c;
    }
    out.push(1.0 - prev);
    out
}

fn check_channels_compatible(a: &ModelInstance, b: &ModelInstance, bins: usize) -> Result<usize> {
    if bins == 0 {
        return Ok(0);
    }
    if a.channels.len() != b.channels.len() || a.channels.iter().zip(&b.channels).any(|(x, y)| x.latent != y.latent) {
        return Err(Error::InvalidArgument("paired models must declare the same neural channels".into()));
    }
    if a.channels.iter().chain(&b.channels).any(|c| c.sigma <= 0.0) {
        return Err(Error::InvalidArgument("enumeration needs sigma > 0 on every channel".into()));
    }
    Ok(a.channels.len())
}

/// Enumerates both models over the same observable tree. Neural cells at
/// each step are the equal-probability quantile cells of the first model's
/// Gaussian on that branch; the second model's cell probabilities are exact
/// normal-CDF differences. Cells depend only on observed history, so the
/// leaves partition the joint outcome space for both models.
fn enumerate_pair(
    env: &Mdp,
    a: &ModelInstance,
    b: &ModelInstance,
    horizon: usize,
    neural_bins: usize,
) -> Result<Vec<PairLeaf>> {
    if horizon == 0 || horizon > 8 {
        return Err(Error::InvalidArgument("horizon must be in 1..=8".into()));
    }
    if neural_bins > 5 {
        return Err(Error::InvalidArgument("at most 5 neural bins".into()));
    }
    let n_ch = check_channels_compatible(a, b, neural_bins)?;
    let max_succ = env
        .transition
        .iter()
        .flatten()
        .map(|row| row.iter().filter(|&&p| p > 0.0).count())
        .max()
        .unwrap_or(1);
    let per_step = (env.n_actions * max_succ) as f64 * (neural_bins.max(1) as f64).powi(n_ch as i32);
    let needed = per_step.powi(horizon as i32);
    if needed > ENUMERATION_BUDGET {
        return Err(Error::BudgetExceeded { needed, budget: ENUMERATION_BUDGET });
    }

    struct Ctx<'e> {
        env: &'e Mdp,
        models: [&'e ModelInstance; 2],
        horizon: usize,
        bins: usize,
        n_ch: usize,
        leaves: Vec<PairLeaf>,
    }

    #[allow(clippy::too_many_arguments)]
    fn walk(
        ctx: &mut Ctx<'_>,
        learners: [Learner<'_>; 2],
        s: usize,
        depth: usize,
        p: [f64; 2],
        states: &mut Vec<usize>,
        actions: &mut Vec<usize>,
        bins: &mut Vec<usize>,
    ) -> Result<()> {
        if depth == ctx.horizon || ctx.env.is_terminal(s) {
            ctx.leaves.push(PairLeaf { states: states.clone(), actions: actions.clone(), bins: bins.clone(), p });
            return Ok(());
        }
        let probs = [learners[0].probs(s)?, learners[1].probs(s)?];
        for act in 0..ctx.env.n_actions {
            let pa = [p[0] * probs[0][act], p[1] * probs[1][act]];
            if pa == [0.0, 0.0] {
                continue;
            }
            for s2 in 0..ctx.env.n_states {
                let pt = ctx.env.transition[s][act][s2];
                if pt == 0.0 {
                    continue;
                }
                let r_obs = ctx.env.reward[s][act];
                let mut next = learners.clone();
                let mut latent = [[0.0; 2]; 2];
                for m in 0..2 {
                    let r = ctx.models[m].reward(s, act, r_obs);
                    let out = next[m].learn(s, act, r, s2);
                    latent[m] = [out.delta, out.v_state];
                }
                states.push(s);
                actions.push(act);
                let base = [pa[0] * pt, pa[1] * pt];
                if ctx.bins == 0 || ctx.n_ch == 0 {
                    walk(ctx, next, s2, depth + 1, base, states, actions, bins)?;
                } else {
                    // per channel: cell probabilities under each model
                    let mut cells: Vec<[Vec<f64>; 2]> = Vec::with_capacity(ctx.n_ch);
                    for c in 0..ctx.n_ch {
                        let mean = |m: usize| {
                            let ch = &ctx.models[m].channels[c];
                            let x = match ch.latent {
                                Latent::Delta => latent[m][0],
                                Latent::Value => latent[m][1],
                            };
                            (ch.link.apply(x), ch.sigma)
                        };
                        let (mu0, sd0) = mean(0);
                        let (mu1, sd1) = mean(1);
                        let edges = quantile_edges(mu0, sd0, ctx.bins);
                        cells.push([cell_probabilities(&edges, mu0, sd0), cell_probabilities(&edges, mu1, sd1)]);
                    }
                    let combos = ctx.bins.pow(ctx.n_ch as u32);
                    for k in 0..combos {
                        let mut pk = base;
                        let mut rem = k;
                        let start = bins.len();
                        for cell in &cells {
                            let j = rem % ctx.bins;
                            rem /= ctx.bins;
                            pk[0] *= cell[0][j];
                            pk[1] *= cell[1][j];
                            bins.push(j);
                        }
                        if pk != [0.0, 0.0] {
                            walk(ctx, next.clone(), s2, depth + 1, pk, states, actions, bins)?;
                        }
                        bins.truncate(start);
                    }
                }
                states.pop();
                actions.pop();
            }
        }
        Ok(())
    }

    let mut ctx = Ctx { env, models: [a, b], horizon, bins: neural_bins, n_ch, leaves: Vec::new() };
    let learners = [a.learner(), b.learner()];
    walk(&mut ctx, learners, env.initial_state, 0, [1.0, 1.0], &mut Vec::new(), &mut Vec::new(), &mut Vec::new())?;
    Ok(ctx.leaves)
}

/// Exact joint distribution of (states, actions, neural cells) over
/// `horizon` steps from the initial state. With `neural_bins = 0` or no
/// channels, only the choice process is enumerated.
pub fn enumerate_joint(
    env: &Mdp,
    spec: &ModelSpec,
    params: &Params,
    horizon: usize,
    neural_bins: usize,
) -> Result<JointDistributionTable> {
    let inst = spec.instantiate(env, params)?;
    let leaves = enumerate_pair(env, &inst, &inst, horizon, neural_bins)?;
    Ok(JointDistributionTable {
        outcomes: leaves
            .into_iter()
            .map(|l| Outcome { states: l.states, actions: l.actions, bins: l.bins, probability: l.p[0] })
            .collect(),
        horizon,
        n_neural_bins: neural_bins,
    })
}

/// A candidate explanation: model, parameter values and the welfare
/// criterion that goes with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCandidate {
    pub label: String,
    pub spec: ModelSpec,
    pub params: Params,
    pub criterion: WelfareCriterion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelfareVerdict {
    pub model: String,
    pub criterion: String,
    pub before: f64,
    pub after: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityReport {
    pub tv_choice: f64,
    /// Present when the models declare neural channels and bins are requested.
    pub tv_joint: Option<f64>,
    #[serde(rename = "delta_ll")]
    pub delta_ll_on_data: Option<f64>,
    #[serde(rename = "verdicts_diverge")]
    pub welfare_verdicts_diverge: bool,
    pub verdicts: Vec<WelfareVerdict>,
}

fn total_variation(leaves: &[PairLeaf]) -> f64 {
    (0.5 * leaves.iter().map(|l| (l.p[0] - l.p[1]).abs()).sum::<f64>()).clamp(0.0, 1.0)
}

fn choice_tv(leaves: &[PairLeaf]) -> f64 {
    let mut m: HashMap<(&[usize], &[usize]), [f64; 2]> = HashMap::new();
    for l in leaves {
        let e = m.entry((&l.states, &l.actions)).or_insert([0.0; 2]);
        e[0] += l.p[0];
        e[1] += l.p[1];
    }
    let mut keys: Vec<_> = m.into_iter().collect();
    keys.sort_by(|x, y| x.0.cmp(&y.0));
    (0.5 * keys.iter().map(|(_, p)| (p[0] - p[1]).abs()).sum::<f64>()).clamp(0.0, 1.0)
}

fn sign(x: f64) -> i8 {
    if x > 1e-12 {
        1
    } else if x < -1e-12 {
        -1
    } else {
        0
    }
}

/// Welfare change of `iv` under the candidate's own criterion, each side
/// evaluated at the exact on-policy fixed point in the candidate's own
/// (subjective) environment.
pub fn candidate_verdict(env: &Mdp, cand: &ModelCandidate, components: &Components, iv: &Intervention) -> Result<WelfareVerdict> {
    let eval = |world: &Mdp| -> Result<f64> {
        let inst = cand.spec.instantiate(world, &cand.params)?;
        let (_, policy, _) = exact_choice_values(&inst.mdp, &inst.config, inst.cue.as_ref())?;
        evaluate_welfare(&inst.mdp, &policy, &cand.criterion, components)
    };
    let before = eval(env)?;
    let after = eval(&apply_intervention(env, iv)?)?;
    Ok(WelfareVerdict {
        model: cand.label.clone(),
        criterion: cand.criterion.label().to_string(),
        before,
        after,
        delta: after - before,
    })
}

/// Observational distance between two candidates and whether their welfare
/// verdicts on `iv` disagree in sign. `data` adds the log-likelihood
/// difference (first minus second) on an observed dataset.
#[allow(clippy::too_many_arguments)]
pub fn identifiability_gap(
    env: &Mdp,
    pair: (&ModelCandidate, &ModelCandidate),
    horizon: usize,
    neural_bins: usize,
    components: &Components,
    intervention: &Intervention,
    data: Option<(&Trajectory, &[NeuralTrace])>,
) -> Result<IdentifiabilityReport> {
    let (a, b) = pair;
    let ia = a.spec.instantiate(env, &a.params)?;
    let ib = b.spec.instantiate(env, &b.params)?;
    let choice_leaves = enumerate_pair(env, &ia, &ib, horizon, 0)?;
    let tv_choice = choice_tv(&choice_leaves);
    let tv_joint = if neural_bins > 0 && !ia.channels.is_empty() {
        Some(total_variation(&enumerate_pair(env, &ia, &ib, horizon, neural_bins)?))
    } else {
        None
    };
    let delta_ll_on_data = match data {
        Some((traj, traces)) => Some(
            joint_log_likelihood(traj, traces, env, &a.spec, &a.params)?
                - joint_log_likelihood(traj, traces, env, &b.spec, &b.params)?,
        ),
        None => None,
    };
    let va = candidate_verdict(env, a, components, intervention)?;
    let vb = candidate_verdict(env, b, components, intervention)?;
    Ok(IdentifiabilityReport {
        tv_choice,
        tv_joint,
        delta_ll_on_data,
        welfare_verdicts_diverge: sign(va.delta) != sign(vb.delta),
        verdicts: vec![va, vb],
    })
}
