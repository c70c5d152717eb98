//! Synthetic neural channels.
//!
//! A channel is a monotone link applied to a latent variable (TD error or
//! state value) plus additive Gaussian noise. Also hosts the classical
//! conditioning simulation and the encoding-validation statistics.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agent::{td_error, AgentConfig, AgentState, LatentSample, LearningRateSchedule, Record, Trajectory};
use crate::error::{Error, Result};
use crate::scenarios::conditioning_chain;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LinkFunction {
    Identity,
    Affine { slope: f64, baseline: f64 },
    Logistic { scale: f64, midpoint: f64, amplitude: f64, baseline: f64 },
}

impl LinkFunction {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            LinkFunction::Identity => x,
            LinkFunction::Affine { slope, baseline } => baseline + slope * x,
            LinkFunction::Logistic { scale, midpoint, amplitude, baseline } => {
                baseline + amplitude / (1.0 + (-scale * (x - midpoint)).exp())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LinkFunction::Identity => true,
            LinkFunction::Affine { slope, baseline } => slope > 0.0 && slope.is_finite() && baseline.is_finite(),
            LinkFunction::Logistic { scale, midpoint, amplitude, baseline } => {
                scale > 0.0
                    && amplitude > 0.0
                    && [scale, midpoint, amplitude, baseline].iter().all(|x| x.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("link {self:?} is not strictly increasing")))
        }
    }

    /// Replaces the slope of an affine link; other links are unchanged.
    pub fn with_slope(self, new_slope: f64) -> Self {
        match self {
            LinkFunction::Affine { baseline, .. } => LinkFunction::Affine { slope: new_slope, baseline },
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: f64,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if self.sigma.is_finite() && self.sigma >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("noise sigma {} must be finite and >= 0", self.sigma)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub trial: usize,
    pub t: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralTrace {
    pub channel_id: String,
    pub samples: Vec<TraceSample>,
}

impl NeuralTrace {
    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.value).collect()
    }

    /// Checks every sample lines up with a record of `traj`, in order.
    pub fn check_aligned(&self, traj: &Trajectory) -> Result<()> {
        let aligned = self.samples.len() == traj.records.len()
            && self.samples.iter().zip(&traj.records).all(|(s, r)| s.trial == r.trial && s.t == r.t);
        if aligned {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("trace '{}' is not aligned to the trajectory", self.channel_id)))
        }
    }

    pub fn write_csv<W: Write>(traces: &[NeuralTrace], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["channel", "trial", "t", "value"])?;
        for tr in traces {
            for s in &tr.samples {
                w.write_record([tr.channel_id.clone(), s.trial.to_string(), s.t.to_string(), s.value.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `link(latent) + N(0, σ²)` sample by sample.
pub fn encode<R: Rng + ?Sized>(
    channel_id: &str,
    latent: &[LatentSample],
    link: &LinkFunction,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<NeuralTrace> {
    link.validate()?;
    noise.validate()?;
    if let Some(bad) = latent.iter().find(|l| !l.value.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite latent at trial {} t {}", bad.trial, bad.t)));
    }
    let samples = latent
        .iter()
        .map(|l| {
            let eps: f64 = rng.sample(StandardNormal);
            TraceSample { trial: l.trial, t: l.t, value: link.apply(l.value) + noise.sigma * eps }
        })
        .collect();
    Ok(NeuralTrace { channel_id: channel_id.to_string(), samples })
}

// ── Encoding validation ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingValidationStats {
    pub pearson_r: f64,
    pub spearman_rho: f64,
    pub regression_slope: f64,
    pub regression_intercept: f64,
    pub n_samples: usize,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn pearson(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let slope = sxy / sxx;
    Some((r, slope, my - slope * mx))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Correlations of the trace with its latent, plus the least-squares line of
/// trace on latent.
pub fn validate_encoding(trace: &[f64], latent: &[f64]) -> Result<EncodingValidationStats> {
    if trace.len() != latent.len() {
        return Err(Error::InvalidArgument("trace and latent lengths differ".into()));
    }
    if trace.len() < 2 {
        return Err(Error::Undefined("fewer than two samples".into()));
    }
    if latent.iter().all(|&x| x == latent[0]) {
        return Err(Error::Undefined("latent has zero variance; correlation undefined".into()));
    }
    let (r, slope, intercept) =
        pearson(latent, trace).ok_or_else(|| Error::Undefined("trace has zero variance; correlation undefined".into()))?;
    let (rho, _, _) = pearson(&average_ranks(latent), &average_ranks(trace))
        .ok_or_else(|| Error::Undefined("rank variance is zero".into()))?;
    Ok(EncodingValidationStats {
        pearson_r: r,
        spearman_rho: rho,
        regression_slope: slope,
        regression_intercept: intercept,
        n_samples: trace.len(),
    })
}

/// `sqrt(v / (v + σ²))`: the correlation an identity-link channel with
/// noise σ can reach against a latent of variance `v`.
pub fn attenuated_correlation(latent_variance: f64, sigma: f64) -> f64 {
    (latent_variance / (latent_variance + sigma * sigma)).sqrt()
}

// ── Classical conditioning ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditioningProtocol {
    pub cue_time: usize,
    pub reward_time: usize,
    pub reward_magnitude: f64,
    /// Chance that reward is withheld on a test trial (the late window).
    /// Training trials are always rewarded.
    pub omission_probability: f64,
    pub trials: usize,
}

impl ConditioningProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.cue_time == 0 || self.cue_time >= self.reward_time {
            return Err(Error::InvalidArgument(format!(
                "need 0 < cue_time < reward_time, got cue_time={} reward_time={}",
                self.cue_time, self.reward_time
            )));
        }
        if !(0.0..=1.0).contains(&self.omission_probability) {
            return Err(Error::InvalidArgument("omission_probability must lie in [0,1]".into()));
        }
        if self.trials == 0 || !self.reward_magnitude.is_finite() {
            return Err(Error::InvalidArgument("need trials >= 1 and a finite magnitude".into()));
        }
        Ok(())
    }

    /// Steps per trial: background states, cue, delay, reward.
    pub fn horizon(&self) -> usize {
        self.reward_time + 1
    }

    /// Trials `[0, early_end)` form the naive phase: the first trial only,
    /// before any prediction exists.
    pub fn early_end(&self) -> usize {
        1
    }

    /// Trials `[late_start, trials)` form the last 10%.
    pub fn late_start(&self) -> usize {
        self.trials - self.trials.div_ceil(10)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseAverages {
    pub cue: Option<f64>,
    pub reward: Option<f64>,
    pub omission: Option<f64>,
    pub n_trials: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriEventSummary {
    pub early: PhaseAverages,
    pub late: PhaseAverages,
}

impl PeriEventSummary {
    /// Flat `key=value` block; undefined averages print as `na`.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (phase, p) in [("early", &self.early), ("late", &self.late)] {
            for (event, v) in [("cue", p.cue), ("reward", p.reward), ("omission", p.omission)] {
                let v = v.map_or_else(|| "na".to_string(), |x| x.to_string());
                out.push_str(&format!("{phase}.{event}={v}\n"));
            }
            out.push_str(&format!("{phase}.n_trials={}\n", p.n_trials));
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["phase", "event", "mean_delta"])?;
        for (phase, p) in [("early", &self.early), ("late", &self.late)] {
            for (event, v) in [("cue", p.cue), ("reward", p.reward), ("omission", p.omission)] {
                let v = v.map_or_else(|| "na".to_string(), |x| x.to_string());
                w.write_record([phase, event, v.as_str()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Default)]
struct Acc {
    sum: f64,
    n: usize,
}

impl Acc {
    fn push(&mut self, x: f64) {
        self.sum += x;
        self.n += 1;
    }
    fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Runs TD learning on the cue→delay→reward chain and averages δ at cue
/// onset, delivered reward and omitted reward, early versus late.
///
/// States before the cue stand for an unsignalled inter-trial interval: the
/// learner never updates them, so their value stays at zero and the cue's
/// arrival is always a surprise. The cue event is the TD error on the step
/// into the cue state.
pub fn simulate_conditioning<R: Rng + ?Sized>(
    protocol: &ConditioningProtocol,
    config: &AgentConfig,
    rng: &mut R,
) -> Result<(Trajectory, PeriEventSummary)> {
    protocol.validate()?;
    config.validate()?;
    let mdp = conditioning_chain(protocol.cue_time, protocol.reward_time, protocol.reward_magnitude)?;
    let mut agent = AgentState::new(&mdp, config.initial_value);
    for s in 0..protocol.cue_time {
        agent.v[s] = 0.0;
    }
    let (early_end, late_start) = (protocol.early_end(), protocol.late_start());
    let mut acc: [[Acc; 3]; 2] = Default::default();
    let mut traj = Trajectory::default();

    for trial in 0..protocol.trials {
        let test_trial = trial >= late_start;
        let omitted = test_trial && rng.random::<f64>() < protocol.omission_probability;
        for t in 0..protocol.horizon() {
            let s = t;
            let s_next = t + 1;
            let r = if s == protocol.reward_time && !omitted { protocol.reward_magnitude } else { 0.0 };
            let v_next = if mdp.is_terminal(s_next) { 0.0 } else { agent.v[s_next] };
            let v_state = agent.v[s];
            let delta = td_error(r, config.gamma, v_next, v_state);
            if s >= protocol.cue_time {
                let alpha = match config.schedule {
                    LearningRateSchedule::Constant => config.alpha_critic,
                    LearningRateSchedule::Decay => 1.0 / (1.0 + agent.visit_counts[s] as f64),
                };
                agent.critic_update(s, delta, alpha);
            }
            traj.records.push(Record {
                trial,
                t,
                state: s,
                action: 0,
                reward: r,
                delta,
                v_state,
                chosen_prob: 1.0,
                next_state: s_next,
            });

            let phase = if trial < early_end {
                Some(0)
            } else if test_trial {
                Some(1)
            } else {
                None
            };
            if let Some(p) = phase {
                if s + 1 == protocol.cue_time {
                    acc[p][0].push(delta);
                } else if s == protocol.reward_time {
                    acc[p][if omitted { 2 } else { 1 }].push(delta);
                }
            }
        }
    }
    let phase = |a: &[Acc; 3], n: usize| PhaseAverages {
        cue: a[0].mean(),
        reward: a[1].mean(),
        omission: a[2].mean(),
        n_trials: n,
    };
    let summary = PeriEventSummary {
        early: phase(&acc[0], early_end.min(protocol.trials)),
        late: phase(&acc[1], protocol.trials - late_start),
    };
    Ok((traj, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::PolicyMode;
    use crate::seeded_rng;

    fn latents(xs: &[f64]) -> Vec<LatentSample> {
        xs.iter().enumerate().map(|(t, &value)| LatentSample { trial: 0, t, value }).collect()
    }

    #[test]
    fn noiseless_identity_is_exact() {
        let l = latents(&[0.1, -2.0, 3.5]);
        let tr = encode("da", &l, &LinkFunction::Identity, &NoiseModel { sigma: 0.0 }, &mut seeded_rng(1)).unwrap();
        assert_eq!(tr.values(), vec![0.1, -2.0, 3.5]);
    }

    #[test]
    fn affine_hand_value() {
        let l = latents(&[0.5]);
        let link = LinkFunction::Affine { slope: 2.0, baseline: 3.0 };
        let tr = encode("da", &l, &link, &NoiseModel { sigma: 0.0 }, &mut seeded_rng(1)).unwrap();
        assert_eq!(tr.values(), vec![4.0]);
    }

    #[test]
    fn unit_noise_variance() {
        let l = latents(&vec![0.7; 100_000]);
        let tr = encode("da", &l, &LinkFunction::Identity, &NoiseModel { sigma: 1.0 }, &mut seeded_rng(9)).unwrap();
        let v = tr.values();
        let m = mean(&v);
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        assert!((0.98..=1.02).contains(&var), "{var}");
    }

    #[test]
    fn links_reject_non_increasing_parameters() {
        assert!(LinkFunction::Affine { slope: 0.0, baseline: 1.0 }.validate().is_err());
        assert!(LinkFunction::Logistic { scale: -1.0, midpoint: 0.0, amplitude: 1.0, baseline: 0.0 }
            .validate()
            .is_err());
    }

    #[test]
    fn validation_cases() {
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        let s = validate_encoding(&x, &x).unwrap();
        assert!((s.pearson_r - 1.0).abs() < 1e-9);
        assert!((s.regression_slope - 1.0).abs() < 1e-12 && s.regression_intercept.abs() < 1e-12);

        let link = LinkFunction::Logistic { scale: 1.5, midpoint: 0.2, amplitude: 4.0, baseline: 1.0 };
        let y: Vec<f64> = x.iter().map(|&v| link.apply(v)).collect();
        let s = validate_encoding(&y, &x).unwrap();
        assert!((s.spearman_rho - 1.0).abs() < 1e-9);
        assert!(s.pearson_r < 1.0);

        assert!(matches!(validate_encoding(&x, &vec![1.0; 50]), Err(Error::Undefined(_))));
        assert!(validate_encoding(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    fn cfg() -> AgentConfig {
        AgentConfig {
            gamma: 0.95,
            schedule: LearningRateSchedule::Decay,
            policy_mode: PolicyMode::QFromV,
            ..AgentConfig::default()
        }
    }

    #[test]
    fn conditioning_rejects_bad_ordering() {
        let p = ConditioningProtocol {
            cue_time: 3,
            reward_time: 3,
            reward_magnitude: 1.0,
            omission_probability: 0.0,
            trials: 10,
        };
        assert!(simulate_conditioning(&p, &cfg(), &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn conditioning_naive_phase() {
        let p = ConditioningProtocol {
            cue_time: 1,
            reward_time: 3,
            reward_magnitude: 1.0,
            omission_probability: 0.0,
            trials: 50,
        };
        let (traj, sum) = simulate_conditioning(&p, &cfg(), &mut seeded_rng(0)).unwrap();
        assert_eq!(traj.len(), 50 * 4);
        assert_eq!(sum.early.reward, Some(1.0));
        assert_eq!(sum.early.cue, Some(0.0));
        assert_eq!(sum.late.omission, None);
        assert!(sum.to_key_values().contains("late.omission=na"));
    }

    #[test]
    fn full_omission_dips_every_test_trial() {
        let p = ConditioningProtocol {
            cue_time: 1,
            reward_time: 3,
            reward_magnitude: 1.0,
            omission_probability: 1.0,
            trials: 200,
        };
        let (traj, sum) = simulate_conditioning(&p, &cfg(), &mut seeded_rng(3)).unwrap();
        assert!(traj
            .records
            .iter()
            .filter(|r| r.trial >= p.late_start() && r.state == p.reward_time)
            .all(|r| r.delta < 0.0));
        assert!(sum.late.omission.unwrap() < 0.0);
    }

    #[test]
    fn zero_magnitude_gives_zero_deltas() {
        let p = ConditioningProtocol {
            cue_time: 1,
            reward_time: 3,
            reward_magnitude: 0.0,
            omission_probability: 0.5,
            trials: 100,
        };
        let (traj, _) = simulate_conditioning(&p, &cfg(), &mut seeded_rng(3)).unwrap();
        assert!(traj.records.iter().all(|r| r.delta == 0.0));
    }
}
