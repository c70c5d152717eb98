//! The six-step welfare-inference checklist as a machine-checkable audit.
//!
//! Steps 1 and 6 are normative: the audit only checks that the required
//! statements exist and surfaces them for a human reviewer. Steps 2–5 run
//! the corresponding computations. A step that errors is recorded as a
//! failure with the error message as evidence; it never aborts the audit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{exact_choice_values, run_learning, Latent};
use crate::error::{Error, Result};
use crate::inference::{identifiability_gap, IdentifiabilityReport};
use crate::neural::{encode, validate_encoding, LinkFunction, NeuralTrace, NoiseModel};
use crate::scenarios::{build_addiction, build_conditioning, build_platform, AddictionParams, ScenarioBundle};
use crate::welfare::{classify_mistake_states, Continuation};

pub const STEP_TITLES: [&str; 6] = [
    "Define the welfare criterion U",
    "Specify the computational model",
    "Validate neural encodings",
    "Assess model identifiability",
    "Locate welfare-relevant divergences",
    "Analyse policy implementation",
];

const MISSING: &str = "missing input";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum BuiltinScenario {
    Addiction {
        #[serde(default)]
        params: Option<AddictionParams>,
    },
    Conditioning { delay: usize, magnitude: f64, omission_prob: f64 },
    Platform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioSource {
    Builtin(BuiltinScenario),
    /// A scenario file; relative paths resolve against the config's directory.
    Path(PathBuf),
    Inline(Box<ScenarioBundle>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeclaredCriterion {
    #[serde(default)]
    pub criterion_text: String,
    #[serde(default)]
    pub justification_text: String,
    /// Which of the scenario's criteria the statement refers to; defaults to
    /// the first.
    #[serde(default)]
    pub criterion_label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingThresholds {
    pub min_pearson_r: f64,
    pub min_spearman_rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityThresholds {
    pub max_tv_for_twin_flag: f64,
    pub min_delta_ll: f64,
}

/// The fresh simulation step 3 encodes and validates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingCheck {
    pub trials: usize,
    pub horizon: usize,
    pub latent: Latent,
    pub link: LinkFunction,
    pub sigma: f64,
    #[serde(default = "default_channel")]
    pub channel_id: String,
}

fn default_channel() -> String {
    "delta".into()
}

impl Default for EncodingCheck {
    fn default() -> Self {
        EncodingCheck {
            trials: 20,
            horizon: 50,
            latent: Latent::Delta,
            link: LinkFunction::Identity,
            sigma: 0.1,
            channel_id: default_channel(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityCheck {
    pub horizon: usize,
    pub neural_bins: usize,
    /// Label of the scenario intervention whose verdicts are compared.
    pub intervention: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImplementationNotes {
    #[serde(default)]
    pub operationalisation_text: String,
    #[serde(default)]
    pub fairness_privacy_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub scenario: ScenarioSource,
    #[serde(default)]
    pub declared_criterion: DeclaredCriterion,
    #[serde(default)]
    pub model_declaration: String,
    #[serde(default)]
    pub encoding_check: EncodingCheck,
    pub encoding_thresholds: EncodingThresholds,
    pub identifiability_thresholds: IdentifiabilityThresholds,
    pub identifiability: IdentifiabilityCheck,
    #[serde(default)]
    pub implementation_notes: ImplementationNotes,
    /// Directory relative scenario paths resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.encoding_thresholds;
        if !((-1.0..=1.0).contains(&t.min_pearson_r) && (-1.0..=1.0).contains(&t.min_spearman_rho)) {
            return Err(Error::InvalidArgument("correlation thresholds must lie in [-1,1]".into()));
        }
        let i = &self.identifiability_thresholds;
        if !((0.0..=1.0).contains(&i.max_tv_for_twin_flag) && i.min_delta_ll.is_finite() && i.min_delta_ll >= 0.0) {
            return Err(Error::InvalidArgument(
                "need max_tv_for_twin_flag in [0,1] and finite min_delta_ll >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: AuditConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative scenario paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn resolve_scenario(&self) -> Result<ScenarioBundle> {
        self.scenario.resolve(self.base_dir.as_deref())
    }
}

impl ScenarioSource {
    /// Builds or loads the bundle; relative paths resolve against `base_dir`.
    pub fn resolve(&self, base_dir: Option<&Path>) -> Result<ScenarioBundle> {
        match self {
            ScenarioSource::Builtin(BuiltinScenario::Addiction { params }) => {
                build_addiction(&params.unwrap_or_default())
            }
            ScenarioSource::Builtin(BuiltinScenario::Conditioning { delay, magnitude, omission_prob }) => {
                build_conditioning(*delay, *magnitude, *omission_prob)
            }
            ScenarioSource::Builtin(BuiltinScenario::Platform) => build_platform(),
            ScenarioSource::Path(p) => {
                let full = match (base_dir, p.is_relative()) {
                    (Some(dir), true) => dir.join(p),
                    _ => p.clone(),
                };
                let text = std::fs::read_to_string(&full)
                    .map_err(|e| Error::InvalidArgument(format!("scenario {}: {e}", full.display())))?;
                ScenarioBundle::from_json(&text)
            }
            ScenarioSource::Inline(b) => {
                b.validate()?;
                Ok((**b).clone())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepStatus {
    Pass,
    Fail,
    ManualReview,
}

impl StepStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepStatus::Pass => "pass",
            StepStatus::Fail => "fail",
            StepStatus::ManualReview => "manual-review",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step_number: u8,
    pub title: String,
    pub status: StepStatus,
    pub evidence: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Overall {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecklistReport {
    pub steps: Vec<StepReport>,
    pub overall: Overall,
}

type Evidence = BTreeMap<String, String>;

fn ev<const N: usize>(pairs: [(&str, String); N]) -> Evidence {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn present(text: &str) -> bool {
    !text.trim().is_empty()
}

fn text_or_missing(text: &str) -> String {
    if present(text) {
        text.to_string()
    } else {
        MISSING.to_string()
    }
}

fn fail_with(e: &Error) -> (StepStatus, Evidence) {
    (StepStatus::Fail, ev([("error", e.to_string())]))
}

struct Step3 {
    traj: crate::agent::Trajectory,
    trace: NeuralTrace,
}

fn step1(cfg: &AuditConfig) -> (StepStatus, Evidence) {
    let d = &cfg.declared_criterion;
    let ok = present(&d.criterion_text) && present(&d.justification_text);
    let status = if ok { StepStatus::Pass } else { StepStatus::Fail };
    (
        status,
        ev([
            ("criterion_text", text_or_missing(&d.criterion_text)),
            ("justification_text", text_or_missing(&d.justification_text)),
        ]),
    )
}

fn step2(cfg: &AuditConfig, bundle: &ScenarioBundle) -> (StepStatus, Evidence) {
    let mut e = ev([
        ("model_declaration", text_or_missing(&cfg.model_declaration)),
        ("n_models", bundle.models.len().to_string()),
    ]);
    let mut ok = present(&cfg.model_declaration) && !bundle.models.is_empty();
    if bundle.models.is_empty() {
        e.insert("models".into(), MISSING.into());
    }
    for m in &bundle.models {
        let res = m.spec.validate(&bundle.mdp).and_then(|_| m.spec.resolve(&m.params).map(|_| ()));
        let v = match &res {
            Ok(()) => "valid".to_string(),
            Err(err) => format!("invalid: {err}"),
        };
        ok &= res.is_ok();
        e.insert(format!("model.{}", m.label), v);
    }
    (if ok { StepStatus::Pass } else { StepStatus::Fail }, e)
}

fn step3<R: Rng + ?Sized>(cfg: &AuditConfig, bundle: &ScenarioBundle, rng: &mut R) -> Result<(StepStatus, Evidence, Step3)> {
    let chk = &cfg.encoding_check;
    let (traj, _) = run_learning(&bundle.mdp, &bundle.agent_config, bundle.cue_model.as_ref(), chk.trials, chk.horizon, rng)?;
    let latent = traj.latents(chk.latent);
    let trace = encode(&chk.channel_id, &latent, &chk.link, &NoiseModel { sigma: chk.sigma }, rng)?;
    let xs: Vec<f64> = latent.iter().map(|l| l.value).collect();
    let stats = validate_encoding(&trace.values(), &xs)?;
    let t = &cfg.encoding_thresholds;
    let ok = stats.pearson_r >= t.min_pearson_r && stats.spearman_rho >= t.min_spearman_rho;
    let e = ev([
        ("pearson_r", stats.pearson_r.to_string()),
        ("spearman_rho", stats.spearman_rho.to_string()),
        ("regression_slope", stats.regression_slope.to_string()),
        ("regression_intercept", stats.regression_intercept.to_string()),
        ("n_samples", stats.n_samples.to_string()),
        ("sigma", chk.sigma.to_string()),
        ("min_pearson_r", t.min_pearson_r.to_string()),
        ("min_spearman_rho", t.min_spearman_rho.to_string()),
    ]);
    Ok((if ok { StepStatus::Pass } else { StepStatus::Fail }, e, Step3 { traj, trace }))
}

fn step4(cfg: &AuditConfig, bundle: &ScenarioBundle, data: Option<&Step3>) -> Result<(StepStatus, Evidence)> {
    let models = &bundle.models;
    if models.len() < 2 {
        return Ok((
            StepStatus::ManualReview,
            ev([("candidate_pairs", format!("{MISSING}: fewer than two candidate models"))]),
        ));
    }
    let id = &cfg.identifiability;
    let iv = bundle
        .intervention(&id.intervention)
        .ok_or_else(|| Error::InvalidArgument(format!("no intervention '{}' in scenario", id.intervention)))?;
    let th = &cfg.identifiability_thresholds;
    let components = bundle.components();
    let mut e = Evidence::new();
    let mut flagged = false;
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            let (a, b) = (&models[i], &models[j]);
            // only pass the recorded trace to models that declare its channel
            let traces: Vec<NeuralTrace> = data
                .map(|d| {
                    let declared = |m: &crate::inference::ModelCandidate| {
                        m.spec.neural_channels.iter().any(|c| c.id == d.trace.channel_id)
                    };
                    if declared(a) && declared(b) {
                        vec![d.trace.clone()]
                    } else {
                        vec![]
                    }
                })
                .unwrap_or_default();
            let obs = data.map(|d| (&d.traj, traces.as_slice()));
            let r: IdentifiabilityReport =
                identifiability_gap(&bundle.mdp, (a, b), id.horizon, id.neural_bins, &components, iv, obs)?;
            let key = format!("{}|{}", a.label, b.label);
            let twin = r.tv_choice <= th.max_tv_for_twin_flag && r.welfare_verdicts_diverge;
            flagged |= twin;
            e.insert(format!("{key}.tv_choice"), r.tv_choice.to_string());
            e.insert(
                format!("{key}.tv_joint"),
                r.tv_joint.map_or_else(|| "na".to_string(), |x| x.to_string()),
            );
            if let Some(dll) = r.delta_ll_on_data {
                e.insert(format!("{key}.delta_ll"), dll.to_string());
                e.insert(format!("{key}.separated_by_data"), (dll.abs() >= th.min_delta_ll).to_string());
            }
            e.insert(format!("{key}.verdicts_diverge"), r.welfare_verdicts_diverge.to_string());
            for v in &r.verdicts {
                e.insert(format!("{key}.delta.{}", v.model), v.delta.to_string());
            }
            e.insert(format!("{key}.behavioral_twin"), twin.to_string());
        }
    }
    e.insert("intervention".into(), iv.label.clone());
    e.insert("max_tv_for_twin_flag".into(), th.max_tv_for_twin_flag.to_string());
    e.insert("min_delta_ll".into(), th.min_delta_ll.to_string());
    Ok((if flagged { StepStatus::ManualReview } else { StepStatus::Pass }, e))
}

fn step5(cfg: &AuditConfig, bundle: &ScenarioBundle) -> Result<(StepStatus, Evidence)> {
    let criterion = match &cfg.declared_criterion.criterion_label {
        Some(label) => bundle
            .criterion(label)
            .ok_or_else(|| Error::InvalidArgument(format!("no criterion '{label}' in scenario")))?,
        None => bundle
            .criteria
            .first()
            .ok_or_else(|| Error::MissingComponent("scenario declares no welfare criterion".into()))?,
    };
    let (q, policy, _) = exact_choice_values(&bundle.mdp, &bundle.agent_config, bundle.cue_model.as_ref())?;
    let m = classify_mistake_states(
        &bundle.mdp,
        &q,
        &policy,
        criterion,
        &bundle.components(),
        Continuation::ImplementedPolicy,
    )?;
    let set: Vec<String> = m.mistake_states.iter().map(|s| s.to_string()).collect();
    let mut e = ev([
        ("criterion", criterion.label().to_string()),
        ("mistake_states", format!("[{}]", set.join(","))),
        ("n_mistake_states", set.len().to_string()),
    ]);
    for d in &m.details {
        e.insert(
            format!("state.{}", d.state),
            format!("implemented_best={} criterion_best={}", d.implemented_best, d.criterion_best),
        );
    }
    Ok((StepStatus::Pass, e))
}

fn step6(cfg: &AuditConfig) -> (StepStatus, Evidence) {
    let n = &cfg.implementation_notes;
    let ok = present(&n.operationalisation_text) && present(&n.fairness_privacy_text);
    (
        if ok { StepStatus::ManualReview } else { StepStatus::Fail },
        ev([
            ("operationalisation_text", text_or_missing(&n.operationalisation_text)),
            ("fairness_privacy_text", text_or_missing(&n.fairness_privacy_text)),
        ]),
    )
}

/// Runs the six steps in order. Only an unresolvable scenario is an error;
/// everything else becomes step evidence.
pub fn run_audit<R: Rng + ?Sized>(cfg: &AuditConfig, rng: &mut R) -> Result<ChecklistReport> {
    cfg.validate()?;
    let bundle = cfg.resolve_scenario()?;
    let mut results = vec![step1(cfg), step2(cfg, &bundle)];
    let artifacts = match step3(cfg, &bundle, rng) {
        Ok((status, e, art)) => {
            results.push((status, e));
            Some(art)
        }
        Err(err) => {
            results.push(fail_with(&err));
            None
        }
    };
    results.push(step4(cfg, &bundle, artifacts.as_ref()).unwrap_or_else(|e| fail_with(&e)));
    results.push(step5(cfg, &bundle).unwrap_or_else(|e| fail_with(&e)));
    results.push(step6(cfg));
    let steps: Vec<StepReport> = results
        .into_iter()
        .zip(STEP_TITLES)
        .enumerate()
        .map(|(i, ((status, evidence), title))| StepReport {
            step_number: i as u8 + 1,
            title: title.to_string(),
            status,
            evidence,
        })
        .collect();
    let overall = if steps.iter().any(|s| s.status == StepStatus::Fail) { Overall::Fail } else { Overall::Pass };
    Ok(ChecklistReport { steps, overall })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Markdown,
}

fn md_cell(s: &str) -> String {
    s.replace('|', "\\|").replace('\n', " ")
}

/// JSON with sorted keys, or a markdown table of the six steps followed by
/// one evidence block per step.
pub fn render_report(report: &ChecklistReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            // serde_json's map is ordered, so going through Value sorts every key
            let value = serde_json::to_value(report)?;
            Ok(serde_json::to_string_pretty(&value)? + "\n")
        }
        ReportFormat::Markdown => {
            let mut out = String::new();
            let overall = match report.overall {
                Overall::Pass => "pass",
                Overall::Fail => "fail",
            };
            writeln!(out, "# Welfare inference checklist\n\nOverall: **{overall}**\n").unwrap();
            writeln!(out, "| Step | Title | Status |\n|---|---|---|").unwrap();
            for s in &report.steps {
                writeln!(out, "| {} | {} | {} |", s.step_number, md_cell(&s.title), s.status.as_str()).unwrap();
            }
            for s in &report.steps {
                writeln!(out, "\n## Step {}: {}\n", s.step_number, s.title).unwrap();
                for (k, v) in &s.evidence {
                    writeln!(out, "- `{k}`: {}", md_cell(v)).unwrap();
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    pub(crate) fn full_config() -> AuditConfig {
        AuditConfig {
            scenario: ScenarioSource::Builtin(BuiltinScenario::Addiction { params: None }),
            declared_criterion: DeclaredCriterion {
                criterion_text: "Long-run utility".into(),
                justification_text: "Reflective preferences".into(),
                criterion_label: Some("long-run".into()),
            },
            model_declaration: "Actor-critic with cue distortion".into(),
            encoding_check: EncodingCheck::default(),
            encoding_thresholds: EncodingThresholds { min_pearson_r: 0.5, min_spearman_rho: 0.5 },
            identifiability_thresholds: IdentifiabilityThresholds { max_tv_for_twin_flag: 1e-6, min_delta_ll: 3.0 },
            identifiability: IdentifiabilityCheck { horizon: 3, neural_bins: 3, intervention: "cue-removal".into() },
            implementation_notes: ImplementationNotes {
                operationalisation_text: "Tax on cue-state consumption".into(),
                fairness_privacy_text: "No individual neural data leaves the clinic".into(),
            },
            base_dir: None,
        }
    }

    #[test]
    fn full_addiction_audit() {
        let r = run_audit(&full_config(), &mut seeded_rng(3)).unwrap();
        let st: Vec<StepStatus> = r.steps.iter().map(|s| s.status).collect();
        use StepStatus::*;
        assert_eq!(st, vec![Pass, Pass, Pass, ManualReview, Pass, ManualReview], "{r:#?}");
        assert_eq!(r.overall, Overall::Pass);
        assert_eq!(r.steps[4].evidence["mistake_states"], "[1]");
    }

    #[test]
    fn missing_justification_fails() {
        let mut cfg = full_config();
        cfg.declared_criterion.justification_text.clear();
        let r = run_audit(&cfg, &mut seeded_rng(3)).unwrap();
        assert_eq!(r.steps[0].status, StepStatus::Fail);
        assert_eq!(r.steps[0].evidence["justification_text"], MISSING);
        assert_eq!(r.overall, Overall::Fail);
    }

    #[test]
    fn huge_noise_fails_encoding() {
        let mut cfg = full_config();
        cfg.encoding_check.sigma = 1e4;
        let r = run_audit(&cfg, &mut seeded_rng(3)).unwrap();
        assert_eq!(r.steps[2].status, StepStatus::Fail);
        let rr: f64 = r.steps[2].evidence["pearson_r"].parse().unwrap();
        assert!(rr < 0.5);
    }

    #[test]
    fn module_errors_become_failures() {
        let mut cfg = full_config();
        cfg.identifiability.intervention = "nope".into();
        let r = run_audit(&cfg, &mut seeded_rng(3)).unwrap();
        assert_eq!(r.steps[3].status, StepStatus::Fail);
        assert!(r.steps[3].evidence.contains_key("error"));
    }

    #[test]
    fn rendering() {
        let r = run_audit(&full_config(), &mut seeded_rng(3)).unwrap();
        let json = render_report(&r, ReportFormat::Json).unwrap();
        assert_eq!(json, render_report(&r, ReportFormat::Json).unwrap());
        let back: ChecklistReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        let md = render_report(&r, ReportFormat::Markdown).unwrap();
        let rows = md.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Step")).count();
        assert_eq!(rows, 6);
    }
}
