//! `nwi`: command-line front end for simulation, fitting, identifiability,
//! welfare comparison and checklist audits.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 when a command fails.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use nwi_core::agent::{run_learning, AgentConfig, LearningRateSchedule};
use nwi_core::audit::{render_report, run_audit, AuditConfig, BuiltinScenario, ReportFormat, ScenarioSource};
use nwi_core::environment::{Intervention, Mdp};
use nwi_core::inference::{fit_mle, identifiability_gap, simulate_model, ModelSpec, ParamName, Params, SearchConfig};
use nwi_core::neural::{simulate_conditioning, ConditioningProtocol};
use nwi_core::scenarios::{
    bandit_recovery_spec, build_scale_pair, run_platform_loop, two_armed_bandit, PlatformOptimizer, ENGAGE,
};
use nwi_core::welfare::{compare_interventions, Relearn};
use nwi_core::{seeded_rng, Error};

#[derive(Parser)]
#[command(name = "nwi", version, about = "Neuroeconomic welfare inference toolkit", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(clap::Args)]
struct Common {
    /// JSON config for the subcommand; built-in defaults when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory; results go to stdout when omitted
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the learner on a scenario and export its trajectory
    Simulate,
    /// Classical conditioning: mean TD error at cue, reward and omission
    Condition,
    /// Simulate data from a model and fit it by maximum likelihood
    Fit,
    /// Exact identifiability gap between two candidate models
    Identify,
    /// Welfare before and after each scenario intervention
    Welfare,
    /// Platform reward-shaping loop
    Platform,
    /// Six-step welfare inference checklist
    Audit,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Markdown,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
            Format::Markdown => "md",
        }
    }
}

enum Failure {
    Usage(String),
    Exec(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Exec(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Exec(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Exec(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

// ── Subcommand configs ──────────────────────────────────────────────────

fn addiction() -> ScenarioSource {
    ScenarioSource::Builtin(BuiltinScenario::Addiction { params: None })
}

fn platform() -> ScenarioSource {
    ScenarioSource::Builtin(BuiltinScenario::Platform)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    #[serde(default = "addiction")]
    scenario: ScenarioSource,
    #[serde(default = "one")]
    trials: usize,
    #[serde(default = "default_horizon")]
    horizon: usize,
}

fn one() -> usize {
    1
}

fn default_horizon() -> usize {
    200
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConditionConfig {
    #[serde(default = "default_protocol")]
    protocol: ConditioningProtocol,
    #[serde(default = "default_conditioning_agent")]
    agent: AgentConfig,
}

fn default_protocol() -> ConditioningProtocol {
    ConditioningProtocol { cue_time: 1, reward_time: 3, reward_magnitude: 1.0, omission_probability: 0.2, trials: 500 }
}

fn default_conditioning_agent() -> AgentConfig {
    AgentConfig { gamma: 0.95, schedule: LearningRateSchedule::Decay, ..AgentConfig::default() }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FitConfig {
    #[serde(default)]
    mdp: Option<Mdp>,
    #[serde(default = "default_fit_spec")]
    spec: ModelSpec,
    #[serde(default = "default_true_params")]
    true_params: Params,
    #[serde(default = "default_episodes")]
    episodes: usize,
    #[serde(default = "default_fit_horizon")]
    horizon: usize,
    #[serde(default)]
    search: SearchConfig,
}

fn default_fit_spec() -> ModelSpec {
    bandit_recovery_spec(0.9)
}

fn default_true_params() -> Params {
    BTreeMap::from([(ParamName::Alpha, 0.1), (ParamName::Beta, 2.0)])
}

fn default_episodes() -> usize {
    200
}

fn default_fit_horizon() -> usize {
    50
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScalePairArgs {
    c: f64,
    base_beta: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IdentifyConfig {
    #[serde(default = "addiction")]
    scenario: ScenarioSource,
    /// Labels of two scenario models; the first two when omitted.
    #[serde(default)]
    models: Option<[String; 2]>,
    /// Compare the softmax scale pair instead of scenario models.
    #[serde(default)]
    scale_pair: Option<ScalePairArgs>,
    #[serde(default = "three")]
    horizon: usize,
    #[serde(default = "three")]
    neural_bins: usize,
    /// Intervention whose welfare verdicts are compared; none means the identity.
    #[serde(default = "cue_removal")]
    intervention: Option<String>,
}

fn three() -> usize {
    3
}

fn cue_removal() -> Option<String> {
    Some("cue-removal".into())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WelfareConfig {
    #[serde(default = "addiction")]
    scenario: ScenarioSource,
    #[serde(default = "one")]
    trials: usize,
    #[serde(default = "default_run")]
    horizon: usize,
}

fn default_run() -> usize {
    2000
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PlatformConfig {
    #[serde(default = "platform")]
    scenario: ScenarioSource,
    #[serde(default = "default_optimizer")]
    optimizer: PlatformOptimizer,
}

fn default_optimizer() -> PlatformOptimizer {
    PlatformOptimizer { target_action: ENGAGE, step_size: 0.25, epochs: 6, budget: 10.0, run_length: 2000 }
}

/// Parses the config file, or an empty object so every default applies.
fn load<T: DeserializeOwned>(path: Option<&Path>) -> CliResult<T> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Failure::Exec(format!("{}: {e}", p.display())))?,
        None => "{}".to_string(),
    };
    serde_json::from_str(&text).map_err(|e| Failure::Exec(format!("config: {e}")))
}

fn base_dir(path: Option<&Path>) -> Option<&Path> {
    path.and_then(Path::parent)
}

// ── Dispatch ────────────────────────────────────────────────────────────

fn pick(format: Option<Format>, allowed: &[Format], command: &str) -> CliResult<Format> {
    match format {
        None => Ok(allowed[0]),
        Some(f) if allowed.contains(&f) => Ok(f),
        Some(f) => Err(Failure::Usage(format!(
            "`{command}` does not support --format {}",
            f.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default()
        ))),
    }
}

fn emit(out: Option<&Path>, name: &str, format: Format, body: &[u8]) -> CliResult<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(format!("{name}.{}", format.ext())), body)?;
        }
        None => std::io::stdout().write_all(body)?,
    }
    Ok(())
}

fn json_bytes<T: serde::Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let v = serde_json::to_value(value)?;
    Ok((serde_json::to_string_pretty(&v)? + "\n").into_bytes())
}

fn run(cli: Cli) -> CliResult<()> {
    let Common { config, seed, out, format } = cli.common;
    let cfg_path = config.as_deref();
    let out = out.as_deref();
    let mut rng = seeded_rng(seed);
    use Format::*;
    match cli.command {
        Command::Simulate => {
            let format = pick(format, &[Csv, Json], "simulate")?;
            let cfg: SimulateConfig = load(cfg_path)?;
            let b = cfg.scenario.resolve(base_dir(cfg_path))?;
            let (traj, _) = run_learning(&b.mdp, &b.agent_config, b.cue_model.as_ref(), cfg.trials, cfg.horizon, &mut rng)?;
            let body = match format {
                Csv => {
                    let mut buf = Vec::new();
                    traj.write_csv(&mut buf)?;
                    buf
                }
                _ => json_bytes(&traj)?,
            };
            emit(out, "trajectory", format, &body)
        }
        Command::Condition => {
            let format = pick(format, &[Csv, Json], "condition")?;
            let cfg: ConditionConfig = load(cfg_path)?;
            let (_, summary) = simulate_conditioning(&cfg.protocol, &cfg.agent, &mut rng)?;
            let body = match format {
                Csv => {
                    let mut buf = Vec::new();
                    summary.write_csv(&mut buf)?;
                    buf
                }
                _ => json_bytes(&summary)?,
            };
            emit(out, "peri_event", format, &body)
        }
        Command::Fit => {
            let format = pick(format, &[Json], "fit")?;
            let cfg: FitConfig = load(cfg_path)?;
            let env = match cfg.mdp {
                Some(m) => m,
                None => two_armed_bandit([0.8, 0.2])?,
            };
            let (traj, traces) = simulate_model(&env, &cfg.spec, &cfg.true_params, cfg.episodes, cfg.horizon, &mut rng)?;
            let fit = fit_mle(&traj, &traces, &env, &cfg.spec, &cfg.search, &mut rng)?;
            emit(out, "fit", format, &json_bytes(&fit)?)
        }
        Command::Identify => {
            let format = pick(format, &[Json], "identify")?;
            let cfg: IdentifyConfig = load(cfg_path)?;
            let report = match &cfg.scale_pair {
                Some(sp) => {
                    let (a, b, env) = build_scale_pair(sp.c, sp.base_beta)?;
                    let iv = Intervention::null(&env);
                    identifiability_gap(&env, (&a, &b), cfg.horizon, cfg.neural_bins, &Default::default(), &iv, None)?
                }
                None => {
                    let bundle = cfg.scenario.resolve(base_dir(cfg_path))?;
                    let find = |label: &str| {
                        bundle
                            .models
                            .iter()
                            .find(|m| m.label == label)
                            .ok_or_else(|| Failure::Exec(format!("no model '{label}' in scenario")))
                    };
                    let (a, b) = match &cfg.models {
                        Some([x, y]) => (find(x)?, find(y)?),
                        None if bundle.models.len() >= 2 => (&bundle.models[0], &bundle.models[1]),
                        None => return Err(Failure::Exec("scenario has fewer than two models".into())),
                    };
                    let iv = match &cfg.intervention {
                        Some(label) => bundle
                            .intervention(label)
                            .cloned()
                            .ok_or_else(|| Failure::Exec(format!("no intervention '{label}' in scenario")))?,
                        None => Intervention::null(&bundle.mdp),
                    };
                    identifiability_gap(&bundle.mdp, (a, b), cfg.horizon, cfg.neural_bins, &bundle.components(), &iv, None)?
                }
            };
            emit(out, "identify", format, &json_bytes(&report)?)
        }
        Command::Welfare => {
            let format = pick(format, &[Csv, Json], "welfare")?;
            let cfg: WelfareConfig = load(cfg_path)?;
            let b = cfg.scenario.resolve(base_dir(cfg_path))?;
            let relearn = Relearn { trials: cfg.trials, horizon: cfg.horizon, seed };
            let cmp = compare_interventions(
                &b.mdp,
                &b.agent_config,
                b.cue_model.as_ref(),
                &b.interventions,
                &b.criteria,
                &b.components(),
                &relearn,
            )?;
            let body = match format {
                Csv => {
                    let mut buf = Vec::new();
                    cmp.write_csv(&mut buf)?;
                    buf
                }
                _ => json_bytes(&cmp)?,
            };
            emit(out, "welfare", format, &body)
        }
        Command::Platform => {
            let format = pick(format, &[Csv, Json], "platform")?;
            let cfg: PlatformConfig = load(cfg_path)?;
            let b = cfg.scenario.resolve(base_dir(cfg_path))?;
            let series = run_platform_loop(&b, &cfg.optimizer, &mut rng)?;
            let body = match format {
                Csv => {
                    let mut buf = Vec::new();
                    series.write_csv(&mut buf)?;
                    buf
                }
                _ => json_bytes(&series)?,
            };
            emit(out, "platform", format, &body)
        }
        Command::Audit => {
            let format = pick(format, &[Json, Markdown], "audit")?;
            let path = cfg_path.ok_or_else(|| Failure::Usage("`audit` requires --config <path>".into()))?;
            let cfg = AuditConfig::load(path)?;
            let report = run_audit(&cfg, &mut rng)?;
            let rf = if format == Markdown { ReportFormat::Markdown } else { ReportFormat::Json };
            emit(out, "report", format, render_report(&report, rf)?.as_bytes())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                _ => {
                    // usage text, including the no-argument case, goes to stderr
                    eprint!("{}", e.render());
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `nwi --help` for usage.");
            ExitCode::from(1)
        }
        Err(Failure::Exec(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
