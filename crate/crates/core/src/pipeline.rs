//! Experiment configuration, orchestration and report emission.
//!
//! An experiment config is a JSON document:
//!
//! ```json
//! {
//!   "kind": "frame-sweep",
//!   "model": "trap_model.json",
//!   "output_dir": "out/sweep",
//!   "seed": 0,
//!   "jobs": 4,
//!   "params": { "steps": 2000, "eta": 0.05, "seed_count": 32 }
//! }
//! ```
//!
//! Relative paths resolve against the config file's directory. Command-line
//! flags override `output_dir`, `seed` and `jobs`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocator::{self, AllocationManifest, HttpPredictor, PredictorConfig, RetryPolicy, SampleRecord, Strategy};
use crate::analysis::{self, BudgetMoments, MonteCarloEstimate};
use crate::budget::{BudgetSet, FrameBudget};
use crate::error::{Error, Result};
use crate::objectives::{AlphaSchedule, ConflictModel, NoiseModel, ParamVector};
use crate::stream::stream;
use crate::synth;
use crate::trainer::{self, BudgetPolicy, SampleSpec};

pub const DEFAULT_STEPS: usize = 2_000;
pub const DEFAULT_ETA: f64 = 0.05;
pub const DEFAULT_SEED_COUNT: usize = 32;
pub const DEFAULT_BATTERY_MAX_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    VerifyProp1,
    VerifyProp2,
    VerifyProp3,
    SimulateSft,
    FrameSweep,
    Allocate,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::VerifyProp1 => "verify-prop1",
            ExperimentKind::VerifyProp2 => "verify-prop2",
            ExperimentKind::VerifyProp3 => "verify-prop3",
            ExperimentKind::SimulateSft => "simulate-sft",
            ExperimentKind::FrameSweep => "frame-sweep",
            ExperimentKind::Allocate => "allocate",
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    kind: ExperimentKind,
    #[serde(default)]
    model: Option<PathBuf>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    jobs: Option<usize>,
    #[serde(default)]
    params: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prop1Params {
    pub theta: ParamVector,
    pub m: FrameBudget,
    /// Defaults to `m`.
    #[serde(default)]
    pub m_min: Option<FrameBudget>,
    /// Defaults to 32 log-spaced points below `η₀` (or below `2/β_vid`
    /// when the gradients do not conflict).
    #[serde(default)]
    pub eta_grid: Option<Vec<f64>>,
    /// Number of additional random conflicting configurations to check.
    #[serde(default)]
    pub battery: usize,
    #[serde(default = "default_battery_dim")]
    pub battery_max_dim: usize,
}

fn default_battery_dim() -> usize {
    DEFAULT_BATTERY_MAX_DIM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prop2Params {
    /// Explicit `ρ_sh`; requires `rho_tmp`.
    #[serde(default)]
    pub rho_sh: Option<f64>,
    #[serde(default)]
    pub rho_tmp: Option<f64>,
    /// Reference point for estimating `ρ_sh, ρ_tmp` from the model geometry.
    #[serde(default)]
    pub theta: Option<ParamVector>,
    /// Overrides the model's schedule; required without a model.
    #[serde(default)]
    pub alpha: Option<AlphaSchedule>,
    #[serde(default)]
    pub budgets: Option<BudgetSet>,
    /// Monte-Carlo draws per budget (geometry route only).
    #[serde(default)]
    pub mc_draws: Option<usize>,
    #[serde(default)]
    pub m_min: Option<FrameBudget>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub m: FrameBudget,
    pub alignment_term: f64,
    pub second_moment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prop3Params {
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Defaults to the model's image smoothness constant.
    #[serde(default)]
    pub beta_img: Option<f64>,
    pub m_min: FrameBudget,
    /// Explicit moment table; otherwise exact moments of the model at `theta`.
    #[serde(default)]
    pub moments: Option<Vec<MomentRow>>,
    #[serde(default)]
    pub theta: Option<ParamVector>,
}

fn default_eta() -> f64 {
    DEFAULT_ETA
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

fn default_seed_count() -> usize {
    DEFAULT_SEED_COUNT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftParams {
    pub theta0: ParamVector,
    pub policy: BudgetPolicy,
    /// Defaults to one sample at the smallest admissible budget.
    #[serde(default)]
    pub samples: Option<Vec<SampleSpec>>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepParams {
    pub theta0: ParamVector,
    #[serde(default)]
    pub samples: Option<Vec<SampleSpec>>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Defaults to every admissible budget.
    #[serde(default)]
    pub budgets: Option<Vec<FrameBudget>>,
    #[serde(default = "BudgetPolicy::hybrid")]
    pub hybrid_policy: BudgetPolicy,
    #[serde(default = "default_seed_count")]
    pub seed_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyConfig {
    RuleBased,
    Similarity {
        #[serde(default = "default_threshold")]
        threshold: f64,
    },
    Vlm(PredictorConfig),
}

fn default_threshold() -> f64 {
    allocator::DEFAULT_SIMILARITY_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocateParams {
    pub manifest: PathBuf,
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub budgets: Option<BudgetSet>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Experiment {
    VerifyProp1(Prop1Params),
    VerifyProp2(Prop2Params),
    VerifyProp3(Prop3Params),
    SimulateSft(SftParams),
    FrameSweep(SweepParams),
    Allocate(AllocateParams),
}

impl Experiment {
    pub fn kind(&self) -> ExperimentKind {
        match self {
            Experiment::VerifyProp1(_) => ExperimentKind::VerifyProp1,
            Experiment::VerifyProp2(_) => ExperimentKind::VerifyProp2,
            Experiment::VerifyProp3(_) => ExperimentKind::VerifyProp3,
            Experiment::SimulateSft(_) => ExperimentKind::SimulateSft,
            Experiment::FrameSweep(_) => ExperimentKind::FrameSweep,
            Experiment::Allocate(_) => ExperimentKind::Allocate,
        }
    }
}

/// Validated experiment configuration with defaults filled.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: Option<ConflictModel>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub jobs: usize,
    pub experiment: Experiment,
    /// Hex SHA-256 of the config bytes (plus any overrides).
    pub config_hash: String,
}

/// Command-line overrides; `None` keeps the config value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
}

fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Reads and validates a model document.
pub fn load_model(path: &Path) -> Result<ConflictModel> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::validation("model", format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value = parse_json(path, &text)?;
    serde_json::from_value(value).map_err(|e| Error::validation("model", e.to_string()))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    load_config_with(path, &Overrides::default())
}

pub fn load_config_with(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let bytes =
        fs::read(path).map_err(|e| Error::validation("config", format!("cannot read {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&bytes, path, base, overrides)
}

fn params<T: DeserializeOwned>(value: Option<serde_json::Value>) -> Result<T> {
    let value = value.unwrap_or_else(|| serde_json::json!({}));
    serde_json::from_value(value).map_err(|e| Error::validation("params", e.to_string()))
}

/// Parses config bytes; `origin` is used in error messages and `base` to
/// resolve relative paths.
pub fn parse_config(bytes: &[u8], origin: &Path, base: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        line: 0,
        column: 0,
        message: e.to_string(),
    })?;
    let raw: RawConfig = parse_json(origin, text)?;

    let mut hasher = Sha256::new();
    hasher.update(bytes);
    // Only the seed changes results; output location and thread count do not.
    if let Some(seed) = overrides.seed {
        hasher.update(format!("seed={seed}").as_bytes());
    }
    let config_hash = hex::encode(hasher.finalize());

    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let model = match &raw.model {
        Some(p) => Some(load_model(&resolve(p))?),
        None => None,
    };
    let need_model = |what: &str| -> Result<&ConflictModel> {
        model
            .as_ref()
            .ok_or_else(|| Error::validation("model", format!("{what} requires a model document")))
    };

    let experiment = match raw.kind {
        ExperimentKind::VerifyProp1 => {
            let mut p: Prop1Params = params(raw.params)?;
            let model = need_model("verify-prop1")?;
            check_theta("params.theta", &p.theta, model)?;
            model
                .budgets()
                .check(p.m)
                .map_err(|_| Error::validation("params.m", "not an admissible budget"))?;
            let m_min = *p.m_min.get_or_insert(p.m);
            if m_min.0 == 0 {
                return Err(Error::validation("params.m_min", "must be at least 1"));
            }
            match &p.eta_grid {
                Some(g) if g.is_empty() || g.iter().any(|e| !(e.is_finite() && *e > 0.0)) => {
                    return Err(Error::validation("params.eta_grid", "must be non-empty and positive"));
                }
                Some(_) => {}
                None => p.eta_grid = Some(default_prop1_grid(model, &p.theta, p.m)?),
            }
            if p.battery_max_dim == 0 {
                return Err(Error::validation("params.battery_max_dim", "must be at least 1"));
            }
            Experiment::VerifyProp1(p)
        }
        ExperimentKind::VerifyProp2 => {
            let p: Prop2Params = params(raw.params)?;
            match (p.rho_sh, p.rho_tmp, &p.theta) {
                (Some(_), Some(_), None) => {}
                (None, None, Some(theta)) => check_theta("params.theta", theta, need_model("the geometry route")?)?,
                _ => {
                    return Err(Error::validation(
                        "params",
                        "give either both rho_sh and rho_tmp, or theta (not both)",
                    ))
                }
            }
            if p.alpha.is_none() && model.is_none() {
                return Err(Error::validation("params.alpha", "required when no model is given"));
            }
            if p.mc_draws.is_some() && p.theta.is_none() {
                return Err(Error::validation("params.mc_draws", "Monte-Carlo estimates need theta"));
            }
            if let Some(n) = p.mc_draws {
                if n < 2 {
                    return Err(Error::validation("params.mc_draws", "must be at least 2"));
                }
            }
            Experiment::VerifyProp2(p)
        }
        ExperimentKind::VerifyProp3 => {
            let p: Prop3Params = params(raw.params)?;
            if !(p.eta.is_finite() && p.eta > 0.0) {
                return Err(Error::validation("params.eta", "must be positive"));
            }
            if p.beta_img.is_none() {
                need_model("default beta_img")?;
            }
            match (&p.moments, &p.theta) {
                (Some(rows), None) => {
                    if !rows.iter().any(|r| r.m == p.m_min) {
                        return Err(Error::validation("params.moments", "no row for m_min"));
                    }
                }
                (None, Some(theta)) => {
                    let model = need_model("model moments")?;
                    check_theta("params.theta", theta, model)?;
                    model
                        .budgets()
                        .check(p.m_min)
                        .map_err(|_| Error::validation("params.m_min", "not an admissible budget"))?;
                }
                _ => return Err(Error::validation("params", "give either moments or theta (not both)")),
            }
            Experiment::VerifyProp3(p)
        }
        ExperimentKind::SimulateSft => {
            let mut p: SftParams = params(raw.params)?;
            let model = need_model("simulate-sft")?;
            check_theta("params.theta0", &p.theta0, model)?;
            p.samples.get_or_insert_with(|| synth::minimal_corpus(model));
            Experiment::SimulateSft(p)
        }
        ExperimentKind::FrameSweep => {
            let mut p: SweepParams = params(raw.params)?;
            let model = need_model("frame-sweep")?;
            check_theta("params.theta0", &p.theta0, model)?;
            p.samples.get_or_insert_with(|| synth::minimal_corpus(model));
            let budgets = p.budgets.get_or_insert_with(|| model.budgets().iter().collect());
            if budgets.len() < 2 {
                return Err(Error::validation("params.budgets", "at least two budgets are required"));
            }
            if p.seed_count == 0 {
                return Err(Error::validation("params.seed_count", "at least one seed is required"));
            }
            Experiment::FrameSweep(p)
        }
        ExperimentKind::Allocate => {
            let mut p: AllocateParams = params(raw.params)?;
            p.manifest = resolve(&p.manifest);
            if !p.manifest.is_file() {
                return Err(Error::validation(
                    "params.manifest",
                    format!("{} does not exist", p.manifest.display()),
                ));
            }
            if let StrategyConfig::Similarity { threshold } = p.strategy {
                if !(threshold > 0.0 && threshold < 1.0) {
                    return Err(Error::validation("params.strategy.threshold", "must be in (0, 1)"));
                }
            }
            Experiment::Allocate(p)
        }
    };

    let output_dir = overrides
        .output_dir
        .clone()
        .or_else(|| raw.output_dir.as_deref().map(resolve))
        .unwrap_or_else(|| base.join("out"));
    let jobs = overrides.jobs.or(raw.jobs).unwrap_or(1);
    if jobs == 0 {
        return Err(Error::validation("jobs", "must be at least 1"));
    }
    Ok(ExperimentConfig {
        model,
        output_dir,
        seed: overrides.seed.or(raw.seed).unwrap_or(0),
        jobs,
        experiment,
        config_hash,
    })
}

fn check_theta(field: &str, theta: &ParamVector, model: &ConflictModel) -> Result<()> {
    if theta.dim() == model.dim() {
        Ok(())
    } else {
        Err(Error::validation(
            field,
            format!("has dimension {}, model has {}", theta.dim(), model.dim()),
        ))
    }
}

fn default_prop1_grid(model: &ConflictModel, theta: &ParamVector, m: FrameBudget) -> Result<Vec<f64>> {
    let g_img = model.image_grad(theta)?;
    let g_vid = model.video_grad_mean(theta, m)?;
    let beta_img = model.beta_img()?;
    let beta_vid = model.beta_vid()?;
    let bound = if beta_img > 0.0 && g_vid.norm() > 0.0 {
        analysis::conflict_step_bound(&g_img, &g_vid, beta_img)?
    } else {
        None
    };
    let upper = bound.unwrap_or(if beta_vid > 0.0 { 2.0 / beta_vid } else { 1.0 });
    Ok(analysis::default_eta_grid(upper))
}

/// Outcome of one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub tool_version: String,
    pub seed: u64,
    pub wall_clock_secs: f64,
    /// Fatal error (bound violation, divergence, …); `None` on success.
    pub error: Option<String>,
    pub sample_errors: Vec<SampleError>,
    pub outputs: Vec<PathBuf>,
    pub payload: serde_json::Value,
}

impl RunRecord {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub id: String,
    pub error: String,
}

/// Report file body: payload plus provenance, no timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEnvelope<T> {
    pub tool_version: String,
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub model_config_hash: Option<String>,
    pub seed: u64,
    pub report: T,
}

/// Writes via a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

struct Outputs<'a> {
    cfg: &'a ExperimentConfig,
    written: Vec<PathBuf>,
}

impl Outputs<'_> {
    fn json<T: Serialize>(&mut self, name: &str, report: &T) -> Result<serde_json::Value> {
        let env = ReportEnvelope {
            tool_version: crate::VERSION.to_string(),
            kind: self.cfg.experiment.kind(),
            config_hash: self.cfg.config_hash.clone(),
            model_config_hash: self.cfg.model.as_ref().map(ConflictModel::config_hash),
            seed: self.cfg.seed,
            report,
        };
        let mut bytes = serde_json::to_vec_pretty(&env)?;
        bytes.push(b'\n');
        self.raw(name, &bytes)?;
        Ok(serde_json::to_value(report)?)
    }

    fn raw(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.cfg.output_dir.join(name);
        write_atomic(&path, bytes)?;
        self.written.push(path);
        Ok(())
    }

    fn csv(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.raw(name, &buf)
    }
}

fn model_of(cfg: &ExperimentConfig) -> Result<&ConflictModel> {
    cfg.model.as_ref().ok_or_else(|| Error::validation("model", "missing"))
}

struct Outcome {
    payload: serde_json::Value,
    error: Option<String>,
    sample_errors: Vec<SampleError>,
}

impl Outcome {
    fn ok(payload: serde_json::Value) -> Self {
        Self {
            payload,
            error: None,
            sample_errors: Vec::new(),
        }
    }
}

#[derive(Serialize)]
struct Prop1Output<'a> {
    alignment: Option<&'a analysis::AlignmentReport>,
    /// The model's noise was dropped; the check uses population gradients.
    noise_ignored: bool,
    eta_grid: &'a [f64],
    battery: Option<&'a synth::Prop1BatteryOutcome>,
}

fn run_prop1(cfg: &ExperimentConfig, p: &Prop1Params, out: &mut Outputs<'_>) -> Result<Outcome> {
    let noisy = model_of(cfg)?;
    let noise_ignored = noisy.noise().base_std > 0.0;
    let model = &noisy.with_noise(NoiseModel::noiseless())?;
    let grid = p.eta_grid.as_deref().unwrap_or_default();
    let m_min = p.m_min.unwrap_or(p.m);
    let (report, mut error) = match analysis::verify_prop1(model, &p.theta, p.m, m_min, grid) {
        Ok(r) => (Some(r), None),
        Err(e @ (Error::PropositionViolation(_) | Error::ZeroVideoGradient)) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    let battery = (p.battery > 0).then(|| synth::prop1_battery(p.battery, cfg.seed, p.battery_max_dim));
    if let Some(b) = &battery {
        if !b.violations.is_empty() && error.is_none() {
            error = Some(format!(
                "{} battery violations; first: {}",
                b.violations.len(),
                b.violations[0]
            ));
        }
    }
    if let Some(r) = &report {
        out.csv("prop1_report.csv", |buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.serialize(r)?;
            w.flush()?;
            Ok(())
        })?;
    }
    let payload = out.json(
        "prop1_report.json",
        &Prop1Output {
            alignment: report.as_ref(),
            noise_ignored,
            eta_grid: grid,
            battery: battery.as_ref(),
        },
    )?;
    Ok(Outcome {
        payload,
        error,
        sample_errors: Vec::new(),
    })
}

fn run_prop2(cfg: &ExperimentConfig, p: &Prop2Params) -> Result<analysis::ThresholdReport> {
    let alpha = match (&p.alpha, &cfg.model) {
        (Some(a), _) => a.clone(),
        (None, Some(m)) => m.alpha_schedule().clone(),
        (None, None) => return Err(Error::validation("params.alpha", "missing")),
    };
    let budgets = match (&p.budgets, &cfg.model) {
        (Some(b), _) => b.clone(),
        (None, Some(m)) => m.budgets().clone(),
        (None, None) => BudgetSet::default(),
    };
    let (rho_sh, rho_tmp) = match (p.rho_sh, p.rho_tmp, &p.theta) {
        (Some(a), Some(b), _) => (a, b),
        (_, _, Some(theta)) => analysis::alignment_components(model_of(cfg)?, theta)?,
        _ => return Err(Error::validation("params", "missing rho values")),
    };
    let mut report = analysis::threshold_report(rho_sh, rho_tmp, &alpha, &budgets)?;
    if let (Some(n), Some(theta)) = (p.mc_draws, &p.theta) {
        let model = model_of(cfg)?;
        let m_min = p.m_min.unwrap_or_else(|| budgets.min());
        for (i, (m, entry)) in report.alignments.iter_mut().enumerate() {
            let mut rng = stream(cfg.seed, i as u64, 0);
            entry.monte_carlo = Some(analysis::expected_alignment_mc(model, theta, *m, m_min, n, &mut rng)?);
        }
    }
    Ok(report)
}

#[derive(Serialize)]
struct Prop2Row {
    m: FrameBudget,
    alpha: f64,
    analytic: f64,
    mc_estimate: Option<f64>,
    mc_standard_error: Option<f64>,
    conflicting: bool,
}

fn run_prop3(cfg: &ExperimentConfig, p: &Prop3Params) -> Result<analysis::BudgetChoice> {
    let beta = match p.beta_img {
        Some(b) => b,
        None => model_of(cfg)?.beta_img()?,
    };
    let moments: BTreeMap<FrameBudget, BudgetMoments> = match (&p.moments, &p.theta) {
        (Some(rows), _) => rows
            .iter()
            .map(|r| {
                (
                    r.m,
                    BudgetMoments {
                        alignment_term: r.alignment_term,
                        second_moment: r.second_moment,
                    },
                )
            })
            .collect(),
        (None, Some(theta)) => analysis::model_moments(model_of(cfg)?, theta, p.m_min)?,
        _ => return Err(Error::validation("params", "missing moments")),
    };
    analysis::optimal_budget(&moments, p.m_min, p.eta, beta)
}

fn run_allocate(p: &AllocateParams) -> Result<AllocationManifest> {
    let file = fs::File::open(&p.manifest)?;
    let samples: Vec<SampleRecord> = allocator::read_samples(BufReader::new(file), &p.manifest)?;
    let budgets = p.budgets.clone().unwrap_or_default();
    match &p.strategy {
        StrategyConfig::RuleBased => allocator::allocate_corpus(&samples, Strategy::RuleBased, &budgets),
        StrategyConfig::Similarity { threshold } => {
            allocator::allocate_corpus(&samples, Strategy::Similarity { threshold: *threshold }, &budgets)
        }
        StrategyConfig::Vlm(pc) => {
            let client = HttpPredictor::new(pc)?;
            let strategy = Strategy::Vlm {
                client: &client,
                retry: RetryPolicy::default(),
                concurrency: pc.concurrency,
            };
            allocator::allocate_corpus(&samples, strategy, &budgets)
        }
    }
}

fn dispatch(cfg: &ExperimentConfig, out: &mut Outputs<'_>) -> Result<Outcome> {
    match &cfg.experiment {
        Experiment::VerifyProp1(p) => run_prop1(cfg, p, out),
        Experiment::VerifyProp2(p) => {
            let report = run_prop2(cfg, p)?;
            out.csv("prop2_alignments.csv", |buf| {
                let mut w = csv::Writer::from_writer(buf);
                for (m, a) in &report.alignments {
                    w.serialize(Prop2Row {
                        m: *m,
                        alpha: a.alpha,
                        analytic: a.analytic,
                        mc_estimate: a.monte_carlo.map(|e: MonteCarloEstimate| e.estimate),
                        mc_standard_error: a.monte_carlo.map(|e| e.standard_error),
                        conflicting: report.m_star.is_some_and(|s| *m >= s),
                    })?;
                }
                w.flush()?;
                Ok(())
            })?;
            let error = (!report.sign_pattern_holds).then(|| "sign pattern does not match threshold".to_string());
            let payload = out.json("prop2_report.json", &report)?;
            Ok(Outcome {
                payload,
                error,
                sample_errors: Vec::new(),
            })
        }
        Experiment::VerifyProp3(p) => match run_prop3(cfg, p) {
            Ok(choice) => {
                out.csv("prop3_bounds.csv", |buf| {
                    let mut w = csv::Writer::from_writer(buf);
                    for b in &choice.bounds {
                        w.serialize(b)?;
                    }
                    w.flush()?;
                    Ok(())
                })?;
                Ok(Outcome::ok(out.json("prop3_report.json", &choice)?))
            }
            Err(e @ Error::PropositionViolation(_)) => Ok(Outcome {
                payload: serde_json::Value::Null,
                error: Some(e.to_string()),
                sample_errors: Vec::new(),
            }),
            Err(e) => Err(e),
        },
        Experiment::SimulateSft(p) => {
            let model = model_of(cfg)?;
            let samples = p.samples.as_deref().unwrap_or_default();
            match trainer::run_sft(model, &p.theta0, &p.policy, samples, p.steps, p.eta, cfg.seed) {
                Ok(t) => {
                    out.csv("trajectory.csv", |buf| t.write_csv(buf))?;
                    Ok(Outcome::ok(out.json("trajectory.json", &t)?))
                }
                Err(e @ Error::DivergenceDetected { .. }) => Ok(Outcome {
                    payload: serde_json::Value::Null,
                    error: Some(e.to_string()),
                    sample_errors: Vec::new(),
                }),
                Err(e) => Err(e),
            }
        }
        Experiment::FrameSweep(p) => {
            let model = model_of(cfg)?;
            let samples = p.samples.as_deref().unwrap_or_default();
            let budgets = p.budgets.as_deref().unwrap_or_default();
            let seeds: Vec<u64> = (0..p.seed_count as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
            match trainer::frame_sweep(
                model,
                &p.theta0,
                samples,
                p.steps,
                p.eta,
                budgets,
                &p.hybrid_policy,
                &seeds,
            ) {
                Ok(r) => {
                    out.csv("sweep.csv", |buf| r.write_csv(buf))?;
                    Ok(Outcome::ok(out.json("sweep.json", &r)?))
                }
                Err(e @ Error::DivergenceDetected { .. }) => Ok(Outcome {
                    payload: serde_json::Value::Null,
                    error: Some(e.to_string()),
                    sample_errors: Vec::new(),
                }),
                Err(e) => Err(e),
            }
        }
        Experiment::Allocate(p) => {
            let manifest = run_allocate(p)?;
            let mut bytes = Vec::new();
            manifest.write_jsonl(&mut bytes)?;
            out.raw("allocation.jsonl", &bytes)?;
            let sample_errors = manifest
                .entries
                .iter()
                .filter_map(|e| {
                    e.error.as_ref().map(|err| SampleError {
                        id: e.id.clone(),
                        error: err.clone(),
                    })
                })
                .collect();
            let payload = out.json("allocation_summary.json", &manifest.summary)?;
            Ok(Outcome {
                payload,
                error: None,
                sample_errors,
            })
        }
    }
}

/// Executes the experiment, writes its reports plus `run_record.json` into
/// the output directory, and returns the record. Verification failures and
/// divergence are reported in [`RunRecord::error`]; configuration and I/O
/// problems are returned as errors.
pub fn run(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let started = Instant::now();
    fs::create_dir_all(&cfg.output_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut out = Outputs {
        cfg,
        written: Vec::new(),
    };
    let outcome = pool.install(|| dispatch(cfg, &mut out))?;
    let mut outputs = out.written;
    let record_path = cfg.output_dir.join("run_record.json");
    outputs.push(record_path.clone());
    let record = RunRecord {
        kind: cfg.experiment.kind(),
        config_hash: cfg.config_hash.clone(),
        tool_version: crate::VERSION.to_string(),
        seed: cfg.seed,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        error: outcome.error,
        sample_errors: outcome.sample_errors,
        outputs,
        payload: outcome.payload,
    };
    let mut bytes = serde_json::to_vec_pretty(&record)?;
    bytes.push(b'\n');
    write_atomic(&record_path, &bytes)?;
    Ok(record)
}
