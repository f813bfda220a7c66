//! Multi-step video fine-tuning simulation on a [`ConflictModel`].
//!
//! Each step draws one sample by weight, picks its frame budget from the
//! policy, draws a stochastic video gradient and takes a plain gradient step
//! `θ ← θ − η·g_vid`. All randomness for step `k` of a run with seed `s` comes
//! from [`stream`]`(s, 0, k)`, so runs are reproducible bit for bit.

use std::collections::BTreeMap;
use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::analysis::alignment;
use crate::budget::FrameBudget;
use crate::error::{Error, Result};
use crate::linalg;
use crate::objectives::{ConflictModel, ParamVector};
use crate::stream::stream;

/// Any loss above this aborts the run.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

pub const MAX_STEPS: usize = 10_000_000;

const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Significance level of the one-sided sign test in [`frame_sweep`].
pub const SIGN_TEST_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub weight: f64,
    pub m_min: FrameBudget,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal_direction: Option<ParamVector>,
}

impl SampleSpec {
    pub fn new(weight: f64, m_min: FrameBudget) -> Self {
        Self {
            weight,
            m_min,
            temporal_direction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerSampleBudget {
    /// Each sample trains at its own minimal sufficient budget.
    MinimalSufficient,
    /// Budgets assigned externally (e.g. by an allocator), indexed like the samples.
    Assigned(Vec<FrameBudget>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub from_step: usize,
    pub m: FrameBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetPolicy {
    Fixed(FrameBudget),
    PerSample(PerSampleBudget),
    /// Piecewise-constant budget by step; the first entry must start at step 0.
    Schedule(Vec<ScheduleEntry>),
}

impl BudgetPolicy {
    pub fn hybrid() -> Self {
        BudgetPolicy::PerSample(PerSampleBudget::MinimalSufficient)
    }

    pub fn label(&self) -> String {
        match self {
            BudgetPolicy::Fixed(m) => format!("fixed-{m}"),
            BudgetPolicy::PerSample(PerSampleBudget::MinimalSufficient) => "hybrid".into(),
            BudgetPolicy::PerSample(PerSampleBudget::Assigned(_)) => "assigned".into(),
            BudgetPolicy::Schedule(_) => "schedule".into(),
        }
    }

    fn validate(&self, model: &ConflictModel, samples: &[SampleSpec]) -> Result<()> {
        match self {
            BudgetPolicy::Fixed(m) => {
                model.budgets().check(*m)?;
            }
            BudgetPolicy::PerSample(PerSampleBudget::MinimalSufficient) => {}
            BudgetPolicy::PerSample(PerSampleBudget::Assigned(v)) => {
                if v.len() != samples.len() {
                    return Err(Error::InvalidParameter(format!(
                        "{} assigned budgets for {} samples",
                        v.len(),
                        samples.len()
                    )));
                }
                for m in v {
                    model.budgets().check(*m)?;
                }
            }
            BudgetPolicy::Schedule(entries) => {
                if entries.first().map(|e| e.from_step) != Some(0) {
                    return Err(Error::InvalidParameter("schedule must start at step 0".into()));
                }
                if entries.windows(2).any(|w| w[0].from_step >= w[1].from_step) {
                    return Err(Error::InvalidParameter(
                        "schedule steps must be strictly increasing".into(),
                    ));
                }
                for e in entries {
                    model.budgets().check(e.m)?;
                }
            }
        }
        Ok(())
    }

    fn budget(&self, step: usize, index: usize, sample: &SampleSpec) -> FrameBudget {
        match self {
            BudgetPolicy::Fixed(m) => *m,
            BudgetPolicy::PerSample(PerSampleBudget::MinimalSufficient) => sample.m_min,
            BudgetPolicy::PerSample(PerSampleBudget::Assigned(v)) => v[index],
            BudgetPolicy::Schedule(entries) => {
                let pos = entries.partition_point(|e| e.from_step <= step);
                entries[pos - 1].m
            }
        }
    }
}

/// One row of a [`Trajectory`]: the step's budget and gradient, and the
/// losses after the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub eta: f64,
    pub m: FrameBudget,
    pub sample: usize,
    pub image_loss: f64,
    pub video_loss: f64,
    pub alignment: f64,
    pub param_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub config_hash: String,
    pub seed: u64,
    pub policy: String,
    pub initial_image_loss: f64,
    pub steps: Vec<StepRecord>,
    pub final_theta: ParamVector,
}

/// Column order of [`Trajectory::write_csv`].
pub const TRAJECTORY_COLUMNS: [&str; 8] = [
    "step",
    "eta",
    "m",
    "sample",
    "image_loss",
    "video_loss",
    "alignment",
    "param_norm",
];

impl Trajectory {
    pub fn final_step(&self) -> &StepRecord {
        self.steps.last().expect("trajectories have at least one step")
    }

    pub fn mean_alignment(&self) -> f64 {
        self.steps.iter().map(|s| s.alignment).sum::<f64>() / self.steps.len() as f64
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        w.write_record(TRAJECTORY_COLUMNS)?;
        for s in &self.steps {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn validate_samples(model: &ConflictModel, samples: &[SampleSpec]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("at least one sample is required".into()));
    }
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        if !(s.weight > 0.0 && s.weight <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "sample {i} weight {} outside (0, 1]",
                s.weight
            )));
        }
        model.budgets().check(s.m_min)?;
        if let Some(t) = &s.temporal_direction {
            // Reuses the model's dimension and unit-norm checks.
            model.video_minimizer_along(s.m_min, Some(t))?;
        }
        total += s.weight;
    }
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::InvalidParameter(format!(
            "sample weights sum to {total}, expected 1"
        )));
    }
    Ok(())
}

pub fn run_sft(
    model: &ConflictModel,
    theta0: &ParamVector,
    policy: &BudgetPolicy,
    samples: &[SampleSpec],
    steps: usize,
    eta: f64,
    seed: u64,
) -> Result<Trajectory> {
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::InvalidParameter(format!("eta must be positive, got {eta}")));
    }
    if steps == 0 || steps > MAX_STEPS {
        return Err(Error::InvalidParameter(format!("steps must be in 1..={MAX_STEPS}")));
    }
    validate_samples(model, samples)?;
    policy.validate(model, samples)?;
    let picker =
        WeightedIndex::new(samples.iter().map(|s| s.weight)).map_err(|e| Error::InvalidParameter(e.to_string()))?;

    let img_target = model.image().target().as_slice().to_vec();
    let mut theta = theta0.clone();
    let initial_image_loss = model.image_loss(&theta)?;
    let mut records = Vec::with_capacity(steps);

    for k in 0..steps {
        let mut rng = stream(seed, 0, k as u64);
        let idx = picker.sample(&mut rng);
        let sample = &samples[idx];
        let m = policy.budget(k, idx, sample);
        let dir = sample.temporal_direction.as_ref();

        let g_img = model.image_grad(&theta)?;
        let g_vid = model.video_grad_along(&theta, m, sample.m_min, dir, &mut rng)?;
        let align = alignment(&g_img, &g_vid)?;

        let next: Vec<f64> = theta
            .as_slice()
            .iter()
            .zip(g_vid.as_slice())
            .map(|(t, g)| t - eta * g)
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::DivergenceDetected {
                step: k,
                loss: f64::INFINITY,
            });
        }
        theta = ParamVector::from_unchecked(next);

        let image_loss = model.image_loss(&theta)?;
        let video_loss = model.video_loss_along(&theta, m, dir)?;
        for loss in [image_loss, video_loss] {
            if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
                return Err(Error::DivergenceDetected { step: k, loss });
            }
        }
        let offset: Vec<f64> = theta.as_slice().iter().zip(&img_target).map(|(a, b)| a - b).collect();
        records.push(StepRecord {
            step: k,
            eta,
            m,
            sample: idx,
            image_loss,
            video_loss,
            alignment: align,
            param_norm: linalg::norm(&offset),
        });
    }

    Ok(Trajectory {
        config_hash: model.config_hash(),
        seed,
        policy: policy.label(),
        initial_image_loss,
        steps: records,
        final_theta: theta,
    })
}

/// Paired one-sided sign test: does the hybrid policy end with lower image
/// loss than the comparison policy on the same seeds?
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub against: String,
    pub wins: u64,
    pub losses: u64,
    pub ties: u64,
    pub p_value: f64,
    pub significant: bool,
}

impl SignTest {
    pub fn paired(against: String, hybrid: &[f64], other: &[f64]) -> Self {
        let (mut wins, mut losses, mut ties) = (0u64, 0u64, 0u64);
        for (h, o) in hybrid.iter().zip(other) {
            match h.partial_cmp(o) {
                Some(std::cmp::Ordering::Less) => wins += 1,
                Some(std::cmp::Ordering::Greater) => losses += 1,
                _ => ties += 1,
            }
        }
        let n = wins + losses;
        let p_value = if n == 0 || wins == 0 {
            1.0
        } else {
            // P(X ≥ wins) under X ~ Bin(n, ½)
            Binomial::new(0.5, n).expect("valid binomial").sf(wins - 1)
        };
        Self {
            against,
            wins,
            losses,
            ties,
            p_value,
            significant: p_value <= SIGN_TEST_ALPHA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: String,
    pub fixed_budget: Option<FrameBudget>,
    pub mean_final_image_loss: f64,
    /// Final parameters evaluated on each budget's own video objective.
    pub mean_final_video_loss: BTreeMap<FrameBudget, f64>,
    pub mean_alignment: f64,
    pub final_image_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub eta: f64,
    pub rows: Vec<SweepRow>,
    /// Mean final image loss is non-decreasing across the fixed budgets.
    pub image_loss_non_decreasing: bool,
    /// Hybrid mean final image loss is at most that of the largest fixed budget.
    pub hybrid_not_worse: bool,
    pub sign_test: SignTest,
}

impl SweepReport {
    pub fn row(&self, policy: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.policy == policy)
    }

    /// Columns: `policy, fixed_budget, mean_final_image_loss, mean_alignment`,
    /// then `video_loss_at_<m>` for every admissible budget in ascending order.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let budgets: Vec<FrameBudget> = self
            .rows
            .first()
            .map(|r| r.mean_final_video_loss.keys().copied().collect())
            .unwrap_or_default();
        let mut header = vec![
            "policy".to_string(),
            "fixed_budget".into(),
            "mean_final_image_loss".into(),
            "mean_alignment".into(),
        ];
        header.extend(budgets.iter().map(|m| format!("video_loss_at_{m}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.policy.clone(),
                r.fixed_budget.map(|m| m.to_string()).unwrap_or_default(),
                r.mean_final_image_loss.to_string(),
                r.mean_alignment.to_string(),
            ];
            rec.extend(budgets.iter().map(|m| r.mean_final_video_loss[m].to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs every fixed budget in `budgets_to_test` plus `hybrid_policy` over all
/// seeds and compares their end states.
///
/// Trials run on the current rayon pool; results are merged by index so the
/// report does not depend on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn frame_sweep(
    model: &ConflictModel,
    theta0: &ParamVector,
    samples: &[SampleSpec],
    steps: usize,
    eta: f64,
    budgets_to_test: &[FrameBudget],
    hybrid_policy: &BudgetPolicy,
    seeds: &[u64],
) -> Result<SweepReport> {
    if budgets_to_test.len() < 2 {
        return Err(Error::InvalidParameter("frame sweep needs at least two budgets".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("frame sweep needs at least one seed".into()));
    }
    let mut budgets = budgets_to_test.to_vec();
    budgets.sort();
    budgets.dedup();
    for m in &budgets {
        model.budgets().check(*m)?;
    }
    let mut policies: Vec<BudgetPolicy> = budgets.iter().map(|m| BudgetPolicy::Fixed(*m)).collect();
    policies.push(hybrid_policy.clone());

    let trials: Vec<(usize, u64)> = (0..policies.len())
        .flat_map(|p| seeds.iter().map(move |s| (p, *s)))
        .collect();
    let results: Vec<Trajectory> = trials
        .par_iter()
        .map(|&(p, seed)| run_sft(model, theta0, &policies[p], samples, steps, eta, seed))
        .collect::<Result<_>>()?;

    let n = seeds.len() as f64;
    let rows: Vec<SweepRow> = policies
        .iter()
        .enumerate()
        .map(|(p, policy)| {
            let runs = &results[p * seeds.len()..(p + 1) * seeds.len()];
            let final_image_losses: Vec<f64> = runs.iter().map(|t| t.final_step().image_loss).collect();
            let mut mean_final_video_loss = BTreeMap::new();
            for m in model.budgets().iter() {
                let mut total = 0.0;
                for t in runs {
                    total += model.video_loss_deterministic(&t.final_theta, m)?;
                }
                mean_final_video_loss.insert(m, total / n);
            }
            Ok(SweepRow {
                policy: policy.label(),
                fixed_budget: match policy {
                    BudgetPolicy::Fixed(m) => Some(*m),
                    _ => None,
                },
                mean_final_image_loss: final_image_losses.iter().sum::<f64>() / n,
                mean_final_video_loss,
                mean_alignment: runs.iter().map(Trajectory::mean_alignment).sum::<f64>() / n,
                final_image_losses,
            })
        })
        .collect::<Result<_>>()?;

    let fixed = &rows[..budgets.len()];
    let image_loss_non_decreasing = fixed
        .windows(2)
        .all(|w| w[0].mean_final_image_loss <= w[1].mean_final_image_loss);
    let largest = &fixed[fixed.len() - 1];
    let hybrid = &rows[budgets.len()];
    let sign_test = SignTest::paired(
        largest.policy.clone(),
        &hybrid.final_image_losses,
        &largest.final_image_losses,
    );

    Ok(SweepReport {
        config_hash: model.config_hash(),
        seeds: seeds.to_vec(),
        steps,
        eta,
        image_loss_non_decreasing,
        hybrid_not_worse: hybrid.mean_final_image_loss <= largest.mean_final_image_loss,
        sign_test,
        rows,
    })
}
