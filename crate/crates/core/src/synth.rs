//! Randomised and canned configurations for verification batteries,
//! demos and the acceptance suite.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::{DimensionScores, Level, SampleRecord};
use crate::analysis::{self, AlignmentReport};
use crate::budget::{BudgetSet, FrameBudget};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::objectives::{
    AlphaSchedule, ConflictModel, ConflictModelConfig, NoiseModel, ParamVector, QuadraticObjective,
};
use crate::stream::stream;
use crate::trainer::SampleSpec;

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn random_unit<R: Rng + ?Sized>(rng: &mut R, d: usize) -> ParamVector {
    loop {
        let v = gaussian_vec(rng, d, 1.0);
        let n = linalg::norm(&v);
        if n > 1e-6 {
            let mut u: Vec<f64> = v.iter().map(|x| x / n).collect();
            // Renormalise once more so the norm sits well inside the unit tolerance.
            let n2 = linalg::norm(&u);
            u.iter_mut().for_each(|x| *x /= n2);
            return ParamVector::new(u).expect("finite");
        }
    }
}

/// Random symmetric PSD matrix `GᵀG/k` with `G` of shape `k×d`; `k < d`
/// gives rank-deficient curvature.
pub fn random_psd<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Matrix {
    let k = rng.random_range(1..=d + 2);
    let g: Vec<Vec<f64>> = (0..k).map(|_| gaussian_vec(rng, d, 1.0)).collect();
    let mut rows = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in i..d {
            let v = g.iter().map(|r| r[i] * r[j]).sum::<f64>() / k as f64;
            rows[i][j] = v;
            rows[j][i] = v;
        }
    }
    Matrix::from_rows(rows).expect("square")
}

/// Random schedule that is non-decreasing over `budgets`.
pub fn random_alpha<R: Rng + ?Sized>(rng: &mut R, budgets: &BudgetSet) -> AlphaSchedule {
    match rng.random_range(0..3) {
        0 => AlphaSchedule::Linear {
            c: rng.random_range(0.0..0.1),
        },
        1 => AlphaSchedule::Logarithmic {
            c: rng.random_range(0.0..2.0),
            m0: f64::from(budgets.min().0),
        },
        _ => {
            let mut acc = 0.0;
            AlphaSchedule::Table(
                budgets
                    .iter()
                    .map(|m| {
                        // Occasional flat steps exercise ties.
                        if rng.random_bool(0.75) {
                            acc += rng.random_range(0.0..1.5);
                        }
                        (m.0, acc)
                    })
                    .collect(),
            )
        }
    }
}

pub fn random_model<R: Rng + ?Sized>(rng: &mut R, d: usize, noise: NoiseModel) -> ConflictModel {
    let budgets = BudgetSet::default();
    ConflictModel::new(ConflictModelConfig {
        dim: d,
        image: QuadraticObjective::new(
            ParamVector::new(gaussian_vec(rng, d, 1.0)).expect("finite"),
            random_psd(rng, d),
        )
        .expect("valid objective"),
        shared_target: ParamVector::new(gaussian_vec(rng, d, 1.0)).expect("finite"),
        shared_curvature: random_psd(rng, d),
        temporal_direction: random_unit(rng, d),
        alpha: random_alpha(rng, &budgets),
        noise,
        budgets,
    })
    .expect("generated model is valid")
}

/// A noise-free model, point and budget at which image and video gradients
/// conflict with cosine below −0.01.
#[derive(Debug, Clone)]
pub struct ConflictCase {
    pub model: ConflictModel,
    pub theta: ParamVector,
    pub m: FrameBudget,
}

pub fn conflicting_case<R: Rng + ?Sized>(rng: &mut R, max_dim: usize) -> ConflictCase {
    loop {
        let d = rng.random_range(1..=max_dim);
        let model = random_model(rng, d, NoiseModel::noiseless());
        let theta = ParamVector::new(gaussian_vec(rng, d, 2.0)).expect("finite");
        let budgets: Vec<FrameBudget> = model.budgets().iter().collect();
        let m = budgets[rng.random_range(0..budgets.len())];
        let g_img = model.image_grad(&theta).expect("dims match");
        let g_vid = model.video_grad_mean(&theta, m).expect("admissible");
        let (ni, nv) = (g_img.norm(), g_vid.norm());
        if ni < 1e-6 || nv < 1e-6 {
            continue;
        }
        if linalg::dot(g_img.as_slice(), g_vid.as_slice()) / (ni * nv) < -0.01 {
            return ConflictCase { model, theta, m };
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1BatteryOutcome {
    pub configs: usize,
    pub image_checks: usize,
    pub video_checks: usize,
    pub violations: Vec<String>,
}

/// Runs the one-step verifier on `count` random conflicting cases, with the
/// default step grid below `η₀` for each. Case `i` draws from `stream(seed, i, 0)`.
pub fn prop1_battery(count: usize, seed: u64, max_dim: usize) -> Prop1BatteryOutcome {
    let reports: Vec<std::result::Result<AlignmentReport, String>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i as u64, 0);
            let case = conflicting_case(&mut rng, max_dim);
            let g_img = case.model.image_grad(&case.theta).map_err(|e| e.to_string())?;
            let g_vid = case
                .model
                .video_grad_mean(&case.theta, case.m)
                .map_err(|e| e.to_string())?;
            let beta = case.model.beta_img().map_err(|e| e.to_string())?;
            let eta0 = analysis::conflict_step_bound(&g_img, &g_vid, beta)
                .map_err(|e| e.to_string())?
                .ok_or_else(|| format!("case {i}: expected conflict"))?;
            analysis::verify_prop1(
                &case.model,
                &case.theta,
                case.m,
                case.m,
                &analysis::default_eta_grid(eta0),
            )
            .map_err(|e| format!("case {i}: {e}"))
        })
        .collect();
    let mut out = Prop1BatteryOutcome {
        configs: count,
        image_checks: 0,
        video_checks: 0,
        violations: Vec::new(),
    };
    for r in reports {
        match r {
            Ok(rep) => {
                out.image_checks += rep.image_checks;
                out.video_checks += rep.video_checks;
            }
            Err(e) => out.violations.push(e),
        }
    }
    out
}

/// Canned conflict geometry in eight dimensions.
///
/// Image and shared video objectives share the origin as minimiser, the
/// temporal direction is `e₂`, `α(m) = 0.1·m`, and at `θ₀ = e₁ − e₂` the
/// expected alignment changes sign at `m* = 32` (`ρ_sh = 2`, `ρ_tmp = 1`).
pub fn trap_geometry() -> (ConflictModel, ParamVector) {
    let d = 8;
    let mut t = vec![0.0; d];
    t[1] = 1.0;
    let mut theta0 = vec![0.0; d];
    theta0[0] = 1.0;
    theta0[1] = -1.0;
    let model = ConflictModel::new(ConflictModelConfig {
        dim: d,
        image: QuadraticObjective::new(
            ParamVector::zeros(d),
            Matrix::diagonal(&[1.0, 1.0, 1.5, 0.5, 1.2, 0.8, 1.0, 2.0]),
        )
        .expect("valid"),
        shared_target: ParamVector::zeros(d),
        shared_curvature: Matrix::diagonal(&[1.0, 1.0, 0.5, 1.5, 0.8, 1.2, 0.6, 1.4]),
        temporal_direction: ParamVector::new(t).expect("finite"),
        alpha: AlphaSchedule::Linear { c: 0.1 },
        noise: NoiseModel {
            base_std: 0.5,
            redundancy_slope: 1.0,
        },
        budgets: BudgetSet::default(),
    })
    .expect("valid");
    (model, ParamVector::new(theta0).expect("finite"))
}

/// Single-sample corpus whose minimal sufficient budget is the smallest admissible one.
pub fn minimal_corpus(model: &ConflictModel) -> Vec<SampleSpec> {
    vec![SampleSpec::new(1.0, model.budgets().min())]
}

/// Representative assessment for each rule-based tier.
pub fn tier_scores(m: FrameBudget) -> Result<DimensionScores> {
    use Level::*;
    Ok(match m.0 {
        8 => DimensionScores::uniform(Low),
        16 => DimensionScores::from_levels([Low, Medium, Low, Low, Low]),
        32 => DimensionScores::from_levels([Low, Low, High, Medium, Low]),
        64 => DimensionScores::from_levels([Extreme, High, Low, Low, Low]),
        other => return Err(Error::InvalidBudget(other)),
    })
}

/// Corpus whose rule-based allocation reproduces the given per-budget counts,
/// samples ordered by budget then index.
pub fn corpus_with_counts(counts: &[(FrameBudget, usize)]) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::with_capacity(counts.iter().map(|c| c.1).sum());
    for &(m, n) in counts {
        let raw = tier_scores(m)?.to_raw();
        for i in 0..n {
            out.push(SampleRecord {
                id: format!("m{}-{i:06}", m.0),
                instruction: format!("synthetic instruction {i} for a {m}-frame tier"),
                assessment: Some(raw.clone()),
                frame_embeddings: None,
                m_min_truth: Some(m),
            });
        }
    }
    Ok(out)
}

/// Frame-count distribution reported for the 74,500-sample training corpus.
pub const REPORTED_ALLOCATION: [(FrameBudget, usize); 4] = [
    (FrameBudget(8), 57_604),
    (FrameBudget(16), 11_394),
    (FrameBudget(32), 5_365),
    (FrameBudget(64), 137),
];
