//! Alignment metric and verifiers for the three conflict results:
//! one-step image degradation under negative alignment, the discrete
//! temporal-budget threshold, and optimality of the minimal sufficient budget.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::budget::{BudgetSet, FrameBudget};
use crate::error::{Error, Result, Violation};
use crate::linalg;
use crate::objectives::{AlphaSchedule, ConflictModel, ParamVector};

/// Absolute slack on loss comparisons inside the verifiers.
pub const LOSS_TOL: f64 = 1e-10;

/// Expected alignments within this distance of zero count as non-positive.
pub const ZERO_TOL: f64 = 1e-12;

/// Number of points in the default step-size grid.
pub const DEFAULT_GRID_POINTS: usize = 32;

pub fn alignment(g_a: &ParamVector, g_b: &ParamVector) -> Result<f64> {
    if g_a.dim() != g_b.dim() {
        return Err(Error::DimensionMismatch {
            expected: g_a.dim(),
            found: g_b.dim(),
        });
    }
    Ok(linalg::dot(g_a.as_slice(), g_b.as_slice()))
}

/// Step-size bound `η₀ = −2⟨g_img, g_vid⟩ / (β_img‖g_vid‖²)` below which a video
/// step is guaranteed to increase the image loss. `None` when the gradients
/// do not conflict.
pub fn conflict_step_bound(g_img: &ParamVector, g_vid: &ParamVector, beta_img: f64) -> Result<Option<f64>> {
    if !(beta_img.is_finite() && beta_img > 0.0) {
        return Err(Error::InvalidBeta(beta_img));
    }
    let a = alignment(g_img, g_vid)?;
    let n2 = linalg::norm_sq(g_vid.as_slice());
    if n2 == 0.0 {
        return Err(Error::ZeroVideoGradient);
    }
    Ok((a < 0.0).then(|| -2.0 * a / (beta_img * n2)))
}

/// `n` log-spaced step sizes in `(upper/1000, 0.999·upper)`.
pub fn default_eta_grid(upper: f64) -> Vec<f64> {
    log_grid(upper / 1000.0, 0.999 * upper, DEFAULT_GRID_POINTS)
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    let (ll, lh) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (ll + (lh - ll) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub m: FrameBudget,
    pub alignment_value: f64,
    pub eta_bound: Option<f64>,
    pub beta_img: f64,
    pub beta_vid: f64,
    pub img_loss_before: f64,
    pub img_loss_after: f64,
    pub vid_loss_before: f64,
    pub vid_loss_after: f64,
    pub eta_tested: f64,
    pub conflict_detected: bool,
    /// Step sizes at which the image-increase bound was checked.
    pub image_checks: usize,
    /// Step sizes at which the video descent bound was checked.
    pub video_checks: usize,
}

fn step(theta: &ParamVector, g: &ParamVector, eta: f64) -> ParamVector {
    ParamVector::from_unchecked(
        theta
            .as_slice()
            .iter()
            .zip(g.as_slice())
            .map(|(t, g)| t - eta * g)
            .collect(),
    )
}

/// Checks one noise-free video step at `θ` against the image-increase bound
/// and the video descent lemma, evaluating losses directly.
///
/// Every `η` in `eta_grid` below `η₀` must strictly increase the image loss,
/// and every `η` below `2/β_vid` (from `eta_grid` plus a default grid over
/// that interval) must strictly decrease the video loss at `m`.
pub fn verify_prop1(
    model: &ConflictModel,
    theta: &ParamVector,
    m: FrameBudget,
    m_min: FrameBudget,
    eta_grid: &[f64],
) -> Result<AlignmentReport> {
    let std = model.noise_std(m, m_min);
    if model.noise().base_std != 0.0 || std != 0.0 {
        return Err(Error::NoisyModel(model.noise().base_std));
    }
    if eta_grid.is_empty() || eta_grid.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(Error::InvalidParameter(
            "eta grid must be non-empty and positive".into(),
        ));
    }
    let g_img = model.image_grad(theta)?;
    let g_vid = model.video_grad_mean(theta, m)?;
    if linalg::norm_sq(g_vid.as_slice()) == 0.0 {
        return Err(Error::ZeroVideoGradient);
    }
    let beta_img = model.beta_img()?;
    let beta_vid = model.beta_vid()?;
    let align = alignment(&g_img, &g_vid)?;
    let eta_bound = conflict_step_bound(&g_img, &g_vid, beta_img)?;
    let descent_limit = 2.0 / beta_vid;

    let img_before = model.image_loss(theta)?;
    let vid_before = model.video_loss_deterministic(theta, m)?;

    let mut image_checks = 0;
    let mut largest_image_eta: Option<f64> = None;
    if let Some(eta0) = eta_bound {
        for &eta in eta_grid.iter().filter(|&&e| e < eta0) {
            let after = model.image_loss(&step(theta, &g_vid, eta))?;
            if after <= img_before - LOSS_TOL {
                return Err(Error::PropositionViolation(Box::new(Violation {
                    check: "image loss increase".into(),
                    eta,
                    loss_before: img_before,
                    loss_after: after,
                })));
            }
            image_checks += 1;
            largest_image_eta = Some(largest_image_eta.map_or(eta, |e: f64| e.max(eta)));
        }
    }

    let mut video_checks = 0;
    let descent_grid = default_eta_grid(descent_limit);
    for &eta in eta_grid
        .iter()
        .filter(|&&e| e < descent_limit)
        .chain(descent_grid.iter())
    {
        let after = model.video_loss_deterministic(&step(theta, &g_vid, eta), m)?;
        if after >= vid_before + LOSS_TOL {
            return Err(Error::PropositionViolation(Box::new(Violation {
                check: "video loss descent".into(),
                eta,
                loss_before: vid_before,
                loss_after: after,
            })));
        }
        video_checks += 1;
    }

    let eta_tested = largest_image_eta.unwrap_or_else(|| eta_grid.iter().copied().fold(f64::MIN, f64::max));
    let theta_after = step(theta, &g_vid, eta_tested);
    Ok(AlignmentReport {
        m,
        alignment_value: align,
        eta_bound,
        beta_img,
        beta_vid,
        img_loss_before: img_before,
        img_loss_after: model.image_loss(&theta_after)?,
        vid_loss_before: vid_before,
        vid_loss_after: model.video_loss_deterministic(&theta_after, m)?,
        eta_tested,
        conflict_detected: align < 0.0,
        image_checks,
        video_checks,
    })
}

/// `(ρ_sh, ρ_tmp) = (⟨g_img, g_sh⟩, −⟨g_img, g_tmp⟩)` at `θ`.
pub fn alignment_components(model: &ConflictModel, theta: &ParamVector) -> Result<(f64, f64)> {
    let g_img = model.image_grad(theta)?;
    let rho_sh = alignment(&g_img, &model.shared_grad(theta)?)?;
    let rho_tmp = -alignment(&g_img, &model.temporal_grad())?;
    Ok((rho_sh, rho_tmp))
}

/// `E⟨g_img, g_vid⟩ = ρ_sh − α(m)·ρ_tmp`; the noise term has zero mean.
pub fn expected_alignment_analytic(model: &ConflictModel, theta: &ParamVector, m: FrameBudget) -> Result<f64> {
    let a = model.alpha(m)?;
    let (rho_sh, rho_tmp) = alignment_components(model, theta)?;
    Ok(rho_sh - a * rho_tmp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub estimate: f64,
    pub standard_error: f64,
    pub n_draws: usize,
}

/// Sample mean and standard error of `⟨g_img, g_vid⟩` over independent draws.
pub fn expected_alignment_mc<R: Rng + ?Sized>(
    model: &ConflictModel,
    theta: &ParamVector,
    m: FrameBudget,
    m_min: FrameBudget,
    n_draws: usize,
    rng: &mut R,
) -> Result<MonteCarloEstimate> {
    if n_draws < 2 {
        return Err(Error::InvalidDrawCount(n_draws));
    }
    let g_img = model.image_grad(theta)?;
    let mut samples = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let g = model.video_grad(theta, m, m_min, rng)?;
        samples.push(alignment(&g_img, &g)?);
    }
    let n = n_draws as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(MonteCarloEstimate {
        estimate: mean,
        standard_error: (var / n).sqrt(),
        n_draws,
    })
}

/// Smallest admissible `m` with `α(m)·ρ_tmp ≥ ρ_sh`, i.e. the first budget at
/// which the expected alignment is non-positive. `None` if no budget qualifies.
pub fn find_threshold(
    rho_sh: f64,
    rho_tmp: f64,
    alpha: &AlphaSchedule,
    budgets: &BudgetSet,
) -> Result<Option<FrameBudget>> {
    if !(rho_sh.is_finite() && rho_sh > 0.0) {
        return Err(Error::AssumptionViolation(format!(
            "shared alignment must be positive, got {rho_sh}"
        )));
    }
    if !(rho_tmp.is_finite() && rho_tmp >= 0.0) {
        return Err(Error::AssumptionViolation(format!(
            "temporal alignment must be non-positive (rho_tmp >= 0), got rho_tmp = {rho_tmp}"
        )));
    }
    alpha.validate()?;
    if !alpha.is_non_decreasing_on(budgets)? {
        return Err(Error::AssumptionViolation(
            "alpha must be non-decreasing over the admissible budgets".into(),
        ));
    }
    for m in budgets.iter() {
        if rho_sh - alpha.value(m)? * rho_tmp <= ZERO_TOL {
            return Ok(Some(m));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetAlignment {
    pub alpha: f64,
    pub analytic: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub monte_carlo: Option<MonteCarloEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub rho_sh: f64,
    pub rho_tmp: f64,
    pub alignments: BTreeMap<FrameBudget, BudgetAlignment>,
    pub m_star: Option<FrameBudget>,
    /// Analytic alignment is positive below `m_star` and non-positive from it on.
    pub sign_pattern_holds: bool,
}

/// Threshold plus the analytic expected alignment at every admissible budget.
pub fn threshold_report(
    rho_sh: f64,
    rho_tmp: f64,
    alpha: &AlphaSchedule,
    budgets: &BudgetSet,
) -> Result<ThresholdReport> {
    let m_star = find_threshold(rho_sh, rho_tmp, alpha, budgets)?;
    let mut alignments = BTreeMap::new();
    let mut sign_pattern_holds = true;
    for m in budgets.iter() {
        let a = alpha.value(m)?;
        let analytic = rho_sh - a * rho_tmp;
        let conflicting = analytic <= ZERO_TOL;
        sign_pattern_holds &= conflicting == m_star.is_some_and(|s| m >= s);
        alignments.insert(
            m,
            BudgetAlignment {
                alpha: a,
                analytic,
                monte_carlo: None,
            },
        );
    }
    Ok(ThresholdReport {
        rho_sh,
        rho_tmp,
        alignments,
        m_star,
        sign_pattern_holds,
    })
}

/// Smoothness upper bound on the one-step image-loss change at budget `m`:
/// `−η·E⟨g_img, g_vid⟩ + (β_img/2)·η²·E‖g_vid‖²`.
pub fn prop3_bound(eta: f64, beta_img: f64, alignment_term: f64, second_moment: f64) -> Result<f64> {
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::InvalidParameter(format!("eta must be positive, got {eta}")));
    }
    if !(beta_img.is_finite() && beta_img > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "beta_img must be positive, got {beta_img}"
        )));
    }
    if !(second_moment.is_finite() && second_moment >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "second moment must be non-negative, got {second_moment}"
        )));
    }
    Ok(-eta * alignment_term + 0.5 * beta_img * eta * eta * second_moment)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetMoments {
    pub alignment_term: f64,
    pub second_moment: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetBound {
    pub m: FrameBudget,
    pub alignment_term: f64,
    pub second_moment_term: f64,
    pub bound_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentCondition {
    /// Alignment must not grow past the minimal budget.
    AlignmentNonIncreasing,
    /// The gradient second moment must not shrink past the minimal budget.
    SecondMomentNonDecreasing,
}

/// The moment hypothesis fails between two consecutive budgets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentConditionViolation {
    pub condition: MomentCondition,
    pub lower: FrameBudget,
    pub upper: FrameBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetChoice {
    pub m: FrameBudget,
    pub m_min: FrameBudget,
    pub eta: f64,
    pub beta_img: f64,
    pub bounds: Vec<BudgetBound>,
    pub moment_violation: Option<MomentConditionViolation>,
}

/// Minimises [`prop3_bound`] over budgets `m ≥ m_min`, smallest budget on ties.
///
/// When the moment conditions hold the minimiser must be `m_min`; anything
/// else is reported as a [`Error::PropositionViolation`]. When they fail the
/// argmin is still returned with the offending pair recorded.
pub fn optimal_budget(
    per_budget_moments: &BTreeMap<FrameBudget, BudgetMoments>,
    m_min: FrameBudget,
    eta: f64,
    beta_img: f64,
) -> Result<BudgetChoice> {
    if !per_budget_moments.contains_key(&m_min) {
        return Err(Error::InvalidBudget(m_min.0));
    }
    let candidates: Vec<(FrameBudget, BudgetMoments)> =
        per_budget_moments.range(m_min..).map(|(m, mo)| (*m, *mo)).collect();

    let moment_violation = candidates.windows(2).find_map(|w| {
        let ((lo, a), (hi, b)) = (w[0], w[1]);
        if b.alignment_term > a.alignment_term {
            Some(MomentConditionViolation {
                condition: MomentCondition::AlignmentNonIncreasing,
                lower: lo,
                upper: hi,
            })
        } else if b.second_moment < a.second_moment {
            Some(MomentConditionViolation {
                condition: MomentCondition::SecondMomentNonDecreasing,
                lower: lo,
                upper: hi,
            })
        } else {
            None
        }
    });

    let bounds = candidates
        .iter()
        .map(|(m, mo)| {
            Ok(BudgetBound {
                m: *m,
                alignment_term: mo.alignment_term,
                second_moment_term: mo.second_moment,
                bound_value: prop3_bound(eta, beta_img, mo.alignment_term, mo.second_moment)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let best = bounds.iter().fold(
        &bounds[0],
        |best, b| if b.bound_value < best.bound_value { b } else { best },
    );

    if moment_violation.is_none() && best.m != m_min {
        return Err(Error::PropositionViolation(Box::new(Violation {
            check: format!("minimal budget {m_min} optimal, argmin was {}", best.m),
            eta,
            loss_before: bounds[0].bound_value,
            loss_after: best.bound_value,
        })));
    }

    Ok(BudgetChoice {
        m: best.m,
        m_min,
        eta,
        beta_img,
        bounds,
        moment_violation,
    })
}

/// Exact per-budget moments of the model's video gradient at `θ` for a sample
/// with minimal budget `m_min`: `E⟨g_img, g⟩` and `E‖g‖² = ‖ḡ‖² + d·σ(m)²`.
pub fn model_moments(
    model: &ConflictModel,
    theta: &ParamVector,
    m_min: FrameBudget,
) -> Result<BTreeMap<FrameBudget, BudgetMoments>> {
    let g_img = model.image_grad(theta)?;
    let d = model.dim() as f64;
    model
        .budgets()
        .iter()
        .filter(|m| *m >= m_min)
        .map(|m| {
            let mean = model.video_grad_mean(theta, m)?;
            let std = model.noise_std(m, m_min);
            Ok((
                m,
                BudgetMoments {
                    alignment_term: alignment(&g_img, &mean)?,
                    second_moment: linalg::norm_sq(mean.as_slice()) + d * std * std,
                },
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::objectives::{ConflictModelConfig, NoiseModel, QuadraticObjective};
    use crate::stream::stream;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn zero_alpha() -> AlphaSchedule {
        AlphaSchedule::Table([8, 16, 32, 64].into_iter().map(|m| (m, 0.0)).collect())
    }

    fn model(shared_target: [f64; 2], t: [f64; 2], alpha: AlphaSchedule, noise: NoiseModel) -> ConflictModel {
        ConflictModel::new(ConflictModelConfig {
            dim: 2,
            image: QuadraticObjective::new(pv(&[0.0, 0.0]), Matrix::identity(2)).unwrap(),
            shared_target: pv(&shared_target),
            shared_curvature: Matrix::identity(2),
            temporal_direction: pv(&t),
            alpha,
            noise,
            budgets: BudgetSet::default(),
        })
        .unwrap()
    }

    #[test]
    fn alignment_examples() {
        assert_eq!(alignment(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(alignment(&pv(&[2.0, 0.0]), &pv(&[2.0, 0.0])).unwrap(), 4.0);
        assert_eq!(alignment(&pv(&[1.0, 2.0]), &pv(&[3.0, -1.0])).unwrap(), 1.0);
        assert!(alignment(&pv(&[1.0]), &pv(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn conflict_step_bound_examples() {
        let b = conflict_step_bound(&pv(&[1.0, 0.0]), &pv(&[-1.0, 0.0]), 1.0).unwrap();
        assert_eq!(b, Some(2.0));
        assert_eq!(
            conflict_step_bound(&pv(&[1.0, 0.0]), &pv(&[1.0, 0.0]), 1.0).unwrap(),
            None
        );
        let b = conflict_step_bound(&pv(&[1.0, 0.0]), &pv(&[-1.0, 0.5]), 1.0)
            .unwrap()
            .unwrap();
        assert!((b - 1.6).abs() < 1e-15);
        assert!(matches!(
            conflict_step_bound(&pv(&[1.0, 0.0]), &pv(&[0.0, 0.0]), 1.0),
            Err(Error::ZeroVideoGradient)
        ));
        assert!(matches!(
            conflict_step_bound(&pv(&[1.0, 0.0]), &pv(&[1.0, 0.0]), 0.0),
            Err(Error::InvalidBeta(_))
        ));
    }

    #[test]
    fn verify_prop1_worked_example() {
        let m = model([2.0, 0.0], [0.0, 1.0], zero_alpha(), NoiseModel::noiseless());
        let theta = pv(&[1.0, 0.0]);
        let r = verify_prop1(&m, &theta, FrameBudget(8), FrameBudget(8), &[0.5]).unwrap();
        assert_eq!(r.alignment_value, -1.0);
        assert_eq!(r.eta_bound, Some(2.0));
        assert!(r.conflict_detected);
        assert_eq!(r.eta_tested, 0.5);
        assert_eq!((r.img_loss_before, r.img_loss_after), (0.5, 1.125));
        assert_eq!((r.vid_loss_before, r.vid_loss_after), (0.5, 0.125));

        let r = verify_prop1(&m, &theta, FrameBudget(8), FrameBudget(8), &[1.0]).unwrap();
        assert_eq!(r.vid_loss_after, 0.0);
        assert_eq!(r.img_loss_after, 2.0);

        let r = verify_prop1(&m, &theta, FrameBudget(8), FrameBudget(8), &default_eta_grid(2.0)).unwrap();
        assert_eq!(r.image_checks, 32);
    }

    #[test]
    fn verify_prop1_degenerate_and_noisy() {
        let m = model([0.0, 0.0], [0.0, 1.0], zero_alpha(), NoiseModel::noiseless());
        assert!(matches!(
            verify_prop1(&m, &pv(&[0.0, 0.0]), FrameBudget(8), FrameBudget(8), &[0.1]),
            Err(Error::ZeroVideoGradient)
        ));
        let noisy = model(
            [2.0, 0.0],
            [0.0, 1.0],
            zero_alpha(),
            NoiseModel {
                base_std: 0.1,
                redundancy_slope: 0.0,
            },
        );
        assert!(matches!(
            verify_prop1(&noisy, &pv(&[1.0, 0.0]), FrameBudget(8), FrameBudget(8), &[0.1]),
            Err(Error::NoisyModel(_))
        ));
    }

    #[test]
    fn verify_prop1_without_conflict() {
        // Cooperative geometry: both minimisers at the origin.
        let m = model([0.0, 0.0], [0.0, 1.0], zero_alpha(), NoiseModel::noiseless());
        let r = verify_prop1(&m, &pv(&[1.0, 1.0]), FrameBudget(16), FrameBudget(8), &[0.5]).unwrap();
        assert!(!r.conflict_detected);
        assert_eq!(r.eta_bound, None);
        assert_eq!(r.image_checks, 0);
        assert!(r.vid_loss_after < r.vid_loss_before);
    }

    fn geometry_rho_1_and_0_1() -> (ConflictModel, ParamVector) {
        let t = [-0.1, 0.99_f64.sqrt()];
        (
            model([0.0, 0.0], t, AlphaSchedule::Linear { c: 0.5 }, NoiseModel::noiseless()),
            pv(&[1.0, 0.0]),
        )
    }

    #[test]
    fn expected_alignment_examples() {
        let (m, theta) = geometry_rho_1_and_0_1();
        let (rs, rt) = alignment_components(&m, &theta).unwrap();
        assert_eq!(rs, 1.0);
        assert!((rt - 0.1).abs() < 1e-15);
        let a16 = expected_alignment_analytic(&m, &theta, FrameBudget(16)).unwrap();
        assert!((a16 - 0.2).abs() < 1e-12);
        let a32 = expected_alignment_analytic(&m, &theta, FrameBudget(32)).unwrap();
        assert!((a32 + 0.6).abs() < 1e-12);

        let flat = model([0.0, 0.0], [0.6, 0.8], zero_alpha(), NoiseModel::noiseless());
        for b in flat.budgets().iter() {
            assert_eq!(expected_alignment_analytic(&flat, &theta, b).unwrap(), 1.0);
        }
    }

    #[test]
    fn mc_alignment_noiseless_and_draw_count() {
        let (m, theta) = geometry_rho_1_and_0_1();
        let mut rng = stream(1, 0, 0);
        let est = expected_alignment_mc(&m, &theta, FrameBudget(16), FrameBudget(8), 10, &mut rng).unwrap();
        assert_eq!(
            est.estimate,
            expected_alignment_analytic(&m, &theta, FrameBudget(16)).unwrap()
        );
        assert_eq!(est.standard_error, 0.0);
        assert!(matches!(
            expected_alignment_mc(&m, &theta, FrameBudget(16), FrameBudget(8), 1, &mut rng),
            Err(Error::InvalidDrawCount(1))
        ));
    }

    #[test]
    fn find_threshold_examples() {
        let m = BudgetSet::default();
        let a = AlphaSchedule::Linear { c: 0.5 };
        assert_eq!(find_threshold(1.0, 0.1, &a, &m).unwrap(), Some(FrameBudget(32)));
        assert_eq!(find_threshold(1.0, 0.0, &a, &m).unwrap(), None);
        let a = AlphaSchedule::Linear { c: 1.0 / 8.0 };
        assert_eq!(find_threshold(1.0, 1.0, &a, &m).unwrap(), Some(FrameBudget(8)));
        let r = threshold_report(1.0, 1.0, &a, &m).unwrap();
        assert_eq!(r.alignments[&FrameBudget(8)].analytic, 0.0);
        assert!(r.sign_pattern_holds);
    }

    #[test]
    fn find_threshold_assumption_errors() {
        let m = BudgetSet::default();
        let a = AlphaSchedule::Linear { c: 0.5 };
        assert!(matches!(
            find_threshold(0.0, 0.1, &a, &m),
            Err(Error::AssumptionViolation(_))
        ));
        assert!(matches!(
            find_threshold(1.0, -0.1, &a, &m),
            Err(Error::AssumptionViolation(_))
        ));
        let dec = AlphaSchedule::Table([(8, 2.0), (16, 1.0), (32, 3.0), (64, 4.0)].into_iter().collect());
        assert!(matches!(
            find_threshold(1.0, 0.1, &dec, &m),
            Err(Error::AssumptionViolation(_))
        ));
    }

    #[test]
    fn prop3_bound_examples() {
        assert!((prop3_bound(0.1, 1.0, 0.2, 1.0).unwrap() + 0.015).abs() < 1e-12);
        assert_eq!(prop3_bound(0.1, 1.0, 0.0, 0.0).unwrap(), 0.0);
        assert!((prop3_bound(0.1, 1.0, 0.2, 6.6).unwrap() - 0.013).abs() < 1e-12);
        assert!(prop3_bound(0.0, 1.0, 0.2, 1.0).is_err());
        assert!(prop3_bound(0.1, -1.0, 0.2, 1.0).is_err());
        assert!(prop3_bound(0.1, 1.0, 0.2, -1.0).is_err());
    }

    fn table(f: impl Fn(u32) -> (f64, f64)) -> BTreeMap<FrameBudget, BudgetMoments> {
        [8, 16, 32, 64]
            .into_iter()
            .map(|m| {
                let (a, s) = f(m);
                (
                    FrameBudget(m),
                    BudgetMoments {
                        alignment_term: a,
                        second_moment: s,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn optimal_budget_worked_example() {
        let moments = table(|m| (0.2, 1.0 + 0.1 * (f64::from(m) - 8.0)));
        let choice = optimal_budget(&moments, FrameBudget(8), 0.1, 1.0).unwrap();
        assert_eq!(choice.m, FrameBudget(8));
        assert!(choice.moment_violation.is_none());
        let expected = [-0.015, -0.011, -0.003, 0.013];
        for (b, e) in choice.bounds.iter().zip(expected) {
            assert!((b.bound_value - e).abs() < 1e-12, "{} vs {e}", b.bound_value);
        }
    }

    #[test]
    fn optimal_budget_ties_and_violations() {
        let flat = table(|_| (0.2, 1.0));
        assert_eq!(
            optimal_budget(&flat, FrameBudget(8), 0.1, 1.0).unwrap().m,
            FrameBudget(8)
        );

        // Alignment growing with m breaks the hypothesis; argmin is still reported.
        let growing = table(|m| (0.2 * f64::from(m), 1.0));
        let choice = optimal_budget(&growing, FrameBudget(8), 0.1, 1.0).unwrap();
        let v = choice.moment_violation.unwrap();
        assert_eq!(v.condition, MomentCondition::AlignmentNonIncreasing);
        assert_eq!((v.lower, v.upper), (FrameBudget(8), FrameBudget(16)));
        assert_eq!(choice.m, FrameBudget(64));

        let shrinking = table(|m| (0.2, 10.0 - f64::from(m) / 8.0));
        let v = optimal_budget(&shrinking, FrameBudget(16), 0.1, 1.0)
            .unwrap()
            .moment_violation
            .unwrap();
        assert_eq!(v.condition, MomentCondition::SecondMomentNonDecreasing);

        assert!(matches!(
            optimal_budget(&flat, FrameBudget(12), 0.1, 1.0),
            Err(Error::InvalidBudget(12))
        ));
    }

    #[test]
    fn model_moments_include_noise_floor() {
        let m = model(
            [0.0, 0.0],
            [0.0, 1.0],
            zero_alpha(),
            NoiseModel {
                base_std: 1.0,
                redundancy_slope: 1.0,
            },
        );
        let mo = model_moments(&m, &pv(&[1.0, 0.0]), FrameBudget(16)).unwrap();
        assert_eq!(
            mo.keys().copied().collect::<Vec<_>>(),
            vec![FrameBudget(16), FrameBudget(32), FrameBudget(64)]
        );
        // ‖ḡ‖² = 1, d = 2, σ(32; 16) = 2
        assert_eq!(mo[&FrameBudget(32)].second_moment, 1.0 + 2.0 * 4.0);
        let choice = optimal_budget(&mo, FrameBudget(16), 0.1, 1.0).unwrap();
        assert_eq!(choice.m, FrameBudget(16));
    }
}
