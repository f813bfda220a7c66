//! Synthetic image objective and budget-parameterised video gradient field.
//!
//! The image objective is a quadratic `½(θ−θ_img*)ᵀA(θ−θ_img*)`. The video
//! gradient at budget `m` decomposes exactly into a shared part, a
//! temporally specialised part weighted by `α(m)`, and zero-mean noise:
//!
//! ```text
//! g_vid(θ, m) = B(θ − θ_sh*) + α(m)·B·t + ε
//! ```
//!
//! Filtering the temporal direction `t` through the shared curvature `B` keeps
//! the deterministic field conservative, with potential minimised at
//! `θ_m* = θ_sh* − α(m)·t`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::budget::{BudgetSet, FrameBudget};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, MAX_DIM};

/// Default relative step for [`finite_diff_grad`].
pub const DEFAULT_FD_STEP: f64 = 1e-5;

const UNIT_NORM_TOL: f64 = 1e-12;

/// Dense parameter vector with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParameter("parameter vector is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "parameter vector has non-finite entries".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.0)
    }

    pub(crate) fn from_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }

    fn expect_dim(&self, expected: usize) -> Result<()> {
        if self.dim() == expected {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected,
                found: self.dim(),
            })
        }
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(p: ParamVector) -> Self {
        p.0
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `½(θ−θ*)ᵀA(θ−θ*)` with symmetric PSD curvature `A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuadraticDoc", into = "QuadraticDoc")]
pub struct QuadraticObjective {
    target: ParamVector,
    curvature: Matrix,
}

#[derive(Serialize, Deserialize)]
struct QuadraticDoc {
    target: ParamVector,
    curvature: Matrix,
}

impl QuadraticObjective {
    pub fn new(target: ParamVector, curvature: Matrix) -> Result<Self> {
        check_curvature("curvature", &curvature, target.dim())?;
        Ok(Self { target, curvature })
    }

    pub fn target(&self) -> &ParamVector {
        &self.target
    }

    pub fn curvature(&self) -> &Matrix {
        &self.curvature
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }

    pub fn loss(&self, theta: &ParamVector) -> Result<f64> {
        theta.expect_dim(self.dim())?;
        let diff = sub(theta.as_slice(), self.target.as_slice());
        Ok(0.5 * self.curvature.quad_form(&diff))
    }

    pub fn grad(&self, theta: &ParamVector) -> Result<ParamVector> {
        theta.expect_dim(self.dim())?;
        let diff = sub(theta.as_slice(), self.target.as_slice());
        Ok(ParamVector(self.curvature.mul_vec(&diff)))
    }
}

impl TryFrom<QuadraticDoc> for QuadraticObjective {
    type Error = Error;

    fn try_from(d: QuadraticDoc) -> Result<Self> {
        Self::new(d.target, d.curvature)
    }
}

impl From<QuadraticObjective> for QuadraticDoc {
    fn from(q: QuadraticObjective) -> Self {
        QuadraticDoc {
            target: q.target,
            curvature: q.curvature,
        }
    }
}

fn check_curvature(field: &str, m: &Matrix, dim: usize) -> Result<()> {
    if m.dim() != dim {
        return Err(Error::InvalidModel(format!(
            "{field} is {0}x{0}, expected {dim}x{dim}",
            m.dim()
        )));
    }
    if !m.is_symmetric() {
        return Err(Error::InvalidModel(format!("{field} is not symmetric")));
    }
    if !m.is_positive_semidefinite() {
        return Err(Error::InvalidModel(format!("{field} is not positive semidefinite")));
    }
    Ok(())
}

/// Largest eigenvalue of the objective's curvature, i.e. the gradient's
/// Lipschitz constant.
pub fn smoothness_constant(objective: &QuadraticObjective) -> Result<f64> {
    objective.curvature.largest_eigenvalue()
}

/// Weight `α(m)` of the temporal component at budget `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum AlphaSchedule {
    /// `α(m) = c·m`
    Linear { c: f64 },
    /// `α(m) = c·log₂(max(m/m0, 1))`
    Logarithmic { c: f64, m0: f64 },
    /// Explicit value per admissible budget.
    Table(BTreeMap<u32, f64>),
}

impl AlphaSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::validation("alpha", msg));
        match self {
            AlphaSchedule::Linear { c } | AlphaSchedule::Logarithmic { c, .. } if !(c.is_finite() && *c >= 0.0) => {
                bad(format!("coefficient must be finite and non-negative, got {c}"))
            }
            AlphaSchedule::Logarithmic { m0, .. } if !(m0.is_finite() && *m0 > 0.0) => {
                bad(format!("m0 must be positive, got {m0}"))
            }
            AlphaSchedule::Table(t) => match t.iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
                Some((m, v)) => bad(format!("alpha({m}) = {v} must be finite and non-negative")),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }

    pub fn value(&self, m: FrameBudget) -> Result<f64> {
        let mf = f64::from(m.0);
        Ok(match self {
            AlphaSchedule::Linear { c } => c * mf,
            AlphaSchedule::Logarithmic { c, m0 } => c * (mf / m0).max(1.0).log2(),
            AlphaSchedule::Table(t) => *t.get(&m.0).ok_or(Error::InvalidBudget(m.0))?,
        })
    }

    /// Whether `α` is non-decreasing across the admissible set.
    pub fn is_non_decreasing_on(&self, budgets: &BudgetSet) -> Result<bool> {
        let values = budgets.iter().map(|m| self.value(m)).collect::<Result<Vec<_>>>()?;
        Ok(values.windows(2).all(|w| w[0] <= w[1]))
    }
}

/// Isotropic Gaussian residual whose spread grows once frames become redundant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub base_std: f64,
    pub redundancy_slope: f64,
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self {
            base_std: 0.0,
            redundancy_slope: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_std.is_finite() && self.base_std >= 0.0) {
            return Err(Error::validation("noise.base_std", "must be finite and non-negative"));
        }
        if !(self.redundancy_slope.is_finite() && self.redundancy_slope >= 0.0) {
            return Err(Error::validation(
                "noise.redundancy_slope",
                "must be finite and non-negative",
            ));
        }
        Ok(())
    }

    /// `σ₀·(1 + slope·max(0, m − m_min)/m_min)`.
    pub fn std(&self, m: FrameBudget, m_min: FrameBudget) -> f64 {
        let excess = m.0.saturating_sub(m_min.0) as f64 / f64::from(m_min.0.max(1));
        self.base_std * (1.0 + self.redundancy_slope * excess)
    }
}

/// Serialisable document form of [`ConflictModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConflictModelConfig {
    pub dim: usize,
    pub image: QuadraticObjective,
    pub shared_target: ParamVector,
    pub shared_curvature: Matrix,
    pub temporal_direction: ParamVector,
    pub alpha: AlphaSchedule,
    pub noise: NoiseModel,
    pub budgets: BudgetSet,
}

/// Synthetic image/video objective pair sharing one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConflictModelConfig", into = "ConflictModelConfig")]
pub struct ConflictModel {
    cfg: ConflictModelConfig,
}

impl TryFrom<ConflictModelConfig> for ConflictModel {
    type Error = Error;

    fn try_from(cfg: ConflictModelConfig) -> Result<Self> {
        Self::new(cfg)
    }
}

impl From<ConflictModel> for ConflictModelConfig {
    fn from(m: ConflictModel) -> Self {
        m.cfg
    }
}

impl ConflictModel {
    pub fn new(cfg: ConflictModelConfig) -> Result<Self> {
        let d = cfg.dim;
        if d == 0 || d > MAX_DIM {
            return Err(Error::validation("dim", format!("must be in 1..={MAX_DIM}, got {d}")));
        }
        let dim_check = |field: &str, v: &ParamVector| {
            if v.dim() == d {
                Ok(())
            } else {
                Err(Error::validation(
                    field,
                    format!("has dimension {}, expected {d}", v.dim()),
                ))
            }
        };
        dim_check("image.target", cfg.image.target())?;
        dim_check("shared_target", &cfg.shared_target)?;
        dim_check("temporal_direction", &cfg.temporal_direction)?;
        check_curvature("shared_curvature", &cfg.shared_curvature, d)?;
        let tn = cfg.temporal_direction.norm();
        if (tn - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::validation(
                "temporal_direction",
                format!("must have unit norm, got {tn}"),
            ));
        }
        cfg.alpha.validate()?;
        cfg.noise.validate()?;
        if !cfg.alpha.is_non_decreasing_on(&cfg.budgets)? {
            return Err(Error::validation(
                "alpha",
                "must be non-decreasing over the admissible budgets",
            ));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ConflictModelConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn image(&self) -> &QuadraticObjective {
        &self.cfg.image
    }

    pub fn budgets(&self) -> &BudgetSet {
        &self.cfg.budgets
    }

    pub fn alpha_schedule(&self) -> &AlphaSchedule {
        &self.cfg.alpha
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.cfg.noise
    }

    pub fn shared_target(&self) -> &ParamVector {
        &self.cfg.shared_target
    }

    pub fn shared_curvature(&self) -> &Matrix {
        &self.cfg.shared_curvature
    }

    pub fn temporal_direction(&self) -> &ParamVector {
        &self.cfg.temporal_direction
    }

    /// Copy of this model with the noise replaced.
    pub fn with_noise(&self, noise: NoiseModel) -> Result<Self> {
        let mut cfg = self.cfg.clone();
        cfg.noise = noise;
        Self::new(cfg)
    }

    pub fn alpha(&self, m: FrameBudget) -> Result<f64> {
        self.cfg.alpha.value(self.cfg.budgets.check(m)?)
    }

    pub fn image_loss(&self, theta: &ParamVector) -> Result<f64> {
        self.cfg.image.loss(theta)
    }

    pub fn image_grad(&self, theta: &ParamVector) -> Result<ParamVector> {
        self.cfg.image.grad(theta)
    }

    /// `g_sh = B(θ − θ_sh*)`.
    pub fn shared_grad(&self, theta: &ParamVector) -> Result<ParamVector> {
        theta.expect_dim(self.dim())?;
        let diff = sub(theta.as_slice(), self.cfg.shared_target.as_slice());
        Ok(ParamVector(self.cfg.shared_curvature.mul_vec(&diff)))
    }

    /// `g_tmp = B·t`.
    pub fn temporal_grad(&self) -> ParamVector {
        self.temporal_grad_along(&self.cfg.temporal_direction)
    }

    fn temporal_grad_along(&self, direction: &ParamVector) -> ParamVector {
        ParamVector(self.cfg.shared_curvature.mul_vec(direction.as_slice()))
    }

    /// Noise-free video gradient `g_sh + α(m)·g_tmp`.
    pub fn video_grad_mean(&self, theta: &ParamVector, m: FrameBudget) -> Result<ParamVector> {
        self.video_grad_mean_along(theta, m, None)
    }

    pub fn video_grad_mean_along(
        &self,
        theta: &ParamVector,
        m: FrameBudget,
        direction: Option<&ParamVector>,
    ) -> Result<ParamVector> {
        let a = self.alpha(m)?;
        let direction = self.resolve_direction(direction)?;
        let shared = self.shared_grad(theta)?;
        let temporal = self.temporal_grad_along(direction);
        Ok(ParamVector(
            shared.0.iter().zip(&temporal.0).map(|(s, t)| s + a * t).collect(),
        ))
    }

    fn resolve_direction<'a>(&'a self, direction: Option<&'a ParamVector>) -> Result<&'a ParamVector> {
        match direction {
            None => Ok(&self.cfg.temporal_direction),
            Some(t) => {
                t.expect_dim(self.dim())?;
                let n = t.norm();
                if (n - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::InvalidParameter(format!(
                        "temporal direction override must have unit norm, got {n}"
                    )));
                }
                Ok(t)
            }
        }
    }

    /// Standard deviation of each noise coordinate at budget `m`.
    pub fn noise_std(&self, m: FrameBudget, m_min: FrameBudget) -> f64 {
        self.cfg.noise.std(m, m_min)
    }

    /// One stochastic draw of the video gradient at budget `m` for a sample
    /// whose minimal sufficient budget is `m_min`.
    pub fn video_grad<R: Rng + ?Sized>(
        &self,
        theta: &ParamVector,
        m: FrameBudget,
        m_min: FrameBudget,
        rng: &mut R,
    ) -> Result<ParamVector> {
        self.video_grad_along(theta, m, m_min, None, rng)
    }

    pub fn video_grad_along<R: Rng + ?Sized>(
        &self,
        theta: &ParamVector,
        m: FrameBudget,
        m_min: FrameBudget,
        direction: Option<&ParamVector>,
        rng: &mut R,
    ) -> Result<ParamVector> {
        if m_min.0 == 0 {
            return Err(Error::InvalidParameter("m_min must be at least 1".into()));
        }
        let mut g = self.video_grad_mean_along(theta, m, direction)?;
        let std = self.noise_std(m, m_min);
        if std > 0.0 {
            for x in &mut g.0 {
                let z: f64 = rng.sample(StandardNormal);
                *x += std * z;
            }
        }
        Ok(g)
    }

    /// `θ_m* = θ_sh* − α(m)·t`, the minimiser of the video potential at `m`.
    pub fn video_minimizer(&self, m: FrameBudget) -> Result<ParamVector> {
        self.video_minimizer_along(m, None)
    }

    pub fn video_minimizer_along(&self, m: FrameBudget, direction: Option<&ParamVector>) -> Result<ParamVector> {
        let a = self.alpha(m)?;
        let t = self.resolve_direction(direction)?;
        Ok(ParamVector(
            self.cfg
                .shared_target
                .as_slice()
                .iter()
                .zip(t.as_slice())
                .map(|(s, t)| s - a * t)
                .collect(),
        ))
    }

    /// `½(θ−θ_m*)ᵀB(θ−θ_m*)`; its gradient is [`Self::video_grad_mean`].
    pub fn video_loss_deterministic(&self, theta: &ParamVector, m: FrameBudget) -> Result<f64> {
        self.video_loss_along(theta, m, None)
    }

    pub fn video_loss_along(
        &self,
        theta: &ParamVector,
        m: FrameBudget,
        direction: Option<&ParamVector>,
    ) -> Result<f64> {
        theta.expect_dim(self.dim())?;
        let target = self.video_minimizer_along(m, direction)?;
        let diff = sub(theta.as_slice(), target.as_slice());
        Ok(0.5 * self.cfg.shared_curvature.quad_form(&diff))
    }

    /// Smoothness constant of the image objective.
    pub fn beta_img(&self) -> Result<f64> {
        smoothness_constant(&self.cfg.image)
    }

    /// Smoothness constant of every video objective (the Hessian is `B` for all `m`).
    pub fn beta_vid(&self) -> Result<f64> {
        self.cfg.shared_curvature.largest_eigenvalue()
    }

    /// Hex SHA-256 of the canonical JSON serialisation.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.cfg).expect("model config serialises");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Central finite-difference gradient with per-coordinate step `step·(1+|θᵢ|)`.
pub fn finite_diff_grad<F>(loss: F, theta: &ParamVector, step: f64) -> Result<ParamVector>
where
    F: Fn(&ParamVector) -> Result<f64>,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {step}")));
    }
    let mut probe = theta.clone();
    let mut grad = Vec::with_capacity(theta.dim());
    for i in 0..theta.dim() {
        let x = theta.0[i];
        let h = step * (1.0 + x.abs());
        probe.0[i] = x + h;
        let plus = loss(&probe)?;
        probe.0[i] = x - h;
        let minus = loss(&probe)?;
        probe.0[i] = x;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFiniteLoss);
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(ParamVector(grad))
}
