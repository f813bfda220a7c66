//! C ABI over the `temporal_trap` library.
//!
//! Every fallible function returns a [`TtStatus`]; on failure the message is
//! available from [`tt_last_error`] on the same thread until the next call.
//! Objects are opaque handles released with their `*_free` function.
//! Vectors are passed as pointer plus length; output buffers must have room
//! for the model dimension.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use temporal_trap::allocator::{self, DimensionScores, Level};
use temporal_trap::analysis;
use temporal_trap::stream::stream;
use temporal_trap::trainer::{self, BudgetPolicy, SampleSpec, Trajectory};
use temporal_trap::{AlphaSchedule, BudgetSet, ConflictModel, Error, FrameBudget, ParamVector};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    DimensionMismatch = 3,
    InvalidBudget = 4,
    InvalidModel = 5,
    InvalidParameter = 6,
    NonFinite = 7,
    ZeroVideoGradient = 8,
    AssumptionViolation = 9,
    PropositionViolation = 10,
    Divergence = 11,
    InvalidScores = 12,
    InvalidResponse = 13,
    Parse = 14,
    IndexOutOfRange = 15,
    Panic = 16,
    Other = 17,
}

impl From<&Error> for TtStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::DimensionMismatch { .. } => TtStatus::DimensionMismatch,
            Error::InvalidBudget(_) => TtStatus::InvalidBudget,
            Error::InvalidModel(_) | Error::Validation { .. } => TtStatus::InvalidModel,
            Error::InvalidParameter(_) | Error::InvalidBeta(_) | Error::InvalidDrawCount(_) | Error::NoisyModel(_) => {
                TtStatus::InvalidParameter
            }
            Error::NonFiniteLoss => TtStatus::NonFinite,
            Error::ZeroVideoGradient => TtStatus::ZeroVideoGradient,
            Error::AssumptionViolation(_) => TtStatus::AssumptionViolation,
            Error::PropositionViolation(_) => TtStatus::PropositionViolation,
            Error::DivergenceDetected { .. } => TtStatus::Divergence,
            Error::InvalidScores(_) | Error::EmptyEmbeddings | Error::MissingInput(_) => TtStatus::InvalidScores,
            Error::InvalidResponse(_) => TtStatus::InvalidResponse,
            Error::Parse { .. } | Error::Json(_) => TtStatus::Parse,
            _ => TtStatus::Other,
        }
    }
}

/// Opaque model handle.
pub struct TtModel(ConflictModel);

/// Opaque trajectory handle.
pub struct TtTrajectory(Trajectory);

/// One trajectory row. Losses are after the step's update.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TtStepRow {
    pub step: u64,
    pub eta: f64,
    pub m: u32,
    pub sample: u64,
    pub image_loss: f64,
    pub video_loss: f64,
    pub alignment: f64,
    pub param_norm: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(TtStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(TtStatus::from(&e), e.to_string())
    }
}

type FfiResult = std::result::Result<(), Fail>;

fn guard(f: impl FnOnce() -> FfiResult) -> TtStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TtStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            TtStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(TtStatus::NullPointer, format!("{what} is null"))
}

unsafe fn model_ref<'a>(p: *const TtModel) -> Result<&'a ConflictModel, Fail> {
    unsafe { p.as_ref() }.map(|m| &m.0).ok_or_else(|| null("model"))
}

unsafe fn doubles<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(unsafe { slice::from_raw_parts(p, len) })
}

unsafe fn vector(p: *const f64, len: usize, what: &str) -> Result<ParamVector, Fail> {
    let s = unsafe { doubles(p, len, what)? };
    Ok(ParamVector::new(s.to_vec())?)
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null("output buffer"));
    }
    if len < need {
        return Err(Fail(
            TtStatus::DimensionMismatch,
            format!("output buffer holds {len} values, {need} required"),
        ));
    }
    Ok(unsafe { slice::from_raw_parts_mut(p, need) })
}

unsafe fn write<T>(p: *mut T, v: T) -> FfiResult {
    if p.is_null() {
        return Err(null("output pointer"));
    }
    unsafe { p.write(v) };
    Ok(())
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|e| Fail(TtStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn budgets(p: *const u32, len: usize) -> Result<BudgetSet, Fail> {
    if p.is_null() || len == 0 {
        return Ok(BudgetSet::default());
    }
    let raw = unsafe { slice::from_raw_parts(p, len) };
    Ok(BudgetSet::new(raw.iter().copied())?)
}

/// Library version, static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tt_version() -> *const c_char {
    static V: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    V.as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next library call on the same thread.
#[no_mangle]
pub extern "C" fn tt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Parses a model document (JSON).
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tt_model_from_json(json: *const c_char, out: *mut *mut TtModel) -> TtStatus {
    guard(|| {
        let text = unsafe { string(json, "json")? };
        let model: ConflictModel =
            serde_json::from_str(text).map_err(|e| Fail(TtStatus::InvalidModel, e.to_string()))?;
        unsafe { write(out, Box::into_raw(Box::new(TtModel(model)))) }
    })
}

/// The canned eight-dimensional conflict geometry. `theta0_out`, when not
/// NULL, receives the matching starting point (8 values).
///
/// # Safety
/// `out` must be valid; `theta0_out` NULL or room for 8 doubles.
#[no_mangle]
pub unsafe extern "C" fn tt_model_trap_geometry(out: *mut *mut TtModel, theta0_out: *mut f64) -> TtStatus {
    guard(|| {
        let (model, theta0) = temporal_trap::synth::trap_geometry();
        if !theta0_out.is_null() {
            unsafe { out_slice(theta0_out, theta0.dim(), theta0.dim())? }.copy_from_slice(theta0.as_slice());
        }
        unsafe { write(out, Box::into_raw(Box::new(TtModel(model)))) }
    })
}

/// # Safety
/// `model` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tt_model_free(model: *mut TtModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Parameter dimension, 0 for NULL.
///
/// # Safety
/// `model` NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tt_model_dim(model: *const TtModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.0.dim())
}

/// # Safety
/// Pointers valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn tt_image_loss(
    model: *const TtModel,
    theta: *const f64,
    len: usize,
    out: *mut f64,
) -> TtStatus {
    guard(|| unsafe {
        let m = model_ref(model)?;
        let v = m.image_loss(&vector(theta, len, "theta")?)?;
        write(out, v)
    })
}

/// # Safety
/// Pointers valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn tt_image_grad(
    model: *const TtModel,
    theta: *const f64,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> TtStatus {
    guard(|| unsafe {
        let m = model_ref(model)?;
        let g = m.image_grad(&vector(theta, len, "theta")?)?;
        out_slice(out, out_len, g.dim())?.copy_from_slice(g.as_slice());
        Ok(())
    })
}

/// Deterministic video loss at budget `m`.
///
/// # Safety
/// Pointers valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn tt_video_loss(
    model: *const TtModel,
    theta: *const f64,
    len: usize,
    m: u32,
    out: *mut f64,
) -> TtStatus {
    guard(|| unsafe {
        let model = model_ref(model)?;
        let v = model.video_loss_deterministic(&vector(theta, len, "theta")?, FrameBudget(m))?;
        write(out, v)
    })
}

/// One stochastic video gradient drawn from the stream `(seed, trial, step)`.
///
/// # Safety
/// Pointers valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn tt_video_grad(
    model: *const TtModel,
    theta: *const f64,
    len: usize,
    m: u32,
    m_min: u32,
    seed: u64,
    trial: u64,
    step: u64,
    out: *mut f64,
    out_len: usize,
) -> TtStatus {
    guard(|| unsafe {
        let model = model_ref(model)?;
        let mut rng = stream(seed, trial, step);
        let g = model.video_grad(
            &vector(theta, len, "theta")?,
            FrameBudget(m),
            FrameBudget(m_min),
            &mut rng,
        )?;
        out_slice(out, out_len, g.dim())?.copy_from_slice(g.as_slice());
        Ok(())
    })
}

/// Inner product of two gradients.
///
/// # Safety
/// Both arrays hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn tt_alignment(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> TtStatus {
    guard(|| unsafe {
        let v = analysis::alignment(&vector(a, len, "a")?, &vector(b, len, "b")?)?;
        write(out, v)
    })
}

/// Largest step for which one image step is guaranteed to raise the image
/// loss. `*present` is false when the gradients do not conflict.
///
/// # Safety
/// Both arrays hold `len` doubles; outputs valid.
#[no_mangle]
pub unsafe extern "C" fn tt_conflict_step_bound(
    g_img: *const f64,
    g_vid: *const f64,
    len: usize,
    beta_img: f64,
    out: *mut f64,
    present: *mut bool,
) -> TtStatus {
    guard(|| unsafe {
        let r = analysis::conflict_step_bound(&vector(g_img, len, "g_img")?, &vector(g_vid, len, "g_vid")?, beta_img)?;
        write(present, r.is_some())?;
        write(out, r.unwrap_or(0.0))
    })
}

/// Threshold budget for a tabulated `α` over the given budgets
/// (`alpha[i]` is `α(budgets[i])`).
///
/// # Safety
/// Both arrays hold `len` values; outputs valid.
#[no_mangle]
pub unsafe extern "C" fn tt_find_threshold(
    rho_sh: f64,
    rho_tmp: f64,
    budget_values: *const u32,
    alpha: *const f64,
    len: usize,
    out: *mut u32,
    present: *mut bool,
) -> TtStatus {
    guard(|| unsafe {
        if budget_values.is_null() || len == 0 {
            return Err(null("budgets"));
        }
        let set = budgets(budget_values, len)?;
        let a = doubles(alpha, len, "alpha")?;
        let schedule = AlphaSchedule::Table(set.iter().map(|m| m.0).zip(a.iter().copied()).collect());
        let r = analysis::find_threshold(rho_sh, rho_tmp, &schedule, &set)?;
        write(present, r.is_some())?;
        write(out, r.map_or(0, |m| m.0))
    })
}

/// Descent bound `−η·a + (β/2)·η²·s`.
///
/// # Safety
/// `out` valid.
#[no_mangle]
pub unsafe extern "C" fn tt_prop3_bound(
    eta: f64,
    beta_img: f64,
    alignment_term: f64,
    second_moment: f64,
    out: *mut f64,
) -> TtStatus {
    guard(|| unsafe {
        write(
            out,
            analysis::prop3_bound(eta, beta_img, alignment_term, second_moment)?,
        )
    })
}

/// Rule-based budget from five levels (0 = low … 3 = extreme), in the order
/// event duration, motion continuity, causal relations, object interactions,
/// fine-grained attributes.
///
/// # Safety
/// `levels` holds 5 bytes; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn tt_allocate_rule_based(levels: *const u8, out: *mut u32) -> TtStatus {
    guard(|| unsafe {
        if levels.is_null() {
            return Err(null("levels"));
        }
        let raw = slice::from_raw_parts(levels, 5);
        let mut l = [Level::Low; 5];
        for (slot, &b) in l.iter_mut().zip(raw) {
            *slot = *Level::ALL
                .get(usize::from(b))
                .ok_or_else(|| Fail(TtStatus::InvalidScores, format!("level {b} out of range")))?;
        }
        write(out, allocator::allocate_rule_based(&DimensionScores::from_levels(l)).0)
    })
}

/// Similarity-based budget for `frames × dim` row-major unit embeddings.
/// NULL `budget_values` selects the default budget set.
///
/// # Safety
/// `embeddings` holds `frames·dim` doubles; `budget_values` NULL or
/// `n_budgets` values; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn tt_allocate_similarity(
    embeddings: *const f64,
    frames: usize,
    dim: usize,
    threshold: f64,
    budget_values: *const u32,
    n_budgets: usize,
    out: *mut u32,
) -> TtStatus {
    guard(|| unsafe {
        let flat = doubles(embeddings, frames.saturating_mul(dim), "embeddings")?;
        let rows: Vec<Vec<f64>> = if dim == 0 {
            Vec::new()
        } else {
            flat.chunks(dim).map(<[f64]>::to_vec).collect()
        };
        let set = budgets(budget_values, n_budgets)?;
        write(out, allocator::allocate_similarity(&rows, threshold, &set)?.0)
    })
}

/// Parses a predictor reply into an admissible budget.
///
/// # Safety
/// `reply` NUL-terminated; `budget_values` NULL or `n_budgets` values; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn tt_parse_vlm_reply(
    reply: *const c_char,
    budget_values: *const u32,
    n_budgets: usize,
    out: *mut u32,
) -> TtStatus {
    guard(|| unsafe {
        let text = string(reply, "reply")?;
        let set = budgets(budget_values, n_budgets)?;
        write(out, allocator::parse_vlm_reply(text, &set)?.0)
    })
}

/// Multi-step simulation. `policy_json` is a budget-policy document
/// (e.g. `{"fixed": 64}`), NULL for the hybrid policy; the corpus is a
/// single sample whose minimal budget is the smallest admissible one.
///
/// # Safety
/// `theta0` holds `len` doubles; `policy_json` NULL or NUL-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn tt_run_sft(
    model: *const TtModel,
    theta0: *const f64,
    len: usize,
    policy_json: *const c_char,
    steps: usize,
    eta: f64,
    seed: u64,
    out: *mut *mut TtTrajectory,
) -> TtStatus {
    guard(|| unsafe {
        let model = model_ref(model)?;
        let theta0 = vector(theta0, len, "theta0")?;
        let policy: BudgetPolicy = if policy_json.is_null() {
            BudgetPolicy::hybrid()
        } else {
            serde_json::from_str(string(policy_json, "policy_json")?)
                .map_err(|e| Fail(TtStatus::Parse, e.to_string()))?
        };
        let samples = vec![SampleSpec::new(1.0, model.budgets().min())];
        let t = trainer::run_sft(model, &theta0, &policy, &samples, steps, eta, seed)?;
        write(out, Box::into_raw(Box::new(TtTrajectory(t))))
    })
}

/// Number of rows, 0 for NULL.
///
/// # Safety
/// `traj` NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tt_trajectory_len(traj: *const TtTrajectory) -> usize {
    unsafe { traj.as_ref() }.map_or(0, |t| t.0.steps.len())
}

/// # Safety
/// `traj` a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn tt_trajectory_row(traj: *const TtTrajectory, index: usize, out: *mut TtStepRow) -> TtStatus {
    guard(|| unsafe {
        let t = &traj.as_ref().ok_or_else(|| null("trajectory"))?.0;
        let r = t
            .steps
            .get(index)
            .ok_or_else(|| Fail(TtStatus::IndexOutOfRange, format!("row {index} of {}", t.steps.len())))?;
        write(
            out,
            TtStepRow {
                step: r.step as u64,
                eta: r.eta,
                m: r.m.0,
                sample: r.sample as u64,
                image_loss: r.image_loss,
                video_loss: r.video_loss,
                alignment: r.alignment,
                param_norm: r.param_norm,
            },
        )
    })
}

/// Final parameters after the last step.
///
/// # Safety
/// `traj` a live handle; `out` holds `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn tt_trajectory_final_theta(
    traj: *const TtTrajectory,
    out: *mut f64,
    out_len: usize,
) -> TtStatus {
    guard(|| unsafe {
        let t = &traj.as_ref().ok_or_else(|| null("trajectory"))?.0;
        out_slice(out, out_len, t.final_theta.dim())?.copy_from_slice(t.final_theta.as_slice());
        Ok(())
    })
}

/// # Safety
/// `traj` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tt_trajectory_free(traj: *mut TtTrajectory) {
    if !traj.is_null() {
        drop(unsafe { Box::from_raw(traj) });
    }
}
