//! Randomised invariants. Reference values are computed here, independently
//! of the library code paths they check.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::Rng;

use temporal_trap::allocator::{
    allocate_corpus, allocate_rule_based, allocate_similarity, AllocationManifest, DimensionScores, Level,
    SampleRecord, Strategy,
};
use temporal_trap::analysis::{
    alignment, expected_alignment_analytic, find_threshold, optimal_budget, prop3_bound, verify_prop1, BudgetMoments,
};
use temporal_trap::linalg::Matrix;
use temporal_trap::objectives::{finite_diff_grad, smoothness_constant, DEFAULT_FD_STEP};
use temporal_trap::stream::stream;
use temporal_trap::synth::{conflicting_case, random_model, random_psd, random_unit};
use temporal_trap::trainer::{run_sft, BudgetPolicy, SampleSpec};
use temporal_trap::{
    AlphaSchedule, BudgetSet, ConflictModel, ConflictModelConfig, FrameBudget, NoiseModel, ParamVector,
    QuadraticObjective,
};

fn pv(v: Vec<f64>) -> ParamVector {
    ParamVector::new(v).unwrap()
}

fn rand_vec(rng: &mut impl Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-scale..scale)).collect()
}

fn matvec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    let rows = m.rows();
    rows.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    diff / scale
}

fn level() -> impl proptest::strategy::Strategy<Value = Level> {
    prop::sample::select(Level::ALL.to_vec())
}

fn levels() -> impl proptest::strategy::Strategy<Value = [Level; 5]> {
    prop::array::uniform5(level())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn video_grad_matches_finite_differences(seed in any::<u64>(), d in 1usize..=16) {
        let mut rng = stream(seed, 0, 0);
        let model = random_model(&mut rng, d, NoiseModel::noiseless());
        let theta = pv(rand_vec(&mut rng, d, 3.0));
        for m in model.budgets().iter() {
            let analytic = model.video_grad_mean(&theta, m).unwrap();
            let fd = finite_diff_grad(|t| model.video_loss_deterministic(t, m), &theta, DEFAULT_FD_STEP).unwrap();
            prop_assert!(rel_err(fd.as_slice(), analytic.as_slice()) < 1e-6);
        }
        let fd = finite_diff_grad(|t| model.image_loss(t), &theta, DEFAULT_FD_STEP).unwrap();
        prop_assert!(rel_err(fd.as_slice(), model.image_grad(&theta).unwrap().as_slice()) < 1e-6);
    }

    #[test]
    fn image_loss_permutation_invariant(seed in any::<u64>(), d in 1usize..=12) {
        let mut rng = stream(seed, 0, 0);
        let a = random_psd(&mut rng, d);
        let target = rand_vec(&mut rng, d, 2.0);
        let theta = rand_vec(&mut rng, d, 2.0);
        let mut perm: Vec<usize> = (0..d).collect();
        for i in (1..d).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        // Coordinate i moves to perm[i], matching Matrix::permuted.
        let apply = |v: &[f64]| {
            let mut out = vec![0.0; v.len()];
            perm.iter().zip(v).for_each(|(&p, &x)| out[p] = x);
            out
        };
        let q = QuadraticObjective::new(pv(target.clone()), a.clone()).unwrap();
        let qp = QuadraticObjective::new(pv(apply(&target)), a.permuted(&perm)).unwrap();
        let l = q.loss(&pv(theta.clone())).unwrap();
        let lp = qp.loss(&pv(apply(&theta))).unwrap();
        // Summation order differs, so compare against the size of the summands.
        let off: Vec<f64> = theta.iter().zip(&target).map(|(x, y)| x - y).collect();
        let rows = a.rows();
        let scale: f64 = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| (rows[i][j] * off[i] * off[j]).abs()).sum();
        prop_assert!((l - lp).abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE));
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn video_loss_vanishes_at_minimiser(seed in any::<u64>(), d in 1usize..=16) {
        let model = random_model(&mut stream(seed, 0, 0), d, NoiseModel::noiseless());
        for m in model.budgets().iter() {
            let star = model.video_minimizer(m).unwrap();
            prop_assert_eq!(model.video_loss_deterministic(&star, m).unwrap(), 0.0);
        }
    }

    #[test]
    fn smoothness_dominates_quadratic_form(seed in any::<u64>(), d in 1usize..=16) {
        let mut rng = stream(seed, 0, 0);
        let a = random_psd(&mut rng, d);
        let beta = smoothness_constant(&QuadraticObjective::new(ParamVector::zeros(d), a.clone()).unwrap()).unwrap();
        for _ in 0..50 {
            let v = rand_vec(&mut rng, d, 1.0);
            let q = dotp(&v, &matvec(&a, &v));
            // Power iteration stops at 1e-10 relative change, so β may sit that far below λ_max.
            prop_assert!(beta * dotp(&v, &v) * (1.0 + 1e-8) >= q);
        }
    }

    #[test]
    fn video_gradient_decomposition_exact(seed in any::<u64>(), d in 1usize..=16) {
        let mut rng = stream(seed, 0, 0);
        let model = random_model(&mut rng, d, NoiseModel::noiseless());
        let theta = rand_vec(&mut rng, d, 2.0);
        let b = model.shared_curvature();
        let off: Vec<f64> = theta.iter().zip(model.shared_target().as_slice()).map(|(x, y)| x - y).collect();
        let bt = matvec(b, model.temporal_direction().as_slice());
        let bo = matvec(b, &off);
        for m in model.budgets().iter() {
            let a = model.alpha(m).unwrap();
            let expected: Vec<f64> = bo.iter().zip(&bt).map(|(x, y)| x + a * y).collect();
            let got = model.video_grad_mean(&pv(theta.clone()), m).unwrap();
            prop_assert_eq!(got.as_slice(), expected.as_slice());
        }
    }

    #[test]
    fn noise_std_formula_and_monotone(base in 0.0f64..3.0, slope in 0.0f64..4.0, m_min_idx in 0usize..4) {
        let noise = NoiseModel { base_std: base, redundancy_slope: slope };
        let budgets = BudgetSet::default();
        let m_min = budgets.as_slice()[m_min_idx];
        let mut prev = f64::NEG_INFINITY;
        for m in budgets.iter().filter(|m| *m >= m_min) {
            let s = noise.std(m, m_min);
            let expected = base * (1.0 + slope * (f64::from(m.0 - m_min.0)) / f64::from(m_min.0));
            prop_assert!((s - expected).abs() <= 1e-12 * expected.max(1.0));
            prop_assert!(s >= prev);
            prev = s;
        }
    }

    #[test]
    fn model_json_round_trip(seed in any::<u64>(), d in 1usize..=8) {
        let model = random_model(&mut stream(seed, 0, 0), d, NoiseModel { base_std: 0.3, redundancy_slope: 1.5 });
        let json = serde_json::to_string(&model).unwrap();
        let back: ConflictModel = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(back.config_hash(), model.config_hash());
    }

    #[test]
    fn mismatched_dimensions_rejected(seed in any::<u64>(), d in 2usize..=8) {
        let model = random_model(&mut stream(seed, 0, 0), d, NoiseModel::noiseless());
        let short = ParamVector::zeros(d - 1);
        prop_assert!(model.image_loss(&short).is_err());
        prop_assert!(model.image_grad(&short).is_err());
        prop_assert!(model.video_grad_mean(&short, FrameBudget(8)).is_err());
    }

    #[test]
    fn alignment_bilinear(c in -100.0f64..100.0, seed in any::<u64>(), d in 1usize..=16) {
        let mut rng = stream(seed, 0, 0);
        let a = rand_vec(&mut rng, d, 5.0);
        let b = rand_vec(&mut rng, d, 5.0);
        let ca: Vec<f64> = a.iter().map(|x| c * x).collect();
        let lhs = alignment(&pv(ca), &pv(b.clone())).unwrap();
        let rhs = c * alignment(&pv(a.clone()), &pv(b.clone())).unwrap();
        // Relative to the magnitude of the summands, which bounds cancellation error.
        let scale: f64 = a.iter().zip(&b).map(|(x, y)| (c * x * y).abs()).sum::<f64>().max(f64::MIN_POSITIVE);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * scale.max(rhs.abs()));
    }

    #[test]
    fn one_step_conflict_and_descent(seed in any::<u64>()) {
        let case = conflicting_case(&mut stream(seed, 0, 0), 16);
        let g_img = case.model.image_grad(&case.theta).unwrap();
        let g_vid = case.model.video_grad_mean(&case.theta, case.m).unwrap();
        let beta_img = case.model.beta_img().unwrap();
        let eta0 = -2.0 * dotp(g_img.as_slice(), g_vid.as_slice()) / (beta_img * dotp(g_vid.as_slice(), g_vid.as_slice()));
        let grid: Vec<f64> = (1..=16).map(|k| eta0 * f64::from(k) / 17.0).collect();
        let r = verify_prop1(&case.model, &case.theta, case.m, case.m, &grid).unwrap();
        prop_assert!(r.conflict_detected);
        prop_assert_eq!(r.conflict_detected, r.alignment_value < 0.0);
        prop_assert!(r.eta_bound.unwrap() > 0.0);

        // Independent one-step check of both losses.
        let beta_vid = case.model.beta_vid().unwrap();
        for &eta in &grid {
            let next: Vec<f64> = case.theta.as_slice().iter().zip(g_vid.as_slice()).map(|(t, g)| t - eta * g).collect();
            let next = pv(next);
            prop_assert!(case.model.image_loss(&next).unwrap() > case.model.image_loss(&case.theta).unwrap() - 1e-10);
            if eta < 2.0 / beta_vid {
                prop_assert!(
                    case.model.video_loss_deterministic(&next, case.m).unwrap()
                        < case.model.video_loss_deterministic(&case.theta, case.m).unwrap() + 1e-10
                );
            }
        }
    }

    #[test]
    fn threshold_matches_analytic_sign_pattern(seed in any::<u64>(), d in 1usize..=12) {
        let mut rng = stream(seed, 0, 0);
        let base = random_model(&mut rng, d, NoiseModel::noiseless());
        let theta = pv(rand_vec(&mut rng, d, 2.0));
        // Shared objective equal to the image objective gives ρ_sh = ‖g_img‖² > 0;
        // orient t so the temporal part opposes the image gradient.
        let a = base.image().curvature().clone();
        let g_img = base.image_grad(&theta).unwrap();
        prop_assume!(dotp(g_img.as_slice(), g_img.as_slice()) > 1e-8);
        let mut t = random_unit(&mut rng, d).into_inner();
        if dotp(g_img.as_slice(), &matvec(&a, &t)) > 0.0 {
            t.iter_mut().for_each(|x| *x = -*x);
        }
        prop_assume!(dotp(g_img.as_slice(), &matvec(&a, &t)) < -1e-8);
        let cfg = ConflictModelConfig {
            shared_target: base.image().target().clone(),
            shared_curvature: a,
            temporal_direction: pv(t),
            ..base.config().clone()
        };
        let model = ConflictModel::new(cfg).unwrap();
        let (rho_sh, rho_tmp) = temporal_trap::analysis::alignment_components(&model, &theta).unwrap();
        prop_assert!(rho_sh > 0.0 && rho_tmp > 0.0);
        let m_star = find_threshold(rho_sh, rho_tmp, model.alpha_schedule(), model.budgets()).unwrap();
        for m in model.budgets().iter() {
            let e = expected_alignment_analytic(&model, &theta, m).unwrap();
            let conflicting = e <= 1e-12;
            prop_assert_eq!(conflicting, m_star.is_some_and(|s| m >= s), "m={} e={}", m, e);
        }
    }

    #[test]
    fn raising_alpha_never_raises_threshold(
        rho_sh in 0.01f64..10.0,
        rho_tmp in 0.0f64..2.0,
        increments in prop::collection::vec(0.0f64..3.0, 4),
        bump_at in 0usize..4,
        bump in 0.0f64..5.0,
    ) {
        let budgets = BudgetSet::default();
        let mut acc = 0.0;
        let values: Vec<f64> = increments.iter().map(|x| { acc += x; acc }).collect();
        let table = |v: &[f64]| AlphaSchedule::Table(budgets.iter().map(|m| m.0).zip(v.iter().copied()).collect());
        let before = find_threshold(rho_sh, rho_tmp, &table(&values), &budgets).unwrap();
        let mut raised = values.clone();
        raised[bump_at] += bump;
        // Keep the schedule non-decreasing.
        for i in bump_at + 1..raised.len() {
            raised[i] = raised[i].max(raised[i - 1]);
        }
        let after = find_threshold(rho_sh, rho_tmp, &table(&raised), &budgets).unwrap();
        let key = |m: Option<FrameBudget>| m.map_or(u32::MAX, |m| m.0);
        prop_assert!(key(after) <= key(before));
    }

    #[test]
    fn compliant_moments_pick_minimal_budget(
        m_min_idx in 0usize..4,
        a0 in -2.0f64..2.0,
        a_drops in prop::collection::vec(0.0f64..1.0, 4),
        s0 in 0.0f64..5.0,
        s_rises in prop::collection::vec(0.0f64..3.0, 4),
        eta in 1e-3f64..1.0,
        beta in 1e-2f64..10.0,
    ) {
        let budgets = BudgetSet::default();
        let (mut a, mut s) = (a0, s0);
        let mut table = BTreeMap::new();
        for (i, m) in budgets.iter().enumerate() {
            a -= a_drops[i];
            s += s_rises[i];
            table.insert(m, BudgetMoments { alignment_term: a, second_moment: s });
        }
        let m_min = budgets.as_slice()[m_min_idx];
        let choice = optimal_budget(&table, m_min, eta, beta).unwrap();
        prop_assert_eq!(choice.m, m_min);
        prop_assert!(choice.moment_violation.is_none());
        for b in &choice.bounds {
            let expected = -eta * b.alignment_term + 0.5 * beta * eta * eta * b.second_moment_term;
            prop_assert_eq!(b.bound_value, expected);
            prop_assert_eq!(prop3_bound(eta, beta, b.alignment_term, b.second_moment_term).unwrap(), expected);
        }
    }

    #[test]
    fn noise_free_training_descends(seed in any::<u64>(), d in 1usize..=8, m_idx in 0usize..4, frac in 0.05f64..0.95) {
        let mut rng = stream(seed, 0, 0);
        let model = random_model(&mut rng, d, NoiseModel::noiseless());
        let theta0 = pv(rand_vec(&mut rng, d, 2.0));
        let m = model.budgets().as_slice()[m_idx];
        let eta = frac * 2.0 / model.beta_vid().unwrap();
        let samples = vec![SampleSpec::new(1.0, model.budgets().min())];
        let t = run_sft(&model, &theta0, &BudgetPolicy::Fixed(m), &samples, 40, eta, seed).unwrap();
        let mut prev = model.video_loss_deterministic(&theta0, m).unwrap();
        for (i, r) in t.steps.iter().enumerate() {
            prop_assert_eq!(r.step, i);
            prop_assert_eq!(r.m, m);
            prop_assert!(r.image_loss.is_finite() && r.video_loss.is_finite());
            prop_assert!(r.video_loss <= prev + 1e-12 * prev.max(1.0));
            prev = r.video_loss;
        }
    }

    #[test]
    fn trajectories_deterministic(seed in any::<u64>(), d in 1usize..=6) {
        let mut rng = stream(seed, 1, 0);
        let model = random_model(&mut rng, d, NoiseModel { base_std: 0.4, redundancy_slope: 1.0 });
        let theta0 = pv(rand_vec(&mut rng, d, 1.0));
        let samples = vec![
            SampleSpec::new(0.25, FrameBudget(8)),
            SampleSpec::new(0.75, FrameBudget(16)),
        ];
        let eta = 0.5 / model.beta_vid().unwrap().max(1e-3);
        let csv = |s| {
            let t = run_sft(&model, &theta0, &BudgetPolicy::hybrid(), &samples, 25, eta, s).unwrap();
            let mut buf = Vec::new();
            t.write_csv(&mut buf).unwrap();
            (buf, t)
        };
        let (a, ta) = csv(seed);
        let (b, tb) = csv(seed);
        prop_assert_eq!(&a, &b);
        prop_assert!(ta.steps.iter().all(|r| r.m == samples[r.sample].m_min));
        let json = serde_json::to_string(&ta).unwrap();
        prop_assert_eq!(serde_json::from_str::<temporal_trap::trainer::Trajectory>(&json).unwrap(), tb);
    }

    #[test]
    fn rule_based_in_range_and_monotone(l in levels(), dim in 0usize..5) {
        let base = allocate_rule_based(&DimensionScores::from_levels(l));
        prop_assert!(BudgetSet::default().contains(base));
        prop_assert_eq!(base, allocate_rule_based(&DimensionScores::from_levels(l)));
        let mut raised = l;
        if let Some(next) = Level::ALL.iter().find(|x| **x > l[dim]) {
            raised[dim] = *next;
            prop_assert!(allocate_rule_based(&DimensionScores::from_levels(raised)) >= base);
        }
    }

    #[test]
    fn similarity_in_range_and_monotone(
        seed in any::<u64>(),
        frames in 1usize..40,
        dim in 1usize..8,
        t_hi in 0.05f64..0.999,
        drop in 0.0f64..0.9,
    ) {
        let mut rng = stream(seed, 0, 0);
        // Random walk on the sphere so neighbouring frames are often similar.
        let mut cur = random_unit(&mut rng, dim).into_inner();
        let mut emb = Vec::with_capacity(frames);
        for _ in 0..frames {
            if rng.random_bool(0.3) {
                cur = random_unit(&mut rng, dim).into_inner();
            }
            emb.push(cur.clone());
        }
        let t_lo = (t_hi - drop).max(0.01);
        let budgets = BudgetSet::default();
        let hi = allocate_similarity(&emb, t_hi, &budgets).unwrap();
        let lo = allocate_similarity(&emb, t_lo, &budgets).unwrap();
        prop_assert!(budgets.contains(hi) && budgets.contains(lo));
        prop_assert!(lo <= hi);
        prop_assert_eq!(hi, allocate_similarity(&emb, t_hi, &budgets).unwrap());
    }

    #[test]
    fn manifest_consistent_and_round_trips(picks in prop::collection::vec(prop::option::of(levels()), 1..60)) {
        let samples: Vec<SampleRecord> = picks
            .iter()
            .enumerate()
            .map(|(i, l)| SampleRecord {
                id: format!("s{i}"),
                instruction: "q".into(),
                assessment: l.map(|l| DimensionScores::from_levels(l).to_raw()),
                frame_embeddings: None,
                m_min_truth: None,
            })
            .collect();
        let budgets = BudgetSet::default();
        let manifest = allocate_corpus(&samples, Strategy::RuleBased, &budgets).unwrap();
        let s = &manifest.summary;
        let total: usize = s.histogram.values().sum();
        prop_assert_eq!(total, manifest.entries.len() - s.exclusions);
        prop_assert_eq!(s.exclusions, picks.iter().filter(|p| p.is_none()).count());
        let assigned: Vec<f64> = manifest.entries.iter().filter_map(|e| e.budget).map(|m| f64::from(m.0)).collect();
        if let Some(mean) = s.mean_frames {
            let recomputed = assigned.iter().sum::<f64>() / assigned.len() as f64;
            prop_assert!((mean - recomputed).abs() < 1e-9);
        } else {
            prop_assert!(assigned.is_empty());
        }
        let mut buf = Vec::new();
        manifest.write_jsonl(&mut buf).unwrap();
        prop_assert_eq!(AllocationManifest::read_jsonl(buf.as_slice()).unwrap(), manifest);
    }
}
