//! Acceptance gate: one integration test per release criterion. Every
//! test prints a single `criterion N: PASS/FAIL` line (visible under
//! `--nocapture`) before asserting, and all tolerances are pinned as
//! constants next to the criterion they guard. Expensive experiment
//! sweeps are computed once and shared between the criteria that read
//! them.

use std::path::PathBuf;
use std::sync::OnceLock;

use pbho_core::bounds::{
    chain_rule_kl_bound, gaussian_kl, hessian_trace_regularizer, kl_step_constant,
    GaussianParams, KlChainStep,
};
use pbho_core::diffcore::{Tape, Value};
use pbho_core::experiments::{
    forward_select, freedman_null_trial, min_weight_norm_baseline,
    regularizer_generalization_correlation, run_weight_decay_experiment, FreedmanConfig,
    FreedmanNullTrial, ModelKind, SelectionObjective, WeightDecayConfig, WeightDecayRun,
};
use pbho_core::hyperopt::{
    objective_estimate, outer_gradient, HyperOptConfig, InnerOpt, OuterOpt, Problem,
    Truncation, ValHypergrad,
};
use pbho_core::models::{
    generate_freedman, load_mnist, Dataset, FlatVector, InitDistribution, Labels,
    LossSpec, Model,
};
use pbho_core::samplers::{
    dp_sgld_run, max_dp_step_size, DpSgldConfig, PrivacyBudget, SamplerError,
    StepSchedule,
};
use pbho_core::util::{central_diff, mean_var, stream_rng};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Seeds per selection experiment and the per-seed success fraction the
/// selection criteria must reach.
const SELECTION_SEEDS: u64 = 50;
const SELECTION_PASS_FRACTION: f64 = 0.8;

fn report(criterion: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} — {name} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} [{name}] failed: {detail}");
}

fn need(count: usize) -> usize {
    (SELECTION_PASS_FRACTION * count as f64).ceil() as usize
}

// ---------------------------------------------------------------------------
// Shared sweeps
// ---------------------------------------------------------------------------

fn null_trials() -> &'static Vec<FreedmanNullTrial> {
    static CELL: OnceLock<Vec<FreedmanNullTrial>> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = FreedmanConfig::default();
        (0..SELECTION_SEEDS)
            .map(|seed| {
                let (train, val, test) =
                    generate_freedman(false, 500, 500, 10_000, seed).expect("null data");
                freedman_null_trial(&train, &val, &test, &cfg, seed).expect("null trial")
            })
            .collect()
    })
}

struct SignalTrial {
    eq5_argmin: Vec<usize>,
    eq1_argmin: Vec<usize>,
    aic_argmin: Vec<usize>,
}

fn signal_trials() -> &'static Vec<SignalTrial> {
    static CELL: OnceLock<Vec<SignalTrial>> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = FreedmanConfig::default();
        (0..SELECTION_SEEDS)
            .map(|seed| {
                let (train, val, test) =
                    generate_freedman(true, 500, 500, 10_000, seed).expect("signal data");
                let argmin = |obj| {
                    let path = forward_select(&train, &val, &test, obj, &cfg, seed)
                        .expect("signal path");
                    let mut f = path.argmin_entry().features.clone();
                    f.sort_unstable();
                    f
                };
                SignalTrial {
                    eq5_argmin: argmin(SelectionObjective::Eq5),
                    eq1_argmin: argmin(SelectionObjective::Eq1),
                    aic_argmin: argmin(SelectionObjective::Aic),
                }
            })
            .collect()
    })
}

/// Weight-decay experiment constants (criteria 4–6). The run
/// configuration is the library default: 50/50 split, 1000 Adam inner
/// steps × 100 RMSProp outer steps.
const WD_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Calibration scans over ζ ∈ [1e-3, 10] found final test accuracy
/// insensitive to the regularizer weight in this regime; 3e-3 sits in
/// the middle of the scanned range.
const WD_ZETA: f64 = 0.003;
const WD_ZETA_GRID: [f64; 5] = [0.001, 0.003, 0.01, 0.03, 0.1];
/// Both objectives must reach this validation accuracy.
const WD_VAL_ACC_MIN: f64 = 0.98;
/// Minimum mean test-accuracy gap (regularized − unregularized).
const WD_TEST_GAP_MIN: f64 = 0.03;
/// Minimum Pearson correlation between the final regularizer value and
/// the generalization-error estimate across the ζ grid.
const WD_CORR_MIN: f64 = 0.5;

struct WdRuns {
    eq1: Vec<WeightDecayRun>,
    eq5: Vec<WeightDecayRun>,
    grid: Vec<WeightDecayRun>,
}

fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn wd_runs() -> &'static WdRuns {
    static CELL: OnceLock<WdRuns> = OnceLock::new();
    CELL.get_or_init(|| {
        let (data, test) = load_mnist(&mnist_dir()).expect("mnist under data/mnist");
        let cfg = WeightDecayConfig::default();
        let kind = ModelKind::LinearSoftmax;
        let eq1 = run_weight_decay_experiment(&data, &test, kind, &[0.0], &WD_SEEDS, &cfg)
            .expect("unregularized runs");
        let eq5 =
            run_weight_decay_experiment(&data, &test, kind, &[WD_ZETA], &WD_SEEDS, &cfg)
                .expect("regularized runs");
        let grid =
            run_weight_decay_experiment(&data, &test, kind, &WD_ZETA_GRID, &[0], &cfg)
                .expect("zeta grid runs");
        WdRuns { eq1, eq5, grid }
    })
}

fn mean_final_test_acc(runs: &[WeightDecayRun]) -> f64 {
    let accs: Vec<f64> = runs
        .iter()
        .map(|r| r.final_record().test_acc.expect("final step is evaluated"))
        .collect();
    accs.iter().sum::<f64>() / accs.len() as f64
}

// ---------------------------------------------------------------------------
// Criteria 1–3: forward selection
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_null_path_risk_correlations() {
    let trials = null_trials();
    let neg = trials
        .iter()
        .filter(|t| t.eq1_spearman.map_or(false, |s| s < 0.0))
        .count();
    let pos = trials
        .iter()
        .filter(|t| t.eq5_spearman.map_or(false, |s| s > 0.0))
        .count();
    let n = trials.len();
    let pass = neg >= need(n) && pos >= need(n);
    report(
        1,
        "null-data path correlations with test MSE",
        pass,
        &format!("unregularized negative {neg}/{n}, regularized positive {pos}/{n}"),
    );
}

#[test]
fn criterion_02_signal_argmin_feature_sets() {
    let trials = signal_trials();
    let n = trials.len();
    let exact = trials.iter().filter(|t| t.eq5_argmin == [0, 1]).count();
    let spurious = trials
        .iter()
        .filter(|t| t.eq1_argmin.iter().any(|&f| f >= 2))
        .count();
    let pass = exact >= need(n) && spurious >= need(n);
    report(
        2,
        "signal-data argmin feature sets",
        pass,
        &format!("regularized exact {{0,1}} {exact}/{n}, unregularized spurious {spurious}/{n}"),
    );
}

#[test]
fn criterion_03_aic_baseline_argmin() {
    let nulls = null_trials();
    let signals = signal_trials();
    let n0 = nulls.len();
    let n1 = signals.len();
    let empty = nulls.iter().filter(|t| t.aic_argmin_p == 0).count();
    let exact = signals.iter().filter(|t| t.aic_argmin == [0, 1]).count();
    let pass = empty >= need(n0) && exact >= need(n1);
    report(
        3,
        "AIC stepwise baseline argmin",
        pass,
        &format!("null p=0 {empty}/{n0}, signal exact {{0,1}} {exact}/{n1}"),
    );
}

// ---------------------------------------------------------------------------
// Criteria 4–6: per-parameter weight decay on MNIST
// ---------------------------------------------------------------------------

// Known failure (criteria 4–6): with a warm-started, converged inner
// loop the training gradient vanishes, so the depth-0 regularizer
// hypergradient reduces to −(ζ/√Y)·Σ_t e^λ θ ∇R̂_V — a positive multiple
// of the T1−T2 risk hypergradient per coordinate. RMSProp normalizes
// per-coordinate magnitudes, so a same-signed rescaling cannot change
// the outer trajectory: scans over ζ ∈ [1e-3, 10] produce runs
// indistinguishable to 3–4 significant figures. The targeted
// test-accuracy gap therefore does not materialize at this scale; the
// thresholds are kept rather than loosened.
#[test]
fn criterion_04_weight_decay_test_accuracy_gap() {
    let runs = wd_runs();
    let min_val = runs
        .eq1
        .iter()
        .chain(&runs.eq5)
        .map(|r| r.final_record().val_acc.expect("final step is evaluated"))
        .fold(f64::INFINITY, f64::min);
    let acc1 = mean_final_test_acc(&runs.eq1);
    let acc5 = mean_final_test_acc(&runs.eq5);
    let gap = acc5 - acc1;
    let pass = min_val >= WD_VAL_ACC_MIN && gap >= WD_TEST_GAP_MIN;
    report(
        4,
        "weight-decay validation overfitting gap",
        pass,
        &format!(
            "min val acc {min_val:.3}, mean test acc {acc5:.4} vs {acc1:.4} (gap {:.2} pts)",
            100.0 * gap
        ),
    );
}

#[test]
fn criterion_05_min_weight_norm_baseline() {
    let runs = wd_runs();
    let baseline: f64 = runs
        .eq1
        .iter()
        .map(|r| {
            min_weight_norm_baseline(r)
                .expect("evaluated records")
                .test_acc
                .expect("evaluated record has test accuracy")
        })
        .sum::<f64>()
        / runs.eq1.len() as f64;
    let acc5 = mean_final_test_acc(&runs.eq5);
    let pass = acc5 >= baseline;
    report(
        5,
        "regularized objective beats min-weight-norm selection",
        pass,
        &format!("regularized {acc5:.4} vs baseline {baseline:.4}"),
    );
}

#[test]
fn criterion_06_regularizer_generalization_correlation() {
    let runs = wd_runs();
    let stats =
        regularizer_generalization_correlation(&runs.grid).expect("correlation stats");
    let pass = stats.pearson > WD_CORR_MIN;
    report(
        6,
        "regularizer tracks the generalization gap",
        pass,
        &format!(
            "Pearson {:.3} over {} zeta values (Spearman {:.3})",
            stats.pearson,
            runs.grid.len(),
            stats.spearman
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: hypergradient oracle
// ---------------------------------------------------------------------------

/// Relative tolerance and probe step for the hypergradient check.
const HYPERGRAD_REL_TOL: f64 = 1e-3;
const HYPERGRAD_FD_STEP: f64 = 1e-5;
const HYPERGRAD_SEEDS: u64 = 100;

fn ridge_problem(seed: u64, lam: f64) -> Problem {
    let model = Model::LinearRegression { dim: 1 };
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut data = |n: usize| {
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| 1.5 * x + 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Dataset::new(xs, n, 1, Labels::Real(ys)).expect("ridge data")
    };
    let train = data(12);
    let val = data(8);
    Problem {
        model,
        spec: LossSpec::squared_error().with_decay(),
        train,
        val,
        test: None,
        init: InitDistribution::Gaussian { sd: 0.5 },
        lambda0: FlatVector::new(vec![lam], model.segments()).expect("lambda"),
    }
}

#[test]
fn criterion_07_hypergradient_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..HYPERGRAD_SEEDS {
        let t = 1 + (seed as usize) % 5;
        let problem = ridge_problem(seed, -0.6 + 0.011 * seed as f64);
        let cfg = HyperOptConfig {
            zeta: 0.3,
            inner_steps: t,
            eta: 0.05,
            truncation: Truncation::K(t),
            inner_opt: InnerOpt::Sgd,
            outer: OuterOpt::GradientDescent { lr: 0.05 },
            val_hypergrad: ValHypergrad::Truncated,
            ..Default::default()
        };
        let lam = problem.lambda0.clone();
        let segs = problem.model.segments();
        let g = outer_gradient(&problem, &cfg, &lam, seed).expect("hypergradient");
        let fd = central_diff(
            |l| {
                let lv = FlatVector::new(l.to_vec(), segs.clone()).expect("lambda probe");
                objective_estimate(&problem, &cfg, &lv, seed).expect("objective")
            },
            &lam.values,
            HYPERGRAD_FD_STEP,
        );
        let rel = (g[0] - fd[0]).abs() / fd[0].abs().max(1e-8);
        worst = worst.max(rel);
    }
    let pass = worst < HYPERGRAD_REL_TOL;
    report(
        7,
        "full-depth hypergradient vs central differences",
        pass,
        &format!("worst relative error {worst:.2e} over {HYPERGRAD_SEEDS} seeds, T in 1..=5"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: chain-rule KL bound ordering
// ---------------------------------------------------------------------------

const KL_CONFIGS: usize = 100;

/// Exact Gaussian marginal of a 1-D linear-drift Langevin chain:
/// θ' = (1 − ηa)θ − ηb + N(0, 2η/n).
fn propagate(mu0: f64, v0: f64, a: f64, b: f64, eta: f64, n: f64, steps: usize) -> (f64, f64) {
    let (mut mu, mut v) = (mu0, v0);
    for _ in 0..steps {
        mu = (1.0 - eta * a) * mu - eta * b;
        v = (1.0 - eta * a) * (1.0 - eta * a) * v + 2.0 * eta / n;
    }
    (mu, v)
}

#[test]
fn criterion_08_chain_rule_kl_bound_ordering() {
    // The per-step divergence constant m(x − ln x − 1) must be
    // nonnegative with its zero exactly at x = 1.
    let mut constant_ok = true;
    for i in 1..=1000 {
        let x = i as f64 * 0.01;
        for m in [1usize, 2, 5] {
            constant_ok &= kl_step_constant(x, m) >= 0.0;
        }
    }
    constant_ok &= kl_step_constant(1.0, 3) == 0.0;

    let mut rng = ChaCha12Rng::seed_from_u64(77);
    let mut worst_slack = f64::INFINITY;
    let mut ordered = 0usize;
    for _ in 0..KL_CONFIGS {
        let a_t = rng.gen_range(0.2..2.0);
        let a_v = rng.gen_range(0.2..2.0);
        let b_t = rng.gen_range(-1.0..1.0);
        let b_v = rng.gen_range(-1.0..1.0);
        let eta_t = rng.gen_range(0.01..0.3);
        let eta_v = rng.gen_range(0.01..0.3);
        let n_t = rng.gen_range(20..200) as f64;
        let n_v = rng.gen_range(20..200) as f64;
        let (mu0, v0) = (rng.gen_range(-1.0..1.0), rng.gen_range(0.05..1.0));

        let (mq, vq) = propagate(mu0, v0, a_t, b_t, eta_t, n_t, 2);
        let (mp, vp) = propagate(mu0, v0, a_v, b_v, eta_v, n_v, 2);
        let exact = gaussian_kl(
            &GaussianParams::isotropic(vec![mq], vq),
            &GaussianParams::isotropic(vec![mp], vp),
        )
        .expect("exact KL");

        // E‖η_T(a_Tθ + b_T) − η_V(a_Vθ + b_V)‖² under the training
        // chain's marginal N(μ_t, v_t): c²(v + μ²) + 2cdμ + d².
        let steps: Vec<KlChainStep> = (0..2)
            .map(|t| {
                let (mu_t, v_t) = propagate(mu0, v0, a_t, b_t, eta_t, n_t, t);
                let c = eta_t * a_t - eta_v * a_v;
                let d = eta_t * b_t - eta_v * b_v;
                KlChainStep {
                    expect_sq_diff: c * c * (v_t + mu_t * mu_t) + 2.0 * c * d * mu_t + d * d,
                    eta_v,
                    x: (n_v * eta_t) / (n_t * eta_v),
                }
            })
            .collect();
        let bound = chain_rule_kl_bound(&steps, n_v as usize, 1);
        if exact <= bound + 1e-12 {
            ordered += 1;
        }
        worst_slack = worst_slack.min(bound - exact);
    }
    let pass = constant_ok && ordered == KL_CONFIGS;
    report(
        8,
        "exact two-step Gaussian KL below the chain-rule bound",
        pass,
        &format!(
            "{ordered}/{KL_CONFIGS} ordered, min slack {worst_slack:.3e}, step constant nonnegative: {constant_ok}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: private-sampler certificate
// ---------------------------------------------------------------------------

const ETA_MAX_EXPECTED: f64 = 0.05178;
const ETA_MAX_TOL: f64 = 1e-5;
/// Relative tolerance on the injected-noise variance estimate.
const NOISE_VAR_REL_TOL: f64 = 0.03;

#[test]
fn criterion_09_private_step_size_certificate() {
    let budget = PrivacyBudget::new(0.5, 0.01, 1, 10, 100).expect("budget");
    let eta = max_dp_step_size(&budget, 1.0).expect("eta max");
    // Independent derivation: the Gaussian mechanism needs
    // (noise sd / sensitivity)² ≥ 2 ln(1.25/δ)/ε² with noise variance
    // 2η/s and drift sensitivity γη/h; solve for η at equality.
    let sigma2_min = 2.0 * (1.25f64 / 0.01).ln() / (0.5 * 0.5);
    let eta_indep = 2.0 * 10.0 * 10.0 / (100.0 * sigma2_min);
    let value_ok =
        (eta - eta_indep).abs() < 1e-12 && (eta - ETA_MAX_EXPECTED).abs() < ETA_MAX_TOL;

    // A schedule above the certificate must be rejected outright.
    let reject = dp_sgld_run(
        |_, _| Ok(vec![0.0]),
        vec![0.0],
        &DpSgldConfig {
            schedule: StepSchedule::constant(0.06, 5).expect("schedule"),
            gamma: 1.0,
            budget: budget.clone(),
            unsafe_multi_epoch: false,
            record_trajectory: false,
        },
        stream_rng(1, "dp-reject"),
    );
    let reject_ok = matches!(reject, Err(SamplerError::StepSizeViolation { .. }));

    // With zero gradients the increments are pure injected noise with
    // per-coordinate variance 2η/s.
    let dim = 5000;
    let steps = 10;
    let run_eta = 0.05;
    let out = dp_sgld_run(
        |_, _| Ok(vec![0.0; dim]),
        vec![0.0; dim],
        &DpSgldConfig {
            schedule: StepSchedule::constant(run_eta, steps).expect("schedule"),
            gamma: 1.0,
            budget: budget.clone(),
            unsafe_multi_epoch: false,
            record_trajectory: true,
        },
        stream_rng(2, "dp-noise"),
    )
    .expect("certified run");
    let mut increments = Vec::with_capacity(dim * steps);
    for t in 1..out.trajectory.len() {
        for i in 0..dim {
            increments.push(out.trajectory[t][i] - out.trajectory[t - 1][i]);
        }
    }
    let (_, var) = mean_var(&increments);
    let want = 2.0 * run_eta / 100.0;
    let var_rel = (var - want).abs() / want;
    let var_ok = out.certificate_valid && var_rel < NOISE_VAR_REL_TOL;

    let pass = value_ok && reject_ok && var_ok;
    report(
        9,
        "differentially private step-size certificate",
        pass,
        &format!(
            "eta_max {eta:.7} (value ok: {value_ok}), rejects 0.06: {reject_ok}, noise var rel err {var_rel:.4}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: score-norm / Hessian-trace identity
// ---------------------------------------------------------------------------

const SCORE_DRAWS: usize = 100_000;
const SCORE_REL_TOL: f64 = 0.03;

#[test]
fn criterion_10_score_norm_matches_hessian_trace() {
    // Gibbs posterior of a diagonal quadratic Σ a_i θ_i²/2 at
    // temperature n is N(0, diag(1/(n a_i))), so E‖∇ log p‖² = n Σ a_i.
    let check = |coeffs: &[f64], n: f64, seed: u64| -> (f64, f64) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let sds: Vec<f64> = coeffs.iter().map(|a| (1.0 / (n * a)).sqrt()).collect();
        let samples: Vec<Vec<f64>> = (0..SCORE_DRAWS)
            .map(|_| {
                sds.iter()
                    .map(|sd| sd * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let (raw, _) = hessian_trace_regularizer(
            &samples,
            |th| th.iter().zip(coeffs).map(|(t, a)| a * t).collect(),
            n,
            0.1,
        );
        (raw, n * coeffs.iter().sum::<f64>())
    };
    let (got_1d, want_1d) = check(&[1.5], 50.0, 5);
    let (got_2d, want_2d) = check(&[0.8, 2.5], 40.0, 6);
    let rel_1d = (got_1d - want_1d).abs() / want_1d;
    let rel_2d = (got_2d - want_2d).abs() / want_2d;
    let pass = rel_1d < SCORE_REL_TOL && rel_2d < SCORE_REL_TOL;
    report(
        10,
        "Monte-Carlo score norm vs n·tr(Hessian)",
        pass,
        &format!(
            "1-D {got_1d:.2} vs {want_1d:.2} (rel {rel_1d:.4}), 2-D {got_2d:.2} vs {want_2d:.2} (rel {rel_2d:.4})"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 11: automatic differentiation suite
// ---------------------------------------------------------------------------

const AD_TRIALS: usize = 100;
const AD_REL_TOL: f64 = 1e-4;
const AD_SECOND_TOL: f64 = 1e-8;

/// Composite expression touching every differentiable primitive; returns
/// the scalar output for a flat input of n² matrix entries plus 2n
/// vector entries.
fn composite(xs: &[f64], n: usize, labels: &[usize]) -> (Tape, Vec<f64>) {
    let tape = Tape::new();
    let m = tape.input(Value::matrix(n, n, xs[..n * n].to_vec())).expect("matrix");
    let u = tape
        .input(Value::vector(xs[n * n..n * n + n].to_vec()))
        .expect("vector u");
    let v = tape.input(Value::vector(xs[n * n + n..].to_vec())).expect("vector v");
    let shifted = u.scale(0.3).expect("scale").add(&v).expect("add");
    let mv = m.matvec(&shifted).expect("matvec");
    let mvt = m.matvec_t(&u).expect("matvec_t");
    let mm = m.matmul(&m).expect("matmul");
    let mm2 = m.matmul_nt(&mm).expect("matmul_nt").matmul_tn(&m).expect("matmul_tn");
    let ou = u.outer(&v).expect("outer");
    let e = v.scale(0.5).expect("scale").exp().expect("exp");
    let pos = v
        .mul(&v)
        .expect("mul")
        .add(&tape.constant(Value::ones(&[n])).expect("ones"))
        .expect("add");
    let lg = pos.log().expect("log");
    let rc = pos.recip().expect("recip");
    let th = mv.tanh().expect("tanh");
    let rl = mvt.relu().expect("relu");
    let brow = ou.add_bcast_row(&e).expect("add_bcast_row");
    let ce = m.softmax_cross_entropy_rows(labels).expect("cross entropy");
    let mut acc = mv.sqnorm().expect("sqnorm");
    for t in [
        th.dot(&rl).expect("dot"),
        mm2.sum().expect("sum").scale(0.1).expect("scale"),
        brow.colsum().expect("colsum").mean().expect("mean"),
        lg.sum().expect("sum"),
        rc.dot(&e).expect("dot"),
        u.mul(&v).expect("mul").mean().expect("mean"),
        u.sub(&v).expect("sub").sqnorm().expect("sqnorm"),
        ce,
    ] {
        acc = acc.add(&t).expect("add");
    }
    let grads = tape.grad(&acc, &[&m, &u, &v], false).expect("gradients");
    let flat = grads.iter().flat_map(|g| g.value().data).collect();
    (tape, flat)
}

#[test]
fn criterion_11_ad_first_and_second_derivatives() {
    let n = 4;
    let labels = vec![1usize, 3, 0, 2];
    let mut rng = ChaCha12Rng::seed_from_u64(2024);
    let mut worst_first: f64 = 0.0;
    for _ in 0..AD_TRIALS {
        let x0: Vec<f64> = (0..n * n + 2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_tape, got) = composite(&x0, n, &labels);
        let lb = labels.clone();
        let fd = central_diff(
            |xs| {
                let tape = Tape::new();
                let m = tape.input(Value::matrix(n, n, xs[..n * n].to_vec())).expect("m");
                let u = tape
                    .input(Value::vector(xs[n * n..n * n + n].to_vec()))
                    .expect("u");
                let v = tape.input(Value::vector(xs[n * n + n..].to_vec())).expect("v");
                let shifted = u.scale(0.3).expect("scale").add(&v).expect("add");
                let mv = m.matvec(&shifted).expect("matvec");
                let mvt = m.matvec_t(&u).expect("matvec_t");
                let mm = m.matmul(&m).expect("matmul");
                let mm2 =
                    m.matmul_nt(&mm).expect("matmul_nt").matmul_tn(&m).expect("matmul_tn");
                let ou = u.outer(&v).expect("outer");
                let e = v.scale(0.5).expect("scale").exp().expect("exp");
                let pos = v
                    .mul(&v)
                    .expect("mul")
                    .add(&tape.constant(Value::ones(&[n])).expect("ones"))
                    .expect("add");
                let lg = pos.log().expect("log");
                let rc = pos.recip().expect("recip");
                let th = mv.tanh().expect("tanh");
                let rl = mvt.relu().expect("relu");
                let brow = ou.add_bcast_row(&e).expect("add_bcast_row");
                let ce = m.softmax_cross_entropy_rows(&lb).expect("cross entropy");
                let mut acc = mv.sqnorm().expect("sqnorm");
                for t in [
                    th.dot(&rl).expect("dot"),
                    mm2.sum().expect("sum").scale(0.1).expect("scale"),
                    brow.colsum().expect("colsum").mean().expect("mean"),
                    lg.sum().expect("sum"),
                    rc.dot(&e).expect("dot"),
                    u.mul(&v).expect("mul").mean().expect("mean"),
                    u.sub(&v).expect("sub").sqnorm().expect("sqnorm"),
                    ce,
                ] {
                    acc = acc.add(&t).expect("add");
                }
                acc.value().as_scalar()
            },
            &x0,
            1e-5,
        );
        for (a, b) in got.iter().zip(&fd) {
            worst_first = worst_first.max((a - b).abs() / b.abs().max(1.0));
        }
    }

    // Double backward: f(θ) = Σ c_k θ^k with k ≤ 4 against the exact
    // second derivative.
    let mut worst_second: f64 = 0.0;
    for _ in 0..AD_TRIALS {
        let coef: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: f64 = rng.gen_range(-1.0..1.0);
        let tape = Tape::new();
        let th = tape.input(Value::vector(vec![x])).expect("theta");
        let mut acc = tape.scalar_const(coef[0]).expect("const");
        let mut pow = th.clone();
        for &c in &coef[1..] {
            acc = acc
                .add(&pow.sum().expect("sum").scale(c).expect("scale"))
                .expect("add");
            pow = pow.mul(&th).expect("mul");
        }
        let g = tape.grad(&acc, &[&th], true).expect("first grad").remove(0);
        let h = tape
            .grad(&g.sum().expect("sum"), &[&th], false)
            .expect("second grad")
            .remove(0);
        let analytic = 2.0 * coef[2] + 6.0 * coef[3] * x + 12.0 * coef[4] * x * x;
        worst_second = worst_second.max((h.value().data[0] - analytic).abs());
    }

    let pass = worst_first < AD_REL_TOL && worst_second < AD_SECOND_TOL;
    report(
        11,
        "primitive gradients and double backward",
        pass,
        &format!(
            "worst first-order rel err {worst_first:.2e} over {AD_TRIALS} trials, worst second-derivative err {worst_second:.2e}"
        ),
    );
}
