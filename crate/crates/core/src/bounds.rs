//! PAC-Bayes bound evaluators and divergence utilities.
//!
//! Everything here is a pure function of supplied estimates; nothing
//! samples or differentiates. The sampling side lives in `samplers` and
//! `hyperopt`.

use serde::Serialize;
use thiserror::Error;

use crate::samplers::clip;

#[derive(Debug, Error)]
pub enum BoundError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("non-positive variance")]
    NonPositiveVariance,
    #[error("domain violation: {0}")]
    Domain(String),
    #[error("missing input: {0}")]
    Missing(&'static str),
}

pub type Result<T> = std::result::Result<T, BoundError>;

/// Diagonal-covariance Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianParams {
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Self {
        let n = mean.len();
        GaussianParams { mean, var: vec![var; n] }
    }
}

/// KL(q ‖ p) for diagonal Gaussians:
/// ½(tr(Σ₁⁻¹Σ₀) + (μ₁−μ₀)ᵀΣ₁⁻¹(μ₁−μ₀) − m + ln det Σ₁/det Σ₀).
pub fn gaussian_kl(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
    let m = q.mean.len();
    if p.mean.len() != m || q.var.len() != m || p.var.len() != m {
        return Err(BoundError::Dimension(m, p.mean.len()));
    }
    if q.var.iter().chain(&p.var).any(|&v| v <= 0.0) {
        return Err(BoundError::NonPositiveVariance);
    }
    let mut acc = 0.0;
    for i in 0..m {
        let r = q.var[i] / p.var[i];
        let dm = q.mean[i] - p.mean[i];
        acc += r + dm * dm / p.var[i] - 1.0 - r.ln();
    }
    Ok(0.5 * acc)
}

/// β(ε, δ, s) = exp(−sε²) + c_β·s·√(δ/ε). The constant hides an
/// unspecified big-O factor; it is a modeling choice, not derived.
pub fn compute_beta(eps: f64, delta: f64, s: usize, c_beta: f64) -> Result<f64> {
    if !(eps > 0.0 && eps <= 0.5) {
        return Err(BoundError::Domain(format!("epsilon {eps} outside (0, 1/2]")));
    }
    if !(delta > 0.0 && delta < eps) {
        return Err(BoundError::Domain(format!("delta {delta} outside (0, epsilon)")));
    }
    if s < 1 {
        return Err(BoundError::Domain("s must be >= 1".into()));
    }
    let s = s as f64;
    Ok((-s * eps * eps).exp() + c_beta * s * (delta / eps).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    /// Valid when β is below the stricter threshold; tightest log term.
    Simplified,
    /// Valid whenever β < 1; log term absorbs β explicitly.
    General,
    /// Simplified form with the (b−a) range prefactor on the root term.
    BoundedLoss,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundConfig {
    /// Confidence 1 − Δ.
    pub delta_conf: f64,
    pub c1: f64,
    pub c2: f64,
    pub c_beta: f64,
    /// Convergence slack of the sampler to its stationary law.
    pub kappa: Option<f64>,
    /// Lipschitz constant of the loss in θ.
    pub gamma_lip: Option<f64>,
    pub loss_range: Option<(f64, f64)>,
}

impl Default for BoundConfig {
    fn default() -> Self {
        BoundConfig {
            delta_conf: 0.05,
            c1: 1.0,
            c2: 1.0,
            c_beta: 1.0,
            kappa: None,
            gamma_lip: None,
            loss_range: None,
        }
    }
}

/// Assembled bound with every term broken out, so the λ-dependent part can
/// be read off even when the absolute value is vacuous.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub kind: BoundKind,
    pub empirical_risk: f64,
    pub kl_term: f64,
    /// c₁ε² + c₂√(δ/ε); zero when the prior is data-independent.
    pub privacy_term: f64,
    pub log_term: f64,
    pub sample_size: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub beta: f64,
    pub beta_feasible: bool,
    pub privacy_certificate_valid: bool,
    pub constants: BoundConfig,
    /// `None` when the feasibility condition fails.
    pub bound: Option<f64>,
    pub vacuous: bool,
    /// The part that actually moves with λ: √ of the KL block alone.
    pub actionable_term: f64,
}

fn privacy_term(eps: f64, delta: f64, cfg: &BoundConfig) -> f64 {
    if eps == 0.0 {
        0.0
    } else {
        cfg.c1 * eps * eps + cfg.c2 * (delta / eps).sqrt()
    }
}

/// ln(a·e^x + b·e^y) without overflow.
fn log_sum_exp2(ln_a: f64, x: f64, ln_b: f64, y: f64) -> f64 {
    let u = ln_a + x;
    let v = ln_b + y;
    let hi = u.max(v);
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + ((u - hi).exp() + (v - hi).exp()).ln()
}

/// One bound evaluation. `eps = 0` (with `delta = 0`) means the prior does
/// not depend on the data, so β and the privacy penalty vanish.
pub fn pac_bayes_bound(
    emp_risk: f64,
    kl: f64,
    n: usize,
    eps: f64,
    delta: f64,
    kind: BoundKind,
    cfg: &BoundConfig,
    privacy_certificate_valid: bool,
) -> Result<BoundReport> {
    if n < 1 {
        return Err(BoundError::Domain("n must be >= 1".into()));
    }
    if kl < 0.0 {
        return Err(BoundError::Domain(format!("negative KL {kl}")));
    }
    if !(cfg.delta_conf > 0.0 && cfg.delta_conf < 1.0) {
        return Err(BoundError::Domain(format!(
            "confidence parameter {} outside (0,1)",
            cfg.delta_conf
        )));
    }
    let s = n as f64;
    let priv_term = privacy_term(eps, delta, cfg);
    let beta = if eps == 0.0 {
        0.0
    } else {
        compute_beta(eps, delta, n, cfg.c_beta)?
    };

    let (beta_feasible, log_term, root_arg_extra, prefactor) = match kind {
        BoundKind::Simplified | BoundKind::BoundedLoss => {
            let threshold = (s.ln() + s * (priv_term - 2.0)).exp().min(1.0);
            let feasible = beta < threshold;
            let log_term = (5.0 * s / cfg.delta_conf).ln();
            let prefactor = match (kind, cfg.loss_range) {
                (BoundKind::BoundedLoss, Some((a, b))) => b - a,
                (BoundKind::BoundedLoss, None) => {
                    return Err(BoundError::Missing("loss range for the bounded-loss form"))
                }
                _ => 1.0,
            };
            (feasible, log_term, priv_term, prefactor)
        }
        BoundKind::General => {
            let feasible = beta < 1.0;
            // ln[(4s·e^{s·priv} + β·e^{2s})/Δ]
            let ln_beta = if beta == 0.0 { f64::NEG_INFINITY } else { beta.ln() };
            let log_term =
                log_sum_exp2((4.0 * s).ln(), s * priv_term, ln_beta, 2.0 * s)
                    - cfg.delta_conf.ln();
            (feasible, log_term, 0.0, 1.0)
        }
    };

    let inv = 1.0 / (2.0 * s - 1.0);
    let root_arg = inv * (kl + log_term) + root_arg_extra;
    let actionable_term = (inv * kl).sqrt();
    let bound = if beta_feasible {
        Some(emp_risk + prefactor * root_arg.sqrt())
    } else {
        None
    };
    let max_loss = cfg.loss_range.map(|(_, b)| b).unwrap_or(1.0);
    let vacuous = bound.map(|b| b > max_loss).unwrap_or(true);

    Ok(BoundReport {
        kind,
        empirical_risk: emp_risk,
        kl_term: kl,
        privacy_term: priv_term,
        log_term,
        sample_size: n,
        epsilon: eps,
        delta,
        beta,
        beta_feasible,
        privacy_certificate_valid,
        constants: cfg.clone(),
        bound,
        vacuous,
        actionable_term,
    })
}

/// Per-step divergence constant m·(x − ln x − 1), x the step/size ratio
/// (n_V η^T)/(n_T η^V). Nonnegative, zero iff x = 1.
pub fn kl_step_constant(x: f64, m: usize) -> f64 {
    assert!(x > 0.0);
    m as f64 * (x - x.ln() - 1.0)
}

/// One step of the chain-rule KL bound.
#[derive(Debug, Clone, Copy)]
pub struct KlChainStep {
    /// E_{ν_t}‖η_t^T ∇R̂_T − η_t^V clip_γ(∇R̂_V)‖².
    pub expect_sq_diff: f64,
    pub eta_v: f64,
    /// (n_V η_t^T)/(n_T η_t^V).
    pub x: f64,
}

/// General chain-rule bound on KL(Q_T ‖ P_T):
/// Σ_t (n_V/(4η_t^V))·E‖η_t^T∇R̂_T − η_t^V clip_γ(∇R̂_V)‖² + m(x_t − ln x_t − 1).
pub fn chain_rule_kl_bound(steps: &[KlChainStep], n_v: usize, m: usize) -> f64 {
    steps
        .iter()
        .map(|st| {
            n_v as f64 / (4.0 * st.eta_v) * st.expect_sq_diff + kl_step_constant(st.x, m)
        })
        .sum()
}

/// Equal-step convenience form: Σ_t constant + (n_V η/4)·Σ_t E‖∇R̂_T − ∇R̂_V‖².
pub fn chain_rule_kl_bound_equal(
    d2_per_step: &[f64],
    eta: f64,
    n_t: usize,
    n_v: usize,
    m: usize,
) -> f64 {
    let x = n_v as f64 / n_t as f64;
    let t = d2_per_step.len() as f64;
    t * kl_step_constant(x, m) + n_v as f64 * eta / 4.0 * d2_per_step.iter().sum::<f64>()
}

/// Builds chain-rule steps from paired gradient samples. `samples[t]` holds
/// draws (g_T, g_V) from ν_t; a single pair is the one-sample default.
pub fn kl_steps_from_samples(
    samples: &[Vec<(Vec<f64>, Vec<f64>)>],
    etas_t: &[f64],
    etas_v: &[f64],
    n_t: usize,
    n_v: usize,
    gamma: Option<f64>,
) -> Result<Vec<KlChainStep>> {
    if samples.len() != etas_t.len() || samples.len() != etas_v.len() {
        return Err(BoundError::Dimension(samples.len(), etas_t.len()));
    }
    let mut out = Vec::with_capacity(samples.len());
    for (t, group) in samples.iter().enumerate() {
        if group.is_empty() {
            return Err(BoundError::Missing("gradient samples for a step"));
        }
        let (et, ev) = (etas_t[t], etas_v[t]);
        let mut acc = 0.0;
        for (gt, gv) in group {
            let gv_eff = match gamma {
                Some(g) => clip(gv, g),
                None => gv.clone(),
            };
            acc += gt
                .iter()
                .zip(&gv_eff)
                .map(|(a, b)| {
                    let d = et * a - ev * b;
                    d * d
                })
                .sum::<f64>();
        }
        out.push(KlChainStep {
            expect_sq_diff: acc / group.len() as f64,
            eta_v: ev,
            x: (n_v as f64 * et) / (n_t as f64 * ev),
        });
    }
    Ok(out)
}

/// Training-side bound: 2γκ plus the usual root term with the same KL
/// estimate. Constants that do not move with λ stay broken out in the
/// report.
pub fn training_side_bound(
    emp_train_risk: f64,
    kl: f64,
    n_t: usize,
    eps: f64,
    delta: f64,
    cfg: &BoundConfig,
    privacy_certificate_valid: bool,
) -> Result<BoundReport> {
    let kappa = cfg.kappa.ok_or(BoundError::Missing("kappa"))?;
    let gamma_lip = cfg.gamma_lip.ok_or(BoundError::Missing("gamma_lip"))?;
    let mut rep = pac_bayes_bound(
        emp_train_risk,
        kl,
        n_t,
        eps,
        delta,
        BoundKind::Simplified,
        cfg,
        privacy_certificate_valid,
    )?;
    let slack = 2.0 * gamma_lip * kappa;
    rep.bound = rep.bound.map(|b| b + slack);
    let max_loss = cfg.loss_range.map(|(_, b)| b).unwrap_or(1.0);
    rep.vacuous = rep.bound.map(|b| b > max_loss).unwrap_or(true);
    Ok(rep)
}

/// Monte-Carlo estimate of E_ν‖∇_θ log p‖² for a Gibbs posterior at
/// temperature `s` (∇ log p = −s·∇R̂), plus the √-scaled form
/// √((η/4)·Σ over samples of ‖∇R̂‖²) used as a limit regularizer, where
/// each sample stands in for one step's one-sample estimate.
pub fn hessian_trace_regularizer<F>(
    samples: &[Vec<f64>],
    mut grad_fn: F,
    s: f64,
    eta: f64,
) -> (f64, f64)
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    assert!(!samples.is_empty());
    let mut raw = 0.0;
    let mut sum_sq = 0.0;
    for th in samples {
        let g = grad_fn(th);
        let sq: f64 = g.iter().map(|x| x * x).sum();
        raw += s * s * sq;
        sum_sq += sq;
    }
    raw /= samples.len() as f64;
    (raw, (eta / 4.0 * sum_sq).sqrt())
}

/// ‖clip₁(g_T) − clip₁(g_V)‖², via the 2 − 2uᵀv identity when both inputs
/// sit on (or outside) the unit sphere.
pub fn cosine_regularizer_summand(g_t: &[f64], g_v: &[f64]) -> f64 {
    let norm = |g: &[f64]| g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let u = clip(g_t, 1.0);
    let v = clip(g_v, 1.0);
    if norm(g_t) >= 1.0 && norm(g_v) >= 1.0 {
        2.0 - 2.0 * u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()
    } else {
        u.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

/// Optimizes the same-distribution variant of the objective: the first
/// term becomes expected training risk (decay included) while the
/// incoherence regularizer is unchanged.
pub fn same_distribution_objective(
    problem: &crate::hyperopt::Problem,
    cfg: &crate::hyperopt::HyperOptConfig,
    seed: u64,
) -> crate::hyperopt::Result<crate::hyperopt::OptimizeResult> {
    let mut cfg = cfg.clone();
    cfg.first_term = crate::hyperopt::FirstTerm::Training;
    crate::hyperopt::optimize(problem, &cfg, seed)
}
