//! Outer-loop hyperparameter optimization.
//!
//! Minimizes validation risk plus an incoherence regularizer
//! ζ·√(Σ_t d²_t), where d²_t is the squared norm of the gap between the
//! training and validation risk gradients along the inner trajectory.
//! With ζ = 0 this reduces to plain validation-risk descent.
//!
//! Hypergradients through the inner trajectory are truncated: depth K
//! replays only the last K inner updates on one tape, K = 0 takes the
//! direct partials at the current iterate, and the windowed scheme gives
//! the i-th summand of each window depth i − 1. Accumulators X and Y
//! maintain X/√(Y + ε) = ζ·∇_λ√(Σ d²_t + ε) exactly, so a single outer
//! update per inner run needs no second pass.

use std::fs::File;
use std::io;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::diffcore::{Tape, Var};
use crate::models::{
    base_grad, risk_eval, risk_graph, sample_params, Dataset, DecayMode, FlatVector,
    HyperVector, InitDistribution, Labels, Model, ModelError, ParamVector,
};
use crate::samplers::{clip, Adam, ChainState, RmsProp, SamplerError};
use crate::util::chain_rng;

#[derive(Debug, Error)]
pub enum HyperOptError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite {0} encountered")]
    NonFinite(&'static str),
    #[error(transparent)]
    Diff(#[from] crate::diffcore::DiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, HyperOptError>;

/// Hypergradient truncation scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Truncation {
    /// Backpropagate through the last `min(K, t)` inner updates.
    K(usize),
    /// Inner steps are split into windows of length W; the i-th summand
    /// of a window gets depth i − 1, so every summand backpropagates to
    /// the start of its window. W = T reproduces full reverse-mode.
    Window(usize),
}

impl Truncation {
    fn depth_at(&self, t: usize) -> usize {
        match *self {
            Truncation::K(k) => k.min(t),
            Truncation::Window(w) => t % w,
        }
    }

    fn capacity(&self) -> usize {
        match *self {
            Truncation::K(k) => k,
            Truncation::Window(w) => w - 1,
        }
    }
}

/// How the first (risk) term's hypergradient is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValHypergrad {
    /// One double-backward at θ_T: ∂R̂/∂λ − η_last·(∂²R̂_T/∂λ∂θ)ᵀ∇_θR̂.
    T1T2,
    /// Replay the last `min(K, T)` inner updates and backpropagate
    /// R̂(θ_T) through them.
    Truncated,
}

/// Which risk the first objective term measures. `Training` is the
/// same-distribution variant: expected training risk plus the unchanged
/// regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirstTerm {
    Validation,
    Training,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InnerOpt {
    Sgd,
    /// Langevin dynamics; `tau` of `None` means τ = |S_T|.
    Sgld { tau: Option<f64> },
    /// Only depth-0 hypergradients are defined through Adam updates.
    Adam { lr: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OuterOpt {
    GradientDescent { lr: f64 },
    RmsProp { lr: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperOptConfig {
    pub zeta: f64,
    /// Inner steps per outer iteration (T).
    pub inner_steps: usize,
    /// Inner step size; Adam uses its own learning rate instead.
    pub eta: f64,
    pub truncation: Truncation,
    pub chains: usize,
    pub inner_opt: InnerOpt,
    pub outer: OuterOpt,
    pub outer_steps: usize,
    /// Redraw θ₀ from the initial distribution every outer step; when
    /// false each chain continues from its last iterate.
    pub reinit_inner: bool,
    /// Additive floor inside √(Y + ε); also the norm threshold below
    /// which the online algorithm skips a regularizer update.
    pub y_floor: f64,
    pub val_hypergrad: ValHypergrad,
    pub first_term: FirstTerm,
    /// Minibatch size for both inner datasets; `None` is full batch.
    pub minibatch: Option<usize>,
    /// Clip threshold applied to the validation-side gradient inside d².
    pub clip_gamma: Option<f64>,
    /// Evaluate held-out metrics every this many outer steps (the final
    /// step is always evaluated).
    pub eval_every: usize,
}

impl Default for HyperOptConfig {
    fn default() -> Self {
        HyperOptConfig {
            zeta: 0.0,
            inner_steps: 1,
            eta: 0.1,
            truncation: Truncation::K(0),
            chains: 1,
            inner_opt: InnerOpt::Sgd,
            outer: OuterOpt::RmsProp { lr: 1e-2 },
            outer_steps: 100,
            reinit_inner: true,
            y_floor: 1e-12,
            val_hypergrad: ValHypergrad::T1T2,
            first_term: FirstTerm::Validation,
            minibatch: None,
            clip_gamma: None,
            eval_every: 1,
        }
    }
}

impl HyperOptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.zeta < 0.0 || !self.zeta.is_finite() {
            return Err(HyperOptError::Config(format!("zeta {} out of range", self.zeta)));
        }
        if self.inner_steps == 0 || self.outer_steps == 0 || self.chains == 0 {
            return Err(HyperOptError::Config("step and chain counts must be positive".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(HyperOptError::Config(format!("eta {} out of range", self.eta)));
        }
        if !(self.y_floor > 0.0) {
            return Err(HyperOptError::Config("y_floor must be positive".into()));
        }
        if let Truncation::Window(w) = self.truncation {
            if w == 0 {
                return Err(HyperOptError::Config("window length must be positive".into()));
            }
            if self.val_hypergrad == ValHypergrad::Truncated {
                return Err(HyperOptError::Config(
                    "windowed truncation defines regularizer depths only; use the T1T2 risk hypergradient".into(),
                ));
            }
        }
        let max_depth = match self.truncation {
            Truncation::K(k) => k,
            Truncation::Window(w) => w - 1,
        };
        if matches!(self.inner_opt, InnerOpt::Adam { .. }) && max_depth > 0 {
            return Err(HyperOptError::Config(
                "replayed hypergradients support SGD and SGLD inner updates only".into(),
            ));
        }
        if matches!(self.inner_opt, InnerOpt::Adam { .. })
            && self.val_hypergrad == ValHypergrad::Truncated
        {
            return Err(HyperOptError::Config(
                "truncated risk hypergradient needs an SGD or SGLD inner loop".into(),
            ));
        }
        if let Some(h) = self.minibatch {
            if h == 0 {
                return Err(HyperOptError::Config("minibatch size must be positive".into()));
            }
        }
        if let Some(g) = self.clip_gamma {
            if !(g > 0.0) {
                return Err(HyperOptError::Config("clip threshold must be positive".into()));
            }
        }
        if self.eval_every == 0 {
            return Err(HyperOptError::Config("eval_every must be positive".into()));
        }
        Ok(())
    }

    fn objective_label(&self) -> &'static str {
        if self.first_term == FirstTerm::Training {
            "same-dist"
        } else if self.zeta == 0.0 {
            "eq1"
        } else {
            "eq5"
        }
    }
}

/// A hyperparameter-optimization problem: model, data splits, loss, and
/// the λ being tuned. With per-parameter decay λ shares θ's layout.
#[derive(Debug, Clone)]
pub struct Problem {
    pub model: Model,
    pub spec: crate::models::LossSpec,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Option<Dataset>,
    pub init: InitDistribution,
    pub lambda0: HyperVector,
}

impl Problem {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.spec.decay == DecayMode::PerParameter
            && self.lambda0.len() != self.model.param_count()
        {
            return Err(HyperOptError::Config(format!(
                "per-parameter decay needs |λ| = {} but got {}",
                self.model.param_count(),
                self.lambda0.len()
            )));
        }
        Ok(())
    }

    fn tau(&self, requested: Option<f64>) -> f64 {
        requested.unwrap_or(self.train.len() as f64)
    }
}

/// One row of the outer-loop history. Held-out columns are empty on
/// steps where evaluation was skipped.
#[derive(Debug, Clone, Serialize)]
pub struct HistoryRecord {
    pub outer_step: usize,
    pub seed: u64,
    pub objective_kind: String,
    pub zeta: f64,
    pub k: usize,
    pub c: usize,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub y: f64,
    pub sqrt_y: f64,
    pub gen_error_estimate: Option<f64>,
}

pub fn write_history_csv(records: &[HistoryRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for r in records {
        w.serialize(r).map_err(io::Error::other)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub lambda: HyperVector,
    /// Final iterate of chain 0.
    pub theta: ParamVector,
    pub history: Vec<HistoryRecord>,
    /// ‖θ_T‖₂ of chain 0 after each outer step.
    pub theta_norms: Vec<f64>,
    /// Peak number of retained inner-step records; bounded by the
    /// truncation capacity, so memory stays O(m·max(K, 1)).
    pub window_high_water: usize,
}

/// Retained state for one replayable inner step.
struct StepRecord {
    theta_start: Vec<f64>,
    noise: Option<Vec<f64>>,
    eta: f64,
    batch_t: Option<Vec<usize>>,
}

struct ChainCtx {
    state: ChainState,
    batch_rng: ChaCha12Rng,
    adam: Option<Adam>,
}

struct InnerRun {
    x: Vec<f64>,
    y: f64,
    risk_hyper: Vec<f64>,
    /// First-term risk at θ_T (validation risk, or training risk for the
    /// same-distribution objective).
    first_term_risk: f64,
    window_high_water: usize,
}

fn finite(v: &[f64], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(HyperOptError::NonFinite(what))
    }
}

/// exp(λ) ⊙ θ, the decay contribution to ∇_θ R̂_T; zero when the loss has
/// no decay term.
fn decay_grad(spec: &crate::models::LossSpec, lambda: &[f64], theta: &[f64]) -> Vec<f64> {
    match spec.decay {
        DecayMode::None => vec![0.0; theta.len()],
        DecayMode::PerParameter => lambda
            .iter()
            .zip(theta)
            .map(|(l, t)| l.exp() * t)
            .collect(),
    }
}

fn train_grad(
    problem: &Problem,
    theta: &ParamVector,
    lambda: &[f64],
    batch: Option<&[usize]>,
) -> Result<Vec<f64>> {
    let mut g = base_grad(&problem.model, theta, &problem.train, batch, &problem.spec)?;
    for (gi, di) in g.iter_mut().zip(decay_grad(&problem.spec, lambda, &theta.values)) {
        *gi += di;
    }
    Ok(g)
}

/// Depth-0 incoherence summand: d² and its direct λ-partials with θ held
/// fixed. The validation gradient can optionally be clipped; it carries
/// no decay term, so clipping does not change the λ-partials.
pub fn incoherence_summand(
    problem: &Problem,
    lambda: &HyperVector,
    theta: &ParamVector,
    batch_t: Option<&[usize]>,
    batch_v: Option<&[usize]>,
    gamma: Option<f64>,
) -> Result<(f64, Vec<f64>)> {
    let gt = train_grad(problem, theta, &lambda.values, batch_t)?;
    let mut gv = base_grad(&problem.model, theta, &problem.val, batch_v, &problem.spec)?;
    if let Some(g) = gamma {
        gv = clip(&gv, g);
    }
    let delta: Vec<f64> = gt.iter().zip(&gv).map(|(a, b)| a - b).collect();
    let d2 = delta.iter().map(|x| x * x).sum::<f64>();
    let hyper = match problem.spec.decay {
        DecayMode::None => vec![0.0; lambda.len()],
        DecayMode::PerParameter => delta
            .iter()
            .zip(&lambda.values)
            .zip(&theta.values)
            .map(|((dl, l), t)| 2.0 * dl * l.exp() * t)
            .collect(),
    };
    Ok((d2, hyper))
}

/// Builds the inner trajectory segment θ_{t−depth} → θ_t on a tape and
/// returns the final per-segment iterate vars. Records are the retained
/// steps, oldest first.
fn replay_segment(
    tape: &Tape,
    problem: &Problem,
    la: Option<&[Var]>,
    records: &[StepRecord],
    theta_end: &ParamVector,
) -> Result<Vec<Var>> {
    let segments = problem.model.segments();
    let start = match records.first() {
        Some(r) => FlatVector::new(r.theta_start.clone(), segments.clone())?,
        None => theta_end.clone(),
    };
    let mut th = start.bind(tape, true)?;
    for rec in records {
        let r = risk_graph(
            tape,
            &problem.model,
            &th,
            la,
            &problem.train,
            rec.batch_t.as_deref(),
            &problem.spec,
            true,
        )?;
        let th_refs: Vec<&Var> = th.iter().collect();
        let g = tape.grad(&r, &th_refs, true)?;
        let mut next = Vec::with_capacity(th.len());
        for (i, seg) in segments.iter().enumerate() {
            let mut v = th[i].sub(&g[i].scale(rec.eta)?)?;
            if let Some(noise) = &rec.noise {
                let nv = crate::diffcore::Value {
                    shape: seg.shape.clone(),
                    data: noise[seg.start..seg.start + seg.len()].to_vec(),
                };
                v = v.add(&tape.constant(nv)?)?;
            }
            next.push(v);
        }
        th = next;
    }
    Ok(th)
}

fn lambda_grad_or_zero(
    tape: &Tape,
    out: &Var,
    la: &Option<Vec<Var>>,
    lambda: &HyperVector,
) -> Result<Vec<f64>> {
    match la {
        None => Ok(vec![0.0; lambda.len()]),
        Some(la) => {
            let refs: Vec<&Var> = la.iter().collect();
            let g = tape.grad(out, &refs, false)?;
            let parts: Vec<_> = g.iter().map(|v| v.value()).collect();
            Ok(lambda.flatten(&parts))
        }
    }
}

/// Truncated incoherence summand: replays `records` (the last `depth`
/// inner updates) and differentiates d² at θ_t with respect to λ through
/// both the decay partials and the replayed trajectory.
fn replayed_summand(
    problem: &Problem,
    lambda: &HyperVector,
    records: &[StepRecord],
    theta: &ParamVector,
    batch_t: Option<&[usize]>,
    batch_v: Option<&[usize]>,
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let la = match problem.spec.decay {
        DecayMode::PerParameter => Some(lambda.bind(&tape, true)?),
        DecayMode::None => None,
    };
    let th = replay_segment(&tape, problem, la.as_deref(), records, theta)?;
    let th_refs: Vec<&Var> = th.iter().collect();
    let rt = risk_graph(
        &tape, &problem.model, &th, la.as_deref(), &problem.train, batch_t, &problem.spec, true,
    )?;
    let gt = tape.grad(&rt, &th_refs, true)?;
    let rv = risk_graph(
        &tape, &problem.model, &th, None, &problem.val, batch_v, &problem.spec, false,
    )?;
    let gv = tape.grad(&rv, &th_refs, true)?;
    let mut d2: Option<Var> = None;
    for (a, b) in gt.iter().zip(&gv) {
        let term = a.sub(b)?.sqnorm()?;
        d2 = Some(match d2 {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    let d2 = d2.expect("at least one parameter segment");
    let value = d2.value().as_scalar();
    let hyper = lambda_grad_or_zero(&tape, &d2, &la, lambda)?;
    Ok((value, hyper))
}

/// Replays the retained trajectory and backpropagates the first-term
/// risk at θ_T to λ.
fn replayed_risk_hypergrad(
    problem: &Problem,
    lambda: &HyperVector,
    records: &[StepRecord],
    theta: &ParamVector,
    first_term: FirstTerm,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let la = match problem.spec.decay {
        DecayMode::PerParameter => Some(lambda.bind(&tape, true)?),
        DecayMode::None => None,
    };
    let th = replay_segment(&tape, problem, la.as_deref(), records, theta)?;
    let (data, include_decay) = match first_term {
        FirstTerm::Validation => (&problem.val, false),
        FirstTerm::Training => (&problem.train, true),
    };
    let r = risk_graph(
        &tape, &problem.model, &th, la.as_deref(), data, None, &problem.spec, include_decay,
    )?;
    lambda_grad_or_zero(&tape, &r, &la, lambda)
}

/// One-double-backward hypergradient of the first-term risk at θ_T:
/// ∂R̂/∂λ − η_last·(∂²R̂_T/∂λ∂θ)ᵀ·∇_θR̂, with ∇_θR̂ detached.
pub fn t1t2_val_hypergrad(
    problem: &Problem,
    lambda: &HyperVector,
    theta: &ParamVector,
    eta_last: f64,
    first_term: FirstTerm,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let la = match problem.spec.decay {
        DecayMode::PerParameter => Some(lambda.bind(&tape, true)?),
        DecayMode::None => None,
    };
    let th = theta.bind(&tape, true)?;
    let th_refs: Vec<&Var> = th.iter().collect();
    let (data, include_decay) = match first_term {
        FirstTerm::Validation => (&problem.val, false),
        FirstTerm::Training => (&problem.train, true),
    };
    let r = risk_graph(
        &tape, &problem.model, &th, la.as_deref(), data, None, &problem.spec, include_decay,
    )?;
    let direct = lambda_grad_or_zero(&tape, &r, &la, lambda)?;
    let gr = tape.grad(&r, &th_refs, false)?;
    let rt = risk_graph(
        &tape, &problem.model, &th, la.as_deref(), &problem.train, None, &problem.spec, true,
    )?;
    let gt = tape.grad(&rt, &th_refs, true)?;
    let mut dot: Option<Var> = None;
    for (g, adj) in gt.iter().zip(&gr) {
        let term = g.dot(&tape.constant(adj.value())?)?;
        dot = Some(match dot {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    let mixed = lambda_grad_or_zero(&tape, &dot.expect("nonempty"), &la, lambda)?;
    Ok(direct
        .iter()
        .zip(&mixed)
        .map(|(d, m)| d - eta_last * m)
        .collect())
}

fn draw_batch(
    data: &Dataset,
    rng: &mut ChaCha12Rng,
    minibatch: Option<usize>,
) -> Option<Vec<usize>> {
    minibatch.map(|h| data.sample_without_replacement(rng, h.min(data.len())))
}

fn param_vector(problem: &Problem, values: Vec<f64>) -> Result<ParamVector> {
    Ok(FlatVector::new(values, problem.model.segments())?)
}

/// Runs one inner trajectory for one chain, accumulating X and Y and the
/// first-term hypergradient. `collect_d2` disables the regularizer work
/// entirely (the ζ = 0 path).
fn run_inner(
    problem: &Problem,
    cfg: &HyperOptConfig,
    lambda: &HyperVector,
    ctx: &mut ChainCtx,
    collect_d2: bool,
) -> Result<InnerRun> {
    let m = problem.model.param_count();
    let tau = match &cfg.inner_opt {
        InnerOpt::Sgld { tau } => Some(problem.tau(*tau)),
        _ => None,
    };
    let cap = cfg.truncation.capacity();
    let mut records: Vec<StepRecord> = Vec::new();
    let mut high_water = 0usize;
    ctx.state.x = vec![0.0; lambda.len()];
    ctx.state.y = 0.0;
    for t in 0..cfg.inner_steps {
        let batch_t = draw_batch(&problem.train, &mut ctx.batch_rng, cfg.minibatch);
        let batch_v = draw_batch(&problem.val, &mut ctx.batch_rng, cfg.minibatch);
        let theta = param_vector(problem, ctx.state.theta.clone())?;
        if collect_d2 {
            let depth = cfg.truncation.depth_at(t);
            let (d2, hyper) = if depth == 0 {
                incoherence_summand(
                    problem, lambda, &theta, batch_t.as_deref(), batch_v.as_deref(),
                    cfg.clip_gamma,
                )?
            } else {
                let from = records.len() - depth;
                replayed_summand(
                    problem, lambda, &records[from..], &theta,
                    batch_t.as_deref(), batch_v.as_deref(),
                )?
            };
            if !d2.is_finite() {
                return Err(HyperOptError::NonFinite("incoherence summand"));
            }
            finite(&hyper, "incoherence hypergradient")?;
            ctx.state.accumulate(d2, &hyper, cfg.zeta);
        }
        let g = train_grad(problem, &theta, &lambda.values, batch_t.as_deref())?;
        finite(&g, "inner gradient")?;
        let noise = tau.map(|tau| {
            let sd = (2.0 * cfg.eta / tau).sqrt();
            (0..m)
                .map(|_| sd * ctx.state.rng.sample::<f64, _>(StandardNormal))
                .collect::<Vec<f64>>()
        });
        match &mut ctx.adam {
            Some(adam) => adam.step(&mut ctx.state.theta, &g),
            None => {
                for i in 0..m {
                    ctx.state.theta[i] -= cfg.eta * g[i];
                    if let Some(z) = &noise {
                        ctx.state.theta[i] += z[i];
                    }
                }
            }
        }
        ctx.state.t += 1;
        if cap > 0 {
            records.push(StepRecord {
                theta_start: theta.values,
                noise,
                eta: cfg.eta,
                batch_t,
            });
            if records.len() > cap {
                records.remove(0);
            }
            high_water = high_water.max(records.len());
        }
    }
    let theta = param_vector(problem, ctx.state.theta.clone())?;
    let risk_hyper = match cfg.val_hypergrad {
        ValHypergrad::T1T2 => {
            let eta_last = match &cfg.inner_opt {
                InnerOpt::Adam { lr } => *lr,
                _ => cfg.eta,
            };
            t1t2_val_hypergrad(problem, lambda, &theta, eta_last, cfg.first_term)?
        }
        ValHypergrad::Truncated => {
            let depth = match cfg.truncation {
                Truncation::K(k) => k.min(cfg.inner_steps),
                Truncation::Window(_) => unreachable!("rejected by validate"),
            };
            let from = records.len() - depth.min(records.len());
            replayed_risk_hypergrad(problem, lambda, &records[from..], &theta, cfg.first_term)?
        }
    };
    finite(&risk_hyper, "risk hypergradient")?;
    let (data, include_decay) = match cfg.first_term {
        FirstTerm::Validation => (&problem.val, false),
        FirstTerm::Training => (&problem.train, true),
    };
    let first_term_risk = risk_eval(
        &problem.model,
        &theta,
        data,
        None,
        Some(lambda),
        &problem.spec,
        include_decay,
    )?;
    Ok(InnerRun {
        x: ctx.state.x.clone(),
        y: ctx.state.y,
        risk_hyper,
        first_term_risk,
        window_high_water: high_water,
    })
}

fn make_chains(problem: &Problem, cfg: &HyperOptConfig, seed: u64) -> Result<Vec<ChainCtx>> {
    (0..cfg.chains)
        .map(|c| {
            let mut init_rng = chain_rng(seed, "theta0/outer-0", c);
            let theta = sample_params(&problem.model, problem.init, &mut init_rng)?;
            Ok(ChainCtx {
                state: ChainState::new(
                    theta.values,
                    problem.lambda0.len(),
                    chain_rng(seed, "sgld-noise", c),
                ),
                batch_rng: chain_rng(seed, "batch", c),
                adam: match &cfg.inner_opt {
                    InnerOpt::Adam { lr } => Some(Adam::new(problem.model.param_count(), *lr)),
                    _ => None,
                },
            })
        })
        .collect()
}

fn reinit_chain(
    problem: &Problem,
    cfg: &HyperOptConfig,
    seed: u64,
    outer: usize,
    c: usize,
    ctx: &mut ChainCtx,
) -> Result<()> {
    let mut init_rng = chain_rng(seed, &format!("theta0/outer-{outer}"), c);
    ctx.state.theta = sample_params(&problem.model, problem.init, &mut init_rng)?.values;
    ctx.state.t = 0;
    if let InnerOpt::Adam { lr } = &cfg.inner_opt {
        ctx.adam = Some(Adam::new(problem.model.param_count(), *lr));
    }
    Ok(())
}

enum OuterState {
    Gd { lr: f64 },
    Rms(RmsProp),
}

impl OuterState {
    fn new(outer: OuterOpt, dim: usize) -> Self {
        match outer {
            OuterOpt::GradientDescent { lr } => OuterState::Gd { lr },
            OuterOpt::RmsProp { lr } => OuterState::Rms(RmsProp::new(dim, lr)),
        }
    }

    fn step(&mut self, lambda: &mut [f64], grad: &[f64]) {
        match self {
            OuterState::Gd { lr } => {
                for (l, g) in lambda.iter_mut().zip(grad) {
                    *l -= *lr * g;
                }
            }
            OuterState::Rms(r) => r.step(lambda, grad),
        }
    }
}

fn mean_of(parts: &[Vec<f64>]) -> Vec<f64> {
    let n = parts.len() as f64;
    let mut out = vec![0.0; parts[0].len()];
    for p in parts {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v / n;
        }
    }
    out
}

fn evaluate_record(
    problem: &Problem,
    cfg: &HyperOptConfig,
    thetas: &[ParamVector],
    outer: usize,
    seed: u64,
    y: f64,
    evaluate: bool,
) -> Result<HistoryRecord> {
    let classify = matches!(problem.val.labels, Labels::Class(_));
    let mut rec = HistoryRecord {
        outer_step: outer,
        seed,
        objective_kind: cfg.objective_label().into(),
        zeta: cfg.zeta,
        k: cfg.truncation.capacity(),
        c: cfg.chains,
        val_loss: None,
        val_acc: None,
        test_loss: None,
        test_acc: None,
        y,
        sqrt_y: y.sqrt(),
        gen_error_estimate: None,
    };
    if !evaluate {
        return Ok(rec);
    }
    let n = thetas.len() as f64;
    let mut val_loss = 0.0;
    let mut val_acc = 0.0;
    let mut test_loss = None;
    let mut test_acc = 0.0;
    for theta in thetas {
        val_loss +=
            risk_eval(&problem.model, theta, &problem.val, None, None, &problem.spec, false)? / n;
        if classify {
            val_acc += crate::models::accuracy(&problem.model, theta, &problem.val)? / n;
        }
        if let Some(test) = &problem.test {
            *test_loss.get_or_insert(0.0) +=
                risk_eval(&problem.model, theta, test, None, None, &problem.spec, false)? / n;
            if classify {
                test_acc += crate::models::accuracy(&problem.model, theta, test)? / n;
            }
        }
    }
    rec.val_loss = Some(val_loss);
    rec.val_acc = classify.then_some(val_acc);
    rec.test_loss = test_loss;
    rec.test_acc = (classify && test_loss.is_some()).then_some(test_acc);
    rec.gen_error_estimate = test_loss.map(|t| t - val_loss);
    Ok(rec)
}

/// Offline outer loop (one update per inner run). With a single chain
/// this is the base algorithm; multiple chains average the accumulator
/// ratio X_c/√(Y_c + ε) and the first-term hypergradient across chains.
pub fn optimize(problem: &Problem, cfg: &HyperOptConfig, seed: u64) -> Result<OptimizeResult> {
    cfg.validate()?;
    problem.validate()?;
    let mut lambda = problem.lambda0.clone();
    let mut chains = make_chains(problem, cfg, seed)?;
    let mut outer_state = OuterState::new(cfg.outer, lambda.len());
    let mut history = Vec::with_capacity(cfg.outer_steps);
    let mut theta_norms = Vec::with_capacity(cfg.outer_steps);
    let mut high_water = 0usize;
    for outer in 0..cfg.outer_steps {
        if cfg.reinit_inner && outer > 0 {
            for (c, ctx) in chains.iter_mut().enumerate() {
                reinit_chain(problem, cfg, seed, outer, c, ctx)?;
            }
        }
        let mut grads = Vec::with_capacity(chains.len());
        let mut y_mean = 0.0;
        let mut thetas = Vec::with_capacity(chains.len());
        for ctx in chains.iter_mut() {
            let run = run_inner(problem, cfg, &lambda, ctx, cfg.zeta > 0.0)?;
            high_water = high_water.max(run.window_high_water);
            y_mean += run.y / cfg.chains as f64;
            let denom = (run.y + cfg.y_floor).sqrt();
            let g: Vec<f64> = run
                .risk_hyper
                .iter()
                .zip(&run.x)
                .map(|(r, x)| r + x / denom)
                .collect();
            grads.push(g);
            thetas.push(param_vector(problem, ctx.state.theta.clone())?);
        }
        let g = mean_of(&grads);
        finite(&g, "outer gradient")?;
        outer_state.step(&mut lambda.values, &g);
        finite(&lambda.values, "hyperparameters")?;
        let evaluate = (outer + 1) % cfg.eval_every == 0 || outer + 1 == cfg.outer_steps;
        theta_norms.push(thetas[0].norm());
        history.push(evaluate_record(
            problem, cfg, &thetas, outer, seed, y_mean, evaluate,
        )?);
    }
    Ok(OptimizeResult {
        theta: param_vector(problem, chains[0].state.theta.clone())?,
        lambda,
        history,
        theta_norms,
        window_high_water: high_water,
    })
}

/// Online variant: λ moves during the inner trajectory. Each inner step
/// applies ζ·∇̃_λ‖∇R̂_T − ∇R̂_V‖ (the unsquared norm), skipped when the
/// norm falls below the floor; the first-term hypergradient is applied
/// once per outer step as usual. Chains advance in lockstep.
pub fn optimize_online(
    problem: &Problem,
    cfg: &HyperOptConfig,
    seed: u64,
) -> Result<OptimizeResult> {
    cfg.validate()?;
    problem.validate()?;
    if cfg.truncation.capacity() > 0 {
        return Err(HyperOptError::Config(
            "the online algorithm uses depth-0 summands".into(),
        ));
    }
    let mut lambda = problem.lambda0.clone();
    let mut chains = make_chains(problem, cfg, seed)?;
    let mut outer_state = OuterState::new(cfg.outer, lambda.len());
    let mut history = Vec::with_capacity(cfg.outer_steps);
    let mut theta_norms = Vec::with_capacity(cfg.outer_steps);
    let tau = match &cfg.inner_opt {
        InnerOpt::Sgld { tau } => Some(problem.tau(*tau)),
        _ => None,
    };
    let m = problem.model.param_count();
    for outer in 0..cfg.outer_steps {
        if cfg.reinit_inner && outer > 0 {
            for (c, ctx) in chains.iter_mut().enumerate() {
                reinit_chain(problem, cfg, seed, outer, c, ctx)?;
            }
        }
        let mut y_mean = 0.0;
        for _t in 0..cfg.inner_steps {
            let mut reg_grad = vec![0.0; lambda.len()];
            let mut any = false;
            for ctx in chains.iter_mut() {
                let batch_t = draw_batch(&problem.train, &mut ctx.batch_rng, cfg.minibatch);
                let batch_v = draw_batch(&problem.val, &mut ctx.batch_rng, cfg.minibatch);
                let theta = param_vector(problem, ctx.state.theta.clone())?;
                if cfg.zeta > 0.0 {
                    let (d2, hyper) = incoherence_summand(
                        problem, &lambda, &theta, batch_t.as_deref(), batch_v.as_deref(),
                        cfg.clip_gamma,
                    )?;
                    y_mean += d2 / cfg.chains as f64;
                    let norm = d2.sqrt();
                    if norm >= cfg.y_floor {
                        any = true;
                        for (r, h) in reg_grad.iter_mut().zip(&hyper) {
                            *r += cfg.zeta * h / (2.0 * norm * cfg.chains as f64);
                        }
                    }
                }
                let g = train_grad(problem, &theta, &lambda.values, batch_t.as_deref())?;
                finite(&g, "inner gradient")?;
                match &mut ctx.adam {
                    Some(adam) => adam.step(&mut ctx.state.theta, &g),
                    None => {
                        for i in 0..m {
                            ctx.state.theta[i] -= cfg.eta * g[i];
                        }
                        if let Some(tau) = tau {
                            let sd = (2.0 * cfg.eta / tau).sqrt();
                            for i in 0..m {
                                ctx.state.theta[i] +=
                                    sd * ctx.state.rng.sample::<f64, _>(StandardNormal);
                            }
                        }
                    }
                }
                ctx.state.t += 1;
            }
            if any {
                finite(&reg_grad, "outer gradient")?;
                outer_state.step(&mut lambda.values, &reg_grad);
            }
        }
        let mut risk_hypers = Vec::with_capacity(chains.len());
        let mut thetas = Vec::with_capacity(chains.len());
        for ctx in chains.iter() {
            let theta = param_vector(problem, ctx.state.theta.clone())?;
            let eta_last = match &cfg.inner_opt {
                InnerOpt::Adam { lr } => *lr,
                _ => cfg.eta,
            };
            risk_hypers.push(t1t2_val_hypergrad(
                problem, &lambda, &theta, eta_last, cfg.first_term,
            )?);
            thetas.push(theta);
        }
        let g = mean_of(&risk_hypers);
        finite(&g, "outer gradient")?;
        outer_state.step(&mut lambda.values, &g);
        finite(&lambda.values, "hyperparameters")?;
        let evaluate = (outer + 1) % cfg.eval_every == 0 || outer + 1 == cfg.outer_steps;
        theta_norms.push(thetas[0].norm());
        history.push(evaluate_record(
            problem, cfg, &thetas, outer, seed, y_mean, evaluate,
        )?);
    }
    Ok(OptimizeResult {
        theta: param_vector(problem, chains[0].state.theta.clone())?,
        lambda,
        history,
        theta_norms,
        window_high_water: 0,
    })
}

/// One-sample estimate of the objective at a fixed λ, sharing all RNG
/// streams with [`outer_gradient`]; finite differences of this function
/// validate the hypergradient.
pub fn objective_estimate(
    problem: &Problem,
    cfg: &HyperOptConfig,
    lambda: &HyperVector,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    problem.validate()?;
    let mut chains = make_chains(problem, cfg, seed)?;
    let run = run_inner(problem, cfg, lambda, &mut chains[0], true)?;
    Ok(run.first_term_risk + cfg.zeta * (run.y + cfg.y_floor).sqrt())
}

/// The single-chain outer gradient at a fixed λ (first-term
/// hypergradient plus X/√(Y + ε)), with the same streams as
/// [`objective_estimate`].
pub fn outer_gradient(
    problem: &Problem,
    cfg: &HyperOptConfig,
    lambda: &HyperVector,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    problem.validate()?;
    let mut chains = make_chains(problem, cfg, seed)?;
    let run = run_inner(problem, cfg, lambda, &mut chains[0], true)?;
    let denom = (run.y + cfg.y_floor).sqrt();
    Ok(run
        .risk_hyper
        .iter()
        .zip(&run.x)
        .map(|(r, x)| r + x / denom)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{make_model, LossSpec};
    use crate::util::central_diff;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn ridge_data(rng: &mut ChaCha12Rng, n: usize) -> Dataset {
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| 1.5 * x + 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Dataset::new(xs, n, 1, Labels::Real(ys)).unwrap()
    }

    /// 1-D ridge toy: one weight, one decay hyperparameter.
    fn ridge_problem(seed: u64, lam: f64) -> Problem {
        let model = Model::LinearRegression { dim: 1 };
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let train = ridge_data(&mut rng, 12);
        let val = ridge_data(&mut rng, 8);
        Problem {
            model,
            spec: LossSpec::squared_error().with_decay(),
            train,
            val,
            test: None,
            init: InitDistribution::Gaussian { sd: 0.5 },
            lambda0: FlatVector::new(vec![lam], model.segments()).unwrap(),
        }
    }

    fn full_depth_cfg(t: usize, zeta: f64) -> HyperOptConfig {
        HyperOptConfig {
            zeta,
            inner_steps: t,
            eta: 0.05,
            truncation: Truncation::K(t),
            inner_opt: InnerOpt::Sgd,
            outer: OuterOpt::GradientDescent { lr: 0.05 },
            outer_steps: 3,
            val_hypergrad: ValHypergrad::Truncated,
            ..Default::default()
        }
    }

    #[test]
    fn full_depth_hypergradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let problem = ridge_problem(seed, -0.6 + seed as f64 * 0.05);
            let cfg = full_depth_cfg(3, 0.3);
            let lam = problem.lambda0.clone();
            let segs = problem.model.segments();
            let g = outer_gradient(&problem, &cfg, &lam, seed).unwrap();
            let fd = central_diff(
                |l| {
                    let lv = FlatVector::new(l.to_vec(), segs.clone()).unwrap();
                    objective_estimate(&problem, &cfg, &lv, seed).unwrap()
                },
                &lam.values,
                1e-5,
            );
            let rel = (g[0] - fd[0]).abs() / fd[0].abs().max(1e-8);
            assert!(rel < 1e-3, "seed {seed}: grad {} vs fd {}", g[0], fd[0]);
        }
    }

    #[test]
    fn accumulator_ratio_is_gradient_of_sqrt_regularizer() {
        let problem = ridge_problem(4, 0.2);
        let cfg = full_depth_cfg(3, 0.7);
        let lam = problem.lambda0.clone();
        let segs = problem.model.segments();
        let mut chains = make_chains(&problem, &cfg, 4).unwrap();
        let run = run_inner(&problem, &cfg, &lam, &mut chains[0], true).unwrap();
        let ratio = run.x[0] / (run.y + cfg.y_floor).sqrt();
        let fd = central_diff(
            |l| {
                let lv = FlatVector::new(l.to_vec(), segs.clone()).unwrap();
                let mut ch = make_chains(&problem, &cfg, 4).unwrap();
                let r = run_inner(&problem, &cfg, &lv, &mut ch[0], true).unwrap();
                cfg.zeta * (r.y + cfg.y_floor).sqrt()
            },
            &lam.values,
            1e-5,
        );
        assert_relative_eq!(ratio, fd[0], max_relative = 1e-4);
    }

    #[test]
    fn depth_zero_summand_matches_tape() {
        let problem = ridge_problem(9, 0.3);
        let (_, theta) =
            make_model(problem.model, InitDistribution::Gaussian { sd: 1.0 }, 2).unwrap();
        let lam = problem.lambda0.clone();
        let (d2a, ha) = incoherence_summand(&problem, &lam, &theta, None, None, None).unwrap();
        let (d2b, hb) = replayed_summand(&problem, &lam, &[], &theta, None, None).unwrap();
        assert_relative_eq!(d2a, d2b, epsilon = 1e-12, max_relative = 1e-12);
        assert_relative_eq!(ha[0], hb[0], epsilon = 1e-12, max_relative = 1e-12);
    }

    #[test]
    fn depth_zero_partials_match_finite_differences() {
        let problem = ridge_problem(3, -0.2);
        let (_, theta) =
            make_model(problem.model, InitDistribution::Gaussian { sd: 1.0 }, 5).unwrap();
        let lam = problem.lambda0.clone();
        let segs = problem.model.segments();
        let (_, hyper) = incoherence_summand(&problem, &lam, &theta, None, None, None).unwrap();
        let fd = central_diff(
            |l| {
                let lv = FlatVector::new(l.to_vec(), segs.clone()).unwrap();
                incoherence_summand(&problem, &lv, &theta, None, None, None).unwrap().0
            },
            &lam.values,
            1e-6,
        );
        assert_relative_eq!(hyper[0], fd[0], max_relative = 1e-6, epsilon = 1e-9);
    }

    #[test]
    fn t1t2_closed_form_for_decay() {
        let problem = ridge_problem(6, 0.4);
        let (_, theta) =
            make_model(problem.model, InitDistribution::Gaussian { sd: 1.0 }, 7).unwrap();
        let lam = problem.lambda0.clone();
        let eta = 0.03;
        let hv = t1t2_val_hypergrad(&problem, &lam, &theta, eta, FirstTerm::Validation).unwrap();
        let gv = base_grad(&problem.model, &theta, &problem.val, None, &problem.spec).unwrap();
        let expected = -eta * lam.values[0].exp() * theta.values[0] * gv[0];
        assert_relative_eq!(hv[0], expected, epsilon = 1e-12, max_relative = 1e-10);
    }

    #[test]
    fn identical_splits_without_decay_are_coherent() {
        let mut problem = ridge_problem(1, 0.0);
        problem.spec = LossSpec::squared_error();
        problem.val = problem.train.clone();
        problem.lambda0 = FlatVector::plain(vec![0.0]).unwrap();
        let (_, theta) =
            make_model(problem.model, InitDistribution::Gaussian { sd: 1.0 }, 1).unwrap();
        let (d2, hyper) =
            incoherence_summand(&problem, &problem.lambda0.clone(), &theta, None, None, None)
                .unwrap();
        assert_eq!(d2, 0.0);
        assert_eq!(hyper, vec![0.0]);
    }

    #[test]
    fn window_matches_equivalent_depth() {
        let problem = ridge_problem(11, 0.1);
        let mut a = full_depth_cfg(3, 0.4);
        a.val_hypergrad = ValHypergrad::T1T2;
        let mut b = a.clone();
        b.truncation = Truncation::Window(3);
        let ra = optimize(&problem, &a, 11).unwrap();
        let rb = optimize(&problem, &b, 11).unwrap();
        assert_eq!(ra.lambda.values, rb.lambda.values);
    }

    #[test]
    fn identical_chains_average_to_single_chain() {
        let mut problem = ridge_problem(13, -0.1);
        problem.init = InitDistribution::PointMass { value: 0.4 };
        let mut cfg = full_depth_cfg(2, 0.3);
        cfg.val_hypergrad = ValHypergrad::T1T2;
        cfg.truncation = Truncation::K(0);
        let single = optimize(&problem, &cfg, 13).unwrap();
        cfg.chains = 4;
        let multi = optimize(&problem, &cfg, 13).unwrap();
        assert_relative_eq!(
            single.lambda.values[0],
            multi.lambda.values[0],
            epsilon = 1e-12
        );
    }

    #[test]
    fn zeta_zero_is_plain_risk_descent() {
        let mut problem = ridge_problem(17, 0.2);
        problem.init = InitDistribution::PointMass { value: 0.7 };
        let mut cfg = full_depth_cfg(3, 0.0);
        cfg.val_hypergrad = ValHypergrad::T1T2;
        cfg.truncation = Truncation::K(0);
        let res = optimize(&problem, &cfg, 17).unwrap();
        let OuterOpt::GradientDescent { lr } = cfg.outer else { unreachable!() };
        let mut lam = problem.lambda0.clone();
        for _ in 0..cfg.outer_steps {
            let mut theta = vec![0.7];
            for _ in 0..cfg.inner_steps {
                let tv = param_vector(&problem, theta.clone()).unwrap();
                let g = train_grad(&problem, &tv, &lam.values, None).unwrap();
                theta[0] -= cfg.eta * g[0];
            }
            let tv = param_vector(&problem, theta).unwrap();
            let hv =
                t1t2_val_hypergrad(&problem, &lam, &tv, cfg.eta, FirstTerm::Validation).unwrap();
            lam.values[0] -= lr * hv[0];
        }
        assert_eq!(res.lambda.values, lam.values);
    }

    #[test]
    fn online_skips_vanishing_summands() {
        let mut problem = ridge_problem(19, -50.0);
        problem.init = InitDistribution::PointMass { value: 0.5 };
        problem.val = problem.train.clone();
        let mut cfg = full_depth_cfg(4, 0.5);
        cfg.val_hypergrad = ValHypergrad::T1T2;
        cfg.truncation = Truncation::K(0);
        let with_reg = optimize_online(&problem, &cfg, 19).unwrap();
        cfg.zeta = 0.0;
        let without = optimize_online(&problem, &cfg, 19).unwrap();
        assert_eq!(with_reg.lambda.values, without.lambda.values);
    }

    #[test]
    fn retained_window_is_bounded_by_truncation_depth() {
        let problem = ridge_problem(23, 0.0);
        let mut cfg = full_depth_cfg(6, 0.2);
        cfg.truncation = Truncation::K(2);
        cfg.val_hypergrad = ValHypergrad::T1T2;
        let res = optimize(&problem, &cfg, 23).unwrap();
        assert_eq!(res.window_high_water, 2);
    }

    #[test]
    fn langevin_runs_are_reproducible() {
        let problem = ridge_problem(29, 0.1);
        let mut cfg = full_depth_cfg(3, 0.2);
        cfg.inner_opt = InnerOpt::Sgld { tau: None };
        let a = optimize(&problem, &cfg, 29).unwrap();
        let b = optimize(&problem, &cfg, 29).unwrap();
        let c = optimize(&problem, &cfg, 30).unwrap();
        assert_eq!(a.lambda.values, b.lambda.values);
        assert_ne!(a.lambda.values, c.lambda.values);
    }

    #[test]
    fn history_records_serialize_to_csv() {
        let problem = ridge_problem(31, 0.0);
        let mut cfg = full_depth_cfg(2, 0.3);
        cfg.val_hypergrad = ValHypergrad::T1T2;
        let res = optimize(&problem, &cfg, 31).unwrap();
        assert_eq!(res.history.len(), cfg.outer_steps);
        assert!(res.history.iter().all(|r| r.objective_kind == "eq5"));
        assert!(res.history.iter().all(|r| r.val_loss.is_some()));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        write_history_csv(&res.history, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("outer_step,seed,objective_kind"));
        assert_eq!(text.lines().count(), cfg.outer_steps + 1);
    }

    #[test]
    fn config_rejections() {
        let base = HyperOptConfig::default();
        let bad = |f: &dyn Fn(&mut HyperOptConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(&|c| c.zeta = -0.1));
        assert!(bad(&|c| c.eta = 0.0));
        assert!(bad(&|c| c.truncation = Truncation::Window(0)));
        assert!(bad(&|c| {
            c.inner_opt = InnerOpt::Adam { lr: 0.1 };
            c.truncation = Truncation::K(1);
        }));
        assert!(bad(&|c| {
            c.truncation = Truncation::Window(4);
            c.val_hypergrad = ValHypergrad::Truncated;
        }));
        assert!(bad(&|c| c.y_floor = 0.0));
        assert!(base.validate().is_ok());

        let mut problem = ridge_problem(1, 0.0);
        problem.lambda0 = FlatVector::plain(vec![0.0, 0.0]).unwrap();
        assert!(problem.validate().is_err());

        let problem = ridge_problem(1, 0.0);
        let mut cfg = full_depth_cfg(2, 0.1);
        cfg.truncation = Truncation::K(1);
        cfg.val_hypergrad = ValHypergrad::T1T2;
        assert!(optimize_online(&problem, &cfg, 1).is_err());
    }
}
