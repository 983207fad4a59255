//! Inner-loop samplers: SGD, Langevin dynamics, and a differentially
//! private SGLD with its step-size certificate and accounting.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::models::ModelError;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },
    #[error("step size {eta} exceeds the privacy certificate limit {max}")]
    StepSizeViolation { eta: f64, max: f64 },
    #[error("epoch budget exceeded: {steps} steps of {h} on {s} examples")]
    EpochBudget { steps: usize, h: usize, s: usize },
    #[error("invalid privacy budget: {0}")]
    InvalidBudget(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, SamplerError>;

/// Inner step sizes, constant or per step.
#[derive(Debug, Clone, PartialEq)]
pub enum StepSchedule {
    Constant { eta: f64, steps: usize },
    PerStep(Vec<f64>),
}

impl StepSchedule {
    pub fn constant(eta: f64, steps: usize) -> Result<Self> {
        if eta <= 0.0 {
            return Err(SamplerError::InvalidSchedule(format!("eta {eta} <= 0")));
        }
        Ok(StepSchedule::Constant { eta, steps })
    }

    pub fn per_step(etas: Vec<f64>) -> Result<Self> {
        if etas.iter().any(|&e| e <= 0.0) {
            return Err(SamplerError::InvalidSchedule("non-positive step size".into()));
        }
        Ok(StepSchedule::PerStep(etas))
    }

    pub fn len(&self) -> usize {
        match self {
            StepSchedule::Constant { steps, .. } => *steps,
            StepSchedule::PerStep(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn eta(&self, t: usize) -> f64 {
        match self {
            StepSchedule::Constant { eta, .. } => *eta,
            StepSchedule::PerStep(v) => v[t],
        }
    }

    pub fn max_eta(&self) -> f64 {
        match self {
            StepSchedule::Constant { eta, .. } => *eta,
            StepSchedule::PerStep(v) => v.iter().cloned().fold(0.0, f64::max),
        }
    }
}

/// g / max(1, ‖g‖₂/γ): direction preserved, norm capped at γ.
pub fn clip(g: &[f64], gamma: f64) -> Vec<f64> {
    assert!(gamma > 0.0);
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    // Inside-ball comparison carries a relative slack of a few ulps so a
    // vector that has just been clipped is returned unchanged bit-exactly.
    if norm <= gamma * (1.0 + 1e-12) {
        return g.to_vec();
    }
    let s = norm / gamma;
    g.iter().map(|x| x / s).collect()
}

/// (ε, δ) budget for one chain of DP-SGLD on a dataset of size `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
    pub chains: usize,
    pub minibatch: usize,
    pub dataset_size: usize,
}

impl PrivacyBudget {
    pub fn new(
        epsilon: f64,
        delta: f64,
        chains: usize,
        minibatch: usize,
        dataset_size: usize,
    ) -> Result<Self> {
        let b = PrivacyBudget { epsilon, delta, chains, minibatch, dataset_size };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SamplerError::InvalidBudget(m));
        if !(self.epsilon > 0.0 && self.epsilon <= 0.5) {
            return fail(format!("epsilon {} outside (0, 1/2]", self.epsilon));
        }
        if !(self.delta > 0.0 && self.delta < self.epsilon) {
            return fail(format!("delta {} outside (0, epsilon)", self.delta));
        }
        if self.chains == 0 {
            return fail("chain count must be >= 1".into());
        }
        if self.minibatch == 0 || self.minibatch > self.dataset_size {
            return fail(format!(
                "minibatch {} outside [1, {}]",
                self.minibatch, self.dataset_size
            ));
        }
        Ok(())
    }
}

/// Largest certified step size: h²ε² / (s γ² log(1.25/δ)).
pub fn max_dp_step_size(budget: &PrivacyBudget, gamma: f64) -> Result<f64> {
    budget.validate()?;
    if gamma <= 0.0 {
        return Err(SamplerError::InvalidBudget(format!("gamma {gamma} <= 0")));
    }
    let h = budget.minibatch as f64;
    let s = budget.dataset_size as f64;
    Ok(h * h * budget.epsilon * budget.epsilon
        / (s * gamma * gamma * (1.25 / budget.delta).ln()))
}

/// Parallel composition over steps on disjoint minibatches: the budget is
/// the coordinate-wise max, not the sum.
pub fn compose_parallel(per_step: &[(f64, f64)]) -> (f64, f64) {
    per_step.iter().fold((0.0, 0.0), |(e, d), &(ei, di)| (e.max(ei), d.max(di)))
}

/// Total budget across `chains` independent chains: (Cε, Cδ).
pub fn account_privacy(budget: &PrivacyBudget) -> (f64, f64) {
    (
        budget.chains as f64 * budget.epsilon,
        budget.chains as f64 * budget.delta,
    )
}

/// One sampling trajectory plus the outer-loop accumulators that ride
/// along with it.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub theta: Vec<f64>,
    pub t: usize,
    pub rng: ChaCha12Rng,
    /// Accumulated hypergradient contribution, length = hyper dim.
    pub x: Vec<f64>,
    /// Accumulated squared-distance summands; never negative.
    pub y: f64,
}

impl ChainState {
    pub fn new(theta: Vec<f64>, hyper_dim: usize, rng: ChaCha12Rng) -> Self {
        ChainState { theta, t: 0, rng, x: vec![0.0; hyper_dim], y: 0.0 }
    }

    pub fn accumulate(&mut self, d2: f64, hypergrad: &[f64], zeta: f64) {
        debug_assert!(d2 >= 0.0);
        self.y += d2;
        for (x, g) in self.x.iter_mut().zip(hypergrad) {
            *x += 0.5 * zeta * g;
        }
    }
}

fn check_finite(g: &[f64], step: usize) -> Result<()> {
    if g.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(SamplerError::NonFiniteGradient { step })
    }
}

/// θ ← θ − η·g.
pub fn sgd_step(state: &mut ChainState, grad: &[f64], eta: f64) -> Result<()> {
    check_finite(grad, state.t)?;
    for (th, g) in state.theta.iter_mut().zip(grad) {
        *th -= eta * g;
    }
    state.t += 1;
    Ok(())
}

/// θ ← θ − η·g + z, z ∼ N(0, (2η/τ)·I). The default temperature τ = |S|
/// recovers the private sampler's noise scale 2η/s.
pub fn sgld_step(state: &mut ChainState, grad: &[f64], eta: f64, tau: f64) -> Result<()> {
    assert!(eta >= 0.0 && tau > 0.0);
    check_finite(grad, state.t)?;
    let sd = (2.0 * eta / tau).sqrt();
    for (th, g) in state.theta.iter_mut().zip(grad) {
        let z: f64 = state.rng.sample(StandardNormal);
        *th += -eta * g + sd * z;
    }
    state.t += 1;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DpSgldConfig {
    pub schedule: StepSchedule,
    pub gamma: f64,
    pub budget: PrivacyBudget,
    /// Runs past one epoch when set; the certificate is then void and the
    /// output says so.
    pub unsafe_multi_epoch: bool,
    pub record_trajectory: bool,
}

#[derive(Debug, Clone)]
pub struct DpSgldOutput {
    pub theta: Vec<f64>,
    pub trajectory: Vec<Vec<f64>>,
    pub certificate_valid: bool,
    /// Total (ε, δ) spent, per the (Cε, Cδ) chain accounting.
    pub spent: (f64, f64),
}

/// Algorithm: T steps, each on a fresh disjoint without-replacement
/// minibatch of size h; update −(η_t/h)·clip_γ(∇R̂(θ; S_J)) plus
/// N(0, 2η_t/s) noise per coordinate.
///
/// `grad_fn(θ, J)` returns the minibatch risk gradient; clipping applies
/// to that (minibatch-mean) gradient, not per example.
pub fn dp_sgld_run<F>(
    mut grad_fn: F,
    theta0: Vec<f64>,
    cfg: &DpSgldConfig,
    mut rng: ChaCha12Rng,
) -> Result<DpSgldOutput>
where
    F: FnMut(&[f64], &[usize]) -> std::result::Result<Vec<f64>, ModelError>,
{
    cfg.budget.validate()?;
    let steps = cfg.schedule.len();
    let h = cfg.budget.minibatch;
    let s = cfg.budget.dataset_size;
    let max_eta = max_dp_step_size(&cfg.budget, cfg.gamma)?;
    let worst = cfg.schedule.max_eta();
    if worst > max_eta {
        return Err(SamplerError::StepSizeViolation { eta: worst, max: max_eta });
    }
    let one_epoch = steps * h <= s;
    if !one_epoch && !cfg.unsafe_multi_epoch {
        return Err(SamplerError::EpochBudget { steps, h, s });
    }

    // One shuffled pass; consecutive chunks of h are pairwise disjoint
    // within an epoch. Multi-epoch (uncertified) reshuffles per epoch.
    let mut order: Vec<usize> = (0..s).collect();
    let mut pos = s; // force an initial shuffle
    let mut state = ChainState::new(theta0, 0, rng.clone());
    let mut trajectory = Vec::new();
    if cfg.record_trajectory {
        trajectory.push(state.theta.clone());
    }
    for t in 0..steps {
        if pos + h > s {
            shuffle(&mut order, &mut rng);
            pos = 0;
        }
        let batch = &order[pos..pos + h];
        pos += h;
        let g = grad_fn(&state.theta, batch)?;
        check_finite(&g, t)?;
        let clipped = clip(&g, cfg.gamma);
        let eta = cfg.schedule.eta(t);
        let sd = (2.0 * eta / s as f64).sqrt();
        for (th, c) in state.theta.iter_mut().zip(&clipped) {
            let z: f64 = state.rng.sample(StandardNormal);
            *th += -(eta / h as f64) * c + sd * z;
        }
        check_finite(&state.theta, t)?;
        if cfg.record_trajectory {
            trajectory.push(state.theta.clone());
        }
    }
    Ok(DpSgldOutput {
        theta: state.theta,
        trajectory,
        certificate_valid: one_epoch,
        spent: account_privacy(&cfg.budget),
    })
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha12Rng) {
    use rand::seq::SliceRandom;
    order.shuffle(rng);
}

/// Adam with the usual bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(dim: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            theta[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// RMSProp (no momentum), the outer-loop default.
#[derive(Debug, Clone)]
pub struct RmsProp {
    lr: f64,
    rho: f64,
    eps: f64,
    v: Vec<f64>,
}

impl RmsProp {
    pub fn new(dim: usize, lr: f64) -> Self {
        RmsProp { lr, rho: 0.9, eps: 1e-8, v: vec![0.0; dim] }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        for i in 0..theta.len() {
            self.v[i] = self.rho * self.v[i] + (1.0 - self.rho) * grad[i] * grad[i];
            theta[i] -= self.lr * grad[i] / (self.v[i].sqrt() + self.eps);
        }
    }
}
