//! Models, losses, empirical risk, and dataset handling.
//!
//! Parameters are flat vectors with named segment maps; on a tape they are
//! bound per segment with the natural shapes (weight matrices, bias
//! vectors) so the AD core never needs reshape or slice primitives.

use std::fmt::Write as _;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Value, Var};
use crate::util::stream_rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dataset error: {0}")]
    Data(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Named contiguous slice of a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat real vector with a segment map partitioning `[0, len)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatVector {
    pub values: Vec<f64>,
    pub segments: Vec<Segment>,
}

pub type ParamVector = FlatVector;
pub type HyperVector = FlatVector;

impl FlatVector {
    pub fn new(values: Vec<f64>, segments: Vec<Segment>) -> Result<Self> {
        if values.is_empty() {
            return Err(ModelError::Shape("empty parameter vector".into()));
        }
        if !values.iter().all(|x| x.is_finite()) {
            return Err(ModelError::Shape("non-finite parameter entries".into()));
        }
        let mut cursor = 0;
        for seg in &segments {
            if seg.start != cursor {
                return Err(ModelError::Shape(format!(
                    "segment {} starts at {}, expected {}",
                    seg.name, seg.start, cursor
                )));
            }
            cursor += seg.len();
        }
        if cursor != values.len() {
            return Err(ModelError::Shape(format!(
                "segments cover {cursor} of {} entries",
                values.len()
            )));
        }
        Ok(FlatVector { values, segments })
    }

    /// Single unnamed segment covering the whole vector.
    pub fn plain(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(
            values,
            vec![Segment { name: "values".into(), start: 0, shape: vec![n] }],
        )
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn segment_values(&self, seg: &Segment) -> &[f64] {
        &self.values[seg.start..seg.start + seg.len()]
    }

    /// Binds each segment as a tape leaf with its natural shape.
    pub fn bind(&self, tape: &Tape, requires_grad: bool) -> Result<Vec<Var>> {
        self.segments
            .iter()
            .map(|seg| {
                let v = Value {
                    shape: seg.shape.clone(),
                    data: self.segment_values(seg).to_vec(),
                };
                let leaf = if requires_grad { tape.input(v) } else { tape.constant(v) };
                Ok(leaf?)
            })
            .collect()
    }

    /// Flattens per-segment gradient values back into vector layout.
    pub fn flatten(&self, parts: &[Value]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for p in parts {
            out.extend_from_slice(&p.data);
        }
        debug_assert_eq!(out.len(), self.len());
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Real(Vec<f64>),
    Class(Vec<usize>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Real(v) => v.len(),
            Labels::Class(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Real(v) => Labels::Real(idx.iter().map(|&i| v[i]).collect()),
            Labels::Class(v) => Labels::Class(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Row-major input matrix plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub labels: Labels,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, rows: usize, cols: usize, labels: Labels) -> Result<Self> {
        if rows == 0 {
            return Err(ModelError::Data("empty dataset".into()));
        }
        if inputs.len() != rows * cols || labels.len() != rows {
            return Err(ModelError::Data(format!(
                "inconsistent dataset: {} values for {rows}x{cols}, {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Dataset { inputs, rows, cols, labels })
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.cols..(i + 1) * self.cols]
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let mut inputs = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            inputs.extend_from_slice(self.row(i));
        }
        Dataset::new(inputs, idx.len(), self.cols, self.labels.select(idx))
    }

    /// New dataset keeping only the given feature columns, in order.
    pub fn select_features(&self, features: &[usize]) -> Result<Dataset> {
        let mut inputs = Vec::with_capacity(self.rows * features.len());
        for i in 0..self.rows {
            let row = self.row(i);
            for &f in features {
                inputs.push(row[f]);
            }
        }
        Dataset::new(inputs, self.rows, features.len(), self.labels.clone())
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.cols != other.cols {
            return Err(ModelError::Data("column count mismatch in concat".into()));
        }
        let mut inputs = self.inputs.clone();
        inputs.extend_from_slice(&other.inputs);
        let labels = match (&self.labels, &other.labels) {
            (Labels::Real(a), Labels::Real(b)) => {
                Labels::Real(a.iter().chain(b).cloned().collect())
            }
            (Labels::Class(a), Labels::Class(b)) => {
                Labels::Class(a.iter().chain(b).cloned().collect())
            }
            _ => return Err(ModelError::Data("label kind mismatch in concat".into())),
        };
        Dataset::new(inputs, self.rows + other.rows, self.cols, labels)
    }

    /// `h` distinct row indices, uniform without replacement.
    pub fn sample_without_replacement<R: Rng>(&self, rng: &mut R, h: usize) -> Vec<usize> {
        assert!(h <= self.rows);
        rand::seq::index::sample(rng, self.rows, h).into_vec()
    }

    pub fn sample_with_replacement<R: Rng>(&self, rng: &mut R, h: usize) -> Vec<usize> {
        (0..h).map(|_| rng.gen_range(0..self.rows)).collect()
    }

    fn input_value(&self, idx: Option<&[usize]>) -> Value {
        match idx {
            None => Value::matrix(self.rows, self.cols, self.inputs.clone()),
            Some(idx) => {
                let mut data = Vec::with_capacity(idx.len() * self.cols);
                for &i in idx {
                    data.extend_from_slice(self.row(i));
                }
                Value::matrix(idx.len(), self.cols, data)
            }
        }
    }

    fn real_labels(&self, idx: Option<&[usize]>) -> Result<Vec<f64>> {
        match &self.labels {
            Labels::Real(v) => Ok(match idx {
                None => v.clone(),
                Some(idx) => idx.iter().map(|&i| v[i]).collect(),
            }),
            Labels::Class(_) => Err(ModelError::Data(
                "regression loss needs real labels".into(),
            )),
        }
    }

    fn class_labels(&self, idx: Option<&[usize]>) -> Result<Vec<usize>> {
        match &self.labels {
            Labels::Class(v) => Ok(match idx {
                None => v.clone(),
                Some(idx) => idx.iter().map(|&i| v[i]).collect(),
            }),
            Labels::Real(_) => Err(ModelError::Data(
                "classification loss needs class labels".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseLoss {
    SquaredError,
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayMode {
    None,
    /// One decay hyperparameter per model parameter; penalty
    /// ½ Σᵢ exp(λᵢ) θᵢ².
    PerParameter,
}

#[derive(Debug, Clone)]
pub struct LossSpec {
    pub base: BaseLoss,
    pub decay: DecayMode,
    /// Clip range for bound reporting on unbounded losses; training always
    /// uses the unclipped loss.
    pub loss_range: Option<(f64, f64)>,
    /// Gibbs temperature; `None` means the sampler default τ = |S|.
    pub tau: Option<f64>,
}

impl LossSpec {
    pub fn squared_error() -> Self {
        LossSpec { base: BaseLoss::SquaredError, decay: DecayMode::None, loss_range: None, tau: None }
    }

    pub fn cross_entropy() -> Self {
        LossSpec {
            base: BaseLoss::SoftmaxCrossEntropy,
            decay: DecayMode::None,
            loss_range: None,
            tau: None,
        }
    }

    pub fn with_decay(mut self) -> Self {
        self.decay = DecayMode::PerParameter;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((a, b)) = self.loss_range {
            if a >= b {
                return Err(ModelError::Data(format!("loss range [{a}, {b}] empty")));
            }
        }
        if let Some(t) = self.tau {
            if t <= 0.0 {
                return Err(ModelError::Data(format!("temperature {t} must be positive")));
            }
        }
        Ok(())
    }

    pub fn tau_for(&self, sample_size: usize) -> f64 {
        self.tau.unwrap_or(sample_size as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    /// No intercept; inputs and labels are zero-mean in the settings that
    /// use this.
    LinearRegression { dim: usize },
    LinearSoftmax { dim: usize, classes: usize },
    Mlp { dim: usize, hidden: usize, classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitDistribution {
    Gaussian { sd: f64 },
    PointMass { value: f64 },
}

impl Model {
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            Model::LinearRegression { dim } => vec![("weights", vec![dim])],
            Model::LinearSoftmax { dim, classes } => {
                vec![("weights", vec![classes, dim]), ("bias", vec![classes])]
            }
            Model::Mlp { dim, hidden, classes } => vec![
                ("w1", vec![hidden, dim]),
                ("b1", vec![hidden]),
                ("w2", vec![classes, hidden]),
                ("b2", vec![classes]),
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn segments(&self) -> Vec<Segment> {
        let mut out = Vec::new();
        let mut cursor = 0;
        for (name, shape) in self.param_shapes() {
            let len: usize = shape.iter().product();
            out.push(Segment { name: name.into(), start: cursor, shape });
            cursor += len;
        }
        out
    }

    /// Network output for a batch: a prediction vector for regression,
    /// a logit matrix for classifiers.
    pub fn output(&self, theta: &[Var], x: &Var) -> Result<Var> {
        Ok(match self {
            Model::LinearRegression { .. } => x.matvec(&theta[0])?,
            Model::LinearSoftmax { .. } => {
                x.matmul_nt(&theta[0])?.add_bcast_row(&theta[1])?
            }
            Model::Mlp { .. } => {
                let h = x
                    .matmul_nt(&theta[0])?
                    .add_bcast_row(&theta[1])?
                    .relu()?;
                h.matmul_nt(&theta[2])?.add_bcast_row(&theta[3])?
            }
        })
    }
}

pub fn make_model(
    model: Model,
    init: InitDistribution,
    seed: u64,
) -> Result<(Model, ParamVector)> {
    let mut rng = stream_rng(seed, "init");
    let theta = sample_params(&model, init, &mut rng)?;
    Ok((model, theta))
}

/// Draws θ₀ from the initial distribution using the caller's stream.
pub fn sample_params(
    model: &Model,
    init: InitDistribution,
    rng: &mut impl Rng,
) -> Result<ParamVector> {
    let m = model.param_count();
    if m == 0 {
        return Err(ModelError::InvalidDims(format!("{model:?}")));
    }
    let values = match init {
        InitDistribution::PointMass { value } => vec![value; m],
        InitDistribution::Gaussian { sd } => (0..m)
            .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    };
    FlatVector::new(values, model.segments())
}

/// Base-loss risk gradient (no decay term). The linear model/loss pairs
/// use closed forms; everything else goes through the tape. Both paths
/// agree to rounding, which the tests pin down.
pub fn base_grad(
    model: &Model,
    theta: &ParamVector,
    data: &Dataset,
    idx: Option<&[usize]>,
    spec: &LossSpec,
) -> Result<Vec<f64>> {
    match (model, spec.base) {
        (Model::LinearRegression { dim }, BaseLoss::SquaredError) => {
            let d = *dim;
            let y = data.real_labels(idx)?;
            let n = y.len();
            let mut g = vec![0.0; d];
            let row_at = |i: usize| match idx {
                None => data.row(i),
                Some(ix) => data.row(ix[i]),
            };
            for i in 0..n {
                let row = row_at(i);
                let r = row.iter().zip(&theta.values).map(|(x, t)| x * t).sum::<f64>() - y[i];
                for (gj, xj) in g.iter_mut().zip(row) {
                    *gj += xj * r;
                }
            }
            let scale = 2.0 / n as f64;
            g.iter_mut().for_each(|v| *v *= scale);
            Ok(g)
        }
        (Model::LinearSoftmax { dim, classes }, BaseLoss::SoftmaxCrossEntropy) => {
            let (d, k) = (*dim, *classes);
            let labels = data.class_labels(idx)?;
            let n = labels.len();
            let (w, b) = theta.values.split_at(k * d);
            let mut gw = vec![0.0; k * d];
            let mut gb = vec![0.0; k];
            let mut p = vec![0.0; k];
            for i in 0..n {
                let row = match idx {
                    None => data.row(i),
                    Some(ix) => data.row(ix[i]),
                };
                for c in 0..k {
                    p[c] = b[c]
                        + w[c * d..(c + 1) * d]
                            .iter()
                            .zip(row)
                            .map(|(wj, xj)| wj * xj)
                            .sum::<f64>();
                }
                let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for c in 0..k {
                    p[c] = (p[c] - m).exp();
                    z += p[c];
                }
                for c in 0..k {
                    p[c] /= z;
                }
                p[labels[i]] -= 1.0;
                for c in 0..k {
                    let pc = p[c];
                    if pc == 0.0 {
                        continue;
                    }
                    gb[c] += pc;
                    for (gj, xj) in gw[c * d..(c + 1) * d].iter_mut().zip(row) {
                        *gj += pc * xj;
                    }
                }
            }
            let scale = 1.0 / n as f64;
            gw.iter_mut().for_each(|v| *v *= scale);
            gb.iter_mut().for_each(|v| *v *= scale);
            gw.extend_from_slice(&gb);
            Ok(gw)
        }
        _ => grad_risk(model, theta, data, idx, None, spec, false),
    }
}

/// Decay penalty ½ Σᵢ exp(λᵢ) θᵢ², summed over matching segments.
fn decay_penalty(theta: &[Var], lambda: &[Var]) -> Result<Var> {
    if theta.len() != lambda.len() {
        return Err(ModelError::Shape(format!(
            "{} parameter segments vs {} decay segments",
            theta.len(),
            lambda.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (th, la) in theta.iter().zip(lambda) {
        let term = la.exp()?.mul(&th.mul(th)?)?.sum()?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    Ok(acc.unwrap().scale(0.5)?)
}

/// Empirical risk as a tape expression: mean loss over the (mini)batch,
/// plus the decay penalty when requested.
pub fn risk_graph(
    tape: &Tape,
    model: &Model,
    theta: &[Var],
    lambda: Option<&[Var]>,
    data: &Dataset,
    idx: Option<&[usize]>,
    spec: &LossSpec,
    include_decay: bool,
) -> Result<Var> {
    spec.validate()?;
    let x = tape.constant(data.input_value(idx))?;
    let out = model.output(theta, &x)?;
    let base = match spec.base {
        BaseLoss::SquaredError => {
            let y = tape.constant(Value::vector(data.real_labels(idx)?))?;
            let n = y.shape()[0];
            out.sub(&y)?.sqnorm()?.scale(1.0 / n as f64)?
        }
        BaseLoss::SoftmaxCrossEntropy => {
            out.softmax_cross_entropy_rows(&data.class_labels(idx)?)?
        }
    };
    match (spec.decay, include_decay) {
        (DecayMode::PerParameter, true) => {
            let lambda = lambda.ok_or_else(|| {
                ModelError::Shape("per-parameter decay needs a hypervector".into())
            })?;
            Ok(base.add(&decay_penalty(theta, lambda)?)?)
        }
        _ => Ok(base),
    }
}

pub fn risk_eval(
    model: &Model,
    theta: &ParamVector,
    data: &Dataset,
    idx: Option<&[usize]>,
    lambda: Option<&HyperVector>,
    spec: &LossSpec,
    include_decay: bool,
) -> Result<f64> {
    let tape = Tape::new();
    let th = theta.bind(&tape, false)?;
    let la = match lambda {
        Some(l) => Some(l.bind(&tape, false)?),
        None => None,
    };
    let r = risk_graph(&tape, model, &th, la.as_deref(), data, idx, spec, include_decay)?;
    Ok(r.value().as_scalar())
}

pub fn loss_eval(
    model: &Model,
    theta: &ParamVector,
    x: &[f64],
    y: &Labels,
    lambda: Option<&HyperVector>,
    spec: &LossSpec,
    include_decay: bool,
) -> Result<f64> {
    let single = Dataset::new(x.to_vec(), 1, x.len(), y.clone())?;
    risk_eval(model, theta, &single, None, lambda, spec, include_decay)
}

/// ∇_θ R̂ as a flat vector.
pub fn grad_risk(
    model: &Model,
    theta: &ParamVector,
    data: &Dataset,
    idx: Option<&[usize]>,
    lambda: Option<&HyperVector>,
    spec: &LossSpec,
    include_decay: bool,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let th = theta.bind(&tape, true)?;
    let la = match lambda {
        Some(l) => Some(l.bind(&tape, false)?),
        None => None,
    };
    let r = risk_graph(&tape, model, &th, la.as_deref(), data, idx, spec, include_decay)?;
    let th_refs: Vec<&Var> = th.iter().collect();
    let grads = tape.grad(&r, &th_refs, false)?;
    let parts: Vec<Value> = grads.iter().map(|g| g.value()).collect();
    Ok(theta.flatten(&parts))
}

/// Top-1 accuracy; argmax ties break toward the lowest class index.
pub fn accuracy(model: &Model, theta: &ParamVector, data: &Dataset) -> Result<f64> {
    let tape = Tape::new();
    let th = theta.bind(&tape, false)?;
    let x = tape.constant(data.input_value(None))?;
    let logits = model.output(&th, &x)?.value();
    let labels = data.class_labels(None)?;
    if logits.shape.len() != 2 {
        return Err(ModelError::Shape("accuracy needs a classifier".into()));
    }
    let k = logits.shape[1];
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data[i * k..(i + 1) * k];
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Synthetic feature-selection data: `d` i.i.d. standard-normal features.
/// In the null version the response is independent noise; in the signal
/// version y = (x⁽⁰⁾ + x⁽¹⁾ + 2·N(0,1))/√6, so Var(y) = 1 either way.
pub fn generate_freedman(
    signal: bool,
    n_total: usize,
    d: usize,
    test_size: usize,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    if n_total % 2 != 0 {
        return Err(ModelError::Data("n_total must be even".into()));
    }
    if signal && d < 2 {
        return Err(ModelError::InvalidDims("signal version needs d >= 2".into()));
    }
    let mut rng = stream_rng(seed, if signal { "freedman-signal" } else { "freedman-null" });
    let total = n_total + test_size;
    let mut inputs = Vec::with_capacity(total * d);
    let mut ys = Vec::with_capacity(total);
    for _ in 0..total {
        let start = inputs.len();
        for _ in 0..d {
            inputs.push(rng.sample::<f64, _>(StandardNormal));
        }
        let y = if signal {
            let noise: f64 = rng.sample::<f64, _>(StandardNormal);
            (inputs[start] + inputs[start + 1] + noise * 2.0) / 6.0_f64.sqrt()
        } else {
            rng.sample::<f64, _>(StandardNormal)
        };
        ys.push(y);
    }
    let half = n_total / 2;
    let slice = |lo: usize, hi: usize| {
        Dataset::new(
            inputs[lo * d..hi * d].to_vec(),
            hi - lo,
            d,
            Labels::Real(ys[lo..hi].to_vec()),
        )
    };
    Ok((slice(0, half)?, slice(half, n_total)?, slice(n_total, total)?))
}

/// `classes`-component Gaussian mixture in `dim` dimensions; component
/// means drawn once from N(0, spread²·I), points from N(mean, I).
pub fn generate_gaussian_classes(
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = stream_rng(seed, "gaussian-classes");
    let means: Vec<f64> = (0..classes * dim)
        .map(|_| spread * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let n = classes * per_class;
    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        for _ in 0..per_class {
            for j in 0..dim {
                inputs.push(means[c * dim + j] + rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(c);
        }
    }
    Dataset::new(inputs, n, dim, Labels::Class(labels))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    Ok(buf)
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// IDX image file (magic 0x00000803); pixels scaled to [0, 1].
pub fn load_idx_images(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let buf = read_file(path)?;
    let bad = |why: &str| ModelError::Data(format!("{}: {}", path.display(), why));
    if buf.len() < 16 || be_u32(&buf, 0) != 0x0000_0803 {
        return Err(bad("not an IDX image file"));
    }
    let n = be_u32(&buf, 4) as usize;
    let rows = be_u32(&buf, 8) as usize;
    let cols = be_u32(&buf, 12) as usize;
    let pixels = n * rows * cols;
    if buf.len() != 16 + pixels {
        return Err(bad("truncated image data"));
    }
    let data = buf[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((data, n, rows * cols))
}

/// IDX label file (magic 0x00000801).
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let buf = read_file(path)?;
    let bad = |why: &str| ModelError::Data(format!("{}: {}", path.display(), why));
    if buf.len() < 8 || be_u32(&buf, 0) != 0x0000_0801 {
        return Err(bad("not an IDX label file"));
    }
    let n = be_u32(&buf, 4) as usize;
    if buf.len() != 8 + n {
        return Err(bad("truncated label data"));
    }
    Ok(buf[8..].iter().map(|&b| b as usize).collect())
}

/// Loads the standard four-file MNIST layout from a directory.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let load = |img: &str, lab: &str| -> Result<Dataset> {
        let (data, n, px) = load_idx_images(&dir.join(img))?;
        let labels = load_idx_labels(&dir.join(lab))?;
        if labels.len() != n {
            return Err(ModelError::Data(format!(
                "{img}: {n} images but {} labels",
                labels.len()
            )));
        }
        Dataset::new(data, n, px, Labels::Class(labels))
    };
    Ok((
        load("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?,
        load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?,
    ))
}

/// CSV with a header row; last column is the label, all real-valued.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| ModelError::Data(format!("{}: {e}", path.display())))?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut cols = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| ModelError::Data(format!("{}: {e}", path.display())))?;
        let row: std::result::Result<Vec<f64>, _> =
            rec.iter().map(|s| s.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| ModelError::Data(format!("{}: {e}", path.display())))?;
        if row.len() < 2 {
            return Err(ModelError::Data(format!("{}: need >= 2 columns", path.display())));
        }
        match cols {
            None => cols = Some(row.len() - 1),
            Some(c) if c != row.len() - 1 => {
                return Err(ModelError::Data(format!("{}: ragged rows", path.display())));
            }
            _ => {}
        }
        labels.push(*row.last().unwrap());
        inputs.extend_from_slice(&row[..row.len() - 1]);
    }
    let cols = cols.ok_or_else(|| ModelError::Data(format!("{}: no data rows", path.display())))?;
    Dataset::new(inputs, labels.len(), cols, Labels::Real(labels))
}

/// Writes a dataset back out in the same CSV convention.
pub fn save_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut s = String::new();
    for j in 0..data.cols {
        let _ = write!(s, "x{j},");
    }
    s.push_str("y\n");
    for i in 0..data.rows {
        for v in data.row(i) {
            let _ = write!(s, "{v},");
        }
        match &data.labels {
            Labels::Real(y) => {
                let _ = writeln!(s, "{}", y[i]);
            }
            Labels::Class(y) => {
                let _ = writeln!(s, "{}", y[i]);
            }
        }
    }
    std::fs::write(path, s)
        .map_err(|source| ModelError::Io { path: path.display().to_string(), source })
}
