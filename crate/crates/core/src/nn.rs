//! MLPs, Adam and the training loop with a plateau learning-rate schedule,
//! early stopping and validation-based architecture selection.

use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::rng::derived;
use crate::{Error, Result};

const PREDICT_CHUNK: usize = 4096;

/// Network inputs: a feature matrix and, for mask-aware networks, the 0/1
/// missingness matrix (1 = missing).
#[derive(Debug, Clone, PartialEq)]
pub struct Inputs {
    pub x: Tensor,
    pub mask: Option<Tensor>,
}

impl Inputs {
    pub fn features(x: Tensor) -> Self {
        Inputs { x, mask: None }
    }

    pub fn masked(x: Tensor, mask: Tensor) -> Result<Self> {
        if x.dim() != mask.dim() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: mask.len(),
            });
        }
        Ok(Inputs { x, mask: Some(mask) })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn select(&self, rows: &[usize]) -> Inputs {
        Inputs {
            x: self.x.select(Axis(0), rows),
            mask: self.mask.as_ref().map(|m| m.select(Axis(0), rows)),
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> Inputs {
        Inputs {
            x: self.x.slice(s![start..end, ..]).to_owned(),
            mask: self.mask.as_ref().map(|m| m.slice(s![start..end, ..]).to_owned()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub inputs: Inputs,
    pub y: Array1<f64>,
}

impl LabeledData {
    pub fn new(inputs: Inputs, y: Array1<f64>) -> Result<Self> {
        if inputs.n() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.n(),
                got: y.len(),
            });
        }
        Ok(LabeledData { inputs, y })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
}

/// A model whose forward pass can be recorded on a [`Graph`].
pub trait Network: Clone {
    /// Parameter tensors in a fixed order; gradient slots follow this order.
    fn params(&self) -> Vec<&Tensor>;

    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    /// Which parameters the optimiser may update.
    fn trainable(&self) -> Vec<bool> {
        vec![true; self.params().len()]
    }

    /// Records the forward pass and returns the n×1 prediction node.
    fn forward(&self, g: &mut Graph, inputs: &Inputs) -> Result<NodeId>;

    fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn predict(&self, inputs: &Inputs) -> Result<Array1<f64>> {
        let n = inputs.n();
        let mut out = Array1::zeros(n);
        let mut start = 0;
        while start < n {
            let end = (start + PREDICT_CHUNK).min(n);
            let mut g = Graph::new();
            let pred = self.forward(&mut g, &inputs.slice(start, end))?;
            out.slice_mut(s![start..end]).assign(&g.value(pred).column(0));
            start = end;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// fan_in × fan_out
    pub w: Tensor,
    /// 1 × fan_out
    pub b: Tensor,
}

/// Fully connected ReLU network with a scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

pub const MLP_WIDTH: usize = 100;

impl MlpParams {
    /// He-normal weights (std `sqrt(2 / fan_in)`), zero biases.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden_layers: usize, width: usize, rng: &mut R) -> Self {
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(width, hidden_layers));
        dims.push(1);
        let layers = dims
            .windows(2)
            .map(|w| {
                let sd = (2.0 / w[0] as f64).sqrt();
                Layer {
                    w: Array2::from_shape_fn((w[0], w[1]), |_| sd * rng.sample::<f64, _>(StandardNormal)),
                    b: Array2::zeros((1, w[1])),
                }
            })
            .collect();
        MlpParams { layers }
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    /// Records the MLP on top of `input`, with parameter slots starting at `offset`.
    pub fn forward_from(&self, g: &mut Graph, input: NodeId, offset: usize) -> Result<NodeId> {
        let mut h = input;
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let w = g.param(offset + 2 * k, layer.w.clone())?;
            let b = g.param(offset + 2 * k + 1, layer.b.clone())?;
            h = g.matmul(h, w)?;
            h = g.add_bias(h, b)?;
            if k < last {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}

impl Network for MlpParams {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }

    fn forward(&self, g: &mut Graph, inputs: &Inputs) -> Result<NodeId> {
        if inputs.x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: inputs.x.ncols(),
            });
        }
        let x = g.constant(inputs.x.clone())?;
        self.forward_from(g, x, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update. Missing gradients count as zero; frozen
/// parameters are left untouched.
pub fn adam_step(
    state: &mut AdamState,
    params: Vec<&mut Tensor>,
    grads: &[Option<Tensor>],
    lr: f64,
    trainable: &[bool],
) {
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (k, p) in params.into_iter().enumerate() {
        if !trainable[k] {
            continue;
        }
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        match &grads[k] {
            Some(g) => {
                ndarray::Zip::from(&mut *p).and(&mut *m).and(&mut *v).and(g).for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            }
            None => {
                ndarray::Zip::from(&mut *p).and(&mut *m).and(&mut *v).for_each(|p, m, v| {
                    *m *= b1;
                    *v *= b2;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_drop_factor: f64,
    pub lr_patience: usize,
    pub lr_min_delta: f64,
    pub es_patience: usize,
    pub es_min_delta: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            lr_drop_factor: 5.0,
            lr_patience: 2,
            lr_min_delta: 1e-4,
            es_patience: 10,
            es_min_delta: 1e-4,
            batch_size: 200,
            max_epochs: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr0 > 0.0
            && self.lr_drop_factor > 0.0
            && self.lr_patience > 0
            && self.lr_min_delta >= 0.0
            && self.es_patience > 0
            && self.es_min_delta >= 0.0
            && self.batch_size > 0
            && self.max_epochs > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid training config {self:?}")))
        }
    }
}

/// Divides the learning rate each time `patience` consecutive epochs fail to
/// improve the best training loss by at least `min_delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    patience: usize,
    min_delta: f64,
    best: f64,
    bad: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        PlateauScheduler {
            patience,
            min_delta,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Returns true when the learning rate should drop now.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss > self.best - self.min_delta {
            self.bad += 1;
        } else {
            self.bad = 0;
        }
        self.best = self.best.min(loss);
        if self.bad >= self.patience {
            self.bad = 0;
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EsDecision {
    /// New best score: keep these parameters.
    Improved,
    Continue,
    Stop,
}

/// Stops once more than `patience` consecutive evaluations fail to beat the
/// best score by `min_delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: f64,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopping {
            patience,
            min_delta,
            best: f64::NEG_INFINITY,
            bad: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, score: f64) -> EsDecision {
        if score < self.best + self.min_delta {
            self.bad += 1;
        } else {
            self.bad = 0;
        }
        let improved = score > self.best;
        if improved {
            self.best = score;
        }
        if self.bad > self.patience {
            EsDecision::Stop
        } else if improved {
            EsDecision::Improved
        } else {
            EsDecision::Continue
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_r2: f64,
    pub lr: f64,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for rec in history {
        w.serialize(rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<N> {
    /// Parameters from the best validation evaluation.
    pub model: N,
    /// One record per evaluation; epoch 0 is the initialisation.
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_r2: f64,
}

/// `1 − SSE / SST`.
pub fn r2_score(y_true: &Array1<f64>, y_pred: &Array1<f64>) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::DimensionMismatch {
            expected: y_true.len(),
            got: y_pred.len(),
        });
    }
    if y_true.len() < 2 {
        return Err(Error::InvalidArgument("r2 needs at least two values".into()));
    }
    let mean = y_true.mean().unwrap_or(0.0);
    let sst: f64 = y_true.iter().map(|y| (y - mean).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let sse: f64 = y_true.iter().zip(y_pred).map(|(y, p)| (y - p).powi(2)).sum();
    Ok(1.0 - sse / sst)
}

pub fn mse(y_true: &Array1<f64>, y_pred: &Array1<f64>) -> f64 {
    y_true.iter().zip(y_pred).map(|(y, p)| (y - p).powi(2)).sum::<f64>() / y_true.len().max(1) as f64
}

fn tag_epoch(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFiniteValue { context } => Error::NonFiniteValue {
            context: format!("epoch {epoch}: {context}"),
        },
        other => other,
    }
}

fn evaluate<N: Network>(model: &N, train: &LabeledData, val: &LabeledData) -> Result<(f64, f64)> {
    let train_mse = mse(&train.y, &model.predict(&train.inputs)?);
    if !train_mse.is_finite() {
        return Err(Error::NonFiniteValue {
            context: "training loss".into(),
        });
    }
    let val_r2 = r2_score(&val.y, &model.predict(&val.inputs)?)?;
    Ok((train_mse, val_r2))
}

/// Mini-batch Adam on the squared loss.
///
/// The initial parameters are evaluated first (epoch 0). After every epoch
/// the full training MSE drives the learning-rate schedule and the
/// validation R² drives early stopping; the parameters of the best
/// validation evaluation are returned.
pub fn train<N: Network>(init: N, train: &LabeledData, val: &LabeledData, cfg: &TrainConfig) -> Result<TrainOutcome<N>> {
    cfg.validate()?;
    let mut model = init;
    let trainable = model.trainable();
    let n_params = trainable.len();
    let mut adam = AdamState::new(&model.params());
    let mut rng = derived(cfg.seed, "shuffle");
    let mut sched = PlateauScheduler::new(cfg.lr_patience, cfg.lr_min_delta);
    let mut stop = EarlyStopping::new(cfg.es_patience, cfg.es_min_delta);
    let mut lr = cfg.lr0;

    let (train_mse, val_r2) = evaluate(&model, train, val).map_err(|e| tag_epoch(0, e))?;
    sched.observe(train_mse);
    stop.observe(val_r2);
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_mse,
        val_r2,
        lr,
    }];
    let mut best = model.clone();
    let mut best_epoch = 0;

    let mut order: Vec<usize> = (0..train.n()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(cfg.batch_size) {
            let batch = train.inputs.select(rows);
            let target = train.y.select(Axis(0), rows).insert_axis(Axis(1));
            let mut g = Graph::new();
            let step = (|| {
                let pred = model.forward(&mut g, &batch)?;
                let t = g.constant(target)?;
                let loss = g.mse_loss(pred, t)?;
                g.backward(loss, n_params)
            })();
            let grads = step.map_err(|e| tag_epoch(epoch, e))?;
            adam_step(&mut adam, model.params_mut(), &grads, lr, &trainable);
        }
        let (train_mse, val_r2) = evaluate(&model, train, val).map_err(|e| tag_epoch(epoch, e))?;
        history.push(EpochRecord {
            epoch,
            train_mse,
            val_r2,
            lr,
        });
        if sched.observe(train_mse) {
            lr /= cfg.lr_drop_factor;
        }
        match stop.observe(val_r2) {
            EsDecision::Improved => {
                best = model.clone();
                best_epoch = epoch;
            }
            EsDecision::Continue => {}
            EsDecision::Stop => break,
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
        best_val_r2: stop.best(),
    })
}

#[derive(Debug, Clone)]
pub struct Selection<N> {
    /// Every candidate's training run, in candidate order.
    pub outcomes: Vec<TrainOutcome<N>>,
    pub chosen: usize,
}

impl<N> Selection<N> {
    pub fn best(&self) -> &TrainOutcome<N> {
        &self.outcomes[self.chosen]
    }
}

/// Trains every candidate and keeps the best validation R². Scores within
/// `cfg.es_min_delta` of the best count as ties, resolved towards fewer
/// parameters.
pub fn select_architecture<N: Network>(
    candidates: Vec<N>,
    train_data: &LabeledData,
    val: &LabeledData,
    cfg: &TrainConfig,
) -> Result<Selection<N>> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate architectures".into()));
    }
    let outcomes = candidates
        .into_iter()
        .map(|c| train(c, train_data, val, cfg))
        .collect::<Result<Vec<_>>>()?;
    let top = outcomes.iter().map(|o| o.best_val_r2).fold(f64::NEG_INFINITY, f64::max);
    let chosen = (0..outcomes.len())
        .filter(|&i| outcomes[i].best_val_r2 >= top - cfg.es_min_delta)
        .min_by_key(|&i| (outcomes[i].model.n_params(), i))
        .expect("at least one candidate reaches the top score");
    Ok(Selection { outcomes, chosen })
}
