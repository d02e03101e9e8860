//! NeuMiss imputation block chained with an MLP and trained end to end.
//!
//! The block unrolls a Neumann series over the observed coordinates with
//! one shared weight matrix and a residual connection from the centred
//! input to every iterate. Initialised from masked moments, it computes the
//! MCAR conditional mean up to an error that shrinks geometrically with
//! depth.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::imputers::{masked_moments, MaskedMoments};
use crate::linalg::top_eigenvalue;
use crate::nn::{select_architecture, Inputs, LabeledData, MlpParams, Network, Selection, TrainConfig, MLP_WIDTH};
use crate::rng::derived;
use crate::synth::MaskedDataset;
use crate::{Error, Result};

pub const DEFAULT_DEPTHS: [usize; 2] = [5, 15];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuMissParams {
    /// 1 × d
    pub mu: Tensor,
    /// d × d, shared by every iteration
    pub w: Tensor,
    /// d × d
    pub w_mix: Tensor,
    /// 1 × 1
    pub c: Tensor,
    pub depth: usize,
}

impl NeuMissParams {
    pub fn dim(&self) -> usize {
        self.mu.ncols()
    }
}

/// `mu = μ̂`, `W = I − (2/L̂)Σ̂`, `W_mix = Σ̂`, `c = 2/L̂` with `L̂` the top
/// eigenvalue of `Σ̂`.
pub fn init_neumiss(moments: &MaskedMoments, depth: usize) -> Result<NeuMissParams> {
    let sigma = moments.sigma_hat.as_array();
    let d = sigma.nrows();
    let top = top_eigenvalue(&moments.sigma_hat);
    if !(top > 0.0 && top.is_finite()) {
        return Err(Error::DegenerateVariance(top));
    }
    let c = 2.0 / top;
    Ok(NeuMissParams {
        mu: Array1::from(moments.mu_hat.clone()).insert_axis(ndarray::Axis(0)),
        w: Array2::eye(d) - sigma * c,
        w_mix: sigma.clone(),
        c: Array2::from_elem((1, 1), c),
        depth,
    })
}

/// Single-row imputation; observed coordinates are returned unchanged.
pub fn neumiss_impute(p: &NeuMissParams, x: ArrayView1<f64>, pattern: &[bool]) -> Array1<f64> {
    let d = p.dim();
    let obs: Array1<f64> = pattern.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
    let x0: Array1<f64> = (0..d).map(|j| if pattern[j] { 0.0 } else { x[j] }).collect();
    let mu = p.mu.row(0);
    let h0 = (&x0 - &mu) * &obs;
    let mut h = h0.clone();
    for _ in 0..p.depth {
        h = p.w.dot(&h) * &obs + &h0;
    }
    let fill = &mu + &(p.w_mix.dot(&h) * p.c[[0, 0]]);
    (0..d).map(|j| if pattern[j] { fill[j] } else { x0[j] }).collect()
}

/// Records the block on `g` with parameter slots 0..4; returns the n × d
/// imputed matrix.
pub fn impute_node(p: &NeuMissParams, g: &mut Graph, inputs: &Inputs) -> Result<NodeId> {
    let mask = inputs
        .mask
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("NeuMiss needs the missingness mask".into()))?;
    if inputs.x.ncols() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: inputs.x.ncols(),
        });
    }
    let observed = mask.mapv(|m| 1.0 - m);
    let x0 = &inputs.x * &observed;
    let mu = g.param(0, p.mu.clone())?;
    let w = g.param(1, p.w.clone())?;
    let w_mix = g.param(2, p.w_mix.clone())?;
    let c = g.param(3, p.c.clone())?;
    let x0 = g.constant(x0)?;
    let obs = g.constant(observed)?;
    let mis = g.constant(mask.clone())?;

    let neg_mu = g.scale_const(mu, -1.0)?;
    let centred = g.add_bias(x0, neg_mu)?;
    let h0 = g.mask_mul(centred, obs)?;
    let mut h = h0;
    for _ in 0..p.depth {
        let wh = g.matmul_t(h, w)?;
        let wh = g.mask_mul(wh, obs)?;
        h = g.add(wh, h0)?;
    }
    let mixed = g.matmul_t(h, w_mix)?;
    let mixed = g.scale(mixed, c)?;
    let fill = g.add_bias(mixed, mu)?;
    let fill = g.mask_mul(fill, mis)?;
    g.add(x0, fill)
}

/// NeuMiss block followed by an MLP on the imputed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuMissMlp {
    pub block: NeuMissParams,
    pub mlp: MlpParams,
    /// Keep the block at its initial values and train only the MLP.
    pub freeze_block: bool,
}

impl NeuMissMlp {
    pub fn new(block: NeuMissParams, mlp: MlpParams) -> Result<Self> {
        if mlp.input_dim() != block.dim() {
            return Err(Error::DimensionMismatch {
                expected: block.dim(),
                got: mlp.input_dim(),
            });
        }
        Ok(NeuMissMlp {
            block,
            mlp,
            freeze_block: false,
        })
    }

    pub fn impute(&self, inputs: &Inputs) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let out = impute_node(&self.block, &mut g, inputs)?;
        Ok(g.value(out).clone())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

impl Network for NeuMissMlp {
    fn params(&self) -> Vec<&Tensor> {
        let b = &self.block;
        let mut out = vec![&b.mu, &b.w, &b.w_mix, &b.c];
        out.extend(self.mlp.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let b = &mut self.block;
        let mut out = vec![&mut b.mu, &mut b.w, &mut b.w_mix, &mut b.c];
        out.extend(self.mlp.params_mut());
        out
    }

    fn trainable(&self) -> Vec<bool> {
        let mut out = vec![!self.freeze_block; 4];
        out.extend(std::iter::repeat_n(true, 2 * self.mlp.layers.len()));
        out
    }

    fn forward(&self, g: &mut Graph, inputs: &Inputs) -> Result<NodeId> {
        let imputed = impute_node(&self.block, g, inputs)?;
        self.mlp.forward_from(g, imputed, 4)
    }
}

/// Zero-filled values plus the 0/1 mask, as fed to the block.
pub fn masked_inputs(data: &MaskedDataset) -> LabeledData {
    LabeledData {
        inputs: Inputs {
            x: data.zero_filled(),
            mask: Some(data.mask_f64()),
        },
        y: data.y().clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeuMissOptions {
    pub depths: Vec<usize>,
    /// Hidden layers of the MLP placed after the block.
    pub hidden_layers: usize,
    pub width: usize,
    pub freeze_block: bool,
}

impl Default for NeuMissOptions {
    fn default() -> Self {
        NeuMissOptions {
            depths: DEFAULT_DEPTHS.to_vec(),
            hidden_layers: 2,
            width: MLP_WIDTH,
            freeze_block: false,
        }
    }
}

/// Initialises one model per depth from the masked moments of `train`,
/// trains each jointly and keeps the best on validation R².
pub fn train_neumiss(
    train: &MaskedDataset,
    val: &MaskedDataset,
    cfg: &TrainConfig,
    opts: &NeuMissOptions,
) -> Result<Selection<NeuMissMlp>> {
    let moments = masked_moments(train)?;
    let mut candidates = Vec::with_capacity(opts.depths.len());
    for &depth in &opts.depths {
        let block = init_neumiss(&moments, depth)?;
        let mut rng = derived(cfg.seed, &format!("neumiss-mlp-{depth}"));
        let mlp = MlpParams::new(train.d(), opts.hidden_layers, opts.width, &mut rng);
        let mut model = NeuMissMlp::new(block, mlp)?;
        model.freeze_block = opts.freeze_block;
        candidates.push(model);
    }
    select_architecture(candidates, &masked_inputs(train), &masked_inputs(val), cfg)
}
