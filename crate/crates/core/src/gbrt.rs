//! Least-squares gradient boosting with histogram splits and
//! missing-incorporated-in-attribute (MIA) routing: at every split the
//! missing rows are sent to whichever child gives the larger gain.

use serde::{Deserialize, Serialize};

use crate::synth::MaskedDataset;
use crate::{Error, Result};

const MISSING_BIN: u16 = u16::MAX;

/// Threshold of the split that sends every observed row left and every
/// missing row right.
pub const OBSERVED_VS_MISSING: f64 = f64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbrtConfig {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_depth: Option<usize>,
    pub max_leaf_nodes: Option<usize>,
    pub min_leaf: usize,
    pub n_bins: usize,
}

impl Default for GbrtConfig {
    fn default() -> Self {
        GbrtConfig {
            n_trees: 100,
            learning_rate: 0.1,
            max_depth: None,
            max_leaf_nodes: Some(31),
            min_leaf: 20,
            n_bins: 256,
        }
    }
}

impl GbrtConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.min_leaf > 0
            && (2..MISSING_BIN as usize).contains(&self.n_bins)
            && self.max_leaf_nodes.is_none_or(|m| m >= 2);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid GBRT config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        /// Observed values `<= threshold` go left.
        threshold: f64,
        missing_goes_left: bool,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn predict<F: Fn(usize) -> Option<f64>>(&self, value: F) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    missing_goes_left,
                    left,
                    right,
                } => {
                    let go_left = match value(*feature) {
                        Some(v) => v <= *threshold,
                        None => *missing_goes_left,
                    };
                    node = if go_left { left } else { right };
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbrtModel {
    pub trees: Vec<TreeNode>,
    pub learning_rate: f64,
    pub base_prediction: f64,
    pub config: GbrtConfig,
}

/// Split candidates for one feature: midpoints between consecutive distinct
/// observed values when there are at most `n_bins` of them, otherwise
/// midpoints at the `k / n_bins` quantiles.
pub fn bin_thresholds(observed: &[f64], n_bins: usize) -> Vec<f64> {
    let mut sorted = observed.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    let mid = |a: f64, b: f64| a + (b - a) / 2.0;
    if distinct.len() <= n_bins {
        return distinct.windows(2).map(|w| mid(w[0], w[1])).collect();
    }
    let n = sorted.len();
    let mut out: Vec<f64> = (1..n_bins)
        .map(|k| {
            let idx = (k * n / n_bins).clamp(1, n - 1);
            mid(sorted[idx - 1], sorted[idx])
        })
        .collect();
    out.dedup();
    out.retain(|t| *t < sorted[n - 1]);
    out
}

/// Column-major bin codes plus the thresholds that define them.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedData {
    codes: Vec<Vec<u16>>,
    thresholds: Vec<Vec<f64>>,
}

impl BinnedData {
    pub fn new(data: &MaskedDataset, n_bins: usize) -> Self {
        let mut codes = Vec::with_capacity(data.d());
        let mut thresholds = Vec::with_capacity(data.d());
        for j in 0..data.d() {
            let observed: Vec<f64> = (0..data.n()).filter_map(|i| data.get(i, j)).collect();
            let t = bin_thresholds(&observed, n_bins);
            let col = (0..data.n())
                .map(|i| match data.get(i, j) {
                    Some(v) => t.partition_point(|&th| th < v) as u16,
                    None => MISSING_BIN,
                })
                .collect();
            codes.push(col);
            thresholds.push(t);
        }
        BinnedData { codes, thresholds }
    }

    pub fn thresholds(&self, feature: usize) -> &[f64] {
        &self.thresholds[feature]
    }

    pub fn n_features(&self) -> usize {
        self.codes.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    /// Observed rows with bin `<= bin` go left.
    pub bin: usize,
    pub missing_goes_left: bool,
    pub gain: f64,
}

fn split_gain(g_left: f64, n_left: usize, g_total: f64, n_total: usize) -> f64 {
    let g_right = g_total - g_left;
    let n_right = n_total - n_left;
    g_left * g_left / n_left as f64 + g_right * g_right / n_right as f64 - g_total * g_total / n_total as f64
}

/// Best threshold and missing side for one feature at a node.
///
/// Thresholds are scanned in increasing order and, for each, missing rows
/// left then right; the first strict maximum wins. Without missing rows at
/// the node only the left option is evaluated, so `missing_goes_left` is true.
pub fn best_split(
    binned: &BinnedData,
    rows: &[usize],
    feature: usize,
    residuals: &[f64],
    min_leaf: usize,
) -> Result<SplitCandidate> {
    let codes = &binned.codes[feature];
    let thresholds = &binned.thresholds[feature];
    let n_bins = thresholds.len() + 1;
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    let (mut g_mis, mut n_mis) = (0.0, 0usize);
    let mut g_total = 0.0;
    for &i in rows {
        let r = residuals[i];
        g_total += r;
        match codes[i] {
            MISSING_BIN => {
                g_mis += r;
                n_mis += 1;
            }
            b => {
                sums[b as usize] += r;
                counts[b as usize] += 1;
            }
        }
    }
    let n = rows.len();
    if n_mis == n {
        return Err(Error::NoValidSplit);
    }
    let sides: &[bool] = if n_mis > 0 { &[true, false] } else { &[true] };
    let mut best: Option<SplitCandidate> = None;
    let consider = |bin: usize, threshold: f64, g_obs_left: f64, n_obs_left: usize, best: &mut Option<SplitCandidate>| {
        for &mis_left in sides {
            let (g_left, n_left) = if mis_left {
                (g_obs_left + g_mis, n_obs_left + n_mis)
            } else {
                (g_obs_left, n_obs_left)
            };
            if n_left < min_leaf || n - n_left < min_leaf {
                continue;
            }
            let gain = split_gain(g_left, n_left, g_total, n);
            if best.is_none_or(|b| gain > b.gain) {
                *best = Some(SplitCandidate {
                    feature,
                    threshold,
                    bin,
                    missing_goes_left: mis_left,
                    gain,
                });
            }
        }
    };
    let (mut g_acc, mut n_acc) = (0.0, 0usize);
    for (b, &t) in thresholds.iter().enumerate() {
        g_acc += sums[b];
        n_acc += counts[b];
        if n_acc == 0 || n_acc == n - n_mis {
            continue;
        }
        consider(b, t, g_acc, n_acc, &mut best);
    }
    if n_mis > 0 {
        let g_obs = g_total - g_mis;
        let (l, r) = (n - n_mis, n_mis);
        if l >= min_leaf && r >= min_leaf {
            let gain = split_gain(g_obs, l, g_total, n);
            if best.is_none_or(|b| gain > b.gain) {
                best = Some(SplitCandidate {
                    feature,
                    threshold: OBSERVED_VS_MISSING,
                    bin: n_bins - 1,
                    missing_goes_left: false,
                    gain,
                });
            }
        }
    }
    best.ok_or(Error::NoValidSplit)
}

fn best_split_all(binned: &BinnedData, rows: &[usize], residuals: &[f64], min_leaf: usize) -> Option<SplitCandidate> {
    let mut best: Option<SplitCandidate> = None;
    for j in 0..binned.n_features() {
        if let Ok(c) = best_split(binned, rows, j, residuals, min_leaf) {
            if best.is_none_or(|b| c.gain > b.gain) {
                best = Some(c);
            }
        }
    }
    best
}

enum Slot {
    Leaf(f64),
    Split(SplitCandidate, usize, usize),
}

fn assemble(slots: &[Slot], id: usize) -> TreeNode {
    match &slots[id] {
        Slot::Leaf(v) => TreeNode::Leaf { value: *v },
        Slot::Split(c, l, r) => TreeNode::Split {
            feature: c.feature,
            threshold: c.threshold,
            missing_goes_left: c.missing_goes_left,
            left: Box::new(assemble(slots, *l)),
            right: Box::new(assemble(slots, *r)),
        },
    }
}

/// Best-first growth: the open leaf with the largest positive gain is split
/// until `max_leaf_nodes` is reached or no leaf can improve. Leaf values are
/// mean residuals.
fn grow_tree(binned: &BinnedData, residuals: &[f64], cfg: &GbrtConfig) -> TreeNode {
    struct Open {
        slot: usize,
        rows: Vec<usize>,
        depth: usize,
        split: Option<SplitCandidate>,
    }
    let mean = |rows: &[usize]| rows.iter().map(|&i| residuals[i]).sum::<f64>() / rows.len() as f64;
    let candidate = |rows: &[usize], depth: usize| {
        if rows.len() < 2 * cfg.min_leaf || cfg.max_depth.is_some_and(|m| depth >= m) {
            return None;
        }
        best_split_all(binned, rows, residuals, cfg.min_leaf).filter(|c| c.gain > 0.0)
    };
    let all: Vec<usize> = (0..residuals.len()).collect();
    let mut slots = vec![Slot::Leaf(mean(&all))];
    let split = candidate(&all, 0);
    let mut open = vec![Open {
        slot: 0,
        rows: all,
        depth: 0,
        split,
    }];
    let mut n_leaves = 1;
    while cfg.max_leaf_nodes.is_none_or(|m| n_leaves < m) {
        let mut pick: Option<usize> = None;
        for (k, o) in open.iter().enumerate() {
            if let Some(c) = o.split {
                if pick.is_none_or(|p| c.gain > open[p].split.map_or(f64::NEG_INFINITY, |s| s.gain)) {
                    pick = Some(k);
                }
            }
        }
        let Some(k) = pick else { break };
        let node = open.remove(k);
        let c = node.split.expect("picked leaves carry a split");
        let codes = &binned.codes[c.feature];
        let (left, right): (Vec<usize>, Vec<usize>) = node.rows.iter().partition(|&&i| match codes[i] {
            MISSING_BIN => c.missing_goes_left,
            b => (b as usize) <= c.bin,
        });
        let (l, r) = (slots.len(), slots.len() + 1);
        slots.push(Slot::Leaf(mean(&left)));
        slots.push(Slot::Leaf(mean(&right)));
        slots[node.slot] = Slot::Split(c, l, r);
        n_leaves += 1;
        let depth = node.depth + 1;
        let split_l = candidate(&left, depth);
        let split_r = candidate(&right, depth);
        open.push(Open {
            slot: l,
            rows: left,
            depth,
            split: split_l,
        });
        open.push(Open {
            slot: r,
            rows: right,
            depth,
            split: split_r,
        });
    }
    assemble(&slots, 0)
}

pub fn fit_gbrt(train: &MaskedDataset, cfg: &GbrtConfig) -> Result<GbrtModel> {
    cfg.validate()?;
    if train.n() < 2 * cfg.min_leaf {
        return Err(Error::InvalidArgument(format!(
            "{} rows cannot hold two leaves of {}",
            train.n(),
            cfg.min_leaf
        )));
    }
    let y = train.y();
    let base = y.mean().unwrap_or(0.0);
    let binned = BinnedData::new(train, cfg.n_bins);
    let mut pred = vec![base; train.n()];
    let mut trees = Vec::with_capacity(cfg.n_trees);
    for _ in 0..cfg.n_trees {
        let residuals: Vec<f64> = y.iter().zip(&pred).map(|(y, p)| y - p).collect();
        let tree = grow_tree(&binned, &residuals, cfg);
        for (i, p) in pred.iter_mut().enumerate() {
            *p += cfg.learning_rate * tree.predict(|j| train.get(i, j));
        }
        trees.push(tree);
    }
    Ok(GbrtModel {
        trees,
        learning_rate: cfg.learning_rate,
        base_prediction: base,
        config: cfg.clone(),
    })
}

/// `None` marks a missing value.
pub fn predict_row(model: &GbrtModel, row: &[Option<f64>]) -> f64 {
    model.base_prediction + model.learning_rate * model.trees.iter().map(|t| t.predict(|j| row[j])).sum::<f64>()
}

pub fn predict_gbrt(model: &GbrtModel, data: &MaskedDataset) -> ndarray::Array1<f64> {
    (0..data.n())
        .map(|i| {
            model.base_prediction
                + model.learning_rate * model.trees.iter().map(|t| t.predict(|j| data.get(i, j))).sum::<f64>()
        })
        .collect()
}
