//! Exhaustive-split boosting used as a reference for the histogram trees.
//!
//! Every midpoint between consecutive distinct training values is a
//! candidate, gains are recomputed from scratch by scanning the node's rows,
//! and growth follows the same best-first policy and tie order.

use missbench_core::gbrt::{GbrtConfig, GbrtModel, TreeNode};
use missbench_core::synth::MaskedDataset;

#[derive(Clone, Copy)]
struct Cand {
    feature: usize,
    threshold: f64,
    missing_left: bool,
    gain: f64,
}

fn goes_left(data: &MaskedDataset, i: usize, c: &Cand) -> bool {
    match data.get(i, c.feature) {
        Some(v) => v <= c.threshold,
        None => c.missing_left,
    }
}

fn gain(data: &MaskedDataset, rows: &[usize], res: &[f64], c: &Cand, min_leaf: usize) -> Option<f64> {
    let (mut gl, mut nl, mut gr, mut nr) = (0.0, 0usize, 0.0, 0usize);
    for &i in rows {
        if goes_left(data, i, c) {
            gl += res[i];
            nl += 1;
        } else {
            gr += res[i];
            nr += 1;
        }
    }
    if nl < min_leaf || nr < min_leaf {
        return None;
    }
    let g = gl + gr;
    let n = (nl + nr) as f64;
    Some(gl * gl / nl as f64 + gr * gr / nr as f64 - g * g / n)
}

fn best(data: &MaskedDataset, cuts: &[Vec<f64>], rows: &[usize], res: &[f64], min_leaf: usize) -> Option<Cand> {
    let mut out: Option<Cand> = None;
    for (j, cut) in cuts.iter().enumerate() {
        let any_missing = rows.iter().any(|&i| data.is_missing(i, j));
        let observed: Vec<f64> = rows.iter().filter_map(|&i| data.get(i, j)).collect();
        if observed.is_empty() {
            continue;
        }
        let lo = observed.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = observed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut options = Vec::new();
        for &t in cut.iter().filter(|&&t| t >= lo && t < hi) {
            options.push((t, true));
            if any_missing {
                options.push((t, false));
            }
        }
        if any_missing {
            options.push((f64::MAX, false));
        }
        let mut seen: Vec<Vec<bool>> = Vec::new();
        for (threshold, missing_left) in options {
            let mut c = Cand { feature: j, threshold, missing_left, gain: 0.0 };
            let side: Vec<bool> = rows.iter().map(|&i| goes_left(data, i, &c)).collect();
            // equal partitions keep the lowest threshold
            if seen.contains(&side) {
                continue;
            }
            seen.push(side);
            if let Some(g) = gain(data, rows, res, &c, min_leaf) {
                c.gain = g;
                if out.is_none_or(|b| g > b.gain) {
                    out = Some(c);
                }
            }
        }
    }
    out
}

enum Slot {
    Leaf(f64),
    Split(Cand, usize, usize),
}

fn assemble(slots: &[Slot], id: usize) -> TreeNode {
    match &slots[id] {
        Slot::Leaf(v) => TreeNode::Leaf { value: *v },
        Slot::Split(c, l, r) => TreeNode::Split {
            feature: c.feature,
            threshold: c.threshold,
            missing_goes_left: c.missing_left,
            left: Box::new(assemble(slots, *l)),
            right: Box::new(assemble(slots, *r)),
        },
    }
}

fn tree(data: &MaskedDataset, cuts: &[Vec<f64>], res: &[f64], cfg: &GbrtConfig) -> TreeNode {
    let mean = |rows: &[usize]| rows.iter().map(|&i| res[i]).sum::<f64>() / rows.len() as f64;
    let cand = |rows: &[usize], depth: usize| {
        if rows.len() < 2 * cfg.min_leaf || cfg.max_depth.is_some_and(|m| depth >= m) {
            return None;
        }
        best(data, cuts, rows, res, cfg.min_leaf).filter(|c| c.gain > 0.0)
    };
    let all: Vec<usize> = (0..data.n()).collect();
    let mut slots = vec![Slot::Leaf(mean(&all))];
    let first = cand(&all, 0);
    let mut open = vec![(0usize, all, 0usize, first)];
    let mut leaves = 1;
    while cfg.max_leaf_nodes.is_none_or(|m| leaves < m) {
        let mut pick: Option<usize> = None;
        for (k, o) in open.iter().enumerate() {
            if let Some(c) = o.3 {
                if pick.is_none_or(|p| c.gain > open[p].3.unwrap().gain) {
                    pick = Some(k);
                }
            }
        }
        let Some(k) = pick else { break };
        let (slot, rows, depth, c) = open.remove(k);
        let c = c.unwrap();
        let (left, right): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| goes_left(data, i, &c));
        let (l, r) = (slots.len(), slots.len() + 1);
        slots.push(Slot::Leaf(mean(&left)));
        slots.push(Slot::Leaf(mean(&right)));
        slots[slot] = Slot::Split(c, l, r);
        leaves += 1;
        let cl = cand(&left, depth + 1);
        let cr = cand(&right, depth + 1);
        open.push((l, left, depth + 1, cl));
        open.push((r, right, depth + 1, cr));
    }
    assemble(&slots, 0)
}

pub fn fit_reference(data: &MaskedDataset, cfg: &GbrtConfig) -> GbrtModel {
    let cuts: Vec<Vec<f64>> = (0..data.d())
        .map(|j| {
            let mut v: Vec<f64> = (0..data.n()).filter_map(|i| data.get(i, j)).collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0).collect()
        })
        .collect();
    let y = data.y();
    let base = y.mean().unwrap();
    let mut pred = vec![base; data.n()];
    let mut trees = Vec::new();
    for _ in 0..cfg.n_trees {
        let res: Vec<f64> = y.iter().zip(&pred).map(|(y, p)| y - p).collect();
        let t = tree(data, &cuts, &res, cfg);
        for (i, p) in pred.iter_mut().enumerate() {
            *p += cfg.learning_rate * t.predict(|j| data.get(i, j));
        }
        trees.push(t);
    }
    GbrtModel { trees, learning_rate: cfg.learning_rate, base_prediction: base, config: cfg.clone() }
}
