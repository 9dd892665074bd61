//! Histogram gradient boosting for squared loss.
//!
//! Each feature is discretised once into at most `max_bins` bins (midpoints
//! between distinct values, or quantile cuts when there are more distinct
//! values than bins). Trees are grown level by level to `max_depth`; a split
//! is accepted only if both children keep `min_samples_leaf` rows. Leaf
//! values are mean residuals scaled by the learning rate, so with a learning
//! rate in `(0, 1]` every stage lowers (or keeps) the training loss.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtParams {
    #[serde(default = "default_trees")]
    pub n_trees: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_depth")]
    pub max_depth: usize,
    #[serde(default = "default_leaf")]
    pub min_samples_leaf: usize,
    #[serde(default = "default_bins")]
    pub max_bins: usize,
}

fn default_trees() -> usize {
    500
}
fn default_lr() -> f64 {
    0.1
}
fn default_depth() -> usize {
    3
}
fn default_leaf() -> usize {
    100
}
fn default_bins() -> usize {
    255
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            n_trees: default_trees(),
            learning_rate: default_lr(),
            max_depth: default_depth(),
            min_samples_leaf: default_leaf(),
            max_bins: default_bins(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBoostedTrees {
    pub params: GbtParams,
    n_features: usize,
    init: f64,
    trees: Vec<Tree>,
    /// Training MSE before any tree and after each stage.
    pub stage_loss: Vec<f64>,
}

struct Binned {
    /// bins[f][i]
    bins: Vec<Vec<u16>>,
    /// thresholds[f][b]: upper edge of bin b (values `<=` go left)
    thresholds: Vec<Vec<f64>>,
}

fn bin_features(rows: &[Vec<f64>], n_features: usize, max_bins: usize) -> Binned {
    let n = rows.len();
    let mut bins = Vec::with_capacity(n_features);
    let mut thresholds = Vec::with_capacity(n_features);
    for f in 0..n_features {
        let mut sorted: Vec<f64> = rows.iter().map(|r| r[f]).collect();
        sorted.sort_by(f64::total_cmp);
        let mut uniq = sorted.clone();
        uniq.dedup();
        let cuts: Vec<f64> = if uniq.len() <= max_bins {
            uniq.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
        } else {
            let mut c: Vec<f64> = (1..max_bins)
                .map(|q| {
                    let pos = q * n / max_bins;
                    let (lo, hi) = (sorted[pos.saturating_sub(1)], sorted[pos]);
                    0.5 * (lo + hi)
                })
                .collect();
            c.dedup();
            c.retain(|&t| t < *uniq.last().unwrap());
            c
        };
        let col = rows
            .iter()
            .map(|r| cuts.partition_point(|&t| t < r[f]) as u16)
            .collect();
        bins.push(col);
        thresholds.push(cuts);
    }
    Binned { bins, thresholds }
}

struct SplitChoice {
    feature: usize,
    bin: usize,
    gain: f64,
}

impl GradientBoostedTrees {
    pub fn fit(rows: &[Vec<f64>], targets: &[f64], params: &GbtParams) -> Result<Self> {
        let n = rows.len();
        if n != targets.len() {
            return Err(Error::shape(n, targets.len()));
        }
        if params.min_samples_leaf == 0 || params.max_bins < 2 || params.max_bins > u16::MAX as usize {
            return Err(Error::invalid("min_samples_leaf >= 1 and 2 <= max_bins <= 65535"));
        }
        if !(params.learning_rate > 0.0 && params.learning_rate <= 1.0) {
            return Err(Error::invalid("learning_rate must lie in (0, 1]"));
        }
        if n < params.min_samples_leaf || n == 0 {
            return Err(Error::Fit(format!(
                "{n} rows, boosted trees need at least min_samples_leaf = {}",
                params.min_samples_leaf
            )));
        }
        let n_features = rows[0].len();
        if rows.iter().any(|r| r.len() != n_features) {
            return Err(Error::shape(n_features, "ragged rows"));
        }
        let binned = bin_features(rows, n_features, params.max_bins);
        if binned.thresholds.iter().all(Vec::is_empty) {
            return Err(Error::Fit("all input rows are identical; no split is possible".into()));
        }

        let init = targets.iter().sum::<f64>() / n as f64;
        let mut pred = vec![init; n];
        let mse = |pred: &[f64]| {
            pred.iter().zip(targets).map(|(p, y)| (y - p).powi(2)).sum::<f64>() / n as f64
        };
        let mut stage_loss = vec![mse(&pred)];
        let mut trees = Vec::with_capacity(params.n_trees);
        let mut resid = vec![0.0; n];
        let mut node_of = vec![0usize; n];
        for _ in 0..params.n_trees {
            for i in 0..n {
                resid[i] = targets[i] - pred[i];
            }
            let tree = grow_tree(&binned, &resid, &mut node_of, params);
            for i in 0..n {
                pred[i] += tree_leaf_value(&tree, node_of[i]);
            }
            stage_loss.push(mse(&pred));
            trees.push(tree);
        }
        if stage_loss.iter().any(|l| !l.is_finite()) {
            return Err(Error::Fit("non-finite training loss".into()));
        }
        Ok(GradientBoostedTrees {
            params: params.clone(),
            n_features,
            init,
            trees,
            stage_loss,
        })
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.init + self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }
}

fn tree_leaf_value(tree: &Tree, node: usize) -> f64 {
    match tree.nodes[node] {
        Node::Leaf { value } => value,
        Node::Split { .. } => unreachable!("rows always end in a leaf"),
    }
}

/// Grow one tree on `resid`; on return `node_of[i]` is the leaf of row `i`.
fn grow_tree(binned: &Binned, resid: &[f64], node_of: &mut [usize], params: &GbtParams) -> Tree {
    let n = resid.len();
    let n_features = binned.bins.len();
    node_of.iter_mut().for_each(|v| *v = 0);
    // per node: (sum, count); nodes are pushed in creation order
    let mut stats = vec![(resid.iter().sum::<f64>(), n)];
    let mut nodes: Vec<Option<Node>> = vec![None];
    let mut frontier = vec![0usize];
    let min_leaf = params.min_samples_leaf;

    for _depth in 0..params.max_depth {
        let splittable: Vec<usize> = frontier
            .iter()
            .copied()
            .filter(|&nd| stats[nd].1 >= 2 * min_leaf)
            .collect();
        if splittable.is_empty() {
            break;
        }
        let mut slot_of = vec![usize::MAX; nodes.len()];
        for (s, &nd) in splittable.iter().enumerate() {
            slot_of[nd] = s;
        }
        let mut best: Vec<Option<SplitChoice>> = (0..splittable.len()).map(|_| None).collect();
        for f in 0..n_features {
            let n_bins = binned.thresholds[f].len() + 1;
            if n_bins < 2 {
                continue;
            }
            let mut hist_sum = vec![0.0; splittable.len() * n_bins];
            let mut hist_cnt = vec![0usize; splittable.len() * n_bins];
            let col = &binned.bins[f];
            for i in 0..n {
                let s = slot_of[node_of[i]];
                if s != usize::MAX {
                    let k = s * n_bins + col[i] as usize;
                    hist_sum[k] += resid[i];
                    hist_cnt[k] += 1;
                }
            }
            for (s, &nd) in splittable.iter().enumerate() {
                let (total_s, total_n) = stats[nd];
                let parent = total_s * total_s / total_n as f64;
                let (mut ls, mut ln) = (0.0, 0usize);
                for b in 0..n_bins - 1 {
                    ls += hist_sum[s * n_bins + b];
                    ln += hist_cnt[s * n_bins + b];
                    let rn = total_n - ln;
                    if ln < min_leaf {
                        continue;
                    }
                    if rn < min_leaf {
                        break;
                    }
                    let rs = total_s - ls;
                    let gain = ls * ls / ln as f64 + rs * rs / rn as f64 - parent;
                    if gain > 1e-12 && best[s].as_ref().is_none_or(|c| gain > c.gain) {
                        best[s] = Some(SplitChoice {
                            feature: f,
                            bin: b,
                            gain,
                        });
                    }
                }
            }
        }
        let mut next_frontier = Vec::new();
        let mut children = vec![(usize::MAX, usize::MAX); nodes.len()];
        let mut split_info: Vec<Option<(usize, usize)>> = vec![None; nodes.len()];
        for (s, &nd) in splittable.iter().enumerate() {
            if let Some(choice) = &best[s] {
                let left = nodes.len();
                nodes.push(None);
                stats.push((0.0, 0));
                let right = nodes.len();
                nodes.push(None);
                stats.push((0.0, 0));
                nodes[nd] = Some(Node::Split {
                    feature: choice.feature,
                    threshold: binned.thresholds[choice.feature][choice.bin],
                    left,
                    right,
                });
                children.resize(nodes.len(), (usize::MAX, usize::MAX));
                split_info.resize(nodes.len(), None);
                children[nd] = (left, right);
                split_info[nd] = Some((choice.feature, choice.bin));
                next_frontier.push(left);
                next_frontier.push(right);
            }
        }
        if next_frontier.is_empty() {
            break;
        }
        for i in 0..n {
            let nd = node_of[i];
            if nd < split_info.len() {
                if let Some((f, b)) = split_info[nd] {
                    let child = if (binned.bins[f][i] as usize) <= b {
                        children[nd].0
                    } else {
                        children[nd].1
                    };
                    node_of[i] = child;
                    stats[child].0 += resid[i];
                    stats[child].1 += 1;
                }
            }
        }
        frontier = next_frontier;
    }

    let lr = params.learning_rate;
    let nodes = nodes
        .into_iter()
        .enumerate()
        .map(|(i, node)| {
            node.unwrap_or_else(|| {
                let (s, c) = stats[i];
                Node::Leaf {
                    value: if c > 0 { lr * s / c as f64 } else { 0.0 },
                }
            })
        })
        .collect();
    Tree { nodes }
}
