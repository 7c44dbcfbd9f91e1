//! Learnable inter-image relation graph and the graph-weighted feature
//! contrast loss shared by all three relational modules.
//!
//! A graph is stored as raw `n × n` logits and row-softmax normalized at
//! use time, so every row of used weights is a probability vector and the
//! loss `Σ_{u,v} G̃(u,v)·‖F_u − F_v‖ / n²` is bounded below by zero.

use ndarray::{Array2, Array3, ArrayView2, Zip};

use crate::error::{invalid, shape_err, Result};
use crate::nn::FeatureMap;

/// Raw (pre-softmax) relation weights over batch positions.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationGraph {
    pub weights: Array2<f64>,
}

impl RelationGraph {
    pub fn n(&self) -> usize {
        self.weights.nrows()
    }

    /// Row-normalized weights actually used by the loss.
    pub fn normalized(&self) -> Array2<f64> {
        row_softmax(self.weights.view())
    }
}

/// Every entry starts at `1/n`.
pub fn init_relation_graph(n: usize) -> Result<RelationGraph> {
    if n == 0 {
        return Err(invalid("relation graph needs n >= 1"));
    }
    Ok(RelationGraph {
        weights: Array2::from_elem((n, n), 1.0 / n as f64),
    })
}

pub fn row_softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Euclidean distance between two flattened arrays of equal shape.
pub fn euclidean(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(shape_err(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let mut acc = 0.0;
    Zip::from(a)
        .and(b)
        .for_each(|&x, &y| acc += (x - y) * (x - y));
    Ok(acc.sqrt())
}

pub fn feature_distance(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    euclidean(&a.values, &b.values)
}

/// Value and gradient of a softmax-weighted distance sum with respect to
/// the raw logits, plus `∂L/∂D(u,v)` for routing into the features.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedDistance {
    pub value: f64,
    pub grad_logits: Array2<f64>,
    pub grad_distances: Array2<f64>,
}

/// `Σ_{u,v} softmax_row(logits)(u,v)·D(u,v) / n²`.
pub fn weighted_distance_loss(
    logits: ArrayView2<f64>,
    distances: ArrayView2<f64>,
) -> Result<WeightedDistance> {
    let (n, m) = logits.dim();
    if n != m || distances.dim() != (n, n) || n == 0 {
        return Err(shape_err(format!(
            "graph {:?} and distances {:?} must be the same square shape",
            logits.dim(),
            distances.dim()
        )));
    }
    let norm = (n * n) as f64;
    let weights = row_softmax(logits);
    let value = (&weights * &distances).sum() / norm;
    let mut grad_logits = Array2::<f64>::zeros((n, n));
    for u in 0..n {
        let mean_d: f64 = (0..n).map(|v| weights[[u, v]] * distances[[u, v]]).sum();
        for v in 0..n {
            grad_logits[[u, v]] = weights[[u, v]] * (distances[[u, v]] - mean_d) / norm;
        }
    }
    Ok(WeightedDistance {
        value,
        grad_logits,
        grad_distances: weights / norm,
    })
}

/// Graph-contrast loss over feature arrays, with gradients for both the
/// graph logits and every feature array.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastLoss {
    pub value: f64,
    pub grad_logits: Array2<f64>,
    pub grad_features: Vec<Array3<f64>>,
}

/// Pairwise distances `D(u,v)` and the unit difference directions.
fn pairwise(features: &[&Array3<f64>]) -> Result<Array2<f64>> {
    let n = features.len();
    let mut d = Array2::<f64>::zeros((n, n));
    for u in 0..n {
        for v in 0..n {
            if u != v {
                d[[u, v]] = euclidean(features[u], features[v])?;
            }
        }
    }
    Ok(d)
}

/// Adds `scale · ∂‖a − b‖/∂a` to `ga` and its negation to `gb`.
/// At zero distance the subgradient 0 is used.
pub(crate) fn accumulate_distance_grad(
    a: &Array3<f64>,
    b: &Array3<f64>,
    dist: f64,
    scale: f64,
    ga: &mut Array3<f64>,
    gb: &mut Array3<f64>,
) {
    if dist <= 0.0 || scale == 0.0 {
        return;
    }
    let k = scale / dist;
    Zip::from(ga)
        .and(gb)
        .and(a)
        .and(b)
        .for_each(|ga, gb, &x, &y| {
            let g = k * (x - y);
            *ga += g;
            *gb -= g;
        });
}

pub fn graph_contrast_loss(
    logits: ArrayView2<f64>,
    features: &[&Array3<f64>],
) -> Result<ContrastLoss> {
    let n = features.len();
    if logits.dim() != (n, n) {
        return Err(shape_err(format!(
            "graph {:?} for a batch of {n}",
            logits.dim()
        )));
    }
    let distances = pairwise(features)?;
    let wd = weighted_distance_loss(logits, distances.view())?;
    let mut grad_features: Vec<Array3<f64>> = features
        .iter()
        .map(|f| Array3::zeros(f.raw_dim()))
        .collect();
    for u in 0..n {
        for v in 0..n {
            if u == v {
                continue;
            }
            let (lo, hi) = grad_features.split_at_mut(u.max(v));
            let (gu, gv) = if u < v {
                (&mut lo[u], &mut hi[0])
            } else {
                (&mut hi[0], &mut lo[v])
            };
            accumulate_distance_grad(
                features[u],
                features[v],
                distances[[u, v]],
                wd.grad_distances[[u, v]],
                gu,
                gv,
            );
        }
    }
    Ok(ContrastLoss {
        value: wd.value,
        grad_logits: wd.grad_logits,
        grad_features,
    })
}

/// Inter-image relation loss for the learnable graph `g`.
pub fn inter_image_loss(g: &RelationGraph, features: &[FeatureMap]) -> Result<ContrastLoss> {
    let refs: Vec<&Array3<f64>> = features.iter().map(|f| &f.values).collect();
    graph_contrast_loss(g.weights.view(), &refs)
}
