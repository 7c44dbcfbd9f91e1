//! Supervision for the class-aware head.
//!
//! Classes with box annotation get a per-cell binary cross-entropy summed
//! over the grid; classes with only an image-level label get the
//! multiple-instance loss, where an image is positive iff at least one cell
//! is. All functions return the loss together with its gradient with respect
//! to the probabilities.

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::data::GridLabelMap;
use crate::error::{shape_err, Result};
use crate::nn::ClassProbMap;

/// Box-vs-MIL balance used throughout training.
pub const DEFAULT_BETA_B: f64 = 4.0;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside the logs.
/// Head outputs never reach this bound (the logit clamp keeps them ≥ 3e-7).
pub const PROB_EPS: f64 = 1e-7;

/// Per-step loss components and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_base: f64,
    pub l_ir: f64,
    pub l_ik: f64,
    pub l_kr: f64,
    pub l_all: f64,
}

impl LossReport {
    pub fn components(&self) -> [f64; 4] {
        [self.l_base, self.l_ir, self.l_ik, self.l_kr]
    }

    pub fn is_finite(&self) -> bool {
        self.components()
            .iter()
            .chain([&self.l_all])
            .all(|v| v.is_finite())
    }
}

/// A scalar loss with the gradient of that loss with respect to its input.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLoss {
    pub value: f64,
    pub grad: Array2<f64>,
}

fn clamp_prob(p: f64) -> (f64, bool) {
    let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (c, c == p)
}

/// Σ_j −y log p − (1−y) log(1−p) over all cells (a sum, not a mean).
pub fn bce_grid_loss(probs: ArrayView2<f64>, labels: ArrayView2<u8>) -> Result<GridLoss> {
    if probs.dim() != labels.dim() {
        return Err(shape_err(format!(
            "probs {:?} vs labels {:?}",
            probs.dim(),
            labels.dim()
        )));
    }
    let mut value = 0.0;
    let mut grad = Array2::<f64>::zeros(probs.dim());
    Zip::from(&mut grad)
        .and(&probs)
        .and(&labels)
        .for_each(|g, &p, &y| {
            let (p, live) = clamp_prob(p);
            if y != 0 {
                value -= p.ln();
                *g = if live { -1.0 / p } else { 0.0 };
            } else {
                value -= (-p).ln_1p();
                *g = if live { 1.0 / (1.0 - p) } else { 0.0 };
            }
        });
    Ok(GridLoss { value, grad })
}

/// Multiple-instance loss on one class channel.
///
/// With `s = Σ_j log(1 − p_j)`, positive images cost `−log(1 − e^s)` and
/// negative ones `−s`. The product over cells never leaves log-space.
pub fn mil_image_loss(probs: ArrayView2<f64>, positive: bool) -> GridLoss {
    let mut log_none = 0.0;
    for &p in probs.iter() {
        log_none += (-clamp_prob(p).0).ln_1p();
    }
    let mut grad = Array2::<f64>::zeros(probs.dim());
    let value = if positive {
        // d/dp_j [−log(1 − e^s)] = −1 / ((e^{−s} − 1)(1 − p_j))
        let denom = (-log_none).exp_m1();
        Zip::from(&mut grad).and(&probs).for_each(|g, &p| {
            let (p, live) = clamp_prob(p);
            *g = if live {
                -1.0 / (denom * (1.0 - p))
            } else {
                0.0
            };
        });
        -(-log_none.exp_m1()).ln()
    } else {
        Zip::from(&mut grad).and(&probs).for_each(|g, &p| {
            let (p, live) = clamp_prob(p);
            *g = if live { 1.0 / (1.0 - p) } else { 0.0 };
        });
        -log_none
    };
    GridLoss { value, grad }
}

/// Supervision for one image.
#[derive(Debug, Clone, Copy)]
pub struct SampleTargets<'a> {
    pub grid_labels: &'a GridLabelMap,
    pub image_labels: &'a [bool],
    /// λ per class.
    pub annotated: &'a [bool],
}

/// Base loss over a batch and its gradient per probability map.
///
/// Σ_i Σ_k λ·β_B·BCE + (1 − λ)·MIL, with no normalization by batch size.
pub fn base_loss(
    preds: &[ClassProbMap],
    targets: &[SampleTargets<'_>],
    beta_b: f64,
) -> Result<(f64, Vec<Array3<f64>>)> {
    if preds.len() != targets.len() {
        return Err(shape_err("predictions and targets differ in batch size"));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(targets) {
        let (value, grad) = sample_base_loss(p, t, beta_b)?;
        total += value;
        grads.push(grad);
    }
    Ok((total, grads))
}

/// Base loss for a single image; per-sample terms are independent.
pub fn sample_base_loss(
    p: &ClassProbMap,
    t: &SampleTargets<'_>,
    beta_b: f64,
) -> Result<(f64, Array3<f64>)> {
    let c = p.num_classes();
    if t.image_labels.len() != c || t.annotated.len() != c || t.grid_labels.labels.shape()[0] != c {
        return Err(shape_err(format!("class count mismatch: head has {c}")));
    }
    let mut total = 0.0;
    let mut grad = Array3::<f64>::zeros(p.probs.raw_dim());
    for k in 0..c {
        let probs = p.class(k);
        let (loss, weight) = if t.annotated[k] {
            (bce_grid_loss(probs, t.grid_labels.class(k))?, beta_b)
        } else {
            (mil_image_loss(probs, t.image_labels[k]), 1.0)
        };
        total += weight * loss.value;
        grad.index_axis_mut(Axis(0), k)
            .scaled_add(weight, &loss.grad);
    }
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn bce_examples() {
        let one = |p: f64, y: u8| {
            bce_grid_loss(array![[p]].view(), array![[y]].view())
                .unwrap()
                .value
        };
        assert!((one(0.5, 1) - LN2).abs() < 1e-12);
        assert!((one(0.5, 0) - LN2).abs() < 1e-12);
        let two = bce_grid_loss(array![[0.9, 0.1]].view(), array![[1u8, 0]].view()).unwrap();
        assert!((two.value - 0.21072103131565256).abs() < 1e-12);
    }

    #[test]
    fn bce_shape_mismatch() {
        assert!(bce_grid_loss(array![[0.5, 0.5]].view(), array![[1u8]].view()).is_err());
    }

    #[test]
    fn mil_examples() {
        assert!((mil_image_loss(array![[0.5]].view(), true).value - LN2).abs() < 1e-12);
        assert!((mil_image_loss(array![[0.5]].view(), false).value - LN2).abs() < 1e-12);
        let two = mil_image_loss(array![[0.5, 0.5]].view(), true);
        assert!((two.value - 0.2876820724517809).abs() < 1e-12);
    }

    #[test]
    fn mil_survives_many_tiny_cells() {
        let probs = Array2::from_elem((16, 16), 1e-6);
        let l = mil_image_loss(probs.view(), true);
        assert!(l.value.is_finite() && l.value > 0.0);
        assert!(l.grad.iter().all(|g| g.is_finite()));
        let l = mil_image_loss(Array2::from_elem((16, 16), 1.0 - 3e-7).view(), false);
        assert!(l.value.is_finite());
    }

    fn targets_fixture(annotated: bool) -> (GridLabelMap, Vec<bool>, Vec<bool>) {
        let grid = GridLabelMap {
            labels: ndarray::Array3::from_elem((1, 1, 1), 1),
        };
        (grid, vec![true], vec![annotated])
    }

    #[test]
    fn base_loss_weighting() {
        let pred = ClassProbMap {
            probs: ndarray::Array3::from_elem((1, 1, 1), 0.5),
        };
        let (g, l, a) = targets_fixture(true);
        let t = SampleTargets {
            grid_labels: &g,
            image_labels: &l,
            annotated: &a,
        };
        let (v, _) = base_loss(std::slice::from_ref(&pred), &[t], DEFAULT_BETA_B).unwrap();
        assert!((v - 2.772588722239781).abs() < 1e-12);

        let (g, l, a) = targets_fixture(false);
        let t = SampleTargets {
            grid_labels: &g,
            image_labels: &l,
            annotated: &a,
        };
        let (v, _) = base_loss(&[pred], &[t], DEFAULT_BETA_B).unwrap();
        assert!((v - LN2).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn mil_equals_bce_on_single_cell(p in 0.001f64..0.999, y in proptest::bool::ANY) {
            let probs = array![[p]];
            let bce = bce_grid_loss(probs.view(), array![[y as u8]].view()).unwrap();
            let mil = mil_image_loss(probs.view(), y);
            prop_assert!((bce.value - mil.value).abs() < 1e-9);
            prop_assert!((bce.grad[[0, 0]] - mil.grad[[0, 0]]).abs() < 1e-6 * bce.grad[[0, 0]].abs().max(1.0));
        }

        #[test]
        fn losses_non_negative(ps in proptest::collection::vec(0.001f64..0.999, 1..12), y in proptest::bool::ANY) {
            let probs = Array2::from_shape_vec((1, ps.len()), ps).unwrap();
            let labels = probs.mapv(|p| (p > 0.5) as u8);
            prop_assert!(bce_grid_loss(probs.view(), labels.view()).unwrap().value >= 0.0);
            prop_assert!(mil_image_loss(probs.view(), y).value >= 0.0);
        }

        #[test]
        fn mil_monotone(ps in proptest::collection::vec(0.001f64..0.9, 1..10), j in 0usize..10, bump in 0.001f64..0.09) {
            let j = j % ps.len();
            let probs = Array2::from_shape_vec((1, ps.len()), ps).unwrap();
            let mut raised = probs.clone();
            raised[[0, j]] += bump;
            prop_assert!(mil_image_loss(raised.view(), true).value <= mil_image_loss(probs.view(), true).value + 1e-12);
            prop_assert!(mil_image_loss(raised.view(), false).value >= mil_image_loss(probs.view(), false).value - 1e-12);
        }
    }
}
