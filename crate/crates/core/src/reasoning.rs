//! Cross-image knowledge reasoning.
//!
//! For a pair of feature maps flattened to `[c, HW]`, a bilinear affinity
//! `P = F_uᵀ W_P F_v` is column-softmaxed into attention that re-expresses
//! each image through the other: `F'_u = F_u softmax(P)`,
//! `F'_v = F_v softmax(Pᵀ)`. The enhanced maps are pooled into `m` blocks,
//! binarized into codes, and their pairwise Hamming graph is reduced by a
//! learned affine map to the pair's relation logit. The loss weights
//! `‖F'_u − F'_v‖` by the row-softmaxed logits.
//!
//! Codes are treated as constants: gradients reach the aggregator and, via
//! the distances, the attention weights and input features.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis, Zip};
use rayon::prelude::*;

use crate::error::{invalid, shape_err, Result};
use crate::nn::FeatureMap;
use crate::relation::weighted_distance_loss;
use crate::structure::{PairInputs, PatchGraph};

/// Bilinear affinity between the spatial positions of two feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub values: Array2<f64>,
}

/// `[c, h, w]` viewed as `[c, h·w]`.
pub fn flatten(f: ArrayView3<f64>) -> Array2<f64> {
    let (c, h, w) = f.dim();
    f.to_owned()
        .into_shape_with_order((c, h * w))
        .expect("contiguous after to_owned")
}

pub fn affinity(
    fu: ArrayView2<f64>,
    fv: ArrayView2<f64>,
    w_p: ArrayView2<f64>,
) -> Result<AffinityMatrix> {
    let c = fu.nrows();
    if fv.nrows() != c || w_p.dim() != (c, c) {
        return Err(shape_err(format!(
            "affinity needs matching channels: F_u {:?}, F_v {:?}, W_P {:?}",
            fu.dim(),
            fv.dim(),
            w_p.dim()
        )));
    }
    Ok(AffinityMatrix {
        values: fu.t().dot(&w_p.dot(&fv)),
    })
}

/// Softmax down every column.
pub fn column_softmax(p: ArrayView2<f64>) -> Array2<f64> {
    let mut out = p.to_owned();
    for mut col in out.columns_mut() {
        let max = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        col.mapv_inplace(|v| (v - max).exp());
        let sum = col.sum();
        col.mapv_inplace(|v| v / sum);
    }
    out
}

/// Backward of [`column_softmax`] given its output `s` and `∂L/∂s`.
fn column_softmax_backward(s: &Array2<f64>, ds: &Array2<f64>) -> Array2<f64> {
    let mut dp = Array2::<f64>::zeros(s.dim());
    for j in 0..s.ncols() {
        let (sc, dc) = (s.column(j), ds.column(j));
        let inner = sc.dot(&dc);
        Zip::from(dp.column_mut(j))
            .and(&sc)
            .and(&dc)
            .for_each(|d, &sv, &g| *d = sv * (g - inner));
    }
    dp
}

/// `(F_u softmax(P), F_v softmax(Pᵀ))`.
pub fn attend(
    fu: ArrayView2<f64>,
    fv: ArrayView2<f64>,
    p: &AffinityMatrix,
) -> (Array2<f64>, Array2<f64>) {
    let su = column_softmax(p.values.view());
    let sv = column_softmax(p.values.t());
    (fu.dot(&su), fv.dot(&sv))
}

/// Block layout `(rows, cols)` with `rows·cols = m` tiling `h × w`, as
/// square as possible.
pub fn block_layout(m: usize, h: usize, w: usize) -> Result<(usize, usize)> {
    (1..=m)
        .filter(|r| m.is_multiple_of(*r) && h.is_multiple_of(*r) && w.is_multiple_of(m / r))
        .min_by_key(|&r| (r.abs_diff(m / r), r))
        .map(|r| (r, m / r))
        .ok_or_else(|| invalid(format!("{m} blocks cannot tile a {h}x{w} grid")))
}

/// Binary code of every block, bit `k` set iff pooled channel `k` exceeds
/// the block's median channel value.
fn block_codes(f: ArrayView3<f64>, m: usize) -> Result<Vec<Vec<u64>>> {
    let (c, h, w) = f.dim();
    let (rows, cols) = block_layout(m, h, w)?;
    let (bh, bw) = (h / rows, w / cols);
    let words = c.div_ceil(64);
    let mut codes = Vec::with_capacity(m);
    for r in 0..rows {
        for q in 0..cols {
            let block = f.slice(ndarray::s![.., r * bh..(r + 1) * bh, q * bw..(q + 1) * bw]);
            let pooled: Vec<f64> = block
                .outer_iter()
                .map(|ch| ch.mean().expect("non-empty block"))
                .collect();
            let mut sorted = pooled.clone();
            sorted.sort_by(f64::total_cmp);
            let median = 0.5 * (sorted[(c - 1) / 2] + sorted[c / 2]);
            let mut code = vec![0u64; words];
            for (k, &v) in pooled.iter().enumerate() {
                if v > median {
                    code[k / 64] |= 1 << (k % 64);
                }
            }
            codes.push(code);
        }
    }
    Ok(codes)
}

fn code_distance(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Hamming graph between the block codes of two enhanced maps.
pub fn enhanced_patch_graph(
    fu: ArrayView3<f64>,
    fv: ArrayView3<f64>,
    m: usize,
) -> Result<PatchGraph> {
    if fu.dim() != fv.dim() {
        return Err(shape_err(format!("{:?} vs {:?}", fu.dim(), fv.dim())));
    }
    if m == 0 || fu.dim().0 == 0 {
        return Err(invalid("enhanced patch graph needs m >= 1 and c >= 1"));
    }
    let a = block_codes(fu, m)?;
    let b = block_codes(fv, m)?;
    let values = Array2::from_shape_fn((m, m), |(l, p)| code_distance(&a[l], &b[p]) as f64);
    Ok(PatchGraph { values })
}

/// Loss and gradients for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct KrOutput {
    pub value: f64,
    /// Raw pair logits `G'_k`.
    pub logits: Array2<f64>,
    pub grad_w_p: Array2<f64>,
    pub grad_w_l: Array1<f64>,
    pub grad_b_l: f64,
    pub grad_features: Vec<Array3<f64>>,
}

struct PairState {
    su: Array2<f64>,
    sv: Array2<f64>,
    eu: Array2<f64>,
    ev: Array2<f64>,
    graph: PatchGraph,
}

fn pair_state(
    fu: &Array2<f64>,
    fv: &Array2<f64>,
    w_p: ArrayView2<f64>,
    shape: (usize, usize, usize),
    m: usize,
) -> Result<PairState> {
    let p = affinity(fu.view(), fv.view(), w_p)?;
    let su = column_softmax(p.values.view());
    let sv = column_softmax(p.values.t());
    let eu = fu.dot(&su);
    let ev = fv.dot(&sv);
    let graph = enhanced_patch_graph(
        eu.view()
            .into_shape_with_order(shape)
            .map_err(|e| shape_err(e.to_string()))?,
        ev.view()
            .into_shape_with_order(shape)
            .map_err(|e| shape_err(e.to_string()))?,
        m,
    )?;
    Ok(PairState {
        su,
        sv,
        eu,
        ev,
        graph,
    })
}

/// Knowledge-reasoning loss over every ordered pair of the batch.
///
/// The self pair `(u, u)` only contributes a logit (its distance is zero),
/// which keeps the row softmax defined for a batch of one.
pub fn kr_loss(
    features: &[FeatureMap],
    w_p: ArrayView2<f64>,
    w_l: ArrayView1<f64>,
    b_l: f64,
    m: usize,
) -> Result<KrOutput> {
    let n = features.len();
    if n == 0 {
        return Err(invalid("empty batch"));
    }
    let shape = features[0].values.dim();
    if features.iter().any(|f| f.values.dim() != shape) {
        return Err(shape_err("feature maps in one batch differ in shape"));
    }
    let flat: Vec<Array2<f64>> = features.iter().map(|f| flatten(f.values.view())).collect();
    let states: Vec<PairState> = (0..n * n)
        .into_par_iter()
        .map(|i| pair_state(&flat[i / n], &flat[i % n], w_p, shape, m))
        .collect::<Result<_>>()?;

    let pairs = PairInputs::new(n, shape.0 as f64, |u, v| {
        Ok(states[u * n + v].graph.clone())
    })?;
    let logits = pairs.logits(w_l, b_l)?;
    let mut distances = Array2::<f64>::zeros((n, n));
    for u in 0..n {
        for v in 0..n {
            if u != v {
                let s = &states[u * n + v];
                distances[[u, v]] = (&s.eu - &s.ev).mapv(|d| d * d).sum().sqrt();
            }
        }
    }
    let wd = weighted_distance_loss(logits.view(), distances.view())?;
    let (grad_w_l, grad_b_l) = pairs.backward(wd.grad_logits.view());

    let c = shape.0;
    let partials: Vec<(Array2<f64>, Array2<f64>, Array2<f64>)> = (0..n * n)
        .into_par_iter()
        .map(|i| {
            let (u, v) = (i / n, i % n);
            let (fu, fv) = (&flat[u], &flat[v]);
            let mut dfu = Array2::<f64>::zeros(fu.dim());
            let mut dfv = Array2::<f64>::zeros(fv.dim());
            let mut dw = Array2::<f64>::zeros((c, c));
            let d = distances[[u, v]];
            let scale = wd.grad_distances[[u, v]];
            if u == v || d <= 0.0 || scale == 0.0 {
                return (dfu, dfv, dw);
            }
            let s = &states[i];
            let geu = (&s.eu - &s.ev) * (scale / d);
            let gev = -&geu;
            dfu += &geu.dot(&s.su.t());
            dfv += &gev.dot(&s.sv.t());
            let dp_u = column_softmax_backward(&s.su, &fu.t().dot(&geu));
            let dp_v = column_softmax_backward(&s.sv, &fv.t().dot(&gev));
            let dp = dp_u + dp_v.t();
            dfu += &w_p.dot(&fv.dot(&dp.t()));
            dfv += &w_p.t().dot(&fu.dot(&dp));
            dw += &fu.dot(&dp).dot(&fv.t());
            (dfu, dfv, dw)
        })
        .collect();

    let mut grad_flat: Vec<Array2<f64>> = flat.iter().map(|f| Array2::zeros(f.dim())).collect();
    let mut grad_w_p = Array2::<f64>::zeros((c, c));
    for (i, (dfu, dfv, dw)) in partials.into_iter().enumerate() {
        let (u, v) = (i / n, i % n);
        grad_flat[u] += &dfu;
        grad_flat[v] += &dfv;
        grad_w_p += &dw;
    }
    let grad_features = grad_flat
        .into_iter()
        .map(|g| {
            g.into_shape_with_order(shape)
                .map_err(|e| shape_err(e.to_string()))
        })
        .collect::<Result<_>>()?;
    Ok(KrOutput {
        value: wd.value,
        logits,
        grad_w_p,
        grad_w_l,
        grad_b_l,
        grad_features,
    })
}

/// Mean of every row of `f`, broadcast over columns; the uniform-attention
/// limit of [`attend`].
pub fn mean_columns(f: ArrayView2<f64>) -> Array2<f64> {
    let mean = f.mean_axis(Axis(1)).expect("non-empty");
    Array2::from_shape_fn(f.dim(), |(k, _)| mean[k])
}
