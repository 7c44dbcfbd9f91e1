//! Patch graphs between image pairs and their learned reduction to one
//! relation logit per pair.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};

use super::hash::PatchHashes;
use crate::error::{invalid, shape_err, Result};
use crate::nn::FeatureMap;
use crate::relation::{graph_contrast_loss, ContrastLoss};

/// Bits per average-hash code; patch-graph entries are divided by this.
pub const HASH_BITS: f64 = 64.0;

pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

/// Pairwise patch distances between two images, `[m, m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGraph {
    pub values: Array2<f64>,
}

pub fn patch_graph(a: &PatchHashes, b: &PatchHashes) -> Result<PatchGraph> {
    if a.len() != b.len() {
        return Err(shape_err(format!("{} vs {} patch codes", a.len(), b.len())));
    }
    let values = Array2::from_shape_fn((a.len(), b.len()), |(l, p)| {
        hamming(a.codes[l], b.codes[p]) as f64
    });
    Ok(PatchGraph { values })
}

/// `w · flatten(G / scale) + b`.
pub fn aggregate_patch_graph(
    g: &PatchGraph,
    scale: f64,
    weight: ArrayView1<f64>,
    bias: f64,
) -> Result<f64> {
    if g.values.len() != weight.len() {
        return Err(shape_err(format!(
            "patch graph has {} entries but the aggregator expects {}",
            g.values.len(),
            weight.len()
        )));
    }
    Ok(g.values
        .iter()
        .zip(weight)
        .map(|(x, w)| w * x / scale)
        .sum::<f64>()
        + bias)
}

/// Normalized, flattened patch graphs for every ordered pair of a batch.
/// Keeps the inputs so the aggregator gradient can be formed later.
#[derive(Debug, Clone, PartialEq)]
pub struct PairInputs {
    /// `[n, n, m²]`
    pub inputs: Array3<f64>,
}

impl PairInputs {
    pub fn new(
        n: usize,
        scale: f64,
        mut graph: impl FnMut(usize, usize) -> Result<PatchGraph>,
    ) -> Result<Self> {
        if n == 0 {
            return Err(invalid("empty batch"));
        }
        let mut inputs: Option<Array3<f64>> = None;
        for u in 0..n {
            for v in 0..n {
                let g = graph(u, v)?;
                let flat = g.values.len();
                let buf = inputs.get_or_insert_with(|| Array3::zeros((n, n, flat)));
                if buf.dim().2 != flat {
                    return Err(shape_err("patch graphs in one batch differ in size"));
                }
                buf.slice_mut(ndarray::s![u, v, ..])
                    .iter_mut()
                    .zip(g.values.iter())
                    .for_each(|(d, &x)| *d = x / scale);
            }
        }
        Ok(Self {
            inputs: inputs.expect("n >= 1"),
        })
    }

    /// Hamming patch graphs of all pairs.
    pub fn from_hashes(hashes: &[&PatchHashes]) -> Result<Self> {
        Self::new(hashes.len(), HASH_BITS, |u, v| {
            patch_graph(hashes[u], hashes[v])
        })
    }

    pub fn n(&self) -> usize {
        self.inputs.dim().0
    }

    pub fn logits(&self, weight: ArrayView1<f64>, bias: f64) -> Result<Array2<f64>> {
        let (n, _, d) = self.inputs.dim();
        if weight.len() != d {
            return Err(shape_err(format!(
                "aggregator expects {} inputs, pairs have {d}",
                weight.len()
            )));
        }
        let flat = self
            .inputs
            .view()
            .into_shape_with_order((n * n, d))
            .map_err(|e| shape_err(e.to_string()))?;
        let out = flat.dot(&weight) + bias;
        out.into_shape_with_order((n, n))
            .map_err(|e| shape_err(e.to_string()))
    }

    /// Gradients of the aggregator weight and bias from `∂L/∂logits`.
    pub fn backward(&self, grad_logits: ArrayView2<f64>) -> (Array1<f64>, f64) {
        let (n, _, d) = self.inputs.dim();
        let mut gw = Array1::<f64>::zeros(d);
        for u in 0..n {
            for v in 0..n {
                gw.scaled_add(
                    grad_logits[[u, v]],
                    &self.inputs.index_axis(Axis(0), u).index_axis(Axis(0), v),
                );
            }
        }
        (gw, grad_logits.sum())
    }
}

/// Structure-weighted feature contrast `Σ G̃_k(u,v)·‖F_u − F_v‖ / n²`.
pub fn intra_image_loss(g_k: ArrayView2<f64>, features: &[FeatureMap]) -> Result<ContrastLoss> {
    let refs: Vec<&Array3<f64>> = features.iter().map(|f| &f.values).collect();
    graph_contrast_loss(g_k, &refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn hamming_examples() {
        assert_eq!(hamming(0xdead, 0xdead), 0);
        assert_eq!(hamming(0b1010, 0b1001), 2);
        assert_eq!(hamming(0, u64::MAX), 64);
    }

    #[test]
    fn patch_graph_example() {
        let a = PatchHashes {
            codes: vec![0b00, 0b11],
        };
        let b = PatchHashes {
            codes: vec![0b00, 0b01],
        };
        assert_eq!(
            patch_graph(&a, &b).unwrap().values,
            array![[0.0, 1.0], [2.0, 1.0]]
        );
        let same = patch_graph(&a, &a).unwrap();
        assert!(same.values.diag().iter().all(|&v| v == 0.0));
        let c = PatchHashes { codes: vec![0] };
        assert!(patch_graph(&a, &c).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let m = 4;
        let full = PatchGraph {
            values: Array2::from_elem((m, m), 64.0),
        };
        let zeros = Array1::<f64>::zeros(m * m);
        assert_eq!(
            aggregate_patch_graph(&full, HASH_BITS, zeros.view(), 0.0).unwrap(),
            0.0
        );
        let ones = Array1::<f64>::ones(m * m);
        let empty = PatchGraph {
            values: Array2::zeros((m, m)),
        };
        assert_eq!(
            aggregate_patch_graph(&empty, HASH_BITS, ones.view(), 0.0).unwrap(),
            0.0
        );
        let mean = Array1::from_elem(m * m, 1.0 / (m * m) as f64);
        let g = aggregate_patch_graph(&full, HASH_BITS, mean.view(), 0.0).unwrap();
        assert!((g - 1.0).abs() < 1e-12);
        assert!(aggregate_patch_graph(&full, HASH_BITS, Array1::zeros(3).view(), 0.0).is_err());
    }

    #[test]
    fn pair_logits_match_scalar_aggregation() {
        let h: Vec<PatchHashes> = (0..3u64)
            .map(|i| PatchHashes {
                codes: (0..4u64)
                    .map(|j| (i * 0x9e37_79b9 + j * 0x1234_5678).rotate_left(j as u32))
                    .collect(),
            })
            .collect();
        let refs: Vec<&PatchHashes> = h.iter().collect();
        let pairs = PairInputs::from_hashes(&refs).unwrap();
        let w = Array1::from_shape_fn(16, |i| (i as f64 - 7.0) * 0.1);
        let logits = pairs.logits(w.view(), 0.3).unwrap();
        for u in 0..3 {
            for v in 0..3 {
                let g = patch_graph(&h[u], &h[v]).unwrap();
                let direct = aggregate_patch_graph(&g, HASH_BITS, w.view(), 0.3).unwrap();
                assert!((logits[[u, v]] - direct).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        #[allow(clippy::needless_range_loop)]
        fn patch_graph_matches_nested_loops(a in proptest::collection::vec(any::<u64>(), 1..20), seed in any::<u64>()) {
            let b: Vec<u64> = a.iter().enumerate().map(|(i, x)| x.wrapping_mul(seed | 1).rotate_left(i as u32)).collect();
            let ha = PatchHashes { codes: a.clone() };
            let hb = PatchHashes { codes: b.clone() };
            let g = patch_graph(&ha, &hb).unwrap();
            for l in 0..a.len() {
                for p in 0..b.len() {
                    let mut diff = 0;
                    for bit in 0..64 {
                        diff += ((a[l] >> bit) & 1 != (b[p] >> bit) & 1) as u32;
                    }
                    prop_assert_eq!(g.values[[l, p]], diff as f64);
                }
            }
        }

        #[test]
        fn hamming_symmetric(a in any::<u64>(), b in any::<u64>()) {
            prop_assert_eq!(hamming(a, b), hamming(b, a));
        }
    }
}
