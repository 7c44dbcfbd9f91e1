use ndarray::{Array3, Axis};
use rand::Rng;

use super::backbone::FeatureMap;
use super::layers::{relu, Conv2d, ConvCache};
use super::params::{GradStore, ParamStore};
use crate::error::{shape_err, Result};

/// Logits are clamped to this magnitude before the sigmoid so that every
/// probability (and both log terms of the losses) stays finite.
pub const LOGIT_CLAMP: f64 = 15.0;

/// Per-class lesion probabilities `[C, H, W]`, each in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbMap {
    pub probs: Array3<f64>,
}

impl ClassProbMap {
    pub fn num_classes(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        let s = self.probs.shape();
        (s[1], s[2])
    }

    pub fn class(&self, k: usize) -> ndarray::ArrayView2<'_, f64> {
        self.probs.index_axis(Axis(0), k)
    }
}

pub fn clamped_sigmoid(logit: f64) -> f64 {
    1.0 / (1.0 + (-logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).exp())
}

/// Two 1×1 convolutions with a ReLU between them, then a clamped sigmoid.
#[derive(Debug, Clone)]
pub struct ClassHead {
    pub hidden: Conv2d,
    pub out: Conv2d,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    hidden: ConvCache,
    hidden_act: Array3<f64>,
    out: ConvCache,
    logits: Array3<f64>,
    probs: Array3<f64>,
}

impl ClassHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        in_channels: usize,
        hidden: usize,
        num_classes: usize,
        out_bias: f64,
        rng: &mut R,
    ) -> Self {
        let h = Conv2d::new(store, "head.conv1", in_channels, hidden, 1, 1, 0, true, rng);
        let o = Conv2d::new(store, "head.conv2", hidden, num_classes, 1, 1, 0, true, rng);
        if let Some(b) = o.bias {
            store.get_mut(b).fill(out_bias);
        }
        Self { hidden: h, out: o }
    }

    pub fn num_classes(&self) -> usize {
        self.out.out_channels
    }

    pub fn forward(&self, store: &ParamStore, f: &FeatureMap) -> Result<(ClassProbMap, HeadCache)> {
        if f.channels() != self.hidden.in_channels {
            return Err(shape_err(format!(
                "head expects {} feature channels, got {}",
                self.hidden.in_channels,
                f.channels()
            )));
        }
        let (pre, hidden) = self.hidden.forward(store, &f.values);
        let hidden_act = relu(&pre);
        let (logits, out) = self.out.forward(store, &hidden_act);
        let probs = logits.mapv(clamped_sigmoid);
        let cache = HeadCache {
            hidden,
            hidden_act,
            out,
            logits,
            probs: probs.clone(),
        };
        Ok((ClassProbMap { probs }, cache))
    }

    /// Back-propagates `d loss / d probs`; returns `d loss / d features`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &HeadCache,
        grad_probs: &Array3<f64>,
        grads: &mut GradStore,
    ) -> Array3<f64> {
        let mut g_logits = grad_probs.clone();
        ndarray::Zip::from(&mut g_logits)
            .and(&cache.logits)
            .and(&cache.probs)
            .for_each(|g, &z, &p| {
                *g = if z.abs() > LOGIT_CLAMP {
                    0.0
                } else {
                    *g * p * (1.0 - p)
                };
            });
        let mut g_hidden = self.out.backward(store, &cache.out, &g_logits, grads);
        g_hidden.zip_mut_with(&cache.hidden_act, |g, &a| {
            if a <= 0.0 {
                *g = 0.0
            }
        });
        self.hidden.backward(store, &cache.hidden, &g_hidden, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_head_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let head = ClassHead::new(&mut store, 6, 4, 3, 0.0, &mut rng);
        for p in store.iter_mut() {
            p.value.fill(0.0);
        }
        let f = FeatureMap {
            values: Array3::from_elem((6, 2, 2), 3.0),
            stride: 16,
        };
        let (p, _) = head.forward(&store, &f).unwrap();
        assert_eq!(p.probs.dim(), (3, 2, 2));
        assert!(p.probs.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn channel_mismatch_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let head = ClassHead::new(&mut store, 6, 4, 3, 0.0, &mut rng);
        let f = FeatureMap {
            values: Array3::zeros((5, 2, 2)),
            stride: 16,
        };
        assert!(head.forward(&store, &f).is_err());
    }

    #[test]
    fn clamp_bounds() {
        let lo = clamped_sigmoid(-1e9);
        let hi = clamped_sigmoid(1e9);
        assert!((3e-7..1e-6).contains(&lo));
        assert!(hi <= 1.0 - 3e-7 && hi > 1.0 - 1e-6);
    }
}
