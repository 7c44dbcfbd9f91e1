//! Nesterov-momentum SGD with decoupled-from-clip weight decay.
//!
//! One step, per trainable parameter `p` with gradient `g`:
//! `d = g + wd·p` (conv kernels only), `v ← μ·v + d`, `p ← p − lr·(d + μ·v)`.

use ndarray::ArrayD;

use crate::error::{shape_err, Result};
use crate::nn::{GradStore, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<ArrayD<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        let buffers = store
            .iter()
            .map(|p| ArrayD::zeros(p.value.raw_dim()))
            .collect();
        Self {
            momentum,
            weight_decay,
            buffers,
        }
    }

    pub fn buffers(&self) -> &[ArrayD<f64>] {
        &self.buffers
    }

    /// Replaces the momentum buffers, e.g. when resuming.
    pub fn set_buffers(&mut self, buffers: Vec<ArrayD<f64>>) -> Result<()> {
        if buffers.len() != self.buffers.len()
            || buffers
                .iter()
                .zip(&self.buffers)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(shape_err("momentum buffers do not match the parameters"));
        }
        self.buffers = buffers;
        Ok(())
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore, lr: f64) {
        let mu = self.momentum;
        for ((p, g), v) in store.iter_mut().zip(grads.iter()).zip(&mut self.buffers) {
            if !p.kind.trainable() {
                continue;
            }
            let mut d = g.clone();
            if p.kind.decayed() && self.weight_decay != 0.0 {
                d.scaled_add(self.weight_decay, &p.value);
            }
            v.zip_mut_with(&d, |v, &d| *v = mu * *v + d);
            ndarray::Zip::from(&mut p.value)
                .and(&d)
                .and(&*v)
                .for_each(|p, &d, &v| *p -= lr * (d + mu * v));
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut GradStore, store: &ParamStore, max_norm: f64) -> f64 {
    let norm = grads.global_norm(store);
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// `lr0 / factor^⌊epoch / every⌋`.
pub fn learning_rate(lr0: f64, epoch: usize, every: usize, factor: f64) -> f64 {
    lr0 / factor.powi((epoch / every) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;
    use ndarray::{arr1, IxDyn};

    #[test]
    fn hand_computed_nesterov_steps() {
        let mut store = ParamStore::new();
        let id = store.add("w", arr1(&[1.0]).into_dyn(), ParamKind::Weight);
        let mut opt = Sgd::new(&store, 0.9, 0.1);
        let mut grads = GradStore::zeros_like(&store);
        grads.get_mut(id).fill(0.5);

        // d = 0.5 + 0.1·1 = 0.6; v = 0.6; p = 1 − 0.1·(0.6 + 0.54) = 0.886
        opt.step(&mut store, &grads, 0.1);
        assert!((store.get(id)[IxDyn(&[0])] - 0.886).abs() < 1e-15);
        // d = 0.5 + 0.0886 = 0.5886; v = 0.54 + 0.5886 = 1.1286;
        // p = 0.886 − 0.1·(0.5886 + 1.01574) = 0.7255660
        opt.step(&mut store, &grads, 0.1);
        assert!((store.get(id)[IxDyn(&[0])] - 0.725566).abs() < 1e-12);
    }

    #[test]
    fn frozen_and_undecayed() {
        let mut store = ParamStore::new();
        let f = store.add("bn", arr1(&[2.0]).into_dyn(), ParamKind::Frozen);
        let r = store.add("g", arr1(&[2.0]).into_dyn(), ParamKind::Relational);
        let mut opt = Sgd::new(&store, 0.9, 1.0);
        let mut grads = GradStore::zeros_like(&store);
        grads.get_mut(f).fill(1.0);
        opt.step(&mut store, &grads, 0.1);
        assert_eq!(store.get(f)[IxDyn(&[0])], 2.0);
        assert_eq!(store.get(r)[IxDyn(&[0])], 2.0);
    }

    #[test]
    fn schedule() {
        let got: Vec<f64> = (0..9).map(|e| learning_rate(1e-3, e, 4, 10.0)).collect();
        let want = [1e-3, 1e-3, 1e-3, 1e-3, 1e-4, 1e-4, 1e-4, 1e-4, 1e-5];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= 1e-18);
        }
    }

    #[test]
    fn clipping() {
        let mut store = ParamStore::new();
        let id = store.add("w", arr1(&[0.0, 0.0]).into_dyn(), ParamKind::Weight);
        let mut grads = GradStore::zeros_like(&store);
        grads.get_mut(id).assign(&arr1(&[30.0, 40.0]).into_dyn());
        assert_eq!(clip_grad_norm(&mut grads, &store, 10.0), 50.0);
        assert!((grads.global_norm(&store) - 10.0).abs() < 1e-12);
    }
}
