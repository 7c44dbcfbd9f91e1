//! Finite-difference checking and random fixtures shared by the
//! integration tests.

#![allow(dead_code)]

use ccg::config::TrainConfig;
use ccg::data::{BoxAnnotation, ClassVocabulary, Dataset, ImageSample};
use ccg::model::{CcgModel, ModelConfig};
use ccg::nn::{BackboneSpec, ParamKind};
use ndarray::{Array2, Array3};
use rand::Rng;

pub const FD_EPS: f64 = 1e-6;

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, floor)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

pub fn random_array3(rng: &mut impl Rng, shape: (usize, usize, usize), scale: f64) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.gen_range(-scale..scale))
}

pub fn random_array2(rng: &mut impl Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-scale..scale))
}

/// Small model for whole-network gradient checks: 16×16 input, 4×4 grid.
pub fn small_model_config(num_classes: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneSpec::Tiny {
            channels: vec![4, 5],
        },
        input_size: 16,
        num_classes,
        head_hidden: 5,
        head_out_bias: 0.0,
        batch_size: 2,
        patches: 4,
        kr_blocks: 4,
    }
}

pub fn small_model(rng: &mut impl Rng, num_classes: usize) -> CcgModel {
    let mut model = CcgModel::new(small_model_config(num_classes), rng.gen()).unwrap();
    // Zero biases put dead backbone cells exactly on a ReLU kink and the
    // relational initial values are symmetric; jitter both.
    for p in model.store.iter_mut() {
        if matches!(p.kind, ParamKind::Bias | ParamKind::Relational) {
            p.value.mapv_inplace(|v| v + rng.gen_range(-0.3..0.3));
        }
    }
    model
}

/// Random images with random labels, boxes and annotation flags.
pub fn random_dataset(rng: &mut impl Rng, n: usize, num_classes: usize, size: usize) -> Dataset {
    let names: Vec<String> = (0..num_classes).map(|k| format!("class{k}")).collect();
    let samples = (0..n)
        .map(|i| {
            let pixels =
                Array3::from_shape_simple_fn((3, size, size), || rng.gen_range(0.0f32..1.0));
            let mut labels = vec![false; num_classes];
            let mut boxes = Vec::new();
            let mut annotated = vec![false; num_classes];
            for k in 0..num_classes {
                if rng.gen_bool(0.6) {
                    labels[k] = true;
                    let w = rng.gen_range(2..size / 2) as f64;
                    let h = rng.gen_range(2..size / 2) as f64;
                    let x = rng.gen_range(0.0..size as f64 - w);
                    let y = rng.gen_range(0.0..size as f64 - h);
                    boxes.push(BoxAnnotation::new(k, x, y, w, h).unwrap());
                    annotated[k] = rng.gen_bool(0.5);
                }
            }
            ImageSample {
                id: format!("r{i}"),
                pixels,
                image_labels: labels,
                boxes,
                annotated,
            }
        })
        .collect();
    Dataset {
        vocab: ClassVocabulary::new(names).unwrap(),
        image_size: size,
        samples,
    }
}

/// Default desk-scale configuration with the given seed.
pub fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..TrainConfig::default()
    }
}
