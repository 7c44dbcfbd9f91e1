//! Loss assembly, the optimization loop, logging and checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{AblationMode, TrainConfig};
use crate::data::{make_grid_labels, Dataset, GridLabelMap, ImageSample, Split};
use crate::error::{invalid, Error, Result};
use crate::losses::{sample_base_loss, LossReport, SampleTargets};
use crate::model::{CcgModel, ModelConfig, SampleForward};
use crate::nn::{FeatureMap, GradStore};
use crate::optim::{clip_grad_norm, learning_rate, Sgd};
use crate::reasoning::kr_loss;
use crate::relation::graph_contrast_loss;
use crate::structure::{intra_image_loss, PairInputs, PatchCache, PatchHashes};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";

pub fn epoch_checkpoint_name(epochs_completed: usize) -> String {
    format!("epoch_{epochs_completed}.ckpt")
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossReport,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub beta_b: f64,
    pub ablation: String,
}

/// `Σ w_i·L_i`, refusing non-finite components.
pub fn total_loss(components: [f64; 4], weights: [f64; 4], step: usize) -> Result<f64> {
    const NAMES: [&str; 4] = ["l_base", "l_ir", "l_ik", "l_kr"];
    for (name, v) in NAMES.iter().zip(components) {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("{name} = {v}"),
            });
        }
    }
    Ok(components.iter().zip(weights).map(|(l, w)| l * w).sum())
}

/// Per-sample supervision and structure codes, precomputed once.
#[derive(Debug, Clone)]
pub struct PreparedSample<'a> {
    pub sample: &'a ImageSample,
    pub grid: GridLabelMap,
    pub hashes: PatchHashes,
}

pub fn prepare_samples<'a>(
    dataset: &'a Dataset,
    indices: &[usize],
    grid: usize,
    cache: &PatchCache,
) -> Result<Vec<PreparedSample<'a>>> {
    indices
        .par_iter()
        .map(|&i| {
            let sample = dataset
                .samples
                .get(i)
                .ok_or_else(|| invalid(format!("sample index {i} out of range")))?;
            let grid = make_grid_labels(sample, (grid, grid))?;
            let (_, hashes) = cache.get_or_compute(&sample.id, sample.intensity().view())?;
            Ok(PreparedSample {
                sample,
                grid,
                hashes,
            })
        })
        .collect()
}

/// Losses and accumulated gradients for one batch.
pub fn compute_batch(
    model: &CcgModel,
    batch: &[&PreparedSample<'_>],
    mode: AblationMode,
    weights: [f64; 4],
    beta_b: f64,
    step: usize,
) -> Result<(LossReport, GradStore)> {
    let fwd: Vec<SampleForward> = batch
        .par_iter()
        .map(|p| model.forward(&p.sample.pixels))
        .collect::<Result<_>>()?;
    let base: Vec<(f64, Array3<f64>)> = batch
        .iter()
        .zip(&fwd)
        .map(|(p, f)| {
            let t = SampleTargets {
                grid_labels: &p.grid,
                image_labels: &p.sample.image_labels,
                annotated: &p.sample.annotated,
            };
            sample_base_loss(&f.probs, &t, beta_b)
        })
        .collect::<Result<_>>()?;
    let mut report = LossReport {
        l_base: base.iter().map(|b| b.0).sum(),
        ..LossReport::default()
    };

    let features: Vec<FeatureMap> = fwd.iter().map(|f| f.features.clone()).collect();
    let refs: Vec<&Array3<f64>> = features.iter().map(|f| &f.values).collect();
    let mut grads = GradStore::zeros_like(&model.store);
    let mut grad_features: Vec<Array3<f64>> = features
        .iter()
        .map(|f| Array3::zeros(f.values.raw_dim()))
        .collect();
    let add_features = |gf: &mut Vec<Array3<f64>>, g: &[Array3<f64>], w: f64| {
        for (acc, g) in gf.iter_mut().zip(g) {
            acc.scaled_add(w, g);
        }
    };

    if mode.ir {
        let ir = graph_contrast_loss(model.relation_graph(), &refs)?;
        report.l_ir = ir.value;
        grads.accumulate_scaled(
            model.relation_graph_id(),
            ir.grad_logits.view().into_dyn(),
            weights[1],
        );
        add_features(&mut grad_features, &ir.grad_features, weights[1]);
    }
    if mode.ik {
        let codes: Vec<&PatchHashes> = batch.iter().map(|p| &p.hashes).collect();
        let pairs = PairInputs::from_hashes(&codes)?;
        let logits = pairs.logits(model.ik_weight(), model.ik_bias())?;
        let ik = intra_image_loss(logits.view(), &features)?;
        report.l_ik = ik.value;
        let (gw, gb) = pairs.backward(ik.grad_logits.view());
        let (w_id, b_id) = model.ik_ids();
        grads.accumulate_scaled(w_id, gw.view().into_dyn(), weights[2]);
        grads.get_mut(b_id)[[0]] += weights[2] * gb;
        add_features(&mut grad_features, &ik.grad_features, weights[2]);
    }
    if mode.kr {
        let kr = kr_loss(
            &features,
            model.kr_affinity(),
            model.kr_weight(),
            model.kr_bias(),
            model.config.kr_blocks,
        )?;
        report.l_kr = kr.value;
        let (p_id, w_id, b_id) = model.kr_ids();
        grads.accumulate_scaled(p_id, kr.grad_w_p.view().into_dyn(), weights[3]);
        grads.accumulate_scaled(w_id, kr.grad_w_l.view().into_dyn(), weights[3]);
        grads.get_mut(b_id)[[0]] += weights[3] * kr.grad_b_l;
        add_features(&mut grad_features, &kr.grad_features, weights[3]);
    }
    report.l_all = total_loss(report.components(), weights, step)?;

    let per_sample: Vec<GradStore> = fwd
        .par_iter()
        .zip(&base)
        .zip(&grad_features)
        .map(|((f, (_, gp)), gf)| {
            let mut g = GradStore::zeros_like(&model.store);
            model.backward(f, &(gp * weights[0]), Some(gf), &mut g);
            g
        })
        .collect();
    for g in &per_sample {
        grads.merge(g);
    }
    Ok((report, grads))
}

/// The split implied by the configuration.
pub fn split_for(cfg: &TrainConfig, n: usize) -> Result<Split> {
    if cfg.folds > 1 {
        Split::k_fold(n, cfg.folds, cfg.fold)
    } else {
        Split::holdout_tail(n, cfg.holdout)
    }
}

/// Sample order for one epoch, a function of seed and epoch only.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CcgModel,
    pub optimizer: Sgd,
    pub records: Vec<StepRecord>,
    /// Mean `l_all` of every epoch run in this call.
    pub epoch_means: Vec<f64>,
    pub epochs_completed: usize,
    pub step: usize,
}

/// Where a run starts from.
pub enum Start<'a> {
    Fresh,
    Resume(&'a Checkpoint),
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub dataset: &'a Dataset,
    pub train_indices: Vec<usize>,
    pub out_dir: Option<PathBuf>,
    /// Stop after this many completed epochs (defaults to `config.epochs`).
    pub stop_after: Option<usize>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, dataset: &'a Dataset, train_indices: Vec<usize>) -> Self {
        Self {
            config,
            dataset,
            train_indices,
            out_dir: None,
            stop_after: None,
        }
    }

    pub fn with_out_dir(mut self, dir: &Path) -> Self {
        self.out_dir = Some(dir.to_path_buf());
        self
    }

    fn initial_state(&self, start: Start<'_>) -> Result<(CcgModel, Sgd, usize, usize)> {
        let cfg = &self.config;
        match start {
            Start::Fresh => {
                let mut model = CcgModel::new(
                    ModelConfig::from_train(cfg, self.dataset.num_classes()),
                    cfg.seed,
                )?;
                if let Some(path) = &cfg.pretrained {
                    let ck = Checkpoint::load(path)?;
                    let store = ck.restore()?.0.store;
                    let n = model.copy_params_from(&store, "backbone.");
                    log::info!("loaded {n} backbone tensors from {}", path.display());
                }
                let opt = Sgd::new(&model.store, cfg.momentum, cfg.weight_decay);
                Ok((model, opt, 0, 0))
            }
            Start::Resume(ck) => {
                if ck.num_classes != self.dataset.num_classes() {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint has {} classes, dataset has {}",
                        ck.num_classes,
                        self.dataset.num_classes()
                    )));
                }
                let (model, opt) = ck.restore()?;
                Ok((model, opt, ck.epochs_completed, ck.step))
            }
        }
    }

    pub fn run(&self, start: Start<'_>) -> Result<TrainOutcome> {
        let cfg = &self.config;
        cfg.validate()?;
        let resuming = matches!(start, Start::Resume(_));
        let (mut model, mut opt, first_epoch, mut step) = self.initial_state(start)?;
        let cache = PatchCache::new(cfg.patch_cache.as_deref(), cfg.structure_params());
        let prepared =
            prepare_samples(self.dataset, &self.train_indices, model.grid_size(), &cache)?;
        if prepared.len() < cfg.batch_size {
            return Err(invalid(format!(
                "{} training samples cannot fill a batch of {}",
                prepared.len(),
                cfg.batch_size
            )));
        }
        let weights = cfg.effective_weights();
        let mut log = match &self.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let path = dir.join(LOG_FILE);
                let file = if resuming {
                    OpenOptions::new().create(true).append(true).open(path)?
                } else {
                    File::create(path)?
                };
                Some(BufWriter::new(file))
            }
            None => None,
        };

        let last_epoch = self.stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
        let mut records = Vec::new();
        let mut epoch_means = Vec::new();
        for epoch in first_epoch..last_epoch {
            let lr = learning_rate(cfg.lr0, epoch, cfg.lr_decay_every, cfg.lr_decay_factor);
            let order = epoch_order(prepared.len(), cfg.seed, epoch);
            let mut sum = 0.0;
            let mut count = 0;
            for chunk in order.chunks_exact(cfg.batch_size) {
                let batch: Vec<&PreparedSample<'_>> = chunk.iter().map(|&i| &prepared[i]).collect();
                let (report, mut grads) =
                    compute_batch(&model, &batch, cfg.ablation, weights, cfg.beta_b, step)?;
                if !grads.is_finite() {
                    return Err(Error::NonFinite {
                        step,
                        detail: "gradient".into(),
                    });
                }
                clip_grad_norm(&mut grads, &model.store, cfg.grad_clip);
                opt.step(&mut model.store, &grads, lr);
                let record = StepRecord {
                    step,
                    epoch,
                    lr,
                    losses: report,
                    w1: weights[0],
                    w2: weights[1],
                    w3: weights[2],
                    w4: weights[3],
                    beta_b: cfg.beta_b,
                    ablation: cfg.ablation.to_string(),
                };
                if let Some(w) = log.as_mut() {
                    serde_json::to_writer(&mut *w, &record)?;
                    w.write_all(b"\n")?;
                }
                sum += report.l_all;
                count += 1;
                step += 1;
                records.push(record);
            }
            let mean = sum / count as f64;
            log::info!("epoch {} lr {lr:e} mean l_all {mean:.5}", epoch + 1);
            epoch_means.push(mean);
            if let Some(w) = log.as_mut() {
                w.flush()?;
            }
            if let Some(dir) = &self.out_dir {
                let ck = Checkpoint::capture(&model, Some(&opt), cfg, epoch + 1, step);
                ck.save(&dir.join(epoch_checkpoint_name(epoch + 1)))?;
                ck.save(&dir.join(LATEST_CHECKPOINT))?;
            }
        }
        Ok(TrainOutcome {
            model,
            optimizer: opt,
            records,
            epoch_means,
            epochs_completed: last_epoch.max(first_epoch),
            step,
        })
    }
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SyntheticConfig};

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss([1.0; 4], [0.25; 4], 0).unwrap(), 1.0);
        assert_eq!(
            total_loss([2.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], 0).unwrap(),
            2.0
        );
        let third = 1.0 / 3.0;
        let v = total_loss([3.0, 1.0, 2.0, 0.0], [third, third, third, 0.0], 0).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        let err = total_loss([1.0, f64::NAN, 0.0, 0.0], [0.25; 4], 7).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 7, .. }));
    }

    #[test]
    fn epoch_orders_are_seeded_permutations() {
        let a = epoch_order(10, 3, 0);
        assert_eq!(a, epoch_order(10, 3, 0));
        assert_ne!(a, epoch_order(10, 3, 1));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn short_run_logs_and_checkpoints() {
        let ds = generate_synthetic_dataset(&SyntheticConfig::new(1, 8, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            holdout: 2,
            ..TrainConfig::default()
        };
        let split = split_for(&cfg, ds.len()).unwrap();
        let out = Trainer::new(cfg.clone(), &ds, split.train)
            .with_out_dir(dir.path())
            .run(Start::Fresh)
            .unwrap();
        assert_eq!(out.records.len(), 6);
        assert_eq!(out.epochs_completed, 2);
        let log = read_log(&dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(log, out.records);
        assert!(log
            .iter()
            .all(|r| r.losses.l_ir > 0.0 && r.w1 == 0.25 && r.beta_b == 4.0));
        assert!(dir.path().join(epoch_checkpoint_name(1)).exists());
        let ck = Checkpoint::load(&dir.path().join(LATEST_CHECKPOINT)).unwrap();
        assert_eq!((ck.epochs_completed, ck.step), (2, 6));
    }

    #[test]
    fn baseline_logs_only_base() {
        let ds = generate_synthetic_dataset(&SyntheticConfig::new(2, 6, 2)).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            holdout: 2,
            ablation: AblationMode::BASELINE,
            ..TrainConfig::default()
        };
        let out = Trainer::new(cfg, &ds, (0..4).collect())
            .run(Start::Fresh)
            .unwrap();
        for r in &out.records {
            assert!(r.losses.l_base > 0.0);
            assert_eq!([r.losses.l_ir, r.losses.l_ik, r.losses.l_kr], [0.0; 3]);
            assert_eq!(r.losses.l_all, r.losses.l_base);
        }
    }
}
