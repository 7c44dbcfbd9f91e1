//! Synthetic data through disk, a short training run, evaluation and
//! heatmap export.

use ccg::checkpoint::Checkpoint;
use ccg::config::TrainConfig;
use ccg::data::{generate_synthetic_dataset, write_dataset, DatasetFiles, SyntheticConfig};
use ccg::eval::{accuracy_table, evaluate, export_heatmap, heatmap_file_name, IOU_THRESHOLDS};
use ccg::train::{read_log, split_for, Start, Trainer, LATEST_CHECKPOINT, LOG_FILE};

#[test]
fn dataset_survives_the_disk_layout() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic_dataset(&SyntheticConfig::new(11, 12, 3)).unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = DatasetFiles::in_dir(dir.path())
        .load(ds.image_size)
        .unwrap();
    assert_eq!(back.vocab, ds.vocab);
    assert_eq!(back.len(), ds.len());
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.image_labels, b.image_labels);
        assert_eq!(a.annotated, b.annotated);
        assert_eq!(a.boxes, b.boxes);
        // 8-bit PNG quantization
        let worst = a
            .pixels
            .iter()
            .zip(&b.pixels)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6, "{}: {worst}", a.id);
    }
}

#[test]
fn short_run_trains_evaluates_and_renders() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic_dataset(&SyntheticConfig::new(5, 40, 2)).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        holdout: 10,
        seed: 5,
        ..TrainConfig::default()
    };
    let split = split_for(&cfg, ds.len()).unwrap();
    let run = dir.path().join("run");
    let outcome = Trainer::new(cfg.clone(), &ds, split.train.clone())
        .with_out_dir(&run)
        .run(Start::Fresh)
        .unwrap();
    assert_eq!(outcome.epochs_completed, 2);
    assert_eq!(outcome.step, 2 * (30 / cfg.batch_size));
    assert_eq!(read_log(&run.join(LOG_FILE)).unwrap().len(), outcome.step);
    assert!(run.join("epoch_1.ckpt").exists() && run.join("epoch_2.ckpt").exists());

    let (model, _) = Checkpoint::load(&run.join(LATEST_CHECKPOINT))
        .unwrap()
        .restore()
        .unwrap();
    let results = evaluate(&model, &ds, &split.test, cfg.threshold, cfg.upsample).unwrap();
    let expected: usize = split
        .test
        .iter()
        .map(|&i| {
            (0..2)
                .filter(|&k| {
                    ds.samples[i].image_labels[k] && ds.samples[i].boxes_of(k).next().is_some()
                })
                .count()
        })
        .sum();
    assert_eq!(results.len(), expected);
    assert!(results.iter().all(|r| (0.0..=1.0).contains(&r.iou)));

    let table = accuracy_table(&results, &IOU_THRESHOLDS, ds.vocab.names());
    let out = dir.path().join("eval");
    table.write(&out).unwrap();
    let csv = std::fs::read_to_string(out.join("accuracy.csv")).unwrap();
    assert!(csv.starts_with("T,class,accuracy,n\n"));
    assert_eq!(csv.lines().count(), 1 + IOU_THRESHOLDS.len() * 3);

    let r = &results[0];
    let sample = ds.samples.iter().find(|s| s.id == r.sample_id).unwrap();
    let boxes: Vec<_> = sample.boxes_of(r.class).copied().collect();
    let png = out.join(heatmap_file_name(&sample.id, ds.vocab.name(r.class)));
    export_heatmap(sample, r.mask.view(), &boxes, &png).unwrap();
    let img = image::open(&png).unwrap();
    assert_eq!(
        (img.width() as usize, img.height() as usize),
        (ds.image_size, ds.image_size)
    );
}

#[test]
fn resume_with_the_wrong_class_count_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let ds2 = generate_synthetic_dataset(&SyntheticConfig::new(1, 8, 2)).unwrap();
    let ds3 = generate_synthetic_dataset(&SyntheticConfig::new(1, 8, 3)).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        holdout: 0,
        ..TrainConfig::default()
    };
    Trainer::new(cfg.clone(), &ds2, (0..8).collect())
        .with_out_dir(dir.path())
        .run(Start::Fresh)
        .unwrap();
    let ck = Checkpoint::load(&dir.path().join(LATEST_CHECKPOINT)).unwrap();
    let err = Trainer::new(cfg, &ds3, (0..8).collect()).run(Start::Resume(&ck));
    assert!(err.is_err());
}
