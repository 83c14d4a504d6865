use focalmix::dataset::{generate_split_scan, Split};
use focalmix::ssl::{train, Source, SslConfig, TrainConfig, Trainer};
use focalmix::{DetectorConfig, Error, ExperimentConfig, FocalParams, GenConfig, LabeledScan};

fn gen() -> GenConfig {
    GenConfig {
        volume_shape: [48, 48, 48],
        ..GenConfig::default()
    }
}

fn scans(split: Split, n: usize) -> Vec<LabeledScan<f32>> {
    (0..n).map(|i| generate_split_scan(&gen(), split, i).unwrap()).collect()
}

fn short(epochs: usize, steps: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        steps_per_epoch: steps,
        ..TrainConfig::default()
    }
}

fn small_ssl() -> SslConfig {
    SslConfig {
        labeled_per_batch: 2,
        unlabeled_per_batch: 3,
        k: 2,
        ..SslConfig::default()
    }
}

#[test]
fn batches_have_configured_composition() {
    let labeled = scans(Split::Labeled, 2);
    let unlabeled = scans(Split::Unlabeled, 3);
    let ssl = small_ssl();
    let det = DetectorConfig::default();
    let mut tr = Trainer::new(&labeled, &unlabeled, ssl.clone(), det.clone(), short(1, 1), FocalParams::default())
        .unwrap();
    for _ in 0..3 {
        let batch = tr.next_batch().unwrap();
        let l = batch.iter().filter(|s| s.source == Source::Labeled).count();
        let u = batch.iter().filter(|s| s.source == Source::Unlabeled).count();
        assert_eq!((l, u), (2, 3));
        assert!(batch.iter().all(|s| s.targets.len() == tr.model().grid().len()));
        assert!(batch
            .iter()
            .filter(|s| s.source == Source::Unlabeled)
            .all(|s| s.targets.reg.iter().all(Option::is_none)));
    }
    let mut sup = Trainer::new(&labeled, &unlabeled, ssl.supervised(), det, short(1, 1), FocalParams::default())
        .unwrap();
    let batch = sup.next_batch().unwrap();
    assert_eq!(batch.len(), 2);
    assert!(batch.iter().all(|s| s.source == Source::Labeled));
}

#[test]
fn empty_pool_without_mixup_is_the_supervised_baseline() {
    let labeled = scans(Split::Labeled, 2);
    let unlabeled = scans(Split::Unlabeled, 2);
    let det = DetectorConfig::default();
    let ssl = small_ssl();
    let no_mix = SslConfig {
        image_mixup: false,
        object_mixup: false,
        ..ssl.clone()
    };
    let a = train(&labeled, &[], &no_mix, &det, &short(2, 2), &FocalParams::default(), None).unwrap();
    let b = train(&labeled, &unlabeled, &ssl.supervised(), &det, &short(2, 2), &FocalParams::default(), None).unwrap();
    assert_eq!(a.model.convs(), b.model.convs());
    assert_eq!(format!("{:?}", a.log), format!("{:?}", b.log));
}

#[test]
fn training_is_reproducible() {
    let labeled = scans(Split::Labeled, 1);
    let unlabeled = scans(Split::Unlabeled, 2);
    let det = DetectorConfig::default();
    let run = || train(&labeled, &unlabeled, &small_ssl(), &det, &short(1, 2), &FocalParams::default(), None).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.model.convs(), b.model.convs());
    assert_eq!(a.model.step_count(), 2);
}

#[test]
fn single_scan_loss_drops_fivefold() {
    let cfg = ExperimentConfig::default();
    let labeled = scans(Split::Labeled, 1);
    let out = train(
        &labeled,
        &[],
        &cfg.ssl.supervised(),
        &cfg.detector,
        &short(50, 1),
        &cfg.focal,
        None,
    )
    .unwrap();
    let first = out.log[0].loss_labeled;
    let last = out.log.last().unwrap().loss_labeled;
    assert!(last < first / 5.0, "loss {first} -> {last}");
}

#[test]
fn runaway_learning_rate_aborts_with_divergence() {
    let labeled = scans(Split::Labeled, 1);
    let cfg = TrainConfig {
        base_lr: 1e38,
        ..short(1, 5)
    };
    let err = train(
        &labeled,
        &[],
        &small_ssl().supervised(),
        &DetectorConfig::default(),
        &cfg,
        &FocalParams::default(),
        None,
    )
    .err()
    .unwrap();
    assert!(matches!(err, Error::Divergence(_)), "{err}");
}

#[test]
fn trainer_rejects_bad_inputs() {
    let labeled = scans(Split::Labeled, 1);
    let det = DetectorConfig::default();
    let f = FocalParams::default();
    assert!(matches!(
        Trainer::new(&[], &[], small_ssl(), det.clone(), short(1, 1), f),
        Err(Error::Config(_))
    ));
    let bad = SslConfig {
        temperature: 0.0,
        ..small_ssl()
    };
    assert!(Trainer::new(&labeled, &[], bad, det.clone(), short(1, 1), f).is_err());
    let big = DetectorConfig {
        input_patch: [64, 64, 64],
        ..det
    };
    assert!(matches!(
        Trainer::new(&labeled, &[], small_ssl(), big, short(1, 1), f),
        Err(Error::Shape(_))
    ));
}

#[test]
fn metrics_csv_layout() {
    let labeled = scans(Split::Labeled, 1);
    let test = scans(Split::Test, 1);
    let out = train(
        &labeled,
        &[],
        &small_ssl().supervised(),
        &DetectorConfig::default(),
        &short(2, 1),
        &FocalParams::default(),
        Some(&test),
    )
    .unwrap();
    let mut buf = Vec::new();
    focalmix::ssl::write_metrics_csv(&mut buf, &out.log).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,lr,loss_labeled,loss_unlabeled,CPM_val");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,0.001,") && lines[1].ends_with(",,"));
    assert!(!lines[2].ends_with(','));
}
