use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use focalmix::anchors::{desk_levels, AnchorMask, AnchorTargets};
use focalmix::model::Detector;
use focalmix::rng::stream;
use focalmix::ssl::{
    ensemble_probabilities, image_mixup, object_mixup, predict_targets, sample_beta, sample_mix_weight,
    select_unlabeled, sharpen, Source, SslConfig, TrainingSample,
};
use focalmix::inference::DetectParams;
use focalmix::transforms::{apply_to_anchor_index, apply_to_volume, enumerate_group};
use focalmix::{Box3D, DetectorConfig, LabeledScan, Volume3D};

fn micro(seed: u64) -> Detector<f64> {
    Detector::new(DetectorConfig {
        input_patch: [16, 16, 16],
        channels: vec![4, 6, 8],
        fpn_channels: 6,
        levels: desk_levels(),
        weight_init_seed: seed,
    })
    .unwrap()
}

/// Head with zero weights: every anchor outputs `sigmoid(bias)`.
fn constant_model(logit: f64) -> Detector<f64> {
    let mut m = micro(0);
    let out = m.convs_mut().last_mut().unwrap();
    out.weight.fill(0.0);
    out.bias.fill(0.0);
    out.bias[0] = logit;
    m
}

fn random_patch(seed: u64) -> Volume3D<f64> {
    let mut r = stream(seed, 1);
    Volume3D::from_fn([16, 16, 16], |_| r.gen_range(-1.0..1.0))
}

/// Jöhnk's rejection sampler for Beta(a, b).
fn johnk_beta(a: f64, b: f64, r: &mut impl Rng) -> f64 {
    loop {
        let u: f64 = r.gen();
        let v: f64 = r.gen();
        let x = u.powf(1.0 / a);
        let y = v.powf(1.0 / b);
        if x + y <= 1.0 && x + y > 0.0 {
            return x / (x + y);
        }
    }
}

#[test]
fn predicted_targets_of_constant_half_model_are_half() {
    let m = constant_model(0.0);
    let patch = random_patch(1);
    let cfg = SslConfig::default();
    let t = predict_targets(&m, &patch, m.grid(), &cfg, &mut stream(0, 0)).unwrap();
    assert!(t.cls.iter().all(|&y| y == 0.5));
    assert!(t.mask.iter().all(|&k| k == AnchorMask::Train));
    assert!(t.reg.iter().all(Option::is_none));
}

#[test]
fn equivariant_model_gives_sharpened_single_pass() {
    let m = constant_model(1.3);
    let patch = random_patch(2);
    let single = m.forward(&patch).unwrap();
    let cfg = SslConfig {
        k: 6,
        ..SslConfig::default()
    };
    let t = predict_targets(&m, &patch, m.grid(), &cfg, &mut stream(0, 0)).unwrap();
    for (y, p) in t.cls.iter().zip(&single.probs) {
        assert_relative_eq!(*y, sharpen(*p, cfg.temperature), epsilon = 1e-12);
    }
}

#[test]
fn full_group_ensemble_is_invariant_to_pre_transformation() {
    let m = micro(7);
    let grid = m.grid().clone();
    let group = enumerate_group();
    let patch = random_patch(3);
    let base = ensemble_probabilities(&m, &patch, &grid, &group).unwrap();
    for t in group.iter().step_by(5) {
        let moved = apply_to_volume(t, &patch).unwrap();
        let got = ensemble_probabilities(&m, &moved, &grid, &group).unwrap();
        let pi = apply_to_anchor_index(t, &grid).unwrap();
        for (i, &orig) in pi.iter().enumerate() {
            assert!((got[i] - base[orig]).abs() < 1e-6, "{t:?} anchor {i}");
        }
    }
}

#[test]
fn ensemble_example_from_four_members() {
    let mean: f64 = [0.6, 0.8, 0.7, 0.9].iter().sum::<f64>() / 4.0;
    assert_relative_eq!(mean, 0.75);
    assert_relative_eq!(sharpen(mean, 0.7), 0.827_704_634_908_101_1, epsilon = 1e-12);
}

#[test]
fn beta_weights_match_independent_sampler() {
    let mut r = stream(10, 0);
    let n = 100_000;
    let mean = (0..n).map(|_| sample_beta(0.2, &mut r)).sum::<f64>() / n as f64;
    assert!((mean - 0.5).abs() < 0.01, "mean {mean}");

    // Reference masses for Beta(0.2, 0.2): P(l~ > 0.9) = 2 I_0.1(0.2, 0.2),
    // P(l~ < 0.6) = I_0.6 - I_0.4.
    let (hi_exact, lo_exact) = (0.673_379_556_860_114_1, 0.064_505_301_419_227_67);
    let mut oracle = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(99);
    let m = 1_000_000;
    let (mut hi_ref, mut lo_ref, mut hi, mut lo) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..m {
        let l = johnk_beta(0.2, 0.2, &mut oracle);
        let l = l.max(1.0 - l);
        hi_ref += (l > 0.9) as usize;
        lo_ref += (l < 0.6) as usize;
        let w = sample_mix_weight(0.2, &mut r);
        assert!((0.5..=1.0).contains(&w));
        hi += (w > 0.9) as usize;
        lo += (w < 0.6) as usize;
    }
    let f = |c: usize| c as f64 / m as f64;
    assert!((f(hi_ref) - hi_exact).abs() < 3e-3 && (f(lo_ref) - lo_exact).abs() < 2e-3);
    assert!((f(hi) - f(hi_ref)).abs() < 4e-3, "{} vs {}", f(hi), f(hi_ref));
    assert!((f(lo) - f(lo_ref)).abs() < 3e-3, "{} vs {}", f(lo), f(lo_ref));
    assert!(f(hi) > f(lo));
}

fn sample_with(cls: Vec<f64>, mask: Vec<AnchorMask>, fill: f64) -> TrainingSample<f64> {
    let n = cls.len();
    TrainingSample {
        patch: Volume3D::from_fn([4, 4, 4], |(z, y, x)| fill + (z + y + x) as f64),
        targets: AnchorTargets {
            cls,
            reg: vec![None; n],
            mask,
        },
        source: Source::Unlabeled,
        objects: vec![],
    }
}

proptest! {
    #[test]
    fn sharpen_moves_mass_away_from_half(y in 0.0f64..=1.0, t in 0.05f64..0.999) {
        let s = sharpen(y, t);
        prop_assert!((0.0..=1.0).contains(&s));
        if y >= 0.5 { prop_assert!(s >= y - 1e-12); } else { prop_assert!(s <= y + 1e-12); }
    }

    #[test]
    fn sharpen_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, t in 0.05f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(sharpen(lo, t) <= sharpen(hi, t) + 1e-12);
    }

    #[test]
    fn image_mixup_targets_lie_in_convex_hull(
        ya in prop::collection::vec(0.0f64..=1.0, 10),
        yb in prop::collection::vec(0.0f64..=1.0, 10),
        ignore in prop::collection::vec(any::<(bool, bool)>(), 10),
        lambda in 0.5f64..=1.0,
    ) {
        let ma = ignore.iter().map(|p| if p.0 { AnchorMask::Ignore } else { AnchorMask::Train }).collect();
        let mb = ignore.iter().map(|p| if p.1 { AnchorMask::Ignore } else { AnchorMask::Train }).collect();
        let a = sample_with(ya.clone(), ma, 0.0);
        let b = sample_with(yb.clone(), mb, 3.0);
        let m = image_mixup(&a, &b, lambda).unwrap();
        for i in 0..10 {
            let (lo, hi) = (ya[i].min(yb[i]), ya[i].max(yb[i]));
            prop_assert!(m.targets.cls[i] >= lo - 1e-12 && m.targets.cls[i] <= hi + 1e-12);
            let either = ignore[i].0 || ignore[i].1;
            prop_assert_eq!(m.targets.mask[i] == AnchorMask::Ignore, either);
        }
    }
}

#[test]
fn object_mixup_keeps_targets_and_outside_voxels() {
    let mut r = stream(4, 4);
    let mk = |r: &mut focalmix::rng::Rng| TrainingSample {
        patch: Volume3D::from_fn([16, 16, 16], |_| r.gen_range(-1.0..1.0)),
        targets: AnchorTargets::<f64>::negatives(7),
        source: Source::Labeled,
        objects: vec![],
    };
    let batch: Vec<_> = (0..3).map(|_| mk(&mut r)).collect();
    let objects = vec![
        vec![Box3D::new([4.0, 4.0, 4.0], 4.0)],
        vec![Box3D::new([10.0, 9.0, 8.0], 6.0), Box3D::new([3.0, 12.0, 3.0], 3.0)],
        vec![],
    ];
    let mut mixed = batch.clone();
    object_mixup(&mut mixed, &objects, |r| sample_mix_weight(0.2, r), &mut r);
    assert_eq!(mixed[2], batch[2]);
    for (m, b) in mixed.iter().zip(&batch) {
        assert_eq!(m.targets, b.targets);
    }
    // Far corner untouched; host interior changed.
    assert_eq!(mixed[0].patch.data()[[15, 15, 15]], batch[0].patch.data()[[15, 15, 15]]);
    assert_ne!(mixed[0].patch.data()[[4, 4, 4]], batch[0].patch.data()[[4, 4, 4]]);
}

#[test]
fn select_unlabeled_boundaries() {
    let m = micro(1).cast::<f32>();
    let pool: Vec<LabeledScan<f32>> = (0..3)
        .map(|i| {
            let mut r = stream(i, 9);
            LabeledScan {
                id: format!("u{i}"),
                volume: Volume3D::from_fn([16, 16, 16], |_| r.gen_range(-1.0f32..1.0)),
                boxes: vec![],
            }
        })
        .collect();
    let params = DetectParams::default();
    assert_eq!(select_unlabeled(&m, &pool, 0.0, params).unwrap().len(), pool.len());
    assert!(select_unlabeled(&m, &pool, 1.0, params).unwrap().is_empty());
    let none = DetectParams {
        max_candidates: 0,
        ..params
    };
    assert!(select_unlabeled(&m, &pool, 0.0, none).unwrap().is_empty());
}
