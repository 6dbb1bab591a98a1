use halc_core::dataset::{
    read_feature_file, synth_clusters, ClusterSpec, FeatureDataset, FeatureShape, Split, SplitCounts,
};
use halc_core::models::EmbeddingNet;
use halc_core::representation::{
    accuracy, base_label_map, batch, export_features, stage1_loss, stage2_loss, train_stage1, train_stage2_distill,
    ReprConfig,
};
use halc_core::rng::seeded;
use halc_core::{Tape, Tensor};

/// Four well-separated classes of 3×8×8 "images".
fn toy_images() -> FeatureDataset {
    synth_clusters(&ClusterSpec {
        num_classes: 4,
        examples_per_class: 30,
        feature_shape: FeatureShape::new(3, 8, 8),
        intra_class_std: 0.05,
        seed: 1,
        splits: Some(SplitCounts {
            base: 4,
            val: 0,
            novel: 0,
        }),
    })
    .unwrap()
}

fn net(seed: u64) -> EmbeddingNet {
    EmbeddingNet::new([3, 8, 8], FeatureShape::new(6, 4, 4), 8, 4, &mut seeded(seed)).unwrap()
}

fn full_batch(ds: &FeatureDataset) -> (Tensor, Vec<usize>) {
    let labels = base_label_map(ds).unwrap();
    let all: Vec<usize> = ds.split_indices(Split::Base);
    batch(ds, &all, &labels).unwrap()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn logits(net: &EmbeddingNet, images: &Tensor) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let params = net.bind(&mut tape, false);
    let x = tape.constant(images.clone());
    let out = net.logits(&mut tape, &params, x).unwrap();
    tape.value(out).data().chunks(4).map(<[f64]>::to_vec).collect()
}

#[test]
fn separable_toy_data_is_learned() {
    let ds = toy_images();
    let mut model = net(2);
    let history = train_stage1(&ds, &mut model, &ReprConfig::default()).unwrap();
    assert_eq!(history.len(), 20);
    assert!(history.iter().all(|l| l.is_finite()));
    let acc = accuracy(&model, &ds, Split::Base).unwrap();
    assert!(acc > 0.95, "training accuracy {acc}");
}

#[test]
fn first_epoch_lowers_the_loss() {
    let ds = toy_images();
    let (images, labels) = full_batch(&ds);
    let mut model = net(3);
    let cfg = ReprConfig {
        epochs: 1,
        ..Default::default()
    };
    let before = stage1_loss(&model, &images, &labels, cfg.regularizer_weight).unwrap();
    train_stage1(&ds, &mut model, &cfg).unwrap();
    let after = stage1_loss(&model, &images, &labels, cfg.regularizer_weight).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn distillation_leaves_the_teacher_untouched() {
    let ds = toy_images();
    let mut teacher = net(4);
    train_stage1(
        &ds,
        &mut teacher,
        &ReprConfig {
            epochs: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let frozen = teacher.clone();
    let mut student = net(5);
    let cfg = ReprConfig {
        epochs: 2,
        ..Default::default()
    };
    let history = train_stage2_distill(&ds, &teacher, &mut student, &cfg).unwrap();
    assert!(history.iter().all(|l| l.is_finite()));
    let bits = |n: &EmbeddingNet| -> Vec<u64> { n.params().flat_map(|p| p.data().iter().map(|x| x.to_bits())).collect() };
    assert_eq!(bits(&teacher), bits(&frozen));
}

#[test]
fn kl_starts_at_zero_for_a_copied_student() {
    let ds = toy_images();
    let (images, labels) = full_batch(&ds);
    let teacher = net(6);
    let kl_only = ReprConfig {
        alpha: 0.0,
        beta: 1.0,
        ..Default::default()
    };
    let loss = stage2_loss(&teacher.clone(), &teacher, &images, &labels, &kl_only).unwrap();
    assert_eq!(loss.kl, 0.0);
    assert_eq!(loss.total, 0.0);
}

#[test]
fn plain_weights_reduce_to_stage_one() {
    let ds = toy_images();
    let (images, labels) = full_batch(&ds);
    let (student, teacher) = (net(7), net(8));
    let cfg = ReprConfig {
        alpha: 1.0,
        beta: 0.0,
        ..Default::default()
    };
    let s1 = stage1_loss(&student, &images, &labels, cfg.regularizer_weight).unwrap();
    let s2 = stage2_loss(&student, &teacher, &images, &labels, &cfg).unwrap();
    assert!((s1 - s2.total).abs() <= 4.0 * f64::EPSILON * s1.abs());
}

#[test]
fn combined_loss_matches_hand_formula() {
    let ds = toy_images();
    let (images, labels) = full_batch(&ds);
    let (student, teacher) = (net(9), net(10));
    let cfg = ReprConfig::default();
    let got = stage2_loss(&student, &teacher, &images, &labels, &cfg).unwrap();

    let s = logits(&student, &images);
    let t = logits(&teacher, &images);
    let n = labels.len() as f64;
    let mut ce = 0.0;
    let mut kl = 0.0;
    for ((srow, trow), &y) in s.iter().zip(&t).zip(&labels) {
        let p = softmax(srow);
        let q = softmax(trow);
        ce -= p[y].ln();
        kl += q.iter().zip(&p).map(|(qi, pi)| qi * (qi.ln() - pi.ln())).sum::<f64>();
    }
    let (ce, kl) = (ce / n, kl / n);
    let w = student.classifier.weights();
    let reg = 0.5 * cfg.regularizer_weight * w.data().iter().map(|x| x * x).sum::<f64>();
    let expected = 0.5 * (ce + reg) + 0.5 * kl;
    assert!((got.cross_entropy - ce).abs() < 1e-10);
    assert!((got.kl - kl).abs() < 1e-10);
    assert!((got.regularizer - reg).abs() < 1e-14);
    assert!((got.total - expected).abs() < 1e-10, "{} vs {expected}", got.total);
}

#[test]
fn exported_features_match_the_backbone() {
    let ds = toy_images();
    let model = net(11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("features.fth");
    let exported = export_features(&model.backbone, &ds, &path).unwrap();
    assert_eq!(exported.shape(), FeatureShape::new(6, 4, 4));
    assert!(exported.examples().iter().all(|e| e.feature.shape() == [6, 4, 4]));

    let (images, _) = full_batch(&ds);
    let mut tape = Tape::new();
    let params = model.backbone.net().bind_frozen(&mut tape);
    let x = tape.constant(images);
    let pooled = model.backbone.pooled(&mut tape, &params, x).unwrap();
    let pooled: Vec<&[f64]> = tape.value(pooled).data().chunks(6).collect();
    let order = ds.split_indices(Split::Base);
    for (row, &i) in pooled.iter().zip(&order) {
        let gap = exported.feature(i).global_average_pool().unwrap();
        for (a, b) in gap.data().iter().zip(row.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    let back = read_feature_file(&path).unwrap();
    assert_eq!(back, exported);
    for &c in ds.classes(Split::Base) {
        assert_eq!(back.indices_of(c).len(), ds.indices_of(c).len());
    }
}
