use ccr_core::imageops::{crop, resize_bilinear};
use ccr_core::numerics::Tensor;
use ccr_core::proposal::BBox;
use ccr_core::model::{CamNet, HeadKind, ModelConfig};
use ccr_core::numerics::{argmax, sigmoid};
use ccr_core::synthdata::{generate_individual_specs, render_frame, SceneConfig};
use ccr_core::train::{
    count_label, train_counting, train_recognition, train_track_classifier, AugmentConfig,
    ClassWeights, Sample, Target, TrainConfig,
};
use ccr_core::synthdata::Split;

/// Eight small rendered frames, one per scene, at network resolution.
fn frames() -> Vec<(Tensor, Vec<u8>)> {
    let scene = SceneConfig { train_frames: 40, test_frames: 0, ..SceneConfig::default() };
    let specs = generate_individual_specs(scene.num_identities, scene.seed).unwrap();
    (0..8u64)
        .map(|i| {
            let f = render_frame(&specs, &scene, i * 5).unwrap();
            (resize_bilinear(&f.image, 32, 32).unwrap(), f.record.y)
        })
        .collect()
}

/// Eight body crops with their identities.
fn body_crops() -> Vec<(Tensor, usize)> {
    let scene = SceneConfig { train_frames: 100, test_frames: 0, ..SceneConfig::default() };
    let specs = generate_individual_specs(scene.num_identities, scene.seed).unwrap();
    (0..20u64)
        .filter_map(|i| {
            let f = render_frame(&specs, &scene, i * 5).unwrap();
            let b = f.record.body_boxes.first()?;
            let region = BBox::new(b.x0, b.y0, b.x1, b.y1).unwrap();
            Some((resize_bilinear(&crop(&f.image, &region).unwrap(), 32, 32).unwrap(), b.id))
        })
        .take(8)
        .collect()
}

fn config(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: lr,
        augment: AugmentConfig::none(),
        seed: 3,
        ..TrainConfig::default()
    }
}

fn net(head: HeadKind, k: usize) -> CamNet {
    CamNet::new(ModelConfig { input_side: 32, ..ModelConfig::new(head, k, 11) }).unwrap()
}

fn count_samples() -> Vec<Sample> {
    frames()
        .into_iter()
        .map(|(image, y)| Sample { image, target: Target::Count(count_label(&y, 3)) })
        .collect()
}

#[test]
fn zero_learning_rate_is_a_fixed_point() {
    let samples = count_samples();
    let mut n = net(HeadKind::Count, 4);
    // counting re-anchors the head on the empty bin after the last step
    let mut before = n.clone();
    before.anchor_head(0).unwrap();
    let h = train_counting(&mut n, &samples, &config(3, 0.0)).unwrap();
    assert_eq!(h.epochs.len(), 3);
    assert_eq!(n.params(), before.params());

    let labels: Vec<Sample> = frames()
        .into_iter()
        .map(|(image, y)| Sample { image, target: Target::Labels(y.iter().map(|&v| v != 0).collect()) })
        .collect();
    let w = ClassWeights::from_counts(&[1; 6], Split::Train).unwrap();
    let mut r = net(HeadKind::MultilabelIdentity, 6);
    let before = r.clone();
    train_recognition(&mut r, &labels, &w, &config(2, 0.0)).unwrap();
    assert_eq!(r.params(), before.params());
}

#[test]
fn counting_overfits_one_batch() {
    let samples = count_samples();
    let mut n = net(HeadKind::Count, 4);
    let h = train_counting(&mut n, &samples, &config(200, 0.1)).unwrap();
    let correct = samples
        .iter()
        .filter(|s| {
            let (bin, _) = n.predict_count(&s.image).unwrap();
            Target::Count(bin) == s.target
        })
        .count();
    assert_eq!(correct, samples.len(), "final loss {:?}", h.last());
}

#[test]
fn recognition_overfits_one_batch() {
    let samples: Vec<Sample> = body_crops()
        .into_iter()
        .map(|(image, id)| Sample { image, target: Target::Labels((0..6).map(|c| c == id).collect()) })
        .collect();
    let w = ClassWeights::from_counts(&[4, 2, 1, 1, 3, 2], Split::Train).unwrap();
    let mut n = net(HeadKind::MultilabelIdentity, 6);
    train_recognition(&mut n, &samples, &w, &config(300, 0.1)).unwrap();
    let mut per_class = [0.0; 6];
    for s in &samples {
        let Target::Labels(y) = &s.target else { unreachable!() };
        for (c, &p) in n.predict_identities(&s.image).unwrap().iter().enumerate() {
            let q = if y[c] { p } else { 1.0 - p };
            per_class[c] -= q.ln() / samples.len() as f64;
        }
    }
    assert!(per_class.iter().all(|&l| l < 0.05), "{per_class:?}");
    // sanity: sigmoid is what predict_identities reports
    assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
}

#[test]
fn track_classifier_overfits_one_batch() {
    let samples: Vec<Sample> = body_crops()
        .into_iter()
        .map(|(image, id)| Sample { image, target: Target::Class(id) })
        .collect();
    assert_eq!(samples.len(), 8);
    let mut n = net(HeadKind::SingleLabelIdentity, 6);
    train_track_classifier(&mut n, &samples, &config(200, 0.03)).unwrap();
    for s in &samples {
        let p = n.predict_softmax(&s.image).unwrap();
        assert_eq!(Target::Class(argmax(&p)), s.target);
    }
}

#[test]
fn training_is_bit_reproducible() {
    let samples = count_samples();
    let cfg = TrainConfig { augment: AugmentConfig::default(), batch_size: 3, ..config(4, 0.01) };
    let mut a = net(HeadKind::Count, 4);
    let mut b = net(HeadKind::Count, 4);
    let ha = train_counting(&mut a, &samples, &cfg).unwrap();
    let hb = train_counting(&mut b, &samples, &cfg).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(a.params(), b.params());
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let mut c = net(HeadKind::Count, 4);
    single.install(|| train_counting(&mut c, &samples, &cfg)).unwrap();
    assert_eq!(a.params(), c.params());
}

#[test]
fn mismatched_head_is_rejected() {
    let samples = count_samples();
    let mut n = net(HeadKind::MultilabelIdentity, 6);
    assert!(train_counting(&mut n, &samples, &config(1, 0.01)).is_err());
    let mut n = net(HeadKind::Count, 3);
    assert!(train_counting(&mut n, &samples, &config(1, 0.01)).is_err());
}
