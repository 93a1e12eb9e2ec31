//! Minibatch SGD for the three head kinds: count bins (softmax CE), identity
//! sets (weighted BCE) and single identities (softmax CE).
//!
//! Per-sample gradients are computed in parallel and summed in batch order,
//! so results do not depend on the number of threads.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::imageops::{crop, resize_bilinear};
use crate::model::{CamNet, HeadKind};
use crate::numerics::{argmax, softmax_cross_entropy, weighted_bce, Sgd, Tensor};
use crate::proposal::BBox;
use crate::seeds::{stream, stream_rng};
use crate::synthdata::{FrameRecord, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Per-channel multiplicative jitter, `1 ± color_jitter`.
    pub color_jitter: f64,
    /// Smallest random-crop side as a fraction of the image (negatives only).
    pub min_crop_scale: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            color_jitter: 0.1,
            min_crop_scale: 0.6,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            color_jitter: 0.0,
            min_crop_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Counts of `count_cap` or more share the top bin.
    pub count_cap: usize,
    /// Use every `frame_stride`-th training frame.
    pub frame_stride: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            count_cap: 3,
            frame_stride: 1,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.count_cap == 0 || self.frame_stride == 0 {
            return Err(Error::Config(
                "batch_size, count_cap and frame_stride must be >= 1".into(),
            ));
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.flip_prob)
            || !(0.0..1.0).contains(&a.color_jitter)
            || !(a.min_crop_scale > 0.0 && a.min_crop_scale <= 1.0)
        {
            return Err(Error::Config(format!("invalid augmentation settings {a:?}")));
        }
        Ok(())
    }
}

/// Count bin of a frame: `min(|Y|, cap)`.
pub fn count_label(y: &[u8], cap: usize) -> usize {
    y.iter().filter(|&&v| v != 0).count().min(cap)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassWeights {
    /// `w_i = f_max / f_i`.
    pub weights: Tensor,
    pub counts: Vec<usize>,
    pub f_max: usize,
}

impl ClassWeights {
    pub fn from_counts(counts: &[usize], split: Split) -> Result<Self> {
        if let Some(class) = counts.iter().position(|&c| c == 0) {
            return Err(Error::AbsentClass {
                class,
                split: split.name().into(),
            });
        }
        let f_max = counts.iter().copied().max().unwrap_or(0);
        let w = counts.iter().map(|&f| f_max as f64 / f as f64).collect();
        Ok(ClassWeights {
            weights: Tensor::from_vec(&[counts.len()], w)?,
            counts: counts.to_vec(),
            f_max,
        })
    }
}

/// Weights from the frames of `split` in which each identity is present.
pub fn class_weights(records: &[FrameRecord], split: Split, k: usize) -> Result<ClassWeights> {
    let counts = crate::synthdata::class_frequencies(records, split, k);
    ClassWeights::from_counts(&counts, split)
}

/// Flip and colour-jitter every sample; random-crop (then resize back) only
/// negatives.
pub fn augment(
    image: &Tensor,
    is_negative: bool,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    image.expect_ndim("augment", "image", 3)?;
    let &[c, h, w] = image.shape() else { unreachable!() };
    let mut out = image.clone();
    if is_negative && cfg.min_crop_scale < 1.0 {
        let s = rng.random_range(cfg.min_crop_scale..=1.0);
        let ch = ((s * h as f64).round() as usize).clamp(1, h);
        let cw = ((s * w as f64).round() as usize).clamp(1, w);
        let y0 = rng.random_range(0..=h - ch);
        let x0 = rng.random_range(0..=w - cw);
        let region = BBox::new(x0, y0, x0 + cw, y0 + ch)?;
        out = resize_bilinear(&crop(&out, &region)?, h, w)?;
    }
    if cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob) {
        let d = out.data_mut();
        for row in d.chunks_exact_mut(w) {
            row.reverse();
        }
    }
    if cfg.color_jitter > 0.0 {
        let plane = h * w;
        for ch in 0..c {
            let f = 1.0 + rng.random_range(-cfg.color_jitter..=cfg.color_jitter);
            for v in &mut out.data_mut()[ch * plane..(ch + 1) * plane] {
                *v = (*v * f).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Count(usize),
    Labels(Vec<bool>),
    Class(usize),
}

/// One network-input image with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub target: Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Count/class accuracy, or per-label accuracy for identity sets.
    pub metric: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,metric\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{}", e.epoch, e.loss, e.metric);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).at(path)
    }

    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

enum Objective<'a> {
    Count,
    Multilabel(&'a Tensor),
    SingleLabel,
}

struct SampleResult {
    loss: f64,
    metric: f64,
    grads: Vec<Tensor>,
}

fn sample_step(
    net: &CamNet,
    image: &Tensor,
    target: &Target,
    objective: &Objective,
) -> Result<SampleResult> {
    let cache = net.forward_cached(image)?;
    let logits = &cache.logits;
    let k = logits.len();
    let (loss, dlogits, metric) = match (objective, target) {
        (Objective::Count, Target::Count(t)) | (Objective::SingleLabel, Target::Class(t)) => {
            if *t >= k {
                return Err(Error::ClassIndex { index: *t, num_classes: k });
            }
            let (loss, grad) = softmax_cross_entropy(logits, *t)?;
            (loss, grad, (argmax(logits.data()) == *t) as u8 as f64)
        }
        (Objective::Multilabel(weights), Target::Labels(labels)) => {
            let (loss, grad) = weighted_bce(logits, labels, weights)?;
            let right = logits
                .data()
                .iter()
                .zip(labels)
                .filter(|(&z, &y)| (z > 0.0) == y)
                .count();
            (loss, grad, right as f64 / k as f64)
        }
        _ => {
            return Err(Error::InvalidArgument(
                "sample target does not match the training objective".into(),
            ))
        }
    };
    let grads = net.backward(&cache, &dlogits)?;
    Ok(SampleResult { loss, metric, grads })
}

fn is_negative(target: &Target) -> bool {
    matches!(target, Target::Count(0)) || matches!(target, Target::Labels(l) if !l.iter().any(|&b| b))
}

fn fit(net: &mut CamNet, samples: &[Sample], cfg: &TrainConfig, objective: Objective) -> Result<History> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum, &net.params())?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = stream_rng(cfg.seed, stream::SHUFFLE, epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut metric_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let frozen = &*net;
            let results: Vec<SampleResult> = batch
                .par_iter()
                .map(|&i| {
                    let s = &samples[i];
                    let mut rng: ChaCha8Rng =
                        stream_rng(cfg.seed, stream::AUGMENT, ((epoch as u64) << 32) | i as u64);
                    let image = augment(&s.image, is_negative(&s.target), &cfg.augment, &mut rng)?;
                    sample_step(frozen, &image, &s.target, &objective)
                })
                .collect::<Result<_>>()?;
            let mut results = results.into_iter();
            let first = results.next().expect("non-empty batch");
            loss_sum += first.loss;
            metric_sum += first.metric;
            let mut grads = first.grads;
            for r in results {
                loss_sum += r.loss;
                metric_sum += r.metric;
                for (g, dg) in grads.iter_mut().zip(&r.grads) {
                    g.add_assign(dg)?;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.scale(scale);
            }
            sgd.step(&mut net.params_mut(), &grads)?;
        }
        let n = samples.len() as f64;
        history.epochs.push(EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / n,
            metric: metric_sum / n,
        });
    }
    Ok(history)
}

/// Softmax cross-entropy on count bins `0..=count_cap`.
pub fn train_counting(net: &mut CamNet, samples: &[Sample], cfg: &TrainConfig) -> Result<History> {
    net.require(HeadKind::Count)?;
    if net.num_classes() != cfg.count_cap + 1 {
        return Err(Error::Config(format!(
            "count net has {} bins but count_cap {} needs {}",
            net.num_classes(),
            cfg.count_cap,
            cfg.count_cap + 1
        )));
    }
    let history = fit(net, samples, cfg, Objective::Count)?;
    // anchor on the empty bin so count CAMs highlight individuals
    net.anchor_head(0)?;
    Ok(history)
}

/// Weighted binary cross-entropy on identity sets. Samples may be crops or
/// whole frames; the caller decides.
pub fn train_recognition(
    net: &mut CamNet,
    samples: &[Sample],
    weights: &ClassWeights,
    cfg: &TrainConfig,
) -> Result<History> {
    net.require(HeadKind::MultilabelIdentity)?;
    weights.weights.expect_shape("train_recognition", "class weights", &[net.num_classes()])?;
    fit(net, samples, cfg, Objective::Multilabel(&weights.weights))
}

/// Softmax cross-entropy on per-detection crops labelled with their track's identity.
pub fn train_track_classifier(
    net: &mut CamNet,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<History> {
    net.require(HeadKind::SingleLabelIdentity)?;
    fit(net, samples, cfg, Objective::SingleLabel)
}
