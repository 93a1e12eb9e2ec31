//! Simulated face/body detection and tracking.
//!
//! Detections come from the ground-truth boxes through two independent
//! knobs: whether the part is visible at all (decided by the generator) and
//! whether the detector fires on a visible part. A detector that misses an
//! individual tends to keep missing it for the whole shot, so the "fires"
//! draw is made once per (shot, identity). Boxes are jittered per frame and
//! sprinkled with false positives, then linked greedily by overlap.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{crop, resize_bilinear};
use crate::model::{CamNet, HeadKind};
use crate::numerics::Tensor;
use crate::proposal::BBox;
use crate::seeds::{derive_seed, stream, stream_rng};
use crate::synthdata::FrameRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Face,
    Body,
}

impl Part {
    pub fn name(self) -> &'static str {
        match self {
            Part::Face => "face",
            Part::Body => "body",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorProfile {
    pub part: Part,
    pub p_detect: f64,
    /// Box jitter as a fraction of the box side.
    pub jitter_sigma: f64,
    /// Mean false positives per frame.
    pub fp_rate: f64,
    pub seed: u64,
}

impl DetectorProfile {
    pub fn default_for(part: Part, seed: u64) -> Self {
        DetectorProfile {
            part,
            p_detect: match part {
                Part::Face => 0.95,
                Part::Body => 0.90,
            },
            jitter_sigma: 0.05,
            fp_rate: 0.05,
            seed,
        }
    }

    /// Perfect detector: every visible part, exact boxes, nothing else.
    pub fn oracle(part: Part) -> Self {
        DetectorProfile {
            part,
            p_detect: 1.0,
            jitter_sigma: 0.0,
            fp_rate: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_detect) || !(self.jitter_sigma >= 0.0) || !(self.fp_rate >= 0.0) {
            return Err(Error::Config(format!(
                "{} detector: p_detect must be in [0,1], jitter_sigma and fp_rate >= 0",
                self.part.name()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub frame_id: u64,
    pub bbox: BBox,
    pub part: Part,
    /// Identity of the source box, `-1` for a false positive.
    pub gt_identity: i64,
}

pub const FALSE_POSITIVE: i64 = -1;

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b).map_or(0, |i| i.area());
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn jitter_box(
    rng: &mut impl Rng,
    b: (usize, usize, usize, usize),
    sigma: f64,
    side: usize,
) -> BBox {
    let (x0, y0, x1, y1) = b;
    if sigma == 0.0 {
        return BBox { x0, y0, x1, y1 };
    }
    let (w, h) = ((x1 - x0) as f64, (y1 - y0) as f64);
    let nx = Normal::new(0.0, sigma * w).expect("finite sigma");
    let ny = Normal::new(0.0, sigma * h).expect("finite sigma");
    let max = side as f64;
    let mut j = |v: usize, n: &Normal<f64>| (v as f64 + n.sample(rng)).round().clamp(0.0, max) as usize;
    let (mut a0, mut b0, mut a1, mut b1) = (j(x0, &nx), j(y0, &ny), j(x1, &nx), j(y1, &ny));
    if a0 > a1 {
        std::mem::swap(&mut a0, &mut a1);
    }
    if b0 > b1 {
        std::mem::swap(&mut b0, &mut b1);
    }
    // keep at least one pixel, inside the frame
    if a1 == a0 {
        if a1 < side { a1 += 1 } else { a0 -= 1 }
    }
    if b1 == b0 {
        if b1 < side { b1 += 1 } else { b0 -= 1 }
    }
    BBox { x0: a0, y0: b0, x1: a1, y1: b1 }
}

/// Detections for every frame of `records` (frames of `side × side` pixels;
/// consecutive runs of `shot_len` frame ids form one shot).
pub fn simulate_detections(
    records: &[FrameRecord],
    profile: &DetectorProfile,
    side: usize,
    shot_len: usize,
) -> Result<Vec<Detection>> {
    profile.validate()?;
    if shot_len == 0 {
        return Err(Error::InvalidArgument("shot_len must be >= 1".into()));
    }
    let part_tag = profile.part as u64;
    let per_frame: Vec<Vec<Detection>> = records
        .par_iter()
        .map(|r| {
            let mut rng = stream_rng(profile.seed, stream::DETECT ^ (part_tag << 8), r.frame_id);
            let shot = r.frame_id / shot_len as u64;
            let boxes: Vec<(usize, (usize, usize, usize, usize))> = match profile.part {
                Part::Face => r
                    .face_boxes
                    .iter()
                    .filter(|b| b.visible)
                    .map(|b| (b.id, (b.x0, b.y0, b.x1, b.y1)))
                    .collect(),
                Part::Body => r
                    .body_boxes
                    .iter()
                    .filter(|b| b.visible)
                    .map(|b| (b.id, (b.x0, b.y0, b.x1, b.y1)))
                    .collect(),
            };
            let mut out = Vec::new();
            for (id, b) in boxes {
                // one draw per (shot, identity): misses persist through a shot
                let fires_seed = derive_seed(profile.seed, stream::DETECT_BURST ^ (part_tag << 8), shot);
                let mut fires_rng = stream_rng(fires_seed, stream::DETECT_BURST, id as u64);
                let u: f64 = fires_rng.random();
                if u < profile.p_detect {
                    out.push(Detection {
                        frame_id: r.frame_id,
                        bbox: jitter_box(&mut rng, b, profile.jitter_sigma, side),
                        part: profile.part,
                        gt_identity: id as i64,
                    });
                }
            }
            if profile.fp_rate > 0.0 {
                let n = Poisson::new(profile.fp_rate).expect("positive rate").sample(&mut rng) as usize;
                let (lo, hi) = match profile.part {
                    Part::Face => (8, 16),
                    Part::Body => (25, 55),
                };
                for _ in 0..n {
                    let w = rng.random_range(lo..=hi).min(side);
                    let h = rng.random_range(lo..=hi).min(side);
                    let x0 = rng.random_range(0..=side - w);
                    let y0 = rng.random_range(0..=side - h);
                    out.push(Detection {
                        frame_id: r.frame_id,
                        bbox: BBox { x0, y0, x1: x0 + w, y1: y0 + h },
                        part: profile.part,
                        gt_identity: FALSE_POSITIVE,
                    });
                }
            }
            out
        })
        .collect();
    Ok(per_frame.into_iter().flatten().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackMember {
    pub frame_id: u64,
    pub bbox: BBox,
    pub gt_identity: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: usize,
    pub part: Part,
    /// One member per frame, consecutive frame ids.
    pub members: Vec<TrackMember>,
    /// Majority ground truth of the members (ties → lowest).
    pub gt_identity: i64,
    /// Mean classifier softmax, once scored.
    #[serde(default)]
    pub scores: Option<Vec<f64>>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn frame_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.members.iter().map(|m| m.frame_id)
    }
}

fn majority(members: &[TrackMember]) -> i64 {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for m in members {
        *counts.entry(m.gt_identity).or_default() += 1;
    }
    // BTreeMap iterates ascending, and max_by_key keeps the last maximum,
    // so iterate in reverse to keep the lowest id on ties
    counts
        .into_iter()
        .rev()
        .max_by_key(|&(_, c)| c)
        .map(|(id, _)| id)
        .unwrap_or(FALSE_POSITIVE)
}

/// Greedy frame-to-frame linking by IoU.
///
/// Each detection in frame `t` joins at most one track that ended at `t-1`,
/// taking candidate pairs in order of decreasing IoU (ties: lower track id,
/// then earlier detection). Unmatched detections start new tracks; tracks
/// shorter than `min_track_len` are dropped and the survivors renumbered.
pub fn link_tracks(detections: &[Detection], iou_threshold: f64, min_track_len: usize) -> Vec<Track> {
    let mut by_frame: BTreeMap<u64, Vec<&Detection>> = BTreeMap::new();
    for d in detections {
        by_frame.entry(d.frame_id).or_default().push(d);
    }
    let mut tracks: Vec<Track> = Vec::new();
    let mut prev_frame: Option<u64> = None;
    for (&frame, dets) in &by_frame {
        let open: Vec<usize> = match prev_frame {
            Some(p) if p + 1 == frame => (0..tracks.len())
                .filter(|&t| tracks[t].members.last().is_some_and(|m| m.frame_id == p))
                .collect(),
            _ => Vec::new(),
        };
        let mut pairs = Vec::new();
        for &t in &open {
            let last = tracks[t].members.last().expect("open track").bbox;
            for (j, d) in dets.iter().enumerate() {
                if d.part != tracks[t].part {
                    continue;
                }
                let o = iou(&last, &d.bbox);
                if o >= iou_threshold && o > 0.0 {
                    pairs.push((o, t, j));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut track_used = vec![false; tracks.len()];
        let mut det_used = vec![false; dets.len()];
        for (_, t, j) in pairs {
            if track_used[t] || det_used[j] {
                continue;
            }
            track_used[t] = true;
            det_used[j] = true;
            let d = dets[j];
            tracks[t].members.push(TrackMember { frame_id: d.frame_id, bbox: d.bbox, gt_identity: d.gt_identity });
        }
        for (j, d) in dets.iter().enumerate() {
            if !det_used[j] {
                tracks.push(Track {
                    track_id: tracks.len(),
                    part: d.part,
                    members: vec![TrackMember { frame_id: d.frame_id, bbox: d.bbox, gt_identity: d.gt_identity }],
                    gt_identity: d.gt_identity,
                    scores: None,
                });
            }
        }
        prev_frame = Some(frame);
    }
    let mut kept: Vec<Track> = tracks.into_iter().filter(|t| t.len() >= min_track_len).collect();
    for (i, t) in kept.iter_mut().enumerate() {
        t.track_id = i;
        t.gt_identity = majority(&t.members);
    }
    kept
}

/// [`link_tracks`] run separately on each shot of `shot_len` frames, so no
/// track crosses a scene cut. Track ids are global and ordered by shot.
pub fn link_tracks_per_shot(
    detections: &[Detection],
    shot_len: usize,
    iou_threshold: f64,
    min_track_len: usize,
) -> Vec<Track> {
    let mut by_shot: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for d in detections {
        by_shot.entry(d.frame_id / shot_len.max(1) as u64).or_default().push(*d);
    }
    let mut out = Vec::new();
    for dets in by_shot.values() {
        for mut t in link_tracks(dets, iou_threshold, min_track_len) {
            t.track_id = out.len();
            out.push(t);
        }
    }
    out
}

/// Crop of one detection resized to the classifier's input.
pub fn detection_crop(image: &Tensor, bbox: &BBox, side: usize) -> Result<Tensor> {
    resize_bilinear(&crop(image, bbox)?, side, side)
}

/// Mean of per-member softmax vectors. `load` returns the full frame for an id.
pub fn score_track<F>(net: &CamNet, track: &Track, load: &F) -> Result<Vec<f64>>
where
    F: Fn(u64) -> Result<Tensor> + Sync,
{
    net.require(HeadKind::SingleLabelIdentity)?;
    if track.is_empty() {
        return Err(Error::InvalidArgument(format!("track {} has no members", track.track_id)));
    }
    let side = net.config().input_side;
    let probs: Vec<Vec<f64>> = track
        .members
        .par_iter()
        .map(|m| net.predict_softmax(&detection_crop(&load(m.frame_id)?, &m.bbox, side)?))
        .collect::<Result<_>>()?;
    let k = net.num_classes();
    let mut mean = vec![0.0; k];
    for p in &probs {
        for (a, v) in mean.iter_mut().zip(p) {
            *a += v;
        }
    }
    let n = probs.len() as f64;
    Ok(mean.into_iter().map(|v| v / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: usize, y0: usize, x1: usize, y1: usize) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_values() {
        assert_eq!(iou(&b(0, 0, 4, 4), &b(0, 0, 4, 4)), 1.0);
        assert_eq!(iou(&b(0, 0, 2, 2), &b(5, 5, 6, 6)), 0.0);
        assert!((iou(&b(0, 0, 2, 2), &b(1, 1, 3, 3)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn majority_ties_to_lowest() {
        let m = |id| TrackMember { frame_id: 0, bbox: b(0, 0, 1, 1), gt_identity: id };
        assert_eq!(majority(&[m(3), m(1), m(3), m(1)]), 1);
        assert_eq!(majority(&[m(-1), m(2), m(2)]), 2);
        assert_eq!(majority(&[m(-1), m(2)]), -1);
    }

    #[test]
    fn jitter_keeps_boxes_valid() {
        let mut rng = stream_rng(1, 2, 3);
        for _ in 0..500 {
            let j = jitter_box(&mut rng, (250, 0, 256, 3), 0.5, 256);
            assert!(j.fits(256, 256), "{j:?}");
        }
    }
}
