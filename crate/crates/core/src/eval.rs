//! Ranking metrics: weighted non-interpolated average precision over frames
//! or tracks, macro (mAP) and micro (miAP) averages, PR curves, detector
//! recall and track identification accuracy.
//!
//! Track units carry a weight equal to their length in frames, and recall is
//! measured against every ground-truth frame of the class, so a detector that
//! never finds an individual caps the attainable recall.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detsim::Track;
use crate::error::{Error, Result};
use crate::numerics::argmax;
use crate::synthdata::FrameRecord;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedUnit {
    pub score: f64,
    pub relevant: bool,
    pub weight: f64,
}

/// Units sorted by decreasing score; ties keep their input order.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedRun {
    pub units: Vec<RankedUnit>,
}

impl RankedRun {
    pub fn new(mut units: Vec<RankedUnit>) -> Self {
        // stable sort, so equal scores keep input order
        units.sort_by(|a, b| b.score.total_cmp(&a.score));
        RankedRun { units }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub rank: usize,
    pub recall: f64,
    pub precision: f64,
}

fn check_total(total_positive_weight: f64) -> Result<()> {
    if !(total_positive_weight > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "total positive weight must be > 0, got {total_positive_weight}"
        )));
    }
    Ok(())
}

/// `Σ_relevant weight · precision_after_unit / total_positive_weight`, with
/// precision measured in cumulative weight.
pub fn average_precision(run: &RankedRun, total_positive_weight: f64) -> Result<f64> {
    check_total(total_positive_weight)?;
    let (mut seen, mut hit, mut sum) = (0.0, 0.0, 0.0);
    for u in &run.units {
        seen += u.weight;
        if u.relevant {
            hit += u.weight;
            sum += u.weight * hit / seen;
        }
    }
    Ok(sum / total_positive_weight)
}

/// One `(recall, precision)` point after each ranked unit.
pub fn pr_curve(run: &RankedRun, total_positive_weight: f64) -> Result<Vec<PrPoint>> {
    check_total(total_positive_weight)?;
    let (mut seen, mut hit) = (0.0, 0.0);
    Ok(run
        .units
        .iter()
        .enumerate()
        .map(|(i, u)| {
            seen += u.weight;
            if u.relevant {
                hit += u.weight;
            }
            PrPoint {
                rank: i + 1,
                recall: hit / total_positive_weight,
                precision: if seen > 0.0 { hit / seen } else { 0.0 },
            }
        })
        .collect())
}

/// Area under the step PR curve: `Σ precision_i · (recall_i − recall_{i−1})`.
pub fn area_under_pr(points: &[PrPoint]) -> f64 {
    let mut prev = 0.0;
    let mut area = 0.0;
    for p in points {
        area += p.precision * (p.recall - prev);
        prev = p.recall;
    }
    area
}

pub fn pr_csv(points: &[PrPoint]) -> String {
    let mut s = String::from("rank,recall,precision\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.rank, p.recall, p.precision);
    }
    s
}

/// Per-class and pooled AP of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    /// `None` for classes without test positives (excluded from mAP).
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub miap: f64,
    #[serde(skip)]
    pub pr_curves: Vec<Vec<PrPoint>>,
}

/// `runs[c]` with its positive weight; pooled units in `pooled`.
fn summarize(
    per_class: Vec<(Vec<RankedUnit>, f64)>,
    pooled: Vec<RankedUnit>,
) -> Result<ApSummary> {
    let mut per_class_ap = Vec::with_capacity(per_class.len());
    let mut pr_curves = Vec::with_capacity(per_class.len());
    let mut total = 0.0;
    for (units, positives) in per_class {
        total += positives;
        if positives > 0.0 {
            let run = RankedRun::new(units);
            per_class_ap.push(Some(average_precision(&run, positives)?));
            pr_curves.push(pr_curve(&run, positives)?);
        } else {
            per_class_ap.push(None);
            pr_curves.push(Vec::new());
        }
    }
    let included: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::InvalidArgument("no class has test positives".into()));
    }
    let map = included.iter().sum::<f64>() / included.len() as f64;
    let miap = average_precision(&RankedRun::new(pooled), total)?;
    Ok(ApSummary {
        per_class_ap,
        map,
        miap,
        pr_curves,
    })
}

/// Frames ranked per class by `scores[f][c]`, relevant iff `gt[f][c]`.
/// The pooled ranking lists units frame by frame, classes in index order.
pub fn frame_level_ap(scores: &[Vec<f64>], gt: &[Vec<bool>]) -> Result<ApSummary> {
    if scores.len() != gt.len() {
        return Err(Error::shape("frame_level_ap", "frames", gt.len(), scores.len()));
    }
    let k = gt.first().map_or(0, |g| g.len());
    if k == 0 {
        return Err(Error::InvalidArgument("frame_level_ap: no frames or classes".into()));
    }
    for (s, g) in scores.iter().zip(gt) {
        if s.len() != k || g.len() != k {
            return Err(Error::shape("frame_level_ap", "classes", k, (s.len(), g.len())));
        }
    }
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let units = scores
            .iter()
            .zip(gt)
            .map(|(s, g)| RankedUnit { score: s[c], relevant: g[c], weight: 1.0 })
            .collect();
        let positives = gt.iter().filter(|g| g[c]).count() as f64;
        per_class.push((units, positives));
    }
    let pooled = scores
        .iter()
        .zip(gt)
        .flat_map(|(s, g)| (0..k).map(move |c| RankedUnit { score: s[c], relevant: g[c], weight: 1.0 }))
        .collect();
    summarize(per_class, pooled)
}

/// Tracks ranked per class by their score, weighted by length; recall is
/// relative to every ground-truth frame where the class is present.
pub fn track_level_ap(tracks: &[Track], records: &[FrameRecord]) -> Result<ApSummary> {
    let k = records.first().map_or(0, |r| r.y.len());
    if k == 0 {
        return Err(Error::InvalidArgument("track_level_ap: no ground-truth frames".into()));
    }
    let known: HashSet<u64> = records.iter().map(|r| r.frame_id).collect();
    for t in tracks {
        if let Some(f) = t.frame_ids().find(|f| !known.contains(f)) {
            return Err(Error::InvalidArgument(format!("track {} has unknown frame {f}", t.track_id)));
        }
        match &t.scores {
            Some(s) if s.len() == k => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "track {} lacks a {k}-class score vector",
                    t.track_id
                )))
            }
        }
    }
    let unit = |t: &Track, c: usize| RankedUnit {
        score: t.scores.as_ref().expect("checked")[c],
        relevant: t.gt_identity == c as i64,
        weight: t.len() as f64,
    };
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let units = tracks.iter().map(|t| unit(t, c)).collect();
        let positives = records.iter().filter(|r| r.y[c] != 0).count() as f64;
        per_class.push((units, positives));
    }
    let pooled = tracks.iter().flat_map(|t| (0..k).map(move |c| unit(t, c))).collect();
    summarize(per_class, pooled)
}

/// Share of present `(frame, identity)` pairs covered by a track member
/// detected on that identity.
pub fn detector_recall(tracks: &[Track], records: &[FrameRecord]) -> f64 {
    let covered: HashSet<(u64, i64)> = tracks
        .iter()
        .flat_map(|t| t.members.iter().map(|m| (m.frame_id, m.gt_identity)))
        .collect();
    let mut total = 0usize;
    let mut hit = 0usize;
    for r in records {
        for id in r.present() {
            total += 1;
            hit += covered.contains(&(r.frame_id, id as i64)) as usize;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Share of tracks (with a real majority identity) whose arg-max score is
/// that identity; ties go to the lowest index.
pub fn identification_accuracy(tracks: &[Track]) -> Result<f64> {
    let mut total = 0usize;
    let mut right = 0usize;
    for t in tracks.iter().filter(|t| t.gt_identity >= 0) {
        let s = t
            .scores
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("track {} is unscored", t.track_id)))?;
        total += 1;
        right += (argmax(s) as i64 == t.gt_identity) as usize;
    }
    if total == 0 {
        return Err(Error::InvalidArgument("no tracks".into()));
    }
    Ok(right as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(units: &[(f64, bool)]) -> RankedRun {
        RankedRun::new(units.iter().map(|&(score, relevant)| RankedUnit { score, relevant, weight: 1.0 }).collect())
    }

    #[test]
    fn hand_computed_ap() {
        assert_eq!(average_precision(&run(&[(0.9, true), (0.8, true)]), 2.0).unwrap(), 1.0);
        let ap = average_precision(&run(&[(0.9, true), (0.8, false), (0.7, true)]), 2.0).unwrap();
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-15);
        assert!(average_precision(&run(&[]), 0.0).is_err());
    }

    #[test]
    fn ties_keep_input_order() {
        let a = average_precision(&run(&[(0.5, false), (0.5, true)]), 1.0).unwrap();
        let b = average_precision(&run(&[(0.5, true), (0.5, false)]), 1.0).unwrap();
        assert_eq!((a, b), (0.5, 1.0));
    }

    #[test]
    fn pr_curve_of_perfect_ranking() {
        let pts = pr_curve(&run(&[(3.0, true), (2.0, true), (1.0, false)]), 4.0).unwrap();
        assert_eq!(pts[0], PrPoint { rank: 1, recall: 0.25, precision: 1.0 });
        assert_eq!(pts[1].recall, 0.5);
        assert_eq!(pts[1].precision, 1.0);
        assert_eq!(pts[2].recall, 0.5);
        assert_eq!(pr_csv(&pts[..1]), "rank,recall,precision\n1,0.25,1\n");
    }

    #[test]
    fn oracle_scores_give_unit_ap() {
        let gt = vec![vec![true, false], vec![false, true], vec![true, true]];
        let scores: Vec<Vec<f64>> =
            gt.iter().map(|g| g.iter().map(|&b| b as u8 as f64).collect()).collect();
        let s = frame_level_ap(&scores, &gt).unwrap();
        assert_eq!(s.per_class_ap, vec![Some(1.0), Some(1.0)]);
        assert_eq!((s.map, s.miap), (1.0, 1.0));
    }

    #[test]
    fn absent_classes_are_excluded() {
        let gt = vec![vec![true, false], vec![false, false]];
        let scores = vec![vec![0.9, 0.8], vec![0.1, 0.2]];
        let s = frame_level_ap(&scores, &gt).unwrap();
        assert_eq!(s.per_class_ap, vec![Some(1.0), None]);
        assert_eq!(s.map, 1.0);
        // pooled: 0.9 rel, 0.8, 0.2, 0.1
        assert_eq!(s.miap, 1.0);
    }
}
