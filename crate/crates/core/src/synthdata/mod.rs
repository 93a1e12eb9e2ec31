//! Seeded procedural frames of textured "individuals" in clutter.
//!
//! Identities differ only in fine detail: a coat of narrow stripes swinging
//! between two identity colours, two striped marking patches, and a checkered
//! face disc. Every pattern averages to a colour shared by all identities.
//! At full resolution the detail is legible; after shrinking a whole 256-px
//! frame to a 64-px network input it averages away. Scenes are rendered as
//! short static bursts so that detections can be linked into tracks.

mod render;

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use render::{render_frame, RenderedFrame, NO_IDENTITY};

use crate::error::{Error, IoContext, Result};
use crate::imageops;
use crate::seeds::{stream, stream_rng};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IDENTITIES_FILE: &str = "identities.json";
pub const IMAGES_DIR: &str = "images";

pub type Rgb = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndividualSpec {
    pub identity: usize,
    pub body_color: Rgb,
    /// Stripe period in full-resolution pixels.
    pub stripe_period: f64,
    /// Stripe direction relative to the body axis, radians.
    pub stripe_angle: f64,
    /// One of the marking's two colours; the other is its complement about
    /// `body_color`.
    pub marking_color: Rgb,
    /// Marking centres in body-normalised coordinates (`u` along the axis, `v` across).
    pub marking_offsets: [(f64, f64); 2],
    /// Marking side length in pixels.
    pub marking_size: f64,
    /// One face checker colour; the other is its complement about [`FACE_COLOR`].
    pub face_color: Rgb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub num_identities: usize,
    pub train_frames: usize,
    pub test_frames: usize,
    pub image_side: usize,
    pub max_individuals: usize,
    /// Probability of each count `0..=max_individuals` per scene.
    pub count_probs: Vec<f64>,
    pub face_visibility: f64,
    /// Probability that a body is mostly hidden behind foliage.
    pub occlusion_prob: f64,
    /// Scales the number of background clutter shapes.
    pub clutter_density: f64,
    /// Zipf exponent of identity sampling (0 = uniform).
    pub identity_skew: f64,
    /// Frames per static scene.
    pub burst_len: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            num_identities: 6,
            train_frames: 2000,
            test_frames: 500,
            image_side: 256,
            max_individuals: 4,
            count_probs: vec![0.2, 0.3, 0.25, 0.15, 0.1],
            face_visibility: 0.4,
            occlusion_prob: 0.1,
            clutter_density: 1.0,
            identity_skew: 1.0,
            burst_len: 5,
            seed: 20_190_827,
        }
    }
}

impl SceneConfig {
    pub fn total_frames(&self) -> usize {
        self.train_frames + self.test_frames
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_identities < 2 {
            return bad(format!("num_identities {} < 2", self.num_identities));
        }
        if self.max_individuals == 0 || self.max_individuals > self.num_identities {
            return bad(format!(
                "max_individuals {} must be in 1..={}",
                self.max_individuals, self.num_identities
            ));
        }
        if self.count_probs.len() != self.max_individuals + 1
            || self.count_probs.iter().any(|p| !(0.0..=1.0).contains(p))
            || (self.count_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad(format!(
                "count_probs must be {} probabilities summing to 1",
                self.max_individuals + 1
            ));
        }
        for (name, p) in [
            ("face_visibility", self.face_visibility),
            ("occlusion_prob", self.occlusion_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} not in [0, 1]"));
            }
        }
        if !(self.clutter_density >= 0.0) || !(self.identity_skew >= 0.0) {
            return bad("clutter_density and identity_skew must be >= 0".into());
        }
        if self.image_side < 128 {
            return bad(format!("image_side {} < 128", self.image_side));
        }
        if self.burst_len == 0
            || !self.train_frames.is_multiple_of(self.burst_len)
            || !self.test_frames.is_multiple_of(self.burst_len)
        {
            return bad(format!(
                "frame counts must be positive multiples of burst_len {}",
                self.burst_len
            ));
        }
        Ok(())
    }

    pub fn split_of(&self, frame_id: u64) -> Split {
        if (frame_id as usize) < self.train_frames {
            Split::Train
        } else {
            Split::Test
        }
    }

    pub fn burst_of(&self, frame_id: u64) -> u64 {
        frame_id / self.burst_len as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BodyBox {
    pub id: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    /// False when the body is mostly occluded and a body detector cannot fire.
    pub visible: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceBox {
    pub id: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    /// Always true in generated data: hidden faces get no box.
    pub visible: bool,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub path: String,
    pub split: Split,
    pub y: Vec<u8>,
    pub n: usize,
    pub body_boxes: Vec<BodyBox>,
    pub face_boxes: Vec<FaceBox>,
}

impl FrameRecord {
    pub fn labels(&self) -> Vec<bool> {
        self.y.iter().map(|&v| v != 0).collect()
    }

    pub fn present(&self) -> Vec<usize> {
        self.y.iter().enumerate().filter(|(_, &v)| v != 0).map(|(i, _)| i).collect()
    }

    pub fn image_path(&self, dataset_dir: &Path) -> PathBuf {
        dataset_dir.join(&self.path)
    }

    /// Checks that labels, count and boxes agree.
    pub fn check_consistency(&self) -> std::result::Result<(), String> {
        let present = self.present();
        if self.y.iter().any(|&v| v > 1) {
            return Err("y is not binary".into());
        }
        if self.n != present.len() {
            return Err(format!("n = {} but |y| = {}", self.n, present.len()));
        }
        let body_ids: Vec<usize> = self.body_boxes.iter().map(|b| b.id).collect();
        if body_ids != present {
            return Err("body boxes do not match present identities".into());
        }
        let mut remaining = present.iter();
        for id in self.face_boxes.iter().map(|b| b.id) {
            if !remaining.any(|&p| p == id) {
                return Err(format!("face box {id} is not an ordered subset of present identities"));
            }
        }
        if self.face_boxes.iter().any(|f| !f.visible) {
            return Err("face box for a hidden face".into());
        }
        let ok = |x0, y0, x1, y1| x0 < x1 && y0 < y1;
        if !self.body_boxes.iter().all(|b| ok(b.x0, b.y0, b.x1, b.y1))
            || !self.face_boxes.iter().all(|b| ok(b.x0, b.y0, b.x1, b.y1))
        {
            return Err("empty box".into());
        }
        Ok(())
    }
}

/// Unit-length colour direction of hue `h` (degrees), with zero channel mean.
fn hue_direction(h: f64) -> Rgb {
    let h = h.to_radians();
    // projection of the RGB cube's hue circle onto the plane orthogonal to grey
    let c = [h.cos(), (h - 2.0 * PI / 3.0).cos(), (h + 2.0 * PI / 3.0).cos()];
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    c.map(|v| v / norm)
}

fn shifted(base: Rgb, dir: Rgb, amount: f64) -> Rgb {
    [0, 1, 2].map(|i| base[i] + amount * dir[i])
}

/// Reflection of `color` through `base`: the two average to `base`.
pub fn complement(color: Rgb, base: Rgb) -> Rgb {
    [0, 1, 2].map(|i| 2.0 * base[i] - color[i])
}

fn color_distance(a: &Rgb, b: &Rgb) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub const BODY_COLOR: Rgb = [0.40, 0.30, 0.24];
pub const FACE_COLOR: Rgb = [0.66, 0.54, 0.44];
const MARKING_CONTRAST: f64 = 0.22;
const FACE_CONTRAST: f64 = 0.18;
const MIN_COLOR_DISTANCE: f64 = 0.02;
const MIN_PERIOD_GAP: f64 = 0.02;

fn specs_distinct(specs: &[IndividualSpec]) -> bool {
    specs.iter().enumerate().all(|(i, a)| {
        specs[i + 1..].iter().all(|b| {
            color_distance(&a.marking_color, &b.marking_color) >= MIN_COLOR_DISTANCE
                && (a.stripe_period - b.stripe_period).abs() >= MIN_PERIOD_GAP
        })
    })
}

/// Appearance of `k` identities, pairwise distinct in marking colour and
/// stripe period (re-drawn until they are).
///
/// Every marking and face is a fine two-colour pattern whose colours are
/// mirror images about a shared base, so all identities look alike once the
/// pattern is blurred away.
pub fn generate_individual_specs(k: usize, seed: u64) -> Result<Vec<IndividualSpec>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 identities, got {k}")));
    }
    let mut rng = stream_rng(seed, stream::IDENTITY_SPECS, k as u64);
    loop {
        // A colour and its mirror image are 180 degrees apart in hue, so
        // identities share half the circle.
        let spacing = 180.0 / k as f64;
        let period_step = 2.0 / k as f64;
        let hue0 = rng.random_range(0.0..360.0);
        let mut marking_slots: Vec<usize> = (0..k).collect();
        let mut face_slots: Vec<usize> = (0..k).collect();
        let mut period_slots: Vec<usize> = (0..k).collect();
        marking_slots.shuffle(&mut rng);
        face_slots.shuffle(&mut rng);
        period_slots.shuffle(&mut rng);
        let specs: Vec<IndividualSpec> = (0..k)
            .map(|identity| {
                let mh = hue0 + (marking_slots[identity] as f64 + rng.random_range(-0.2..0.2)) * spacing;
                let fh = hue0 + 90.0 + (face_slots[identity] as f64 + rng.random_range(-0.2..0.2)) * spacing;
                IndividualSpec {
                    identity,
                    body_color: BODY_COLOR,
                    stripe_period: 2.5
                        + (period_slots[identity] as f64 + rng.random_range(0.0..0.5)) * period_step,
                    stripe_angle: rng.random_range(0.0..PI),
                    marking_color: shifted(BODY_COLOR, hue_direction(mh), MARKING_CONTRAST),
                    marking_offsets: [
                        (rng.random_range(-0.5..-0.15), rng.random_range(-0.35..0.35)),
                        (rng.random_range(0.1..0.45), rng.random_range(-0.35..0.35)),
                    ],
                    marking_size: rng.random_range(12.0..14.0),
                    face_color: shifted(FACE_COLOR, hue_direction(fh), FACE_CONTRAST),
                }
            })
            .collect();
        if specs_distinct(&specs) {
            return Ok(specs);
        }
    }
}

/// Render every frame of `config` into `out_dir` (`images/*.ppm`,
/// `manifest.jsonl`, `identities.json`) and return the manifest.
pub fn generate_dataset(config: &SceneConfig, out_dir: &Path) -> Result<Vec<FrameRecord>> {
    config.validate()?;
    let specs = generate_individual_specs(config.num_identities, config.seed)?;
    let images = out_dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).at(&images)?;
    let records: Vec<FrameRecord> = (0..config.total_frames() as u64)
        .into_par_iter()
        .map(|frame_id| {
            let frame = render_frame(&specs, config, frame_id)?;
            let path = out_dir.join(&frame.record.path);
            imageops::write_ppm(&path, &frame.image)?;
            Ok(frame.record)
        })
        .collect::<Result<_>>()?;
    write_manifest(&out_dir.join(MANIFEST_FILE), &records)?;
    let ids_path = out_dir.join(IDENTITIES_FILE);
    fs::write(&ids_path, serde_json::to_string_pretty(&specs)?).at(&ids_path)?;
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[FrameRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_manifest(path: &Path) -> Result<Vec<FrameRecord>> {
    read_jsonl(path)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).at(path)?;
    f.write_all(&out).at(path)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).at(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

/// Frames per identity (`f_i`) within `split`.
pub fn class_frequencies(records: &[FrameRecord], split: Split, k: usize) -> Vec<usize> {
    let mut f = vec![0; k];
    for r in records.iter().filter(|r| r.split == split) {
        for id in r.present() {
            if id < k {
                f[id] += 1;
            }
        }
    }
    f
}
