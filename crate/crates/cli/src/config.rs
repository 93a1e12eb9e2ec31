//! Pipeline configuration: one JSON file, with a few command-line overrides.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ccr_core::detsim::{DetectorProfile, Part};
use ccr_core::model::{HeadKind, ModelConfig};
use ccr_core::seeds::derive_seed;
use ccr_core::synthdata::SceneConfig;
use ccr_core::train::{AugmentConfig, TrainConfig};
use ccr_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Seed stream tags for the pipeline stages.
mod tag {
    pub const COUNT: u64 = 0xC0;
    pub const RECOG: u64 = 0xC1;
    pub const TRACK_FACE: u64 = 0xC2;
    pub const TRACK_BODY: u64 = 0xC3;
    pub const DETECT_FACE: u64 = 0xC4;
    pub const DETECT_BODY: u64 = 0xC5;
    pub const RANDOM: u64 = 0xC6;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub artifacts: PathBuf,
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset: "dataset".into(),
            checkpoints: "checkpoints".into(),
            artifacts: "artifacts".into(),
            report: "report.json".into(),
        }
    }
}

/// Optimisation settings of one training stage; its seed is derived from the
/// global seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub frame_stride: usize,
    pub augment: AugmentConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        StageConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            frame_stride: t.frame_stride,
            augment: t.augment,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSettings {
    pub p_detect: f64,
    pub jitter_sigma: f64,
    pub fp_rate: f64,
}

impl DetectorSettings {
    fn defaults(part: Part) -> Self {
        let d = DetectorProfile::default_for(part, 0);
        DetectorSettings {
            p_detect: d.p_detect,
            jitter_sigma: d.jitter_sigma,
            fp_rate: d.fp_rate,
        }
    }
}

impl Default for DetectorSettings {
    fn default() -> Self {
        DetectorSettings::defaults(Part::Body)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    pub iou_threshold: f64,
    pub min_track_len: usize,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        TrackingConfig {
            iou_threshold: 0.5,
            min_track_len: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub input_side: usize,
    pub channels: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        let m = ModelConfig::new(HeadKind::Count, 1, 0);
        NetConfig {
            input_side: m.input_side,
            channels: m.channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Drives network initialisation, training, detector simulation and the
    /// random baseline. The dataset has its own `scene.seed`.
    pub seed: u64,
    pub paths: Paths,
    pub scene: SceneConfig,
    pub net: NetConfig,
    /// CAM threshold of the crop stage.
    pub threshold: f64,
    pub count_cap: usize,
    pub count: StageConfig,
    /// Shared by the CCR and baseline recognisers.
    pub recognition: StageConfig,
    pub track_classifier: StageConfig,
    pub face_detector: DetectorSettings,
    pub body_detector: DetectorSettings,
    pub tracking: TrackingConfig,
    /// Test frames rendered by `viz`.
    pub viz_frames: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            paths: Paths::default(),
            scene: SceneConfig::default(),
            net: NetConfig::default(),
            threshold: 0.5,
            count_cap: 3,
            count: StageConfig::default(),
            recognition: StageConfig::default(),
            track_classifier: StageConfig::default(),
            face_detector: DetectorSettings::defaults(Part::Face),
            body_detector: DetectorSettings::defaults(Part::Body),
            tracking: TrackingConfig::default(),
            viz_frames: 8,
        }
    }
}

/// The training stages, each with its own seed stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Count,
    Recognition,
    Track(Part),
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} not in [0, 1]", self.threshold)));
        }
        for stage in [Stage::Count, Stage::Recognition, Stage::Track(Part::Face)] {
            self.train_config(stage).validate()?;
        }
        for part in [Part::Face, Part::Body] {
            self.detector(part).validate()?;
        }
        if self.tracking.min_track_len == 0 || !(0.0..=1.0).contains(&self.tracking.iou_threshold) {
            return Err(Error::Config("tracking needs min_track_len >= 1 and iou_threshold in [0, 1]".into()));
        }
        self.model(HeadKind::Count, self.count_cap + 1).validate()?;
        let p = &self.paths;
        let all = [&p.dataset, &p.checkpoints, &p.artifacts, &p.report];
        if all.iter().collect::<HashSet<_>>().len() != all.len() {
            return Err(Error::Config("paths must be distinct".into()));
        }
        Ok(())
    }

    fn stage_tag(stage: Stage) -> u64 {
        match stage {
            Stage::Count => tag::COUNT,
            Stage::Recognition => tag::RECOG,
            Stage::Track(Part::Face) => tag::TRACK_FACE,
            Stage::Track(Part::Body) => tag::TRACK_BODY,
        }
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Count => &self.count,
            Stage::Recognition => &self.recognition,
            Stage::Track(_) => &self.track_classifier,
        }
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let s = self.stage(stage);
        TrainConfig {
            epochs: s.epochs,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            momentum: s.momentum,
            seed: derive_seed(self.seed, Self::stage_tag(stage), 1),
            count_cap: self.count_cap,
            frame_stride: s.frame_stride,
            augment: s.augment.clone(),
        }
    }

    /// Architecture and initialisation seed of a stage's network.
    pub fn stage_model(&self, stage: Stage) -> ModelConfig {
        let k = self.scene.num_identities;
        let (head, classes) = match stage {
            Stage::Count => (HeadKind::Count, self.count_cap + 1),
            Stage::Recognition => (HeadKind::MultilabelIdentity, k),
            Stage::Track(_) => (HeadKind::SingleLabelIdentity, k),
        };
        ModelConfig {
            seed: derive_seed(self.seed, Self::stage_tag(stage), 0),
            ..self.model(head, classes)
        }
    }

    fn model(&self, head: HeadKind, classes: usize) -> ModelConfig {
        ModelConfig {
            input_side: self.net.input_side,
            channels: self.net.channels.clone(),
            ..ModelConfig::new(head, classes, 0)
        }
    }

    pub fn detector(&self, part: Part) -> DetectorProfile {
        let (s, t) = match part {
            Part::Face => (&self.face_detector, tag::DETECT_FACE),
            Part::Body => (&self.body_detector, tag::DETECT_BODY),
        };
        DetectorProfile {
            part,
            p_detect: s.p_detect,
            jitter_sigma: s.jitter_sigma,
            fp_rate: s.fp_rate,
            seed: derive_seed(self.seed, t, 0),
        }
    }

    pub fn random_seed(&self) -> u64 {
        derive_seed(self.seed, tag::RANDOM, 0)
    }

    /// Prefix every relative path with `root`.
    pub fn rooted(mut self, root: &Path) -> Self {
        let p = &mut self.paths;
        for path in [&mut p.dataset, &mut p.checkpoints, &mut p.artifacts, &mut p.report] {
            if path.is_relative() {
                *path = root.join(&*path);
            }
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sed": 1}"#).is_err());
        let cfg = PipelineConfig { threshold: 1.5, ..PipelineConfig::default() };
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.paths.report = cfg.paths.dataset.clone();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stages_get_distinct_seeds() {
        let cfg = PipelineConfig::default();
        let seeds: HashSet<u64> = [Stage::Count, Stage::Recognition, Stage::Track(Part::Face), Stage::Track(Part::Body)]
            .iter()
            .flat_map(|&s| [cfg.train_config(s).seed, cfg.stage_model(s).seed])
            .collect();
        assert_eq!(seeds.len(), 8);
        assert_ne!(cfg.detector(Part::Face).seed, cfg.detector(Part::Body).seed);
    }

    #[test]
    fn rooting_keeps_absolute_paths() {
        let mut cfg = PipelineConfig::default();
        cfg.paths.report = "/abs/report.json".into();
        let cfg = cfg.rooted(Path::new("/run"));
        assert_eq!(cfg.paths.dataset, Path::new("/run/dataset"));
        assert_eq!(cfg.paths.report, Path::new("/abs/report.json"));
    }
}
