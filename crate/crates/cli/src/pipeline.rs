//! The pipeline commands. Each reads its inputs from, and writes its outputs
//! to, the directories named in the configuration.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ccr_core::detsim::{
    link_tracks_per_shot, score_track, simulate_detections, Detection, Part, Track,
};
use ccr_core::eval::{
    detector_recall, frame_level_ap, identification_accuracy, pr_csv, track_level_ap, ApSummary,
};
use ccr_core::imageops::{read_ppm, resize_bilinear, write_ppm};
use ccr_core::model::CamNet;
use ccr_core::numerics::Tensor;
use ccr_core::proposal::{
    cam_file_name, crop_resize, localise_individuals, normalize_cam, propose_from_top_class,
    propose_region, save_cam, upsample_cam, BBox, Localisation, ProposalRecord,
};
use ccr_core::seeds::{stream, stream_rng};
use ccr_core::synthdata::{
    class_frequencies, generate_dataset, generate_individual_specs, read_jsonl, read_manifest,
    render_frame, write_jsonl, FrameRecord, Split, IMAGES_DIR, MANIFEST_FILE, NO_IDENTITY,
};
use ccr_core::train::{
    class_weights, count_label, train_counting, train_recognition, train_track_classifier, History,
    Sample, Target,
};
use ccr_core::{Error, Result};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, Stage};
use crate::viz;

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("CCR_GIT_DESCRIBE"));

/// Which frames the recogniser sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Crops proposed by the counting network.
    Ccr,
    /// Whole frames, resized.
    Baseline,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Ccr => "ccr",
            Mode::Baseline => "baseline",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn require_file(path: &Path, hint: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite(format!("{} not found; run `ccr {hint}` first", path.display())))
    }
}

/// A configuration anchored at a root directory for its relative paths.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub cfg: PipelineConfig,
    root: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, root: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline { cfg, root: root.into() })
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.resolve(&self.cfg.paths.dataset)
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.resolve(&self.cfg.paths.checkpoints)
    }

    pub fn artifacts_dir(&self) -> PathBuf {
        self.resolve(&self.cfg.paths.artifacts)
    }

    pub fn report_path(&self) -> PathBuf {
        self.resolve(&self.cfg.paths.report)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dataset_dir().join(MANIFEST_FILE)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.checkpoints_dir().join(format!("{name}.ckpt"))
    }

    pub fn proposals_path(&self) -> PathBuf {
        self.artifacts_dir().join("proposals").join("proposals.jsonl")
    }

    pub fn cams_dir(&self) -> PathBuf {
        self.artifacts_dir().join("proposals").join("cams")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.artifacts_dir().join("eval")
    }

    pub fn tracks_dir(&self) -> PathBuf {
        self.artifacts_dir().join("tracks")
    }

    pub fn localisations_path(&self) -> PathBuf {
        self.artifacts_dir().join("localisations.jsonl")
    }

    pub fn viz_dir(&self) -> PathBuf {
        self.artifacts_dir().join("viz")
    }

    fn manifest(&self) -> Result<Vec<FrameRecord>> {
        let path = self.manifest_path();
        require_file(&path, "gen")?;
        read_manifest(&path)
    }

    fn load_net(&self, name: &str, hint: &str) -> Result<CamNet> {
        let path = self.checkpoint(name);
        require_file(&path, hint)?;
        CamNet::load(&path)
    }

    fn save_net(&self, name: &str, net: &CamNet, history: &History) -> Result<()> {
        let dir = self.checkpoints_dir();
        create_dir(&dir)?;
        net.save(&self.checkpoint(name))?;
        history.write_csv(&dir.join(format!("{name}.history.csv")))
    }

    fn image(&self, r: &FrameRecord) -> Result<Tensor> {
        read_ppm(&r.image_path(&self.dataset_dir()))
    }

    fn side(&self) -> usize {
        self.cfg.net.input_side
    }

    fn proposals(&self) -> Result<HashMap<u64, BBox>> {
        let path = self.proposals_path();
        require_file(&path, "propose")?;
        read_jsonl::<ProposalRecord>(&path)?
            .into_iter()
            .map(|p| Ok((p.frame_id, p.bbox()?)))
            .collect()
    }

    fn proposal_for(proposals: &HashMap<u64, BBox>, frame_id: u64) -> Result<BBox> {
        proposals.get(&frame_id).copied().ok_or_else(|| {
            Error::MissingPrerequisite(format!("no proposal for frame {frame_id}; re-run `ccr propose`"))
        })
    }
}

fn split_frames(records: &[FrameRecord], split: Split) -> Vec<&FrameRecord> {
    records.iter().filter(|r| r.split == split).collect()
}

/// Every `stride`-th frame of a split, in manifest order.
fn strided(records: &[FrameRecord], split: Split, stride: usize) -> Vec<&FrameRecord> {
    split_frames(records, split).into_iter().step_by(stride).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenSummary {
    pub train_frames: usize,
    pub test_frames: usize,
    /// Frames per identity, per split.
    pub train_frequencies: Vec<usize>,
    pub test_frequencies: Vec<usize>,
    /// Frames per individual count `n`, both splits.
    pub count_histogram: Vec<usize>,
}

impl GenSummary {
    pub fn from_records(records: &[FrameRecord], k: usize, max_n: usize) -> Self {
        let mut count_histogram = vec![0; max_n + 1];
        for r in records {
            count_histogram[r.n] += 1;
        }
        GenSummary {
            train_frames: split_frames(records, Split::Train).len(),
            test_frames: split_frames(records, Split::Test).len(),
            train_frequencies: class_frequencies(records, Split::Train, k),
            test_frequencies: class_frequencies(records, Split::Test, k),
            count_histogram,
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!("frames: {} train, {} test\n", self.train_frames, self.test_frames);
        s += "identity  train  test\n";
        for (i, (a, b)) in self.train_frequencies.iter().zip(&self.test_frequencies).enumerate() {
            s += &format!("{i:>8}  {a:>5}  {b:>4}\n");
        }
        s += "n  frames\n";
        for (n, c) in self.count_histogram.iter().enumerate() {
            s += &format!("{n}  {c}\n");
        }
        s
    }
}

impl Pipeline {
    /// Render the dataset. Refuses to overwrite an existing one unless `force`.
    pub fn gen(&self, force: bool) -> Result<GenSummary> {
        let dir = self.dataset_dir();
        if self.manifest_path().exists() {
            if !force {
                return Err(Error::Config(format!(
                    "dataset exists at {}; pass --force to regenerate",
                    dir.display()
                )));
            }
            let images = dir.join(IMAGES_DIR);
            if images.exists() {
                fs::remove_dir_all(&images).map_err(io_err(&images))?;
            }
        }
        create_dir(&dir)?;
        let records = generate_dataset(&self.cfg.scene, &dir)?;
        Ok(GenSummary::from_records(&records, self.cfg.scene.num_identities, self.cfg.scene.max_individuals))
    }

    pub fn train_count(&self) -> Result<History> {
        let records = self.manifest()?;
        let cfg = self.cfg.train_config(Stage::Count);
        let side = self.side();
        let samples: Vec<Sample> = strided(&records, Split::Train, cfg.frame_stride)
            .par_iter()
            .map(|r| {
                Ok(Sample {
                    image: resize_bilinear(&self.image(r)?, side, side)?,
                    target: Target::Count(count_label(&r.y, cfg.count_cap)),
                })
            })
            .collect::<Result<_>>()?;
        let mut net = CamNet::new(self.cfg.stage_model(Stage::Count))?;
        let history = train_counting(&mut net, &samples, &cfg)?;
        self.save_net("count", &net, &history)?;
        Ok(history)
    }

    /// Crop-stage proposals and CAM images for every frame.
    pub fn propose(&self) -> Result<Vec<ProposalRecord>> {
        let records = self.manifest()?;
        let net = self.load_net("count", "train-count")?;
        let cams = self.cams_dir();
        create_dir(&cams)?;
        let props: Vec<ProposalRecord> = records
            .par_iter()
            .map(|r| {
                let p = propose_region(&net, &self.image(r)?, self.cfg.threshold)?;
                let name = cam_file_name(r.frame_id, p.cam.class_index);
                save_cam(&cams.join(&name), &p.cam)?;
                Ok(ProposalRecord {
                    frame_id: r.frame_id,
                    n_hat: p.n_hat,
                    bbox: p.bbox.to_array(),
                    cam_path: format!("cams/{name}"),
                })
            })
            .collect::<Result<_>>()?;
        write_jsonl(&self.proposals_path(), &props)?;
        Ok(props)
    }

    /// Network input for a recogniser in `mode`.
    fn recog_input(&self, mode: Mode, image: &Tensor, proposal: Option<BBox>) -> Result<Tensor> {
        let side = self.side();
        match (mode, proposal) {
            (Mode::Ccr, Some(b)) => crop_resize(image, &b, side),
            (Mode::Ccr, None) => Err(Error::MissingPrerequisite("CCR input needs a proposal".into())),
            (Mode::Baseline, _) => resize_bilinear(image, side, side),
        }
    }

    fn recog_name(mode: Mode) -> String {
        format!("recog_{}", mode.name())
    }

    pub fn train_recog(&self, mode: Mode) -> Result<History> {
        let records = self.manifest()?;
        let proposals = match mode {
            Mode::Ccr => Some(self.proposals()?),
            Mode::Baseline => None,
        };
        let cfg = self.cfg.train_config(Stage::Recognition);
        let weights = class_weights(&records, Split::Train, self.cfg.scene.num_identities)?;
        let samples: Vec<Sample> = strided(&records, Split::Train, cfg.frame_stride)
            .par_iter()
            .map(|r| {
                let bbox = proposals.as_ref().map(|p| Self::proposal_for(p, r.frame_id)).transpose()?;
                Ok(Sample {
                    image: self.recog_input(mode, &self.image(r)?, bbox)?,
                    target: Target::Labels(r.labels()),
                })
            })
            .collect::<Result<_>>()?;
        let mut net = CamNet::new(self.cfg.stage_model(Stage::Recognition))?;
        let history = train_recognition(&mut net, &samples, &weights, &cfg)?;
        self.save_net(&Self::recog_name(mode), &net, &history)?;
        Ok(history)
    }

    /// Simulated detections on `split`, linked into tracks within shots.
    fn tracks(&self, records: &[FrameRecord], split: Split, part: Part) -> Result<(Vec<Detection>, Vec<Track>)> {
        let frames: Vec<FrameRecord> = split_frames(records, split).into_iter().cloned().collect();
        let dets = simulate_detections(
            &frames,
            &self.cfg.detector(part),
            self.cfg.scene.image_side,
            self.cfg.scene.burst_len,
        )?;
        let t = &self.cfg.tracking;
        let tracks = link_tracks_per_shot(&dets, self.cfg.scene.burst_len, t.iou_threshold, t.min_track_len);
        Ok((dets, tracks))
    }

    fn track_name(part: Part) -> String {
        format!("track_{}", part.name())
    }

    /// Train the face or body track classifier on the member crops of
    /// training-split tracks, each labelled with its track's identity.
    pub fn train_tracknet(&self, part: Part) -> Result<History> {
        let records = self.manifest()?;
        let stage = Stage::Track(part);
        let cfg = self.cfg.train_config(stage);
        let (_, tracks) = self.tracks(&records, Split::Train, part)?;
        let mut by_frame: BTreeMap<u64, Vec<(BBox, usize)>> = BTreeMap::new();
        for t in tracks.iter().filter(|t| t.gt_identity >= 0) {
            for m in t.members.iter().filter(|m| m.frame_id % cfg.frame_stride as u64 == 0) {
                by_frame.entry(m.frame_id).or_default().push((m.bbox, t.gt_identity as usize));
            }
        }
        let index: HashMap<u64, &FrameRecord> = records.iter().map(|r| (r.frame_id, r)).collect();
        let side = self.side();
        let samples: Vec<Sample> = by_frame
            .into_iter()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|(frame_id, boxes)| {
                let image = self.image(index[frame_id])?;
                boxes
                    .iter()
                    .map(|(b, id)| Ok(Sample { image: crop_resize(&image, b, side)?, target: Target::Class(*id) }))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        if samples.is_empty() {
            return Err(Error::InvalidArgument(format!("no {} tracks in the training split", part.name())));
        }
        let mut net = CamNet::new(self.cfg.stage_model(stage))?;
        let history = train_track_classifier(&mut net, &samples, &cfg)?;
        self.save_net(&Self::track_name(part), &net, &history)?;
        Ok(history)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub accuracy: f64,
    pub negative_accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Share of ground-truth individual pixels inside proposals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub frames: usize,
    pub mean_coverage: f64,
    /// Fraction of frames whose coverage is at least `COVERAGE_TARGET`.
    pub covered_fraction: f64,
}

pub const COVERAGE_TARGET: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalReport {
    pub count_net: CoverageReport,
    /// The same crop rule applied to the baseline recogniser's top class.
    pub baseline_net: Option<CoverageReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    /// `frame` or `track`.
    pub unit: String,
    pub units: usize,
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub miap: f64,
    pub detector_recall: Option<f64>,
    pub identification_accuracy: Option<f64>,
}

impl MethodReport {
    fn new(method: &str, unit: &str, units: usize, ap: &ApSummary) -> Self {
        MethodReport {
            method: method.into(),
            unit: unit.into(),
            units,
            per_class_ap: ap.per_class_ap.clone(),
            map: ap.map,
            miap: ap.miap,
            detector_recall: None,
            identification_accuracy: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: String,
    /// Precision and recall of track methods are both measured in frames.
    pub precision_unit: String,
    pub config: PipelineConfig,
    pub count: Option<CountReport>,
    pub proposals: Option<ProposalReport>,
    pub methods: Vec<MethodReport>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// Plain-text comparison table.
    pub fn table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
        let mut s = format!("{:<10} {:>6} {:>6} {:>8} {:>8}\n", "method", "mAP", "miAP", "recall", "id-acc");
        for m in &self.methods {
            s += &format!(
                "{:<10} {:>6} {:>6} {:>8} {:>8}\n",
                m.method,
                pct(Some(m.map)),
                pct(Some(m.miap)),
                pct(m.detector_recall),
                pct(m.identification_accuracy)
            );
        }
        s
    }
}

fn coverage(bbox: &BBox, identity_mask: &[u8], side: usize) -> Option<f64> {
    let mut total = 0usize;
    let mut inside = 0usize;
    for (i, &id) in identity_mask.iter().enumerate() {
        if id != NO_IDENTITY {
            total += 1;
            inside += bbox.contains(i % side, i / side) as usize;
        }
    }
    (total > 0).then(|| inside as f64 / total as f64)
}

fn coverage_report(values: &[f64]) -> CoverageReport {
    let n = values.len().max(1) as f64;
    CoverageReport {
        frames: values.len(),
        mean_coverage: values.iter().sum::<f64>() / n,
        covered_fraction: values.iter().filter(|&&c| c >= COVERAGE_TARGET).count() as f64 / n,
    }
}

impl Pipeline {
    fn eval_count(&self, test: &[&FrameRecord]) -> Result<CountReport> {
        let net = self.load_net("count", "train-count")?;
        let cap = self.cfg.count_cap;
        let side = self.side();
        let pairs: Vec<(usize, usize)> = test
            .par_iter()
            .map(|r| {
                let (n_hat, _) = net.predict_count(&resize_bilinear(&self.image(r)?, side, side)?)?;
                Ok((count_label(&r.y, cap), n_hat))
            })
            .collect::<Result<_>>()?;
        let mut confusion = vec![vec![0; cap + 1]; cap + 1];
        for &(t, p) in &pairs {
            confusion[t][p] += 1;
        }
        let negatives = confusion[0].iter().sum::<usize>().max(1);
        Ok(CountReport {
            accuracy: (0..=cap).map(|i| confusion[i][i]).sum::<usize>() as f64 / pairs.len().max(1) as f64,
            negative_accuracy: confusion[0][0] as f64 / negatives as f64,
            confusion,
        })
    }

    /// Proposal coverage on test frames with individuals, measured against the
    /// re-rendered ground-truth identity masks.
    fn eval_proposals(&self, test: &[&FrameRecord], proposals: &HashMap<u64, BBox>) -> Result<ProposalReport> {
        let scene = &self.cfg.scene;
        let specs = generate_individual_specs(scene.num_identities, scene.seed)?;
        let baseline = self.checkpoint(&Self::recog_name(Mode::Baseline));
        let baseline = if baseline.is_file() { Some(CamNet::load(&baseline)?) } else { None };
        let side = scene.image_side;
        let rows: Vec<(f64, Option<f64>)> = test
            .par_iter()
            .filter(|r| r.n > 0)
            .filter_map(|r| {
                let run = || -> Result<Option<(f64, Option<f64>)>> {
                    let frame = render_frame(&specs, scene, r.frame_id)?;
                    let bbox = Self::proposal_for(proposals, r.frame_id)?;
                    let Some(c) = coverage(&bbox, &frame.identity_mask, side) else {
                        return Ok(None);
                    };
                    let b = match &baseline {
                        Some(net) => {
                            let (bb, _) = propose_from_top_class(net, &self.image(r)?, self.cfg.threshold)?;
                            coverage(&bb, &frame.identity_mask, side)
                        }
                        None => None,
                    };
                    Ok(Some((c, b)))
                };
                run().transpose()
            })
            .collect::<Result<_>>()?;
        let count: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let base: Vec<f64> = rows.iter().filter_map(|r| r.1).collect();
        Ok(ProposalReport {
            count_net: coverage_report(&count),
            baseline_net: baseline.map(|_| coverage_report(&base)),
        })
    }

    fn eval_frames(&self, mode: Mode, net: &CamNet, test: &[&FrameRecord], proposals: Option<&HashMap<u64, BBox>>) -> Result<Vec<Vec<f64>>> {
        test.par_iter()
            .map(|r| {
                let bbox = proposals.map(|p| Self::proposal_for(p, r.frame_id)).transpose()?;
                net.predict_identities(&self.recog_input(mode, &self.image(r)?, bbox)?)
            })
            .collect()
    }

    fn eval_part(&self, part: Part, records: &[FrameRecord], test: &[FrameRecord]) -> Result<(MethodReport, ApSummary)> {
        let net = self.load_net(&Self::track_name(part), "train-tracknets")?;
        let (dets, mut tracks) = self.tracks(records, Split::Test, part)?;
        let index: HashMap<u64, &FrameRecord> = test.iter().map(|r| (r.frame_id, r)).collect();
        let load = |frame_id: u64| -> Result<Tensor> {
            let r = index
                .get(&frame_id)
                .ok_or_else(|| Error::InvalidArgument(format!("track frame {frame_id} not in test split")))?;
            self.image(r)
        };
        let scores: Vec<Vec<f64>> = tracks.par_iter().map(|t| score_track(&net, t, &load)).collect::<Result<_>>()?;
        for (t, s) in tracks.iter_mut().zip(scores) {
            t.scores = Some(s);
        }
        let dir = self.tracks_dir();
        create_dir(&dir)?;
        write_jsonl(&dir.join(format!("{}_detections.jsonl", part.name())), &dets)?;
        write_jsonl(&dir.join(format!("{}_tracks.jsonl", part.name())), &tracks)?;
        let ap = track_level_ap(&tracks, test)?;
        let mut report = MethodReport::new(part.name(), "track", tracks.len(), &ap);
        report.detector_recall = Some(detector_recall(&tracks, test));
        report.identification_accuracy = identification_accuracy(&tracks).ok();
        Ok((report, ap))
    }

    /// Evaluate every method whose artefacts exist, plus the random baseline.
    pub fn eval(&self) -> Result<EvalReport> {
        let records = self.manifest()?;
        let test_refs = split_frames(&records, Split::Test);
        let test: Vec<FrameRecord> = test_refs.iter().map(|r| (*r).clone()).collect();
        let gt: Vec<Vec<bool>> = test.iter().map(|r| r.labels()).collect();
        let k = self.cfg.scene.num_identities;

        let count = if self.checkpoint("count").is_file() { Some(self.eval_count(&test_refs)?) } else { None };
        let proposals = if self.proposals_path().is_file() { Some(self.proposals()?) } else { None };
        let proposal_report = match &proposals {
            Some(p) => Some(self.eval_proposals(&test_refs, p)?),
            None => None,
        };

        let mut methods: Vec<(MethodReport, ApSummary)> = Vec::new();
        for part in [Part::Face, Part::Body] {
            if self.checkpoint(&Self::track_name(part)).is_file() {
                methods.push(self.eval_part(part, &records, &test)?);
            }
        }
        for mode in [Mode::Baseline, Mode::Ccr] {
            let path = self.checkpoint(&Self::recog_name(mode));
            if !path.is_file() {
                continue;
            }
            let props = match mode {
                Mode::Ccr => Some(proposals.as_ref().ok_or_else(|| {
                    Error::MissingPrerequisite(format!(
                        "{} not found; run `ccr propose` first",
                        self.proposals_path().display()
                    ))
                })?),
                Mode::Baseline => None,
            };
            let scores = self.eval_frames(mode, &CamNet::load(&path)?, &test_refs, props)?;
            let ap = frame_level_ap(&scores, &gt)?;
            methods.push((MethodReport::new(mode.name(), "frame", test.len(), &ap), ap));
        }
        if methods.is_empty() {
            return Err(Error::MissingPrerequisite(
                "no trained recogniser found; run `ccr train-recog` or `ccr train-tracknets` first".into(),
            ));
        }
        let random: Vec<Vec<f64>> = test
            .iter()
            .map(|r| {
                let mut rng = stream_rng(self.cfg.random_seed(), stream::RANDOM_SCORES, r.frame_id);
                (0..k).map(|_| rng.random::<f64>()).collect()
            })
            .collect();
        let ap = frame_level_ap(&random, &gt)?;
        methods.push((MethodReport::new("random", "frame", test.len(), &ap), ap));

        let dir = self.eval_dir();
        create_dir(&dir)?;
        for (m, ap) in &methods {
            for (c, curve) in ap.pr_curves.iter().enumerate().filter(|(_, c)| !c.is_empty()) {
                write_text(&dir.join(format!("pr_{}_class{c}.csv", m.method)), &pr_csv(curve))?;
            }
        }
        let report = EvalReport {
            version: VERSION.into(),
            precision_unit: "frame".into(),
            config: self.cfg.clone(),
            count,
            proposals: proposal_report,
            methods: methods.into_iter().map(|(m, _)| m).collect(),
        };
        write_text(&dir.join("comparison.txt"), &report.table())?;
        let path = self.report_path();
        if let Some(parent) = path.parent() {
            create_dir(parent)?;
        }
        write_text(&path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
        Ok(report)
    }
}

/// One line of the localisation JSON-lines file, in frame coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalisationRecord {
    pub frame_id: u64,
    pub identity: usize,
    pub bbox: [usize; 4],
    pub centroid: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocaliseSummary {
    pub localisations: usize,
    /// Share whose centroid falls inside the identity's ground-truth body box.
    pub centroid_hit_rate: f64,
}

impl Pipeline {
    /// Per-identity boxes inside the CCR crop, mapped back to the frame.
    fn localise_frame(&self, net: &CamNet, image: &Tensor, crop: &BBox, identities: &[usize]) -> Result<Vec<Localisation>> {
        let region = ccr_core::imageops::crop(image, crop)?;
        Ok(localise_individuals(net, &region, identities, self.cfg.threshold)?
            .into_iter()
            .map(|l| {
                let bbox = l.bbox.offset(crop.x0, crop.y0);
                Localisation { identity: l.identity, bbox, centroid: bbox.center() }
            })
            .collect())
    }

    /// Localise the ground-truth identities of every test frame.
    pub fn localise(&self) -> Result<LocaliseSummary> {
        let records = self.manifest()?;
        let net = self.load_net(&Self::recog_name(Mode::Ccr), "train-recog --mode ccr")?;
        let proposals = self.proposals()?;
        let test: Vec<&FrameRecord> = split_frames(&records, Split::Test).into_iter().filter(|r| r.n > 0).collect();
        let rows: Vec<(LocalisationRecord, bool)> = test
            .par_iter()
            .map(|r| {
                let crop = Self::proposal_for(&proposals, r.frame_id)?;
                let locs = self.localise_frame(&net, &self.image(r)?, &crop, &r.present())?;
                Ok(locs
                    .into_iter()
                    .map(|l| {
                        let hit = r.body_boxes.iter().any(|b| {
                            b.id == l.identity
                                && (b.x0 as f64..b.x1 as f64).contains(&l.centroid.0)
                                && (b.y0 as f64..b.y1 as f64).contains(&l.centroid.1)
                        });
                        let rec = LocalisationRecord {
                            frame_id: r.frame_id,
                            identity: l.identity,
                            bbox: l.bbox.to_array(),
                            centroid: [l.centroid.0, l.centroid.1],
                        };
                        (rec, hit)
                    })
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let recs: Vec<LocalisationRecord> = rows.iter().map(|r| r.0.clone()).collect();
        create_dir(&self.artifacts_dir())?;
        write_jsonl(&self.localisations_path(), &recs)?;
        Ok(LocaliseSummary {
            localisations: recs.len(),
            centroid_hit_rate: rows.iter().filter(|r| r.1).count() as f64 / rows.len().max(1) as f64,
        })
    }

    /// Overlays for the first `viz_frames` test frames: original | CAM heat |
    /// proposal box, and, when a CCR recogniser exists, per-identity boxes.
    pub fn viz(&self) -> Result<Vec<PathBuf>> {
        let records = self.manifest()?;
        let count = self.load_net("count", "train-count")?;
        let recog_path = self.checkpoint(&Self::recog_name(Mode::Ccr));
        let recog = if recog_path.is_file() { Some(CamNet::load(&recog_path)?) } else { None };
        let dir = self.viz_dir();
        create_dir(&dir)?;
        let frames: Vec<&FrameRecord> =
            split_frames(&records, Split::Test).into_iter().take(self.cfg.viz_frames).collect();
        let written: Vec<Vec<PathBuf>> = frames
            .par_iter()
            .map(|r| {
                let image = self.image(r)?;
                let (h, w) = (image.shape()[1], image.shape()[2]);
                let p = propose_region(&count, &image, self.cfg.threshold)?;
                let heat = upsample_cam(&normalize_cam(&p.cam), h, w)?;
                let mut boxed = image.clone();
                viz::draw_box(&mut boxed, &p.bbox, viz::PROPOSAL_COLOR);
                let panel = viz::hconcat(&[image.clone(), viz::heat_overlay(&image, &heat), boxed])?;
                let mut out = vec![dir.join(format!("{}_proposal_n{}.ppm", r.frame_id, p.n_hat))];
                write_ppm(&out[0], &panel)?;
                if let Some(net) = &recog {
                    let mut marked = image.clone();
                    for l in self.localise_frame(net, &image, &p.bbox, &r.present())? {
                        let color = viz::IDENTITY_COLORS[l.identity % viz::IDENTITY_COLORS.len()];
                        viz::draw_box(&mut marked, &l.bbox, color);
                        viz::draw_cross(&mut marked, l.centroid, color);
                    }
                    let path = dir.join(format!("{}_localise.ppm", r.frame_id));
                    write_ppm(&path, &marked)?;
                    out.push(path);
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Ok(written.into_iter().flatten().collect())
    }

    /// `gen → train-count → propose → train-recog (ccr, baseline) →
    /// train-tracknets → eval`.
    pub fn run_all(&self, force: bool, log: &mut dyn FnMut(&str)) -> Result<EvalReport> {
        let summary = self.gen(force)?;
        log(&summary.render());
        let h = self.train_count()?;
        log(&format!("count: {:?}", h.last()));
        self.propose()?;
        log("proposals written");
        for mode in [Mode::Ccr, Mode::Baseline] {
            let h = self.train_recog(mode)?;
            log(&format!("recog {}: {:?}", mode.name(), h.last()));
        }
        for part in [Part::Face, Part::Body] {
            let h = self.train_tracknet(part)?;
            log(&format!("track {}: {:?}", part.name(), h.last()));
        }
        let report = self.eval()?;
        log(&report.table());
        Ok(report)
    }
}
