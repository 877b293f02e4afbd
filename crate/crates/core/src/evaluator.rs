//! Scoring, ROC/AUC, balanced accuracy, transfer matrices and report rendering.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetManifest, FrameRecord, LoadOptions};
use crate::error::{Error, Result};
use crate::nn::checkpoint::read_checkpoint;
use crate::nn::{ModelConfig, Network, NetworkParams};
use crate::objectives::{classify, ClassifierParams};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
const SCORE_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreGrouping {
    Video,
    Frame,
}

impl FromStr for ScoreGrouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "video" => Ok(ScoreGrouping::Video),
            "frame" => Ok(ScoreGrouping::Frame),
            other => Err(Error::Config(format!("unknown grouping `{other}`"))),
        }
    }
}

impl fmt::Display for ScoreGrouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreGrouping::Video => "video",
            ScoreGrouping::Frame => "frame",
        })
    }
}

/// One scored frame, as written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame_id: String,
    pub video_id: String,
    pub label: u8,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    /// Frame ids or video ids, depending on `grouping`.
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub grouping: ScoreGrouping,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>, grouping: ScoreGrouping) -> Result<Self> {
        let ids = (0..scores.len()).map(|i| i.to_string()).collect();
        Self::with_ids(ids, scores, labels, grouping)
    }

    pub fn with_ids(ids: Vec<String>, scores: Vec<f64>, labels: Vec<u8>, grouping: ScoreGrouping) -> Result<Self> {
        if scores.len() != labels.len() || ids.len() != labels.len() {
            return Err(Error::Metric(format!(
                "{} ids, {} scores and {} labels",
                ids.len(),
                scores.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Metric(format!("label {l} is not 0 or 1")));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Metric(format!("non-finite score {s}")));
        }
        Ok(Self {
            ids,
            scores,
            labels,
            grouping,
        })
    }

    /// Groups frame scores. Video scores are the mean of their frame scores,
    /// ordered by video id.
    pub fn from_frames(frames: &[FrameScore], grouping: ScoreGrouping) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Metric("no frames to score".into()));
        }
        match grouping {
            ScoreGrouping::Frame => Self::with_ids(
                frames.iter().map(|f| f.frame_id.clone()).collect(),
                frames.iter().map(|f| f.score).collect(),
                frames.iter().map(|f| f.label).collect(),
                grouping,
            ),
            ScoreGrouping::Video => {
                let mut videos: BTreeMap<&str, (f64, usize, u8)> = BTreeMap::new();
                for f in frames {
                    let e = videos.entry(&f.video_id).or_insert((0.0, 0, f.label));
                    if e.2 != f.label {
                        return Err(Error::Data(format!("video `{}` mixes labels", f.video_id)));
                    }
                    e.0 += f.score;
                    e.1 += 1;
                }
                Self::with_ids(
                    videos.keys().map(|k| k.to_string()).collect(),
                    videos.values().map(|(s, n, _)| s / *n as f64).collect(),
                    videos.values().map(|v| v.2).collect(),
                    grouping,
                )
            }
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// (n_real, n_fake)
    pub fn class_counts(&self) -> (usize, usize) {
        let fakes = self.labels.iter().filter(|&&l| l == 1).count();
        (self.len() - fakes, fakes)
    }

    fn require_both(&self) -> Result<(usize, usize)> {
        let (r, f) = self.class_counts();
        if r == 0 || f == 0 {
            return Err(Error::Metric(format!("need both classes, got {r} real and {f} fake")));
        }
        Ok((r, f))
    }

    /// Distinct scores in decreasing order with the (real, fake) count at each.
    fn tie_groups(&self) -> Vec<(f64, usize, usize)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut groups: Vec<(f64, usize, usize)> = Vec::new();
        for i in order {
            let s = self.scores[i];
            match groups.last_mut() {
                Some(g) if g.0 == s => {}
                _ => groups.push((s, 0, 0)),
            }
            let g = groups.last_mut().unwrap();
            if self.labels[i] == 1 {
                g.2 += 1;
            } else {
                g.1 += 1;
            }
        }
        groups
    }
}

/// ROC points (fpr, tpr) from sweeping the threshold down through every
/// distinct score, starting at (0, 0) and ending at (1, 1).
pub fn roc_curve(set: &ScoreSet) -> Result<Vec<(f64, f64)>> {
    let (n_real, n_fake) = set.require_both()?;
    let mut points = vec![(0.0, 0.0)];
    let (mut fp, mut tp) = (0usize, 0usize);
    for (_, reals, fakes) in set.tie_groups() {
        fp += reals;
        tp += fakes;
        points.push((fp as f64 / n_real as f64, tp as f64 / n_fake as f64));
    }
    Ok(points)
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

/// Probability that a random fake outscores a random real, ties counting half.
pub fn auc(set: &ScoreSet) -> Result<f64> {
    let (n_real, n_fake) = set.require_both()?;
    // Counts in half-units stay exact integers.
    let mut half_pairs: u128 = 0;
    let mut reals_below = n_real;
    for (_, reals, fakes) in set.tie_groups() {
        reals_below -= reals;
        half_pairs += (fakes as u128) * (2 * reals_below as u128 + reals as u128);
    }
    Ok(half_pairs as f64 / (2.0 * n_real as f64 * n_fake as f64))
}

/// Mean of true-positive and true-negative rates, predicting fake when `score >= threshold`.
pub fn balanced_accuracy(set: &ScoreSet, threshold: f64) -> Result<f64> {
    let (n_real, n_fake) = set.require_both()?;
    let (mut tp, mut tn) = (0usize, 0usize);
    for (&s, &l) in set.scores.iter().zip(&set.labels) {
        match (l, s >= threshold) {
            (1, true) => tp += 1,
            (0, false) => tn += 1,
            _ => {}
        }
    }
    Ok(0.5 * (tp as f64 / n_fake as f64 + tn as f64 / n_real as f64))
}

/// Network and weights restored from a checkpoint file.
pub struct LoadedModel {
    pub net: Network,
    pub params: NetworkParams<f32>,
    pub step: u64,
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let data = read_checkpoint(path)?;
        let net = Network::new(&data.header.config)?;
        let params = data.params(net.slots())?;
        Ok(Self {
            net,
            params,
            step: data.header.step,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    pub fn load_options(&self, jpeg_quality: Option<u8>) -> LoadOptions {
        LoadOptions {
            jpeg_quality,
            targets: false,
            ..LoadOptions::new(self.config().input_size, self.config().map_resolution())
        }
    }
}

/// Fake probabilities for every loaded frame, in dataset order.
pub fn score_dataset(net: &Network, params: &NetworkParams<f32>, dataset: &Dataset) -> Result<Vec<FrameScore>> {
    let classifier = ClassifierParams::from_network(net, params);
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.frames().chunks(SCORE_CHUNK) {
        let images: Vec<_> = chunk.iter().map(|f| f.image.clone()).collect();
        let maps = net.forward(params, &images)?;
        for (i, frame) in chunk.iter().enumerate() {
            let pred = classify(&maps.sample_maps(i), net.config().aggregation, &classifier)?;
            out.push(FrameScore {
                frame_id: frame.record.frame_id.clone(),
                video_id: frame.record.video_id.clone(),
                label: frame.record.label,
                score: pred.score,
            });
        }
    }
    Ok(out)
}

/// Loads and scores `records` with a checkpointed model.
pub fn evaluate_frames(
    model: &LoadedModel,
    manifest: &DatasetManifest,
    records: &[&FrameRecord],
    jpeg_quality: Option<u8>,
) -> Result<Vec<FrameScore>> {
    if records.is_empty() {
        return Err(Error::Metric("nothing to evaluate".into()));
    }
    let dataset = Dataset::load(manifest, records, &model.load_options(jpeg_quality))?;
    score_dataset(&model.net, &model.params, &dataset)
}

pub fn evaluate(
    model: &LoadedModel,
    manifest: &DatasetManifest,
    records: &[&FrameRecord],
    grouping: ScoreGrouping,
    jpeg_quality: Option<u8>,
) -> Result<ScoreSet> {
    ScoreSet::from_frames(&evaluate_frames(model, manifest, records, jpeg_quality)?, grouping)
}

pub fn write_scores(path: &Path, scores: &[FrameScore]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in scores {
        w.serialize(s).map_err(|e| Error::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    crate::util::write_atomic(path, &bytes)
}

pub fn read_scores(path: &Path) -> Result<Vec<FrameScore>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<FrameScore>, _>>()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub train_split: String,
    pub eval_split: String,
    pub model_name: String,
    pub grouping: ScoreGrouping,
    pub auc: f64,
    pub balanced_accuracy: f64,
    pub n_videos: usize,
    pub n_frames: usize,
    pub in_distribution: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransferReport {
    pub cells: Vec<TransferCell>,
}

impl TransferReport {
    pub fn cell(&self, train: &str, eval: &str, grouping: ScoreGrouping) -> Option<&TransferCell> {
        self.cells
            .iter()
            .find(|c| c.train_split == train && c.eval_split == eval && c.grouping == grouping)
    }

    /// Cells in report order: model, train split, grouping, eval split.
    pub fn sorted(&self) -> Vec<&TransferCell> {
        let mut cells: Vec<&TransferCell> = self.cells.iter().collect();
        cells.sort_by(|a, b| {
            (model_rank(&a.model_name), split_rank(&a.train_split), a.grouping, split_rank(&a.eval_split)).cmp(&(
                model_rank(&b.model_name),
                split_rank(&b.train_split),
                b.grouping,
                split_rank(&b.eval_split),
            ))
        });
        cells
    }
}

const MODEL_ORDER: [&str; 6] = ["Nose", "Mouth", "Eyes", "Chin", "Eyes+Chin", "Combined"];
const SPLIT_ORDER: [&str; 4] = ["DF", "F2F", "FS", "NT"];

fn model_rank(name: &str) -> (usize, String) {
    (MODEL_ORDER.iter().position(|m| *m == name).unwrap_or(MODEL_ORDER.len()), name.to_string())
}

fn split_rank(name: &str) -> (usize, String) {
    (SPLIT_ORDER.iter().position(|m| *m == name).unwrap_or(SPLIT_ORDER.len()), name.to_string())
}

/// One trained model per train split, scored on the test records of every eval manifest.
pub struct EvalSplit<'a> {
    pub name: String,
    pub manifest: &'a DatasetManifest,
    pub records: Vec<&'a FrameRecord>,
}

pub fn transfer_matrix(
    models: &[(String, &LoadedModel)],
    evals: &[EvalSplit<'_>],
    groupings: &[ScoreGrouping],
    jpeg_quality: Option<u8>,
) -> Result<TransferReport> {
    if models.is_empty() || evals.is_empty() || groupings.is_empty() {
        return Err(Error::Metric("transfer matrix needs models, eval splits and groupings".into()));
    }
    let mut cells = Vec::new();
    for (train, model) in models {
        for eval in evals {
            let frames = evaluate_frames(model, eval.manifest, &eval.records, jpeg_quality)?;
            let n_frames = frames.len();
            let n_videos = ScoreSet::from_frames(&frames, ScoreGrouping::Video)?.len();
            for &grouping in groupings {
                let set = ScoreSet::from_frames(&frames, grouping)?;
                cells.push(TransferCell {
                    train_split: train.clone(),
                    eval_split: eval.name.clone(),
                    model_name: model.config().model_name(),
                    grouping,
                    auc: auc(&set)?,
                    balanced_accuracy: balanced_accuracy(&set, DEFAULT_THRESHOLD)?,
                    n_videos,
                    n_frames,
                    in_distribution: *train == eval.name,
                });
            }
        }
    }
    Ok(TransferReport { cells })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

pub const REPORT_HEADER: &str =
    "train_split,eval_split,model_name,grouping,auc,balanced_accuracy,n_videos,n_frames,in_distribution";

pub fn render_report(report: &TransferReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Markdown => render_markdown(report),
    }
}

fn render_csv(report: &TransferReport) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for c in report.sorted() {
        w.serialize(c).expect("in-memory csv");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8");
    format!("{REPORT_HEADER}\n{body}")
}

pub fn parse_report_csv(text: &str) -> Result<TransferReport> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Data(e.to_string()))?.iter().collect::<Vec<_>>().join(",");
    if header != REPORT_HEADER {
        return Err(Error::Data(format!("unexpected report header `{header}`")));
    }
    let cells = r
        .deserialize()
        .collect::<std::result::Result<Vec<TransferCell>, _>>()
        .map_err(|e| Error::Data(e.to_string()))?;
    Ok(TransferReport { cells })
}

fn render_markdown(report: &TransferReport) -> String {
    let cells = report.sorted();
    let mut evals: Vec<&str> = cells.iter().map(|c| c.eval_split.as_str()).collect();
    evals.sort_by_key(|s| split_rank(s));
    evals.dedup();
    let mut groupings: Vec<ScoreGrouping> = cells.iter().map(|c| c.grouping).collect();
    groupings.sort();
    groupings.dedup();

    let table_head = |evals: &[&str]| {
        let mut s = String::from("| Model | Train |");
        for e in evals {
            s.push_str(&format!(" {e} |"));
        }
        s.push_str("\n|---|---|");
        s.push_str(&"---|".repeat(evals.len()));
        s.push('\n');
        s
    };
    if cells.is_empty() {
        return table_head(&[]);
    }

    let mut out = String::new();
    for grouping in groupings {
        for (title, metric) in [("AUC", true), ("Balanced accuracy", false)] {
            out.push_str(&format!("### {title} ({grouping}-level)\n\n"));
            out.push_str(&table_head(&evals));
            let mut rows: Vec<(&str, &str)> = cells
                .iter()
                .filter(|c| c.grouping == grouping)
                .map(|c| (c.model_name.as_str(), c.train_split.as_str()))
                .collect();
            rows.dedup();
            for (model, train) in rows {
                out.push_str(&format!("| {model} | {train} |"));
                for e in &evals {
                    let cell = cells
                        .iter()
                        .find(|c| c.grouping == grouping && c.model_name == model && c.train_split == train && c.eval_split == *e);
                    match cell {
                        Some(c) => {
                            let v = if metric { c.auc } else { c.balanced_accuracy };
                            if c.in_distribution {
                                out.push_str(&format!(" **{v:.2}** |"));
                            } else {
                                out.push_str(&format!(" {v:.2} |"));
                            }
                        }
                        None => out.push_str(" - |"),
                    }
                }
                out.push('\n');
            }
            out.push('\n');
        }
    }
    out.push_str("Bold cells are in-distribution (evaluated on the split the model was trained on).\n");
    out
}
