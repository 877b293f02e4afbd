//! Pixel differences between paired real and fake frames: masked difference
//! maps, per-region histograms and per-method summary tables.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_frame, DatasetManifest, FrameRecord, Method, CANVAS};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::masks::{region_mask_full, MaskParams, RegionId};
use crate::rgb::RgbImage;

pub const DEFAULT_BINS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct DiffMap {
    pub region: RegionId,
    pub values: Grid,
    pub real_id: String,
    pub fake_id: String,
}

/// Channel-mean absolute difference, one value per pixel.
pub fn abs_diff(real: &RgbImage, fake: &RgbImage) -> Result<Grid> {
    if (real.width(), real.height()) != (fake.width(), fake.height()) {
        return Err(Error::InvalidInput(format!(
            "image shapes differ: {}x{} vs {}x{}",
            real.width(),
            real.height(),
            fake.width(),
            fake.height()
        )));
    }
    let values = real
        .as_slice()
        .chunks_exact(3)
        .zip(fake.as_slice().chunks_exact(3))
        .map(|(a, b)| (0..3).map(|c| (a[c] as f64 - b[c] as f64).abs()).sum::<f64>() / 3.0)
        .collect();
    Ok(Grid::from_vec(real.height(), real.width(), values))
}

/// `mask ⊙ mean_channels |real − fake|`.
pub fn diff_map(real: &RgbImage, fake: &RgbImage, mask: &Grid, region: RegionId) -> Result<DiffMap> {
    let diff = abs_diff(real, fake)?;
    if diff.shape() != mask.shape() {
        return Err(Error::InvalidInput(format!(
            "mask is {:?}, images are {:?}",
            mask.shape(),
            diff.shape()
        )));
    }
    let values = diff.as_slice().iter().zip(mask.as_slice()).map(|(d, m)| d * m).collect();
    Ok(DiffMap {
        region,
        values: Grid::from_vec(diff.height(), diff.width(), values),
        real_id: String::new(),
        fake_id: String::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionHistogram {
    pub region: RegionId,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl RegionHistogram {
    pub fn new(region: RegionId, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidParameter("histogram needs at least one bin".into()));
        }
        Ok(Self {
            region,
            edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
            counts: vec![0; bins],
        })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// Values outside [0, 1] are clamped into the end bins.
    pub fn add(&mut self, value: f64) {
        let n = self.bins();
        let b = ((value.clamp(0.0, 1.0) * n as f64) as usize).min(n - 1);
        self.counts[b] += 1;
    }

    pub fn merge(&mut self, other: &RegionHistogram) -> Result<()> {
        if other.region != self.region || other.edges != self.edges {
            return Err(Error::InvalidInput("histograms have different regions or bins".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Mean value using bin centres.
    pub fn mean(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let weighted: f64 = self
            .counts
            .iter()
            .enumerate()
            .map(|(i, &c)| c as f64 * 0.5 * (self.edges[i] + self.edges[i + 1]))
            .sum();
        weighted / total as f64
    }
}

/// How the masked mean is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskWeighting {
    /// Σ D / Σ mask.
    #[default]
    Soft,
    /// Mean |real − fake| over pixels with mask > 0.
    Hard,
}

impl std::str::FromStr for MaskWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "soft" => Ok(MaskWeighting::Soft),
            "hard" => Ok(MaskWeighting::Hard),
            other => Err(Error::Config(format!("unknown mask weighting `{other}`"))),
        }
    }
}

/// Per-region sums for one fake/real pair.
#[derive(Clone, Debug, Default, PartialEq)]
struct RegionTally {
    weighted_sum: f64,
    mask_sum: f64,
    hard_sum: f64,
    n_pixels: u64,
}

impl RegionTally {
    fn merge(&mut self, o: &RegionTally) {
        self.weighted_sum += o.weighted_sum;
        self.mask_sum += o.mask_sum;
        self.hard_sum += o.hard_sum;
        self.n_pixels += o.n_pixels;
    }

    fn mean(&self, weighting: MaskWeighting) -> f64 {
        match weighting {
            MaskWeighting::Soft if self.mask_sum > 0.0 => self.weighted_sum / self.mask_sum,
            MaskWeighting::Hard if self.n_pixels > 0 => self.hard_sum / self.n_pixels as f64,
            _ => 0.0,
        }
    }
}

/// A fake frame together with its resolved real counterpart.
pub struct Pair<'a> {
    pub fake: &'a FrameRecord,
    pub real: &'a FrameRecord,
}

/// Resolves `paired_real_frame_id` for every fake in `records`.
pub fn resolve_pairs<'a>(manifest: &'a DatasetManifest, records: &[&'a FrameRecord]) -> Result<Vec<Pair<'a>>> {
    records
        .iter()
        .filter(|r| r.label == 1)
        .map(|fake| {
            let id = fake
                .paired_real_frame_id
                .as_deref()
                .ok_or_else(|| Error::Data(format!("frame `{}` has no paired real frame", fake.frame_id)))?;
            let real = manifest
                .find(id)
                .ok_or_else(|| Error::Data(format!("frame `{}` pairs with unknown frame `{id}`", fake.frame_id)))?;
            Ok(Pair { fake, real })
        })
        .collect()
}

/// First frame (by frame id) of every fake video, per method.
pub fn one_frame_per_video<'a>(records: &[&'a FrameRecord]) -> Vec<&'a FrameRecord> {
    let mut first: BTreeMap<(String, &str), &FrameRecord> = BTreeMap::new();
    for r in records.iter().filter(|r| r.label == 1) {
        let key = (r.method.as_str().to_string(), r.video_id.as_str());
        match first.get(&key) {
            Some(prev) if prev.frame_id <= r.frame_id => {}
            _ => {
                first.insert(key, r);
            }
        }
    }
    let mut out: Vec<&FrameRecord> = first.into_values().collect();
    out.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
    out
}

struct PairStats {
    method: Method,
    tallies: [RegionTally; 4],
    histograms: Vec<RegionHistogram>,
}

/// Loads one pair as 288 px crops and computes every region's statistics.
/// Masks come from the fake frame's landmarks at full crop resolution.
fn pair_stats(manifest: &DatasetManifest, pair: &Pair<'_>, params: &MaskParams, bins: usize) -> Result<PairStats> {
    let fake = load_frame(manifest, pair.fake, None)?;
    let real = load_frame(manifest, pair.real, None)?;
    let diff = abs_diff(&real.image, &fake.image)?;
    let mut tallies: [RegionTally; 4] = Default::default();
    let mut histograms = Vec::with_capacity(4);
    for region in RegionId::ALL {
        let mask = region_mask_full(&fake.landmarks, region, (CANVAS, CANVAS), params)?;
        let mut hist = RegionHistogram::new(region, bins)?;
        let t = &mut tallies[region.index()];
        for (&d, &m) in diff.as_slice().iter().zip(mask.as_slice()) {
            if m > 0.0 {
                t.weighted_sum += d * m;
                t.mask_sum += m;
                t.hard_sum += d;
                t.n_pixels += 1;
                hist.add(d * m);
            }
        }
        histograms.push(hist);
    }
    Ok(PairStats {
        method: pair.fake.method.clone(),
        tallies,
        histograms,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub region: RegionId,
    pub mean_abs_diff: f64,
    pub n_pixels: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiffSummary {
    pub rows: Vec<SummaryRow>,
}

impl DiffSummary {
    pub fn get(&self, method: &str, region: RegionId) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.region == region)
            .map(|r| r.mean_abs_diff)
    }

    pub fn methods(&self) -> Vec<String> {
        let mut m: Vec<String> = self.rows.iter().map(|r| r.method.clone()).collect();
        m.dedup();
        m
    }
}

/// Summary and histograms (pooled over methods) for the given pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ForensicStats {
    pub summary: DiffSummary,
    pub histograms: Vec<RegionHistogram>,
}

pub fn forensic_stats(
    manifest: &DatasetManifest,
    pairs: &[Pair<'_>],
    params: &MaskParams,
    bins: usize,
    weighting: MaskWeighting,
) -> Result<ForensicStats> {
    let per_pair = pairs
        .par_iter()
        .map(|p| pair_stats(manifest, p, params, bins))
        .collect::<Result<Vec<_>>>()?;
    let mut histograms = RegionId::ALL
        .iter()
        .map(|&r| RegionHistogram::new(r, bins))
        .collect::<Result<Vec<_>>>()?;
    let mut by_method: BTreeMap<(usize, String), [RegionTally; 4]> = BTreeMap::new();
    for s in &per_pair {
        for (h, ph) in histograms.iter_mut().zip(&s.histograms) {
            h.merge(ph)?;
        }
        let key = (method_rank(&s.method), s.method.as_str().to_string());
        let acc = by_method.entry(key).or_default();
        for (a, t) in acc.iter_mut().zip(&s.tallies) {
            a.merge(t);
        }
    }
    let rows = by_method
        .into_iter()
        .flat_map(|((_, method), tallies)| {
            RegionId::ALL.into_iter().map(move |region| {
                let t = &tallies[region.index()];
                SummaryRow {
                    method: method.clone(),
                    region,
                    mean_abs_diff: t.mean(weighting),
                    n_pixels: t.n_pixels,
                }
            })
        })
        .collect();
    Ok(ForensicStats {
        summary: DiffSummary { rows },
        histograms,
    })
}

fn method_rank(m: &Method) -> usize {
    match m {
        Method::Deepfakes => 0,
        Method::Face2Face => 1,
        Method::FaceSwap => 2,
        Method::NeuralTextures => 3,
        _ => 4,
    }
}

/// Histogram of one region over the given pairs.
pub fn region_histogram(
    manifest: &DatasetManifest,
    pairs: &[Pair<'_>],
    region: RegionId,
    params: &MaskParams,
    bins: usize,
) -> Result<RegionHistogram> {
    let stats = forensic_stats(manifest, pairs, params, bins, MaskWeighting::Soft)?;
    Ok(stats.histograms.into_iter().nth(region.index()).expect("four regions"))
}

pub fn diff_summary(
    manifest: &DatasetManifest,
    pairs: &[Pair<'_>],
    params: &MaskParams,
    weighting: MaskWeighting,
) -> Result<DiffSummary> {
    Ok(forensic_stats(manifest, pairs, params, DEFAULT_BINS, weighting)?.summary)
}

pub fn summary_csv(summary: &DiffSummary) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &summary.rows {
        w.serialize(r).expect("in-memory csv");
    }
    let text = String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8");
    if summary.rows.is_empty() {
        "method,region,mean_abs_diff,n_pixels\n".into()
    } else {
        text
    }
}

/// Methods as rows, regions as columns.
pub fn summary_markdown(summary: &DiffSummary) -> String {
    let mut out = String::from("| Method |");
    for r in RegionId::ALL {
        out.push_str(&format!(" {} |", r.title()));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(4));
    out.push('\n');
    for m in summary.methods() {
        out.push_str(&format!("| {m} |"));
        for r in RegionId::ALL {
            match summary.get(&m, r) {
                Some(v) => out.push_str(&format!(" {v:.4} |")),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn histogram_csv(histograms: &[RegionHistogram]) -> String {
    let mut out = String::from("region,bin_lo,bin_hi,count\n");
    for h in histograms {
        for (i, c) in h.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{},{c}\n", h.region.as_str(), h.edges[i], h.edges[i + 1]));
        }
    }
    out
}

const PANEL: u32 = 200;
const MARGIN: u32 = 10;

/// Draws the histograms as a 2×2 grid of bar charts, one panel per region.
/// Bar heights use log(1 + count) scaled to each panel's maximum.
pub fn histogram_png(histograms: &[RegionHistogram], path: &Path) -> Result<()> {
    let cols = 2u32;
    let rows = (histograms.len() as u32).div_ceil(cols).max(1);
    let (w, h) = (cols * (PANEL + 2 * MARGIN), rows * (PANEL + 2 * MARGIN));
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    let colors = [[214, 39, 40], [31, 119, 180], [44, 160, 44], [148, 103, 189]];
    for (k, hist) in histograms.iter().enumerate() {
        let (ox, oy) = ((k as u32 % cols) * (PANEL + 2 * MARGIN) + MARGIN, (k as u32 / cols) * (PANEL + 2 * MARGIN) + MARGIN);
        for x in 0..PANEL {
            img.put_pixel(ox + x, oy + PANEL - 1, image::Rgb([0, 0, 0]));
        }
        let peak = hist.counts.iter().map(|&c| (1.0 + c as f64).ln()).fold(0.0, f64::max);
        if peak == 0.0 {
            continue;
        }
        let bar = (PANEL / hist.bins() as u32).max(1);
        for (i, &c) in hist.counts.iter().enumerate() {
            let height = (((1.0 + c as f64).ln() / peak) * (PANEL - 1) as f64).round() as u32;
            for x in 0..bar.saturating_sub(1) {
                for y in 0..height {
                    let px = ox + i as u32 * bar + x;
                    if px < ox + PANEL {
                        img.put_pixel(px, oy + PANEL - 1 - y, image::Rgb(colors[hist.region.index()]));
                    }
                }
            }
        }
    }
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    crate::util::write_atomic(path, bytes.get_ref())
}
