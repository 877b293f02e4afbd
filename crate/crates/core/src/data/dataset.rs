//! In-memory datasets and balanced batch construction.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::imageops::{crop_and_resize, crop_landmarks, jpeg_roundtrip, resize_nearest, DEFAULT_JPEG_QUALITY};
use super::manifest::{DatasetManifest, FrameRecord};
use crate::error::{Error, Result};
use crate::masks::{build_region_masks, LandmarkSet, MaskParams, RegionMaskSet};
use crate::rgb::RgbImage;

/// Side of the normalized face crop that landmarks and masks live in.
pub const CANVAS: usize = 288;

/// One normalized face crop with landmarks in crop coordinates.
#[derive(Clone, Debug)]
pub struct FrameSample {
    pub record: FrameRecord,
    pub image: RgbImage,
    pub landmarks: LandmarkSet,
}

/// Reads a frame, crops its face box to 288×288 and optionally JPEG round-trips it.
pub fn load_frame(manifest: &DatasetManifest, record: &FrameRecord, jpeg_quality: Option<u8>) -> Result<FrameSample> {
    let frame = RgbImage::load(&manifest.image_path(record))?;
    let dims = (frame.width(), frame.height());
    let mut image = crop_and_resize(&frame, record.face_box, CANVAS)?;
    if let Some(q) = jpeg_quality {
        image = jpeg_roundtrip(&image, q)?;
    }
    let landmarks = crop_landmarks(&record.landmarks, record.face_box, dims, CANVAS)?;
    Ok(FrameSample {
        record: record.clone(),
        image,
        landmarks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Network input side; crops are nearest-neighbour resized when it differs from 288.
    pub input_size: usize,
    pub jpeg_quality: Option<u8>,
    pub mask_params: MaskParams,
    pub map_resolution: (usize, usize),
    /// Build fake-frame mask targets. Scoring does not need them.
    #[serde(default = "yes")]
    pub targets: bool,
}

fn yes() -> bool {
    true
}

impl LoadOptions {
    pub fn new(input_size: usize, map_resolution: (usize, usize)) -> Self {
        Self {
            input_size,
            jpeg_quality: Some(DEFAULT_JPEG_QUALITY),
            mask_params: MaskParams::default(),
            map_resolution,
            targets: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoadedFrame {
    pub record: FrameRecord,
    /// Network-ready image at `input_size`.
    pub image: RgbImage,
    /// Training targets; all zero for real frames.
    pub masks: RegionMaskSet,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    frames: Vec<LoadedFrame>,
    options: LoadOptions,
}

impl Dataset {
    /// Loads `records` (manifest order preserved) and builds fake-frame mask targets
    /// unless `options.targets` is off.
    pub fn load(manifest: &DatasetManifest, records: &[&FrameRecord], options: &LoadOptions) -> Result<Self> {
        let frames = records
            .par_iter()
            .map(|r| {
                let s = load_frame(manifest, r, options.jpeg_quality)?;
                let masks = if r.label == 1 && options.targets {
                    build_region_masks(&s.landmarks, (CANVAS, CANVAS), options.map_resolution, &options.mask_params)?
                } else {
                    RegionMaskSet::zeros(options.map_resolution)
                };
                Ok(LoadedFrame {
                    record: s.record,
                    image: resize_nearest(&s.image, options.input_size),
                    masks,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            frames,
            options: options.clone(),
        })
    }

    pub fn frames(&self) -> &[LoadedFrame] {
        &self.frames
    }

    pub fn options(&self) -> &LoadOptions {
        &self.options
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn indices(&self, label: u8) -> Vec<usize> {
        (0..self.frames.len()).filter(|&i| self.frames[i].record.label == label).collect()
    }

    pub fn count(&self, label: u8) -> usize {
        self.frames.iter().filter(|f| f.record.label == label).count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchPolicy {
    #[default]
    Balanced,
    AsIs,
}

impl std::str::FromStr for BatchPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(BatchPolicy::Balanced),
            "as-is" => Ok(BatchPolicy::AsIs),
            other => Err(Error::Config(format!("unknown batch policy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub frame_ids: Vec<String>,
    pub images: Vec<RgbImage>,
    pub labels: Vec<u8>,
    pub mask_sets: Vec<RegionMaskSet>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `n` draws from `pool`, without replacement when the pool is large enough.
fn draw(pool: &[usize], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n <= pool.len() {
        sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Draws a batch using `rng`. Balanced batches hold ⌈size/2⌉ fakes and
/// ⌊size/2⌋ reals in shuffled order.
pub fn draw_batch(dataset: &Dataset, size: usize, policy: BatchPolicy, rng: &mut impl Rng) -> Result<Batch> {
    if size == 0 {
        return Err(Error::Batch("batch size must be positive".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Batch("dataset is empty".into()));
    }
    let mut chosen = match policy {
        BatchPolicy::AsIs => {
            let all: Vec<usize> = (0..dataset.len()).collect();
            draw(&all, size, rng)
        }
        BatchPolicy::Balanced => {
            let reals = dataset.indices(0);
            let fakes = dataset.indices(1);
            let n_fake = size.div_ceil(2);
            let n_real = size / 2;
            if (n_real > 0 && reals.is_empty()) || fakes.is_empty() {
                return Err(Error::Batch(format!(
                    "balanced batching needs both classes ({} real, {} fake available)",
                    reals.len(),
                    fakes.len()
                )));
            }
            let mut v = draw(&fakes, n_fake, rng);
            v.extend(draw(&reals, n_real, rng));
            v
        }
    };
    chosen.shuffle(rng);
    let frames = dataset.frames();
    Ok(Batch {
        frame_ids: chosen.iter().map(|&i| frames[i].record.frame_id.clone()).collect(),
        images: chosen.iter().map(|&i| frames[i].image.clone()).collect(),
        labels: chosen.iter().map(|&i| frames[i].record.label).collect(),
        mask_sets: chosen.iter().map(|&i| frames[i].masks.clone()).collect(),
    })
}

pub fn make_batch(dataset: &Dataset, size: usize, policy: BatchPolicy, seed: u64) -> Result<Batch> {
    draw_batch(dataset, size, policy, &mut ChaCha8Rng::seed_from_u64(seed))
}
