//! Manifest-driven dataset access and the synthetic forgery generator.

pub mod dataset;
pub mod imageops;
pub mod manifest;
pub mod synth;

pub use dataset::{draw_batch, load_frame, make_batch, Batch, BatchPolicy, Dataset, FrameSample, LoadOptions, LoadedFrame, CANVAS};
pub use imageops::{crop_and_resize, jpeg_roundtrip, resize_nearest, DEFAULT_JPEG_QUALITY};
pub use manifest::{ingest_manifest, parse_manifest, write_manifest, DatasetManifest, FrameRecord, Method, Provenance, Split};
pub use synth::{synth_generate, ArtifactKind, SynthConfig};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Uniform draw of `min(n, len)` ids without replacement, deterministic in `seed`.
pub fn sample_frames(frame_ids: &[String], n: usize, seed: u64) -> Vec<String> {
    let mut ids = frame_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids.truncate(n);
    ids
}
