//! Command-line surface. `run` returns the process exit code: 0 on success,
//! 1 on validation errors (including bad usage), 2 on runtime failures.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::data::{
    ingest_manifest, synth_generate, ArtifactKind, Dataset, DatasetManifest, FrameRecord, LoadOptions, Method, Split,
    SynthConfig, CANVAS, DEFAULT_JPEG_QUALITY,
};
use crate::error::{Error, Result};
use crate::evaluator::{
    auc, balanced_accuracy, evaluate_frames, render_report, transfer_matrix, write_scores, EvalSplit, LoadedModel,
    ReportFormat, ScoreGrouping, ScoreSet, DEFAULT_THRESHOLD,
};
use crate::masks::{build_region_masks, parse_regions, MaskParams, RegionId, RegionMaskSet};
use crate::nn::checkpoint::{import_trunk, read_checkpoint};
use crate::nn::{Aggregation, ModelConfig, Network};
use crate::stats::{
    forensic_stats, histogram_csv, histogram_png, one_frame_per_video, resolve_pairs, summary_csv, summary_markdown,
    MaskWeighting, DEFAULT_BINS,
};
use crate::trainer::{parse_kv, train, TrainConfig, FINAL_CHECKPOINT};
use crate::util::{create_dir_all, write_atomic};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SCORES_FILE: &str = "scores.csv";

#[derive(Parser, Debug)]
#[command(name = "fpf", version, about = "Parts-based facial forgery detection toolkit")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write per-region target masks for every frame of a manifest as PNGs.
    MakeMasks(MakeMasksArgs),
    /// Generate a synthetic paired real/fake dataset.
    SynthGen(SynthGenArgs),
    /// Train a detector.
    Train(TrainArgs),
    /// Score a manifest with a checkpoint.
    Eval(EvalArgs),
    /// Evaluate every trained split on every eval split.
    TransferMatrix(TransferArgs),
    /// Per-region difference statistics of paired real/fake frames.
    Stats(StatsArgs),
}

#[derive(Args, Debug, Clone)]
pub struct MaskArgs {
    /// Dilation iterations.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Gaussian blur sigma in pixels.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Re-binarize downsampled targets at this threshold.
    #[arg(long)]
    pub binarize: Option<f64>,
}

impl MaskArgs {
    fn params(&self) -> MaskParams {
        let d = MaskParams::default();
        MaskParams {
            iterations: self.iterations.unwrap_or(d.iterations),
            sigma: self.sigma.unwrap_or(d.sigma),
            binarize_threshold: self.binarize.or(d.binarize_threshold),
        }
    }
}

#[derive(Args, Debug)]
pub struct MakeMasksArgs {
    /// Manifest file or a directory containing manifest.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Target resolution (square).
    #[arg(long, default_value_t = 36)]
    pub resolution: usize,
    #[command(flatten)]
    pub mask: MaskArgs,
}

#[derive(Args, Debug)]
pub struct SynthGenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated artifact regions.
    #[arg(long, default_value = "mouth")]
    pub regions: String,
    #[arg(long, default_value = "noise")]
    pub kind: String,
    #[arg(long, default_value_t = 0.2)]
    pub amplitude: f64,
    /// Number of identities; each yields one real and one fake video.
    #[arg(long, default_value_t = 200)]
    pub videos: usize,
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    /// Method label written for the fakes.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Manifest file or a directory containing manifest.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Flat key=value file with train and model keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra key=value overrides, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Reduced network (96 px, widths / 4) and schedule.
    #[arg(long)]
    pub desk_profile: bool,
    /// Comma-separated parts.
    #[arg(long)]
    pub parts: Option<String>,
    #[arg(long)]
    pub extra_blocks: Option<usize>,
    #[arg(long)]
    pub aggregation: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    /// Only train on fakes of these methods (comma-separated); reals are always kept.
    #[arg(long)]
    pub methods: Option<String>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Initialize the trunk from another checkpoint.
    #[arg(long)]
    pub init_trunk: Option<PathBuf>,
    /// Single-threaded math for bitwise reproducibility.
    #[arg(long)]
    pub strict_deterministic: bool,
    #[arg(long, default_value_t = DEFAULT_JPEG_QUALITY)]
    pub jpeg_quality: u8,
    /// Skip the JPEG round-trip at load time.
    #[arg(long)]
    pub no_jpeg: bool,
    #[command(flatten)]
    pub mask: MaskArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint file, or a training output directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Split to score; `all` scores every record.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub methods: Option<String>,
    #[arg(long, default_value_t = DEFAULT_JPEG_QUALITY)]
    pub jpeg_quality: u8,
    #[arg(long)]
    pub no_jpeg: bool,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    /// Directory with one sub-directory (or `<split>.ckpt` file) per train split.
    #[arg(long)]
    pub checkpoints: PathBuf,
    /// Directory with one sub-directory per eval split, or a single manifest split by method.
    #[arg(long)]
    pub manifests: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = DEFAULT_JPEG_QUALITY)]
    pub jpeg_quality: u8,
    #[arg(long)]
    pub no_jpeg: bool,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "all")]
    pub split: String,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, default_value = "soft")]
    pub weighting: String,
    /// Use every fake frame instead of one frame per video.
    #[arg(long)]
    pub all_frames: bool,
    #[command(flatten)]
    pub mask: MaskArgs,
}

/// Parses and runs a command line, returning the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    eprintln!("{e}");
                    1
                }
            };
        }
    };
    let words: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, &words) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn execute(cli: &Cli, argv: &[String]) -> Result<()> {
    let strict = matches!(&cli.command, Command::Train(t) if t.strict_deterministic);
    let threads = if strict { Some(1) } else { cli.jobs };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::MakeMasks(a) => make_masks(a, argv),
        Command::SynthGen(a) => synth_gen(a, argv),
        Command::Train(a) => train_cmd(a, argv),
        Command::Eval(a) => eval_cmd(a, argv),
        Command::TransferMatrix(a) => transfer_cmd(a, argv),
        Command::Stats(a) => stats_cmd(a, argv),
    })
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    argv: &'a [String],
    config: Value,
    seeds: Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    toolkit_version: &'static str,
    started_unix: u64,
    wall_clock_seconds: f64,
}

struct Run<'a> {
    command: &'a str,
    argv: &'a [String],
    started: Instant,
    started_unix: u64,
}

impl<'a> Run<'a> {
    fn start(command: &'a str, argv: &'a [String]) -> Self {
        Self {
            command,
            argv,
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        }
    }

    fn finish(self, out: &Path, config: Value, seeds: Value, inputs: &[&Path], outputs: &[&str]) -> Result<()> {
        let m = RunManifest {
            command: self.command,
            argv: self.argv,
            config,
            seeds,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: outputs.iter().map(|p| out.join(p).display().to_string()).collect(),
            toolkit_version: env!("CARGO_PKG_VERSION"),
            started_unix: self.started_unix,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        write_atomic(&out.join(RUN_MANIFEST), &serde_json::to_vec_pretty(&m)?)
    }
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_path_buf()
    }
}

fn load_manifest(data: &Path) -> Result<(PathBuf, DatasetManifest)> {
    let path = manifest_path(data);
    let m = ingest_manifest(&path)?;
    Ok((path, m))
}

fn parse_methods(s: &Option<String>) -> Option<Vec<Method>> {
    s.as_ref()
        .map(|s| s.split(',').map(|m| Method::from(m.trim().to_string())).collect())
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    if s.eq_ignore_ascii_case("all") {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

fn jpeg(quality: u8, disabled: bool) -> Option<u8> {
    (!disabled).then_some(quality)
}

fn make_masks(a: &MakeMasksArgs, argv: &[String]) -> Result<()> {
    let run = Run::start("make-masks", argv);
    let (path, manifest) = load_manifest(&a.data)?;
    let params = a.mask.params();
    if a.resolution == 0 {
        return Err(Error::InvalidParameter("resolution must be positive".into()));
    }
    create_dir_all(&a.out)?;
    let cache = std::env::var_os("FPF_CACHE_DIR").map(PathBuf::from);
    for record in &manifest.records {
        let masks = if record.label == 0 {
            RegionMaskSet::zeros((a.resolution, a.resolution))
        } else {
            cached_masks(&manifest, record, a.resolution, &params, cache.as_deref())?
        };
        for m in masks.iter() {
            m.save_png(&a.out.join(format!("{}_{}.png", record.frame_id, m.region.as_str())))?;
        }
    }
    run.finish(
        &a.out,
        json!({ "mask_params": params, "resolution": a.resolution }),
        json!({}),
        &[&path],
        &["<frame_id>_<region>.png"],
    )
}

/// Masks for a fake frame, memoized on disk under `cache` when given.
fn cached_masks(
    manifest: &DatasetManifest,
    record: &FrameRecord,
    resolution: usize,
    params: &MaskParams,
    cache: Option<&Path>,
) -> Result<RegionMaskSet> {
    use std::hash::{Hash, Hasher};
    let dims = image::image_dimensions(manifest.image_path(record)).map_err(|source| Error::Image {
        path: manifest.image_path(record),
        source,
    })?;
    let dims = (dims.0 as usize, dims.1 as usize);
    let compute = || -> Result<RegionMaskSet> {
        let lm = crate::data::imageops::crop_landmarks(&record.landmarks, record.face_box, dims, CANVAS)?;
        build_region_masks(&lm, (CANVAS, CANVAS), (resolution, resolution), params)
    };
    let Some(dir) = cache else { return compute() };
    let key = serde_json::to_string(&json!({
        "landmarks": record.landmarks, "box": record.face_box, "dims": dims, "resolution": resolution, "params": params,
    }))?;
    let mut h = std::collections::hash_map::DefaultHasher::new();
    key.hash(&mut h);
    let file = dir.join(format!("{:016x}.json", h.finish()));
    if let Ok(bytes) = std::fs::read(&file) {
        if let Ok(values) = serde_json::from_slice::<Vec<Vec<f64>>>(&bytes) {
            let masks = compute_from_values(values, resolution)?;
            return Ok(masks);
        }
    }
    let masks = compute()?;
    create_dir_all(dir)?;
    let values: Vec<Vec<f64>> = masks.iter().map(|m| m.values.as_slice().to_vec()).collect();
    write_atomic(&file, &serde_json::to_vec(&values)?)?;
    Ok(masks)
}

fn compute_from_values(values: Vec<Vec<f64>>, resolution: usize) -> Result<RegionMaskSet> {
    if values.len() != 4 || values.iter().any(|v| v.len() != resolution * resolution) {
        return Err(Error::Data("corrupt mask cache entry".into()));
    }
    let mut it = values.into_iter();
    let mk = |region: RegionId, v: Vec<f64>| crate::masks::RegionMask {
        region,
        values: crate::grid::Grid::from_vec(resolution, resolution, v),
    };
    RegionMaskSet::new(RegionId::ALL.map(|r| mk(r, it.next().unwrap())))
}

fn synth_gen(a: &SynthGenArgs, argv: &[String]) -> Result<()> {
    let run = Run::start("synth-gen", argv);
    let regions = parse_regions(&a.regions)?;
    let mut config = SynthConfig::new(a.videos, &regions, a.kind.parse::<ArtifactKind>()?, a.amplitude);
    config.frames_per_video = a.frames;
    if let Some(m) = &a.method {
        config.method = m.clone();
    }
    let manifest = synth_generate(&config, a.seed, &a.out)?;
    run.finish(
        &a.out,
        serde_json::to_value(&config)?,
        json!({ "seed": a.seed }),
        &[],
        &[MANIFEST_FILE, "images/"],
    )?;
    eprintln!("wrote {} frames to {}", manifest.len(), a.out.display());
    Ok(())
}

const MODEL_KEYS: [&str; 5] = ["parts", "extra_blocks", "aggregation", "input_size", "width_divisor"];

fn apply_model_keys(config: &mut ModelConfig, kv: &mut BTreeMap<String, String>) -> Result<()> {
    for key in MODEL_KEYS {
        let Some(v) = kv.remove(key) else { continue };
        let bad = || Error::Config(format!("invalid value `{v}` for `{key}`"));
        match key {
            "parts" => config.parts = parse_regions(&v)?,
            "extra_blocks" => config.extra_blocks_per_branch = v.parse().map_err(|_| bad())?,
            "aggregation" => config.aggregation = v.parse()?,
            "input_size" => config.input_size = v.parse().map_err(|_| bad())?,
            _ => config.width_divisor = v.parse().map_err(|_| bad())?,
        }
    }
    Ok(())
}

/// Resolves model and train configs: profile defaults, then the config file,
/// then `--set` pairs, then typed flags.
pub fn resolve_train_configs(a: &TrainArgs) -> Result<(ModelConfig, TrainConfig)> {
    let mut kv = match &a.config {
        Some(p) => parse_kv(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => BTreeMap::new(),
    };
    for pair in &a.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{pair}`")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let desk = a.desk_profile
        || kv
            .get("desk_profile")
            .map(|v| matches!(v.as_str(), "true" | "1" | "yes"))
            .unwrap_or(false);
    let (mut model, mut tc) = if desk {
        (ModelConfig::desk(&[RegionId::Mouth], 1, Aggregation::Mean), TrainConfig::desk())
    } else {
        (ModelConfig::full(&[RegionId::Mouth], 1, Aggregation::Mean), TrainConfig::default())
    };
    tc.apply(&mut kv)?;
    apply_model_keys(&mut model, &mut kv)?;
    if let Some(k) = kv.keys().next() {
        return Err(Error::Config(format!("unknown config key `{k}`")));
    }
    if let Some(p) = &a.parts {
        model.parts = parse_regions(p)?;
    }
    if let Some(e) = a.extra_blocks {
        model.extra_blocks_per_branch = e;
    }
    if let Some(g) = &a.aggregation {
        model.aggregation = g.parse()?;
    }
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    if let Some(s) = a.steps {
        tc.steps = s;
        if tc.lr_drop_every > s {
            tc.lr_drop_every = s;
        }
    }
    if let Some(b) = a.batch_size {
        tc.batch_size = b;
    }
    if let Some(l) = a.lr0 {
        tc.lr0 = l;
    }
    tc.desk_profile = desk;
    tc.strict_deterministic |= a.strict_deterministic;
    model.validate()?;
    tc.validate()?;
    Ok((model, tc))
}

/// Train records: fakes of the chosen methods plus every real frame.
fn train_records<'a>(manifest: &'a DatasetManifest, methods: &Option<Vec<Method>>) -> Vec<&'a FrameRecord> {
    manifest
        .records
        .iter()
        .filter(|r| r.split == Split::Train)
        .filter(|r| r.label == 0 || methods.as_ref().is_none_or(|ms| ms.contains(&r.method)))
        .collect()
}

fn train_cmd(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let run = Run::start("train", argv);
    let (model_config, tc) = resolve_train_configs(a)?;
    let (path, manifest) = load_manifest(&a.data)?;
    let methods = parse_methods(&a.methods);
    let records = train_records(&manifest, &methods);
    let net = Network::new(&model_config)?;
    let options = LoadOptions {
        jpeg_quality: jpeg(a.jpeg_quality, a.no_jpeg),
        mask_params: a.mask.params(),
        ..LoadOptions::new(model_config.input_size, model_config.map_resolution())
    };
    let dataset = Dataset::load(&manifest, &records, &options)?;
    let init = match &a.init_trunk {
        Some(p) => {
            let mut params = net.init_params::<f32>(tc.seed);
            let n = import_trunk(&mut params, &read_checkpoint(p)?)?;
            eprintln!("imported {n} trunk tensors from {}", p.display());
            Some(params)
        }
        None => None,
    };
    create_dir_all(&a.out)?;
    write_atomic(&a.out.join("train_config.kv"), tc.to_kv().as_bytes())?;
    let outcome = train(&net, &dataset, &tc, &a.out, init, a.resume.as_deref())?;
    let mut inputs: Vec<&Path> = vec![&path];
    inputs.extend(a.config.as_deref());
    inputs.extend(a.resume.as_deref());
    inputs.extend(a.init_trunk.as_deref());
    run.finish(
        &a.out,
        json!({
            "model": model_config,
            "train": tc,
            "load": options,
            "methods": a.methods,
            "n_frames": dataset.len(),
        }),
        json!({ "seed": tc.seed }),
        &inputs,
        &[FINAL_CHECKPOINT, crate::trainer::LOG_FILE, "train_config.kv"],
    )?;
    if let Some(last) = outcome.log.last() {
        eprintln!("step {}: total loss {:.4}", last.step, last.loss.total);
    }
    Ok(())
}

fn checkpoint_file(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(FINAL_CHECKPOINT)
    } else {
        p.to_path_buf()
    }
}

fn select<'a>(manifest: &'a DatasetManifest, split: Option<Split>, methods: &Option<Vec<Method>>) -> Vec<&'a FrameRecord> {
    manifest
        .records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .filter(|r| r.label == 0 || methods.as_ref().is_none_or(|ms| ms.contains(&r.method)))
        .collect()
}

fn eval_cmd(a: &EvalArgs, argv: &[String]) -> Result<()> {
    let run = Run::start("eval", argv);
    let ckpt = checkpoint_file(&a.checkpoint);
    let model = LoadedModel::load(&ckpt)?;
    let (path, manifest) = load_manifest(&a.data)?;
    let records = select(&manifest, parse_split(&a.split)?, &parse_methods(&a.methods));
    let q = jpeg(a.jpeg_quality, a.no_jpeg);
    let frames = evaluate_frames(&model, &manifest, &records, q)?;
    create_dir_all(&a.out)?;
    write_scores(&a.out.join(SCORES_FILE), &frames)?;
    let mut metrics = serde_json::Map::new();
    for g in [ScoreGrouping::Video, ScoreGrouping::Frame] {
        let set = ScoreSet::from_frames(&frames, g)?;
        let entry = if set.class_counts().0 > 0 && set.class_counts().1 > 0 {
            json!({ "auc": auc(&set)?, "balanced_accuracy": balanced_accuracy(&set, DEFAULT_THRESHOLD)?, "n": set.len() })
        } else {
            json!({ "n": set.len() })
        };
        metrics.insert(g.to_string(), entry);
    }
    write_atomic(&a.out.join("metrics.json"), &serde_json::to_vec_pretty(&metrics)?)?;
    run.finish(
        &a.out,
        json!({ "model": model.config(), "split": a.split, "methods": a.methods, "jpeg_quality": q, "threshold": DEFAULT_THRESHOLD }),
        json!({}),
        &[&ckpt, &path],
        &[SCORES_FILE, "metrics.json"],
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn transfer_cmd(a: &TransferArgs, argv: &[String]) -> Result<()> {
    let run = Run::start("transfer-matrix", argv);
    let mut models = Vec::new();
    for p in sorted_entries(&a.checkpoints)? {
        let ckpt = if p.is_dir() {
            p.join(FINAL_CHECKPOINT)
        } else if p.extension().is_some_and(|e| e == "ckpt") {
            p.clone()
        } else {
            continue;
        };
        if ckpt.exists() {
            models.push((stem(&p), LoadedModel::load(&ckpt)?));
        }
    }
    if models.is_empty() {
        return Err(Error::Config(format!("no checkpoints under {}", a.checkpoints.display())));
    }
    let split = parse_split(&a.split)?;
    let mut manifests: Vec<(String, DatasetManifest)> = Vec::new();
    let by_method = a.manifests.is_file();
    if by_method {
        manifests.push((String::new(), ingest_manifest(&a.manifests)?));
    } else {
        for p in sorted_entries(&a.manifests)? {
            if p.join(MANIFEST_FILE).exists() {
                manifests.push((stem(&p), ingest_manifest(&p.join(MANIFEST_FILE))?));
            }
        }
    }
    if manifests.is_empty() {
        return Err(Error::Config(format!("no manifests under {}", a.manifests.display())));
    }
    let mut evals = Vec::new();
    for (name, m) in &manifests {
        if by_method {
            let mut methods: Vec<Method> = m.records.iter().filter(|r| r.label == 1).map(|r| r.method.clone()).collect();
            methods.sort_by_key(|x| x.as_str().to_string());
            methods.dedup();
            for method in methods {
                evals.push(EvalSplit {
                    name: method.as_str().to_string(),
                    manifest: m,
                    records: select(m, split, &Some(vec![method])),
                });
            }
        } else {
            evals.push(EvalSplit {
                name: name.clone(),
                manifest: m,
                records: select(m, split, &None),
            });
        }
    }
    let refs: Vec<(String, &LoadedModel)> = models.iter().map(|(n, m)| (n.clone(), m)).collect();
    let q = jpeg(a.jpeg_quality, a.no_jpeg);
    let report = transfer_matrix(&refs, &evals, &[ScoreGrouping::Video, ScoreGrouping::Frame], q)?;
    create_dir_all(&a.out)?;
    write_atomic(&a.out.join("report.csv"), render_report(&report, ReportFormat::Csv).as_bytes())?;
    write_atomic(&a.out.join("report.md"), render_report(&report, ReportFormat::Markdown).as_bytes())?;
    run.finish(
        &a.out,
        json!({ "train_splits": refs.iter().map(|r| &r.0).collect::<Vec<_>>(), "eval_splits": evals.iter().map(|e| &e.name).collect::<Vec<_>>(), "split": a.split, "jpeg_quality": q }),
        json!({}),
        &[&a.checkpoints, &a.manifests],
        &["report.csv", "report.md"],
    )
}

fn stats_cmd(a: &StatsArgs, argv: &[String]) -> Result<()> {
    let run = Run::start("stats", argv);
    let (path, manifest) = load_manifest(&a.data)?;
    let weighting: MaskWeighting = a.weighting.parse()?;
    let params = a.mask.params();
    let records = select(&manifest, parse_split(&a.split)?, &None);
    let fakes = if a.all_frames {
        records.iter().copied().filter(|r| r.label == 1).collect()
    } else {
        one_frame_per_video(&records)
    };
    let pairs = resolve_pairs(&manifest, &fakes)?;
    if pairs.is_empty() {
        return Err(Error::Data("no fake frames with paired reals".into()));
    }
    let stats = forensic_stats(&manifest, &pairs, &params, a.bins, weighting)?;
    create_dir_all(&a.out)?;
    write_atomic(&a.out.join("summary.csv"), summary_csv(&stats.summary).as_bytes())?;
    write_atomic(&a.out.join("summary.md"), summary_markdown(&stats.summary).as_bytes())?;
    write_atomic(&a.out.join("histograms.csv"), histogram_csv(&stats.histograms).as_bytes())?;
    histogram_png(&stats.histograms, &a.out.join("histograms.png"))?;
    run.finish(
        &a.out,
        json!({ "mask_params": params, "bins": a.bins, "weighting": weighting, "split": a.split, "all_frames": a.all_frames, "pairs": pairs.len() }),
        json!({}),
        &[&path],
        &["summary.csv", "summary.md", "histograms.csv", "histograms.png"],
    )
}
