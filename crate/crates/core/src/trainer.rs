//! Adam training loop with step-decayed learning rate, checkpoints and
//! bitwise-reproducible resume.
//!
//! Step `s` (0-based) draws its batch from a ChaCha8 stream keyed by
//! `(seed, s)`, so the run is a pure function of the seed and resuming only
//! needs parameters, moments and the step counter. Per-sample gradients are
//! computed in parallel and reduced in sample order, which keeps results
//! independent of the thread count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{draw_batch, Batch, BatchPolicy, Dataset};
use crate::error::{Error, Result};
use crate::masks::{RegionId, RegionMaskSet};
use crate::nn::checkpoint::{read_checkpoint, tensor_entries, write_checkpoint, CheckpointData, CheckpointHeader};
use crate::nn::{Network, NetworkParams, Real};
use crate::objectives::{
    class_loss_grad, classify, classify_backward, mask_loss_grad, total_loss, ClassifierParams, LossBreakdown,
    MaskReduction, Prediction,
};
use crate::rgb::RgbImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub lr_drop_every: u64,
    pub lr_drop_factor: f64,
    pub seed: u64,
    pub lambda: f64,
    pub desk_profile: bool,
    pub mask_reduction: MaskReduction,
    pub batch_policy: BatchPolicy,
    pub log_every: u64,
    pub strict_deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 40_000,
            batch_size: 128,
            lr0: 1e-4,
            beta1: 0.928,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 5e-5,
            lr_drop_every: 10_000,
            lr_drop_factor: 10.0,
            seed: 0,
            lambda: 10.0,
            desk_profile: false,
            mask_reduction: MaskReduction::Sum,
            batch_policy: BatchPolicy::Balanced,
            log_every: 100,
            strict_deterministic: false,
        }
    }
}

pub const DESK_STEPS: u64 = 2000;
pub const DESK_BATCH: usize = 16;
pub const DESK_LR0: f64 = 1e-3;
pub const DESK_LR_DROP_EVERY: u64 = 1500;
/// On the small desk maps a summed mask term at λ = 10 swamps the class
/// term, so the desk profile averages over cells instead.
pub const DESK_MASK_REDUCTION: MaskReduction = MaskReduction::Mean;

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

/// Parses flat `key = value` text; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
        }
    }
    Ok(out)
}

impl TrainConfig {
    /// Reduced schedule for desk-scale runs.
    pub fn desk() -> Self {
        Self {
            steps: DESK_STEPS,
            batch_size: DESK_BATCH,
            lr0: DESK_LR0,
            lr_drop_every: DESK_LR_DROP_EVERY,
            mask_reduction: DESK_MASK_REDUCTION,
            desk_profile: true,
            ..Self::default()
        }
    }

    pub const KEYS: [&'static str; 16] = [
        "steps",
        "batch_size",
        "lr0",
        "beta1",
        "beta2",
        "epsilon",
        "weight_decay",
        "lr_drop_every",
        "lr_drop_factor",
        "seed",
        "lambda",
        "desk_profile",
        "mask_reduction",
        "batch_policy",
        "log_every",
        "strict_deterministic",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "steps" => self.steps = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr0" => self.lr0 = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "epsilon" => self.epsilon = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "lr_drop_every" => self.lr_drop_every = parse_value(key, value)?,
            "lr_drop_factor" => self.lr_drop_factor = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "desk_profile" => self.desk_profile = parse_bool(key, value)?,
            "mask_reduction" => {
                self.mask_reduction = match value {
                    "sum" => MaskReduction::Sum,
                    "mean" => MaskReduction::Mean,
                    _ => return Err(Error::Config(format!("invalid mask_reduction `{value}`"))),
                }
            }
            "batch_policy" => self.batch_policy = value.parse()?,
            "log_every" => self.log_every = parse_value(key, value)?,
            "strict_deterministic" => self.strict_deterministic = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown train config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every known key of `kv`, removing it from the map.
    pub fn apply(&mut self, kv: &mut BTreeMap<String, String>) -> Result<()> {
        for key in Self::KEYS {
            if let Some(v) = kv.remove(key) {
                self.set(key, &v)?;
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let policy = match self.batch_policy {
            BatchPolicy::Balanced => "balanced",
            BatchPolicy::AsIs => "as-is",
        };
        let reduction = match self.mask_reduction {
            MaskReduction::Sum => "sum",
            MaskReduction::Mean => "mean",
        };
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr0 = {:e}", self.lr0);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "epsilon = {:e}", self.epsilon);
        let _ = writeln!(s, "weight_decay = {:e}", self.weight_decay);
        let _ = writeln!(s, "lr_drop_every = {}", self.lr_drop_every);
        let _ = writeln!(s, "lr_drop_factor = {}", self.lr_drop_factor);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "desk_profile = {}", self.desk_profile);
        let _ = writeln!(s, "mask_reduction = {reduction}");
        let _ = writeln!(s, "batch_policy = {policy}");
        let _ = writeln!(s, "log_every = {}", self.log_every);
        let _ = writeln!(s, "strict_deterministic = {}", self.strict_deterministic);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr0", self.lr0),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("epsilon", self.epsilon),
            ("lr_drop_factor", self.lr_drop_factor),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("beta1 and beta2 must be below 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::Config("weight_decay and lambda must be non-negative".into()));
        }
        if self.steps == 0 || self.batch_size == 0 || self.lr_drop_every == 0 || self.log_every == 0 {
            return Err(Error::Config("steps, batch_size, lr_drop_every and log_every must be positive".into()));
        }
        if self.lr_drop_every > self.steps {
            return Err(Error::Config(format!(
                "lr_drop_every {} exceeds steps {}",
                self.lr_drop_every, self.steps
            )));
        }
        Ok(())
    }
}

/// `lr0 · factor^(−⌊step / lr_drop_every⌋)`.
pub fn lr_schedule(step: u64, config: &TrainConfig) -> f64 {
    config.lr0 / config.lr_drop_factor.powi((step / config.lr_drop_every) as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One Adam update with bias correction. Weight decay enters the gradient as
/// `g + wd·θ`. Non-finite gradients abort before anything is modified.
pub fn adam_step(params: &mut NetworkParams<f32>, grads: &[f32], state: &mut AdamState, lr: f64, config: &TrainConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::InvalidInput("gradient and moment shapes must match the parameters".into()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Training {
            group: params.group_of(i).unwrap_or("?").to_string(),
            message: format!("non-finite gradient at parameter {i}"),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let wd = config.weight_decay;
    let eps = config.epsilon;
    params
        .as_mut_slice()
        .par_iter_mut()
        .zip(grads.par_iter())
        .zip(state.m.par_iter_mut().zip(state.v.par_iter_mut()))
        .for_each(|((p, &g), (m, v))| {
            let g = g as f64 + wd * *p as f64;
            let mn = b1 * *m as f64 + (1.0 - b1) * g;
            let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
            *p = (*p as f64 - update) as f32;
        });
    Ok(())
}

/// Loss, parameter gradient and prediction for one sample.
pub fn sample_gradient<T: Real>(
    net: &Network,
    params: &NetworkParams<T>,
    image: &RgbImage,
    label: u8,
    targets: &RegionMaskSet,
    lambda: f64,
    reduction: MaskReduction,
) -> Result<(LossBreakdown, Vec<T>, Prediction)> {
    let parts = net.parts();
    if targets.resolution() != net.config().map_resolution() {
        return Err(Error::InvalidInput(format!(
            "mask resolution {:?} differs from map resolution {:?}",
            targets.resolution(),
            net.config().map_resolution()
        )));
    }
    let input = net.prepare_input::<T>(image)?;
    let (maps_t, cache) = net.forward_sample(params, &input, true);
    let maps: Vec<Vec<f64>> = maps_t.iter().map(|m| m.iter().map(|v| v.as_f64()).collect()).collect();
    let refs: Vec<&[f64]> = maps.iter().map(|m| m.as_slice()).collect();
    let aggregation = net.config().aggregation;
    let classifier = ClassifierParams::from_network(net, params);
    let prediction = classify(&refs, aggregation, &classifier)?;
    let loss = total_loss(&refs, &parts, targets, prediction.logit, label, lambda, reduction)?;

    let dlogit = class_loss_grad(prediction.logit, label);
    let (dpooled, dlayers) = classify_backward(&prediction, dlogit, aggregation, &classifier);
    let mut grads = params.zeros_like();
    let dmaps = parts
        .iter()
        .zip(&maps)
        .zip(&dpooled)
        .map(|((&r, m), &dp)| {
            let g = mask_loss_grad(m, &targets.get(r).values, reduction)?;
            let pool = dp / m.len() as f64;
            Ok(g.into_iter().map(|v| T::from_f64(lambda * v + pool)).collect())
        })
        .collect::<Result<Vec<Vec<T>>>>()?;
    for ((w, b), (dw, db)) in net.classifier_slots().into_iter().zip(dlayers) {
        let ws = &params.slots()[w];
        for (g, d) in grads[ws.offset..ws.offset + ws.len].iter_mut().zip(dw) {
            *g += T::from_f64(d);
        }
        grads[params.slots()[b].offset] += T::from_f64(db);
    }
    net.backward_sample(params, cache.as_ref().expect("cache kept"), &dmaps, &mut grads, false, false);
    Ok((loss, grads, prediction))
}

/// Mean loss and mean gradient over a batch.
pub fn batch_gradient<T: Real>(
    net: &Network,
    params: &NetworkParams<T>,
    batch: &Batch,
    lambda: f64,
    reduction: MaskReduction,
) -> Result<(LossBreakdown, Vec<T>)> {
    if batch.is_empty() {
        return Err(Error::Batch("empty batch".into()));
    }
    let per_sample = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            sample_gradient(net, params, &batch.images[i], batch.labels[i], &batch.mask_sets[i], lambda, reduction)
                .map(|(l, g, _)| (l, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = params.zeros_like();
    let mut losses = Vec::with_capacity(per_sample.len());
    for (l, g) in per_sample {
        for (a, b) in grads.iter_mut().zip(g) {
            *a += b;
        }
        losses.push(l);
    }
    let inv = T::from_f64(1.0 / batch.len() as f64);
    grads.iter_mut().for_each(|g| *g *= inv);
    Ok((LossBreakdown::mean(&losses)?, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub fn log_header(parts: &[RegionId]) -> String {
    let mut h = String::from("step,lr,class_loss");
    for p in parts {
        let _ = write!(h, ",mask_loss_{}", p.as_str());
    }
    h.push_str(",total");
    h
}

fn log_line(row: &LogRow) -> String {
    let mut s = format!("{},{:e},{}", row.step, row.lr, row.loss.class_loss);
    for (_, v) in &row.loss.mask_loss {
        let _ = write!(s, ",{v}");
    }
    let _ = write!(s, ",{}", row.loss.total);
    s
}

pub fn render_log(parts: &[RegionId], rows: &[LogRow]) -> String {
    let mut s = log_header(parts);
    s.push('\n');
    for r in rows {
        s.push_str(&log_line(r));
        s.push('\n');
    }
    s
}

/// Parses a metric log written by [`render_log`].
pub fn parse_log(text: &str, lambda: f64) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    if header.len() < 4 || header[..3] != ["step", "lr", "class_loss"] || header.last() != Some(&"total") {
        return Err(Error::Data("metric log has an unexpected header".into()));
    }
    let parts = header[3..header.len() - 1]
        .iter()
        .map(|h| {
            h.strip_prefix("mask_loss_")
                .ok_or_else(|| Error::Data(format!("unexpected log column `{h}`")))?
                .parse::<RegionId>()
        })
        .collect::<Result<Vec<_>>>()?;
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != header.len() {
                return Err(Error::Data(format!("malformed log row `{l}`")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Data(format!("bad number `{s}` in log")));
            Ok(LogRow {
                step: f[0].parse().map_err(|_| Error::Data(format!("bad step `{}`", f[0])))?,
                lr: num(f[1])?,
                loss: LossBreakdown {
                    class_loss: num(f[2])?,
                    mask_loss: parts
                        .iter()
                        .zip(&f[3..f.len() - 1])
                        .map(|(&p, s)| Ok((p, num(s)?)))
                        .collect::<Result<Vec<_>>>()?,
                    total: num(f[f.len() - 1])?,
                    lambda,
                },
            })
        })
        .collect()
}

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint_{step:06}.ckpt")
}

/// Parameters plus optimizer moments at a step boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: NetworkParams<f32>,
    pub adam: AdamState,
    /// Steps completed.
    pub step: u64,
}

pub fn save_state(path: &Path, net: &Network, state: &TrainState, config: &TrainConfig) -> Result<()> {
    let header = CheckpointHeader {
        config: net.config().clone(),
        step: state.step,
        seed: config.seed,
        train_config: Some(serde_json::to_value(config)?),
        tensors: tensor_entries(net.slots()),
        buffers: vec!["params".into(), "adam_m".into(), "adam_v".into()],
    };
    write_checkpoint(
        path,
        &header,
        &[state.params.as_slice(), state.adam.m.as_slice(), state.adam.v.as_slice()],
    )
}

pub fn load_state(data: &CheckpointData, net: &Network) -> Result<TrainState> {
    if data.header.config != *net.config() {
        return Err(Error::Checkpoint("checkpoint model config differs from the requested model".into()));
    }
    let params = data.params(net.slots())?;
    let m = data.buffer("adam_m").map(<[f32]>::to_vec);
    let v = data.buffer("adam_v").map(<[f32]>::to_vec);
    let (m, v) = match (m, v) {
        (Some(m), Some(v)) => (m, v),
        _ => return Err(Error::Checkpoint("checkpoint has no optimizer moments".into())),
    };
    Ok(TrainState {
        params,
        adam: AdamState {
            m,
            v,
            t: data.header.step,
        },
        step: data.header.step,
    })
}

/// Stored train config of a checkpoint, when present.
pub fn checkpoint_train_config(data: &CheckpointData) -> Result<Option<TrainConfig>> {
    data.header
        .train_config
        .clone()
        .map(serde_json::from_value)
        .transpose()
        .map_err(Error::from)
}

pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs (or resumes) training, writing checkpoints and the metric log into `out_dir`.
pub fn train(
    net: &Network,
    dataset: &Dataset,
    config: &TrainConfig,
    out_dir: &Path,
    init: Option<NetworkParams<f32>>,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.count(0) == 0 || dataset.count(1) == 0 {
        return Err(Error::Data(format!(
            "training needs both classes ({} real, {} fake)",
            dataset.count(0),
            dataset.count(1)
        )));
    }
    if dataset.options().map_resolution != net.config().map_resolution()
        || dataset.options().input_size != net.config().input_size
    {
        return Err(Error::Config("dataset resolution does not match the model".into()));
    }
    crate::util::create_dir_all(out_dir)?;
    let parts = net.parts();
    let log_path = out_dir.join(LOG_FILE);
    let (mut state, mut log) = match resume {
        Some(path) => {
            let data = read_checkpoint(path)?;
            if data.header.seed != config.seed {
                return Err(Error::Checkpoint(format!(
                    "checkpoint seed {} differs from configured seed {}",
                    data.header.seed, config.seed
                )));
            }
            let state = load_state(&data, net)?;
            let log = match std::fs::read_to_string(&log_path) {
                Ok(text) => parse_log(&text, config.lambda)?
                    .into_iter()
                    .filter(|r| r.step < state.step)
                    .collect(),
                Err(_) => Vec::new(),
            };
            (state, log)
        }
        None => {
            let params = match init {
                Some(p) => {
                    net.check_params(&p)?;
                    p
                }
                None => net.init_params(config.seed),
            };
            let n = params.len();
            (
                TrainState {
                    params,
                    adam: AdamState::new(n),
                    step: 0,
                },
                Vec::new(),
            )
        }
    };
    let mut checkpoints = Vec::new();
    let mut last_good: Option<PathBuf> = resume.map(Path::to_path_buf);
    while state.step < config.steps {
        let s = state.step;
        let lr = lr_schedule(s, config);
        let batch = draw_batch(dataset, config.batch_size, config.batch_policy, &mut step_rng(config.seed, s))?;
        let (loss, grads) = batch_gradient(net, &state.params, &batch, config.lambda, config.mask_reduction)?;
        if !loss.total.is_finite() {
            std::fs::write(&log_path, render_log(&parts, &log)).map_err(|e| Error::io(&log_path, e))?;
            return Err(Error::Diverged { step: s, last_good });
        }
        if s % config.log_every == 0 || s + 1 == config.steps {
            log.push(LogRow { step: s, lr, loss });
        }
        adam_step(&mut state.params, &grads, &mut state.adam, lr, config)?;
        state.step += 1;
        if state.step % config.lr_drop_every == 0 || state.step == config.steps {
            let path = out_dir.join(checkpoint_name(state.step));
            save_state(&path, net, &state, config)?;
            crate::util::write_atomic(&log_path, render_log(&parts, &log).as_bytes())?;
            last_good = Some(path.clone());
            checkpoints.push(path);
        }
    }
    save_state(&out_dir.join(FINAL_CHECKPOINT), net, &state, config)?;
    crate::util::write_atomic(&log_path, render_log(&parts, &log).as_bytes())?;
    Ok(TrainOutcome { state, log, checkpoints })
}
