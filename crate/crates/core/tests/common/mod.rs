//! Independent nested-loop reference implementation of the detector forward
//! pass, reading tensors by name. Gating decisions (ReLU signs and max-pool
//! winners) can be recorded at one parameter point and replayed at another,
//! which evaluates the network restricted to the linear region of the first.

#![allow(dead_code)]

use fpf::masks::{RegionId, RegionMaskSet};
use fpf::nn::{ModelConfig, NetworkParams};
use fpf::objectives::{classify, total_loss, ClassifierParams, MaskReduction};
use fpf::rgb::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Tensor = Vec<Vec<Vec<f64>>>;

#[derive(Clone, Debug, Default)]
pub struct Gates {
    pub relu: Vec<bool>,
    pub pool: Vec<(usize, usize)>,
    replay: bool,
    relu_pos: usize,
    pool_pos: usize,
}

impl Gates {
    pub fn replaying(&self) -> Gates {
        Gates {
            relu: self.relu.clone(),
            pool: self.pool.clone(),
            replay: true,
            relu_pos: 0,
            pool_pos: 0,
        }
    }
}

pub fn random_image(n: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_vec(n, n, (0..n * n * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

pub fn get<'a>(p: &'a NetworkParams<f64>, name: &str) -> &'a [f64] {
    p.tensor(p.find(name).unwrap_or_else(|| panic!("missing tensor {name}")))
}

fn out_len(n: usize, k: usize, stride: usize) -> usize {
    let pad = (k - 1) / 2;
    (n + 2 * pad - k) / stride + 1
}

pub fn conv(x: &Tensor, w: &[f64], b: Option<&[f64]>, cout: usize, k: usize, stride: usize, depthwise: bool) -> Tensor {
    let cin = x.len();
    let (h, wd) = (x[0].len(), x[0][0].len());
    let pad = (k - 1) as isize / 2;
    let (oh, ow) = (out_len(h, k, stride), out_len(wd, k, stride));
    let mut y = vec![vec![vec![0.0; ow]; oh]; cout];
    for o in 0..cout {
        let inputs: Vec<usize> = if depthwise { vec![o] } else { (0..cin).collect() };
        for r in 0..oh {
            for c in 0..ow {
                let mut acc = b.map_or(0.0, |b| b[o]);
                for &i in &inputs {
                    for kr in 0..k {
                        for kc in 0..k {
                            let sr = (r * stride) as isize + kr as isize - pad;
                            let sc = (c * stride) as isize + kc as isize - pad;
                            if sr < 0 || sc < 0 || sr >= h as isize || sc >= wd as isize {
                                continue;
                            }
                            let widx = if depthwise {
                                (o * k + kr) * k + kc
                            } else {
                                ((o * cin + i) * k + kr) * k + kc
                            };
                            acc += w[widx] * x[i][sr as usize][sc as usize];
                        }
                    }
                }
                y[o][r][c] = acc;
            }
        }
    }
    y
}

pub fn relu(x: &Tensor, g: &mut Option<&mut Gates>) -> Tensor {
    x.iter()
        .map(|p| {
            p.iter()
                .map(|row| {
                    row.iter()
                        .map(|&v| {
                            let open = match g {
                                Some(g) if g.replay => {
                                    g.relu_pos += 1;
                                    g.relu[g.relu_pos - 1]
                                }
                                Some(g) => {
                                    g.relu.push(v > 0.0);
                                    v > 0.0
                                }
                                None => v > 0.0,
                            };
                            if open {
                                v
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn maxpool(x: &Tensor, g: &mut Option<&mut Gates>) -> Tensor {
    let (h, w) = (x[0].len(), x[0][0].len());
    let (oh, ow) = (out_len(h, 3, 2), out_len(w, 3, 2));
    let mut out = vec![vec![vec![0.0; ow]; oh]; x.len()];
    for (ch, p) in x.iter().enumerate() {
        for r in 0..oh {
            for c in 0..ow {
                let mut best = (f64::NEG_INFINITY, (0, 0));
                for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        let sr = (2 * r) as isize + dr;
                        let sc = (2 * c) as isize + dc;
                        if sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < w && p[sr as usize][sc as usize] > best.0 {
                            best = (p[sr as usize][sc as usize], (sr as usize, sc as usize));
                        }
                    }
                }
                let at = match g {
                    Some(g) if g.replay => {
                        g.pool_pos += 1;
                        g.pool[g.pool_pos - 1]
                    }
                    Some(g) => {
                        g.pool.push(best.1);
                        best.1
                    }
                    None => best.1,
                };
                out[ch][r][c] = p[at.0][at.1];
            }
        }
    }
    out
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    a.iter()
        .zip(b)
        .map(|(pa, pb)| pa.iter().zip(pb).map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect()).collect())
        .collect()
}

fn block(p: &NetworkParams<f64>, prefix: &str, x: &Tensor, pre_relu: bool, g: &mut Option<&mut Gates>) -> Tensor {
    let t = |s: &str| get(p, &format!("{prefix}.{s}"));
    let cout = t("skip.bias").len();
    let skip = conv(x, t("skip.weight"), Some(t("skip.bias")), cout, 1, 2, false);
    let xin = if pre_relu { relu(x, g) } else { x.clone() };
    let a = conv(&xin, t("sep1.depthwise.weight"), None, xin.len(), 3, 1, true);
    let a = relu(&conv(&a, t("sep1.pointwise.weight"), Some(t("sep1.pointwise.bias")), cout, 1, 1, false), g);
    let a = conv(&a, t("sep2.depthwise.weight"), None, cout, 3, 1, true);
    let a = conv(&a, t("sep2.pointwise.weight"), Some(t("sep2.pointwise.bias")), cout, 1, 1, false);
    add(&maxpool(&a, g), &skip)
}

/// Part maps of one image, flattened row-major, in `config.parts` order.
pub fn forward(p: &NetworkParams<f64>, config: &ModelConfig, image: &RgbImage, mut gates: Option<&mut Gates>) -> Vec<Vec<f64>> {
    if config.is_ensemble() {
        return config
            .parts
            .iter()
            .flat_map(|r| {
                let prefix = format!("net[{}]/", r.as_str());
                subnet(p, &prefix, &[*r], config.extra_blocks_per_branch, image, &mut gates)
            })
            .collect();
    }
    subnet(p, "", &config.parts, config.extra_blocks_per_branch, image, &mut gates)
}

fn subnet(
    p: &NetworkParams<f64>,
    prefix: &str,
    parts: &[RegionId],
    extra: usize,
    image: &RgbImage,
    g: &mut Option<&mut Gates>,
) -> Vec<Vec<f64>> {
    let n = image.width();
    let x: Tensor = (0..3)
        .map(|c| {
            (0..n)
                .map(|r| (0..n).map(|col| 2.0 * image.pixel(col, r)[c] as f64 - 1.0).collect())
                .collect()
        })
        .collect();
    let t = |s: &str| get(p, &format!("{prefix}{s}"));
    let s1 = t("trunk/stem1.bias").len();
    let s2 = t("trunk/stem2.bias").len();
    let x = relu(&conv(&x, t("trunk/stem1.weight"), Some(t("trunk/stem1.bias")), s1, 3, 2, false), g);
    let x = relu(&conv(&x, t("trunk/stem2.weight"), Some(t("trunk/stem2.bias")), s2, 3, 1, false), g);
    let x = block(p, &format!("{prefix}trunk/block1"), &x, false, g);
    let x = block(p, &format!("{prefix}trunk/block2"), &x, true, g);
    parts
        .iter()
        .map(|r| {
            let mut f = x.clone();
            for i in 0..extra {
                f = block(p, &format!("{prefix}branch[{}]/block{}", r.as_str(), i + 3), &f, true, g);
            }
            let hg = format!("{prefix}map_head[{}]/conv1x1", r.as_str());
            let m = conv(&f, get(p, &format!("{hg}.weight")), Some(get(p, &format!("{hg}.bias"))), 1, 1, 1, false);
            m[0].iter().flatten().copied().collect()
        })
        .collect()
}

/// Batch-mean total loss from the reference forward pass.
pub fn reference_loss(
    p: &NetworkParams<f64>,
    net: &fpf::nn::Network,
    images: &[RgbImage],
    labels: &[u8],
    targets: &[RegionMaskSet],
    lambda: f64,
    gates: &mut [Gates],
    mode: GateMode,
) -> f64 {
    let config = net.config();
    let classifier = ClassifierParams::from_network(net, p);
    let parts: Vec<RegionId> = config.parts.clone();
    let mut total = 0.0;
    for i in 0..images.len() {
        let maps = match mode {
            GateMode::Free => forward(p, config, &images[i], None),
            GateMode::Record => {
                gates[i] = Gates::default();
                forward(p, config, &images[i], Some(&mut gates[i]))
            }
            GateMode::Replay => {
                let mut g = gates[i].replaying();
                forward(p, config, &images[i], Some(&mut g))
            }
        };
        let refs: Vec<&[f64]> = maps.iter().map(|m| m.as_slice()).collect();
        let pred = classify(&refs, config.aggregation, &classifier).unwrap();
        total += total_loss(&refs, &parts, &targets[i], pred.logit, labels[i], lambda, MaskReduction::Sum)
            .unwrap()
            .total;
    }
    total / images.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Free,
    Record,
    Replay,
}

fn template_masks(resolution: (usize, usize)) -> RegionMaskSet {
    let lm = fpf::masks::LandmarkSet::new(fpf::data::synth::template_landmarks(0.6)).unwrap();
    fpf::masks::build_region_masks(&lm, (288, 288), resolution, &fpf::masks::MaskParams::default()).unwrap()
}

/// One fake (template masks) and one real (zero masks) random-pixel sample.
pub fn probe_batch(config: &ModelConfig, seed: u64) -> fpf::data::Batch {
    let n = config.input_size;
    let res = config.map_resolution();
    fpf::data::Batch {
        frame_ids: vec!["fake".into(), "real".into()],
        images: vec![random_image(n, seed), random_image(n, seed + 1000)],
        labels: vec![1, 0],
        mask_sets: vec![template_masks(res), RegionMaskSet::zeros(res)],
    }
}

pub const FD_STEP: f64 = 1e-3;
pub const FD_FINE_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const FD_LAMBDA: f64 = 10.0;

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub probes: usize,
    /// Step `FD_STEP`, gating frozen at the base point.
    pub frozen: f64,
    /// Step `FD_FINE_STEP` on the unmodified loss, relative with a roundoff floor.
    pub fine: f64,
    /// Step `FD_STEP` on the unmodified loss. Crosses ReLU and max-pool
    /// switching surfaces, so it only bounds how non-smooth the loss is.
    pub free: f64,
    /// Relative disagreement between the reference and library loss at the base point.
    pub loss_agreement: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.frozen < FD_TOLERANCE && self.fine < FD_TOLERANCE && self.loss_agreement < 1e-10
    }
}

fn rel(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8)
}

/// Compares analytic gradients from the trainer against central
/// differences on `probes` random coordinates spread over every tensor.
pub fn fd_check(config: &ModelConfig, seed: u64, probes: usize, verbose: bool) -> FdReport {
    use fpf::trainer::batch_gradient;
    let (net, params) = fpf::nn::build_model::<f64>(config, seed).unwrap();
    let b = probe_batch(config, seed + 1);
    let library = |p: &NetworkParams<f64>| batch_gradient(&net, p, &b, FD_LAMBDA, MaskReduction::Sum).unwrap().0.total;
    let (base, grads) = batch_gradient(&net, &params, &b, FD_LAMBDA, MaskReduction::Sum).unwrap();

    let mut gates = vec![Gates::default(); b.images.len()];
    let reference =
        |p: &NetworkParams<f64>, gates: &mut [Gates], mode| reference_loss(p, &net, &b.images, &b.labels, &b.mask_sets, FD_LAMBDA, gates, mode);
    let at_base = reference(&params, &mut gates, GateMode::Record);
    let mut report = FdReport {
        probes,
        loss_agreement: rel(at_base, base.total),
        ..FdReport::default()
    };

    // Cancellation in the fine difference is about |loss| * eps / h in absolute
    // terms, so gradients much smaller than that are compared absolutely.
    let fine_floor = 10.0 * base.total.abs() * f64::EPSILON / FD_FINE_STEP / FD_TOLERANCE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let slots = params.slots().to_vec();
    for k in 0..probes {
        let slot = &slots[(k * 7919 + rng.random_range(0..slots.len())) % slots.len()];
        let i = slot.offset + rng.random_range(0..slot.len);
        let shifted = |h: f64| {
            let mut q = params.clone();
            q.as_mut_slice()[i] += h;
            q
        };
        let an = grads[i];
        let frozen = (reference(&shifted(FD_STEP), &mut gates, GateMode::Replay)
            - reference(&shifted(-FD_STEP), &mut gates, GateMode::Replay))
            / (2.0 * FD_STEP);
        let fine = (library(&shifted(FD_FINE_STEP)) - library(&shifted(-FD_FINE_STEP))) / (2.0 * FD_FINE_STEP);
        let free = (library(&shifted(FD_STEP)) - library(&shifted(-FD_STEP))) / (2.0 * FD_STEP);
        let rn = (fine - an).abs() / fine.abs().max(an.abs()).max(fine_floor);
        let (rf, rr) = (rel(frozen, an), rel(free, an));
        if verbose {
            println!("  probe {k:2} {:<44} analytic={an:+.6e} frozen={rf:.1e} fine={rn:.1e} free={rr:.1e}", slot.name);
        }
        report.frozen = report.frozen.max(rf);
        report.fine = report.fine.max(rn);
        report.free = report.free.max(rr);
    }
    report
}
