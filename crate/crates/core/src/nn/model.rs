//! Truncated separable-convolution backbone with per-part branches.
//!
//! Layout of one subnet:
//!
//! ```text
//! stem: conv3x3/2 -> relu -> conv3x3 -> relu
//! trunk: block(no pre-relu) -> block
//! branch[part]: extra blocks -> conv1x1 -> 1-channel logit map
//! ```
//!
//! A block is `[relu] -> sep3x3 -> relu -> sep3x3 -> maxpool3/2` plus a
//! strided 1×1 residual projection. Ensemble configs hold one independent
//! single-part subnet per region.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::config::{Aggregation, ModelConfig};
use super::kernels::*;
use super::params::{NetworkParams, Slot};
use super::scalar::Real;
use crate::error::{Error, Result};
use crate::masks::RegionId;
use crate::rgb::RgbImage;

#[derive(Clone, Copy, Debug)]
enum Init {
    He { fan_in: usize },
    Scaled { fan_in: usize, gain: f64 },
    Const(f64),
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    cin: usize,
    cout: usize,
    stride: usize,
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct Depthwise {
    weight: usize,
}

#[derive(Clone, Debug)]
struct Block {
    pre_relu: bool,
    skip: Conv,
    dw1: Depthwise,
    pw1: Conv,
    dw2: Depthwise,
    pw2: Conv,
}

#[derive(Clone, Debug)]
struct Trunk {
    stem1: Conv,
    stem2: Conv,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
struct Branch {
    region: RegionId,
    blocks: Vec<Block>,
    head: Conv,
}

#[derive(Clone, Debug)]
struct Subnet {
    trunk: Trunk,
    branches: Vec<Branch>,
    classifier_weight: usize,
    classifier_bias: usize,
}

/// Model architecture: layer graph plus the parameter layout it indexes.
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    subnets: Vec<Subnet>,
    slots: Vec<Slot>,
    inits: Vec<Init>,
}

struct LayoutBuilder {
    slots: Vec<Slot>,
    inits: Vec<Init>,
    offset: usize,
}

impl LayoutBuilder {
    fn tensor(&mut self, group: &str, name: &str, shape: Vec<usize>, init: Init) -> usize {
        let len = shape.iter().product();
        self.slots.push(Slot {
            name: format!("{group}/{name}"),
            group: group.to_string(),
            shape,
            offset: self.offset,
            len,
        });
        self.inits.push(init);
        self.offset += len;
        self.slots.len() - 1
    }

    /// Weight and bias are allocated back to back so their gradients can be split.
    fn conv(&mut self, group: &str, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, init: Init) -> Conv {
        let weight = self.tensor(group, &format!("{name}.weight"), vec![cout, cin, kernel, kernel], init);
        let bias = self.tensor(group, &format!("{name}.bias"), vec![cout], Init::Const(0.0));
        Conv {
            cin,
            cout,
            stride,
            weight,
            bias,
        }
    }

    fn depthwise(&mut self, group: &str, name: &str, channels: usize) -> Depthwise {
        Depthwise {
            weight: self.tensor(group, &format!("{name}.weight"), vec![channels, 1, 3, 3], Init::He { fan_in: 9 }),
        }
    }

    fn block(&mut self, group: &str, name: &str, cin: usize, cout: usize, pre_relu: bool) -> Block {
        Block {
            pre_relu,
            skip: self.conv(group, &format!("{name}.skip"), cin, cout, 1, 2, Init::Scaled { fan_in: cin, gain: 1.0 }),
            dw1: self.depthwise(group, &format!("{name}.sep1.depthwise"), cin),
            pw1: self.conv(group, &format!("{name}.sep1.pointwise"), cin, cout, 1, 1, Init::He { fan_in: cin }),
            dw2: self.depthwise(group, &format!("{name}.sep2.depthwise"), cout),
            pw2: self.conv(group, &format!("{name}.sep2.pointwise"), cout, cout, 1, 1, Init::He { fan_in: cout }),
        }
    }
}

impl Network {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = LayoutBuilder {
            slots: Vec::new(),
            inits: Vec::new(),
            offset: 0,
        };
        let part_groups: Vec<Vec<RegionId>> = if config.is_ensemble() {
            config.parts.iter().map(|&r| vec![r]).collect()
        } else {
            vec![config.parts.clone()]
        };
        let (s1, s2) = config.stem_widths();
        let [w1, w2] = config.block_widths();
        let wb = config.branch_width();
        let subnets = part_groups
            .iter()
            .map(|regions| {
                let prefix = if config.is_ensemble() {
                    format!("net[{}]/", regions[0].as_str())
                } else {
                    String::new()
                };
                let tg = format!("{prefix}trunk");
                let trunk = Trunk {
                    stem1: b.conv(&tg, "stem1", 3, s1, 3, 2, Init::He { fan_in: 27 }),
                    stem2: b.conv(&tg, "stem2", s1, s2, 3, 1, Init::He { fan_in: s1 * 9 }),
                    blocks: vec![b.block(&tg, "block1", s2, w1, false), b.block(&tg, "block2", w1, w2, true)],
                };
                let branches = regions
                    .iter()
                    .map(|&region| {
                        let bg = format!("{prefix}branch[{}]", region.as_str());
                        let blocks = (0..config.extra_blocks_per_branch)
                            .map(|i| b.block(&bg, &format!("block{}", i + 3), if i == 0 { w2 } else { wb }, wb, true))
                            .collect();
                        let hg = format!("{prefix}map_head[{}]", region.as_str());
                        let cin = if config.extra_blocks_per_branch == 0 { w2 } else { wb };
                        let head = b.conv(&hg, "conv1x1", cin, 1, 1, 1, Init::Scaled { fan_in: cin, gain: 0.1 });
                        Branch { region, blocks, head }
                    })
                    .collect();
                let cg = format!("{prefix}classifier");
                let n_in = if config.aggregation == Aggregation::Fc { regions.len() } else { 1 };
                let classifier_weight = b.tensor(&cg, "weight", vec![n_in], Init::Const(1.0 / n_in as f64));
                let classifier_bias = b.tensor(&cg, "bias", vec![1], Init::Const(0.0));
                Subnet {
                    trunk,
                    branches,
                    classifier_weight,
                    classifier_bias,
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            subnets,
            slots: b.slots,
            inits: b.inits,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn param_len(&self) -> usize {
        self.slots.iter().map(|s| s.len).sum()
    }

    /// Deterministic initialization: draws happen in slot order from one seeded stream.
    pub fn init_params<T: Real>(&self, seed: u64) -> NetworkParams<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(self.param_len());
        for (slot, init) in self.slots.iter().zip(&self.inits) {
            match *init {
                Init::Const(v) => data.extend(std::iter::repeat_n(T::from_f64(v), slot.len)),
                Init::He { fan_in } | Init::Scaled { fan_in, .. } => {
                    let gain = match *init {
                        Init::He { .. } => 2.0,
                        Init::Scaled { gain, .. } => gain,
                        Init::Const(_) => unreachable!(),
                    };
                    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
                    data.extend((0..slot.len).map(|_| T::from_f64(normal.sample(&mut rng))));
                }
            }
        }
        NetworkParams::from_parts(self.slots.clone(), data)
    }

    /// Empty-valued parameters with this network's layout.
    pub fn zero_params<T: Real>(&self) -> NetworkParams<T> {
        NetworkParams::from_parts(self.slots.clone(), vec![T::zero(); self.param_len()])
    }

    pub fn check_params<T: Real>(&self, params: &NetworkParams<T>) -> Result<()> {
        if params.slots() != self.slots.as_slice() {
            return Err(Error::InvalidInput("parameters do not match the network layout".into()));
        }
        Ok(())
    }

    /// Parts in map order.
    pub fn parts(&self) -> Vec<RegionId> {
        self.subnets
            .iter()
            .flat_map(|s| s.branches.iter().map(|b| b.region))
            .collect()
    }

    /// `(weight slot, bias slot)` of each subnet's classifier.
    pub fn classifier_slots(&self) -> Vec<(usize, usize)> {
        self.subnets
            .iter()
            .map(|s| (s.classifier_weight, s.classifier_bias))
            .collect()
    }

    /// Number of part maps emitted by each subnet, in order.
    pub fn parts_per_subnet(&self) -> Vec<usize> {
        self.subnets.iter().map(|s| s.branches.len()).collect()
    }

    /// Standardizes an image to `2x - 1` in CHW layout.
    pub fn prepare_input<T: Real>(&self, image: &RgbImage) -> Result<Feature<T>> {
        let n = self.config.input_size;
        if image.width() != n || image.height() != n {
            return Err(Error::InvalidInput(format!(
                "expected {n}x{n} image, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        let mut f = Feature::zeros(3, n, n);
        for (i, px) in image.as_slice().chunks_exact(3).enumerate() {
            for c in 0..3 {
                f.data[c * n * n + i] = T::from_f64(2.0 * px[c] as f64 - 1.0);
            }
        }
        Ok(f)
    }

    /// Forward pass of one prepared sample; returns one flattened map per part.
    pub fn forward_sample<T: Real>(
        &self,
        params: &NetworkParams<T>,
        input: &Feature<T>,
        keep_cache: bool,
    ) -> (Vec<Vec<T>>, Option<SampleCache<T>>) {
        let mut maps = Vec::new();
        let mut caches = Vec::new();
        for subnet in &self.subnets {
            let (m, c) = subnet.forward(params, input, keep_cache);
            maps.extend(m);
            caches.push(c);
        }
        let cache = keep_cache.then(|| SampleCache {
            subnets: caches.into_iter().map(Option::unwrap).collect(),
        });
        (maps, cache)
    }

    /// Accumulates parameter gradients of `sum(dmaps · maps)` into `grads`.
    /// Returns the gradient with respect to the standardized input when asked.
    pub fn backward_sample<T: Real>(
        &self,
        params: &NetworkParams<T>,
        cache: &SampleCache<T>,
        dmaps: &[Vec<T>],
        grads: &mut [T],
        need_input: bool,
        dependency: bool,
    ) -> Option<Feature<T>> {
        let mut dinput: Option<Feature<T>> = None;
        let mut offset = 0;
        for (subnet, sc) in self.subnets.iter().zip(&cache.subnets) {
            let n = subnet.branches.len();
            let d = subnet.backward(params, sc, &dmaps[offset..offset + n], grads, need_input, dependency);
            offset += n;
            if let Some(d) = d {
                match dinput.as_mut() {
                    Some(acc) => add_inplace(acc, &d),
                    None => dinput = Some(d),
                }
            }
        }
        dinput
    }

    /// Batch forward producing the per-part logit maps.
    pub fn forward<T: Real>(&self, params: &NetworkParams<T>, images: &[RgbImage]) -> Result<PartMapStack> {
        self.check_params(params)?;
        let inputs = images
            .iter()
            .map(|img| self.prepare_input::<T>(img))
            .collect::<Result<Vec<_>>>()?;
        let per_sample: Vec<Vec<Vec<T>>> = inputs
            .par_iter()
            .map(|x| self.forward_sample(params, x, false).0)
            .collect();
        let parts = self.parts();
        let (h, w) = self.config.map_resolution();
        let mut maps = vec![Vec::with_capacity(images.len() * h * w); parts.len()];
        for sample in per_sample {
            for (dst, m) in maps.iter_mut().zip(sample) {
                dst.extend(m.into_iter().map(|v| v.as_f64()));
            }
        }
        Ok(PartMapStack {
            parts,
            batch: images.len(),
            resolution: (h, w),
            maps,
        })
    }

    /// Kernel/stride chain along the main path from input to a map cell.
    pub fn path_geometry(&self) -> Vec<(usize, usize)> {
        let block = [(3, 1), (1, 1), (3, 1), (1, 1), (3, 2)];
        let mut g = vec![(3, 2), (3, 1)];
        for _ in 0..(2 + self.config.extra_blocks_per_branch) {
            g.extend_from_slice(&block);
        }
        g.push((1, 1));
        g
    }
}

/// Per-part logit maps for a batch. `maps[p]` is `batch × h × w`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PartMapStack {
    pub parts: Vec<RegionId>,
    pub batch: usize,
    pub resolution: (usize, usize),
    pub maps: Vec<Vec<f64>>,
}

impl PartMapStack {
    pub fn map(&self, part: usize, sample: usize) -> &[f64] {
        let n = self.resolution.0 * self.resolution.1;
        &self.maps[part][sample * n..(sample + 1) * n]
    }

    /// All part maps of one sample, in part order.
    pub fn sample_maps(&self, sample: usize) -> Vec<&[f64]> {
        (0..self.parts.len()).map(|p| self.map(p, sample)).collect()
    }
}

pub struct SampleCache<T> {
    subnets: Vec<SubnetCache<T>>,
}

struct SubnetCache<T> {
    input_hw: (usize, usize),
    stem_cols1: Vec<T>,
    stem_out1: Feature<T>,
    stem_cols2: Vec<T>,
    stem_out2: Feature<T>,
    blocks: Vec<BlockCache<T>>,
    branches: Vec<BranchCache<T>>,
}

struct BranchCache<T> {
    blocks: Vec<BlockCache<T>>,
    features: Feature<T>,
}

struct BlockCache<T> {
    x: Feature<T>,
    relu_x: Option<Feature<T>>,
    a1: Feature<T>,
    a3: Feature<T>,
    a4: Feature<T>,
    pool_arg: Vec<u32>,
    pool_in_hw: (usize, usize),
}

fn split_conv_grads<'a, T>(grads: &'a mut [T], params: &NetworkParams<T>, conv: &Conv) -> (&'a mut [T], &'a mut [T])
where
    T: Real,
{
    let ws = &params.slots()[conv.weight];
    let bs = &params.slots()[conv.bias];
    debug_assert_eq!(ws.offset + ws.len, bs.offset);
    grads[ws.offset..bs.offset + bs.len].split_at_mut(ws.len)
}

fn slot_grads<'a, T: Real>(grads: &'a mut [T], params: &NetworkParams<T>, slot: usize) -> &'a mut [T] {
    let s = &params.slots()[slot];
    &mut grads[s.offset..s.offset + s.len]
}

impl Block {
    fn forward<T: Real>(&self, p: &NetworkParams<T>, x: Feature<T>, keep: bool) -> (Feature<T>, Option<BlockCache<T>>) {
        let skip = pointwise_forward(&x, p.tensor(self.skip.weight), p.tensor(self.skip.bias), self.skip.cout, 2);
        let relu_x = self.pre_relu.then(|| {
            let mut t = x.clone();
            relu_inplace(&mut t);
            t
        });
        let a1 = depthwise_forward(relu_x.as_ref().unwrap_or(&x), p.tensor(self.dw1.weight));
        let mut a3 = pointwise_forward(&a1, p.tensor(self.pw1.weight), p.tensor(self.pw1.bias), self.pw1.cout, 1);
        relu_inplace(&mut a3);
        let a4 = depthwise_forward(&a3, p.tensor(self.dw2.weight));
        let a5 = pointwise_forward(&a4, p.tensor(self.pw2.weight), p.tensor(self.pw2.bias), self.pw2.cout, 1);
        let (mut out, pool_arg) = maxpool_forward(&a5);
        add_inplace(&mut out, &skip);
        let cache = keep.then(|| BlockCache {
            x,
            relu_x,
            a1,
            a3,
            a4,
            pool_arg,
            pool_in_hw: (a5.h, a5.w),
        });
        (out, cache)
    }

    fn backward<T: Real>(
        &self,
        p: &NetworkParams<T>,
        c: &BlockCache<T>,
        dout: &Feature<T>,
        grads: &mut [T],
        dependency: bool,
    ) -> Feature<T> {
        let (gw, gb) = split_conv_grads(grads, p, &self.skip);
        let dx_skip = pointwise_backward(dout, &c.x, p.tensor(self.skip.weight), 2, gw, gb, true).unwrap();
        let da5 = maxpool_backward(dout, &c.pool_arg, c.pool_in_hw.0, c.pool_in_hw.1, dependency);
        let (gw, gb) = split_conv_grads(grads, p, &self.pw2);
        let da4 = pointwise_backward(&da5, &c.a4, p.tensor(self.pw2.weight), 1, gw, gb, true).unwrap();
        let mut da3 = depthwise_backward(&da4, &c.a3, p.tensor(self.dw2.weight), slot_grads(grads, p, self.dw2.weight), true).unwrap();
        relu_backward(&mut da3, &c.a3, dependency);
        let (gw, gb) = split_conv_grads(grads, p, &self.pw1);
        let da1 = pointwise_backward(&da3, &c.a1, p.tensor(self.pw1.weight), 1, gw, gb, true).unwrap();
        let src = c.relu_x.as_ref().unwrap_or(&c.x);
        let mut dx = depthwise_backward(&da1, src, p.tensor(self.dw1.weight), slot_grads(grads, p, self.dw1.weight), true).unwrap();
        if let Some(rx) = &c.relu_x {
            relu_backward(&mut dx, rx, dependency);
        }
        add_inplace(&mut dx, &dx_skip);
        dx
    }
}

impl Subnet {
    fn forward<T: Real>(&self, p: &NetworkParams<T>, input: &Feature<T>, keep: bool) -> (Vec<Vec<T>>, Option<SubnetCache<T>>) {
        let t = &self.trunk;
        let (mut s1, cols1) = conv3x3_forward(input, p.tensor(t.stem1.weight), p.tensor(t.stem1.bias), t.stem1.cout, t.stem1.stride);
        relu_inplace(&mut s1);
        let (mut s2, cols2) = conv3x3_forward(&s1, p.tensor(t.stem2.weight), p.tensor(t.stem2.bias), t.stem2.cout, t.stem2.stride);
        relu_inplace(&mut s2);
        let mut x = s2.clone();
        let mut block_caches = Vec::new();
        for b in &t.blocks {
            let (y, c) = b.forward(p, x, keep);
            x = y;
            block_caches.extend(c);
        }
        let mut maps = Vec::with_capacity(self.branches.len());
        let mut branch_caches = Vec::new();
        for br in &self.branches {
            let mut f = x.clone();
            let mut caches = Vec::new();
            for b in &br.blocks {
                let (y, c) = b.forward(p, f, keep);
                f = y;
                caches.extend(c);
            }
            let m = pointwise_forward(&f, p.tensor(br.head.weight), p.tensor(br.head.bias), 1, 1);
            maps.push(m.data);
            if keep {
                branch_caches.push(BranchCache { blocks: caches, features: f });
            }
        }
        let cache = keep.then(|| SubnetCache {
            input_hw: (input.h, input.w),
            stem_cols1: cols1,
            stem_out1: s1,
            stem_cols2: cols2,
            stem_out2: s2,
            blocks: block_caches,
            branches: branch_caches,
        });
        (maps, cache)
    }

    fn backward<T: Real>(
        &self,
        p: &NetworkParams<T>,
        c: &SubnetCache<T>,
        dmaps: &[Vec<T>],
        grads: &mut [T],
        need_input: bool,
        dependency: bool,
    ) -> Option<Feature<T>> {
        let mut dtrunk: Option<Feature<T>> = None;
        for ((br, bc), dm) in self.branches.iter().zip(&c.branches).zip(dmaps) {
            let f = &bc.features;
            let dy = Feature {
                c: 1,
                h: f.h,
                w: f.w,
                data: dm.clone(),
            };
            let (gw, gb) = split_conv_grads(grads, p, &br.head);
            let mut d = pointwise_backward(&dy, f, p.tensor(br.head.weight), 1, gw, gb, true).unwrap();
            for (b, cache) in br.blocks.iter().zip(&bc.blocks).rev() {
                d = b.backward(p, cache, &d, grads, dependency);
            }
            match dtrunk.as_mut() {
                Some(acc) => add_inplace(acc, &d),
                None => dtrunk = Some(d),
            }
        }
        let mut d = dtrunk.expect("at least one branch");
        let t = &self.trunk;
        for (b, cache) in t.blocks.iter().zip(&c.blocks).rev() {
            d = b.backward(p, cache, &d, grads, dependency);
        }
        relu_backward(&mut d, &c.stem_out2, dependency);
        let (gw, gb) = split_conv_grads(grads, p, &t.stem2);
        let s1 = &c.stem_out1;
        let mut d = conv3x3_backward(&d, &c.stem_cols2, p.tensor(t.stem2.weight), t.stem2.cin, (s1.h, s1.w), 1, gw, gb, true).unwrap();
        relu_backward(&mut d, s1, dependency);
        let (gw, gb) = split_conv_grads(grads, p, &t.stem1);
        conv3x3_backward(&d, &c.stem_cols1, p.tensor(t.stem1.weight), 3, c.input_hw, t.stem1.stride, gw, gb, need_input)
    }
}
