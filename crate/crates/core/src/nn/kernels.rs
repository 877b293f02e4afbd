//! Per-sample CHW layer kernels with hand-written backward passes.
//!
//! Backward functions take a `dependency` flag: in that mode ReLU gates are
//! treated as open and max pooling spreads its gradient over the whole window,
//! which yields the structural input support instead of the local gradient.

use super::scalar::{matmul, Real};

/// Channel-major feature map of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Feature<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Feature<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Output extent of a stride-`s`, pad-1, 3-wide window (also the 1×1 stride-2 skip).
pub fn strided_extent(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

fn im2col3<T: Real>(x: &Feature<T>, stride: usize, oh: usize, ow: usize) -> Vec<T> {
    let p = oh * ow;
    let mut cols = vec![T::zero(); x.c * 9 * p];
    for ci in 0..x.c {
        let src = &x.data[ci * x.plane()..(ci + 1) * x.plane()];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * p..((ci * 9) + ky * 3 + kx + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy as usize >= x.h {
                        continue;
                    }
                    let srow = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                    let drow = &mut row[oy * ow..(oy + 1) * ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && (ix as usize) < x.w {
                            *d = srow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im3<T: Real>(cols: &[T], c: usize, h: usize, w: usize, stride: usize, oh: usize, ow: usize) -> Feature<T> {
    let p = oh * ow;
    let mut x = Feature::zeros(c, h, w);
    for ci in 0..c {
        let dst = &mut x.data[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * p..((ci * 9) + ky * 3 + kx + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && (ix as usize) < w {
                            drow[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Full 3×3 convolution, pad 1. Returns the output and the im2col buffer.
pub fn conv3x3_forward<T: Real>(
    x: &Feature<T>,
    weight: &[T],
    bias: &[T],
    cout: usize,
    stride: usize,
) -> (Feature<T>, Vec<T>) {
    let oh = strided_extent(x.h, stride);
    let ow = strided_extent(x.w, stride);
    let cols = im2col3(x, stride, oh, ow);
    let mut y = Feature::zeros(cout, oh, ow);
    let p = oh * ow;
    matmul(cout, x.c * 9, p, weight, false, &cols, false, &mut y.data, false);
    add_bias(&mut y, bias);
    (y, cols)
}

#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward<T: Real>(
    dy: &Feature<T>,
    cols: &[T],
    weight: &[T],
    cin: usize,
    in_hw: (usize, usize),
    stride: usize,
    dweight: &mut [T],
    dbias: &mut [T],
    need_input: bool,
) -> Option<Feature<T>> {
    let p = dy.plane();
    let k = cin * 9;
    matmul(dy.c, p, k, &dy.data, false, cols, true, dweight, true);
    accumulate_bias(dy, dbias);
    if !need_input {
        return None;
    }
    let mut dcols = vec![T::zero(); k * p];
    matmul(k, dy.c, p, weight, true, &dy.data, false, &mut dcols, false);
    Some(col2im3(&dcols, cin, in_hw.0, in_hw.1, stride, dy.h, dy.w))
}

fn add_bias<T: Real>(y: &mut Feature<T>, bias: &[T]) {
    let plane = y.plane();
    for (chunk, &b) in y.data.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_bias<T: Real>(dy: &Feature<T>, dbias: &mut [T]) {
    let plane = dy.plane();
    for (chunk, db) in dy.data.chunks(plane).zip(dbias.iter_mut()) {
        *db += chunk.iter().copied().sum::<T>();
    }
}

fn subsample2<T: Real>(x: &Feature<T>) -> Feature<T> {
    let oh = strided_extent(x.h, 2);
    let ow = strided_extent(x.w, 2);
    let mut out = Feature::zeros(x.c, oh, ow);
    for c in 0..x.c {
        for oy in 0..oh {
            for ox in 0..ow {
                out.data[(c * oh + oy) * ow + ox] = x.data[(c * x.h + 2 * oy) * x.w + 2 * ox];
            }
        }
    }
    out
}

fn upsample2_scatter<T: Real>(d: &Feature<T>, h: usize, w: usize) -> Feature<T> {
    let mut out = Feature::zeros(d.c, h, w);
    for c in 0..d.c {
        for oy in 0..d.h {
            for ox in 0..d.w {
                out.data[(c * h + 2 * oy) * w + 2 * ox] = d.data[(c * d.h + oy) * d.w + ox];
            }
        }
    }
    out
}

/// 1×1 convolution with bias; `stride` is 1 or 2.
pub fn pointwise_forward<T: Real>(x: &Feature<T>, weight: &[T], bias: &[T], cout: usize, stride: usize) -> Feature<T> {
    let sub;
    let src = if stride == 2 {
        sub = subsample2(x);
        &sub
    } else {
        x
    };
    let mut y = Feature::zeros(cout, src.h, src.w);
    matmul(cout, src.c, src.plane(), weight, false, &src.data, false, &mut y.data, false);
    add_bias(&mut y, bias);
    y
}

#[allow(clippy::too_many_arguments)]
pub fn pointwise_backward<T: Real>(
    dy: &Feature<T>,
    x: &Feature<T>,
    weight: &[T],
    stride: usize,
    dweight: &mut [T],
    dbias: &mut [T],
    need_input: bool,
) -> Option<Feature<T>> {
    let sub;
    let src = if stride == 2 {
        sub = subsample2(x);
        &sub
    } else {
        x
    };
    matmul(dy.c, dy.plane(), src.c, &dy.data, false, &src.data, true, dweight, true);
    accumulate_bias(dy, dbias);
    if !need_input {
        return None;
    }
    let mut dsrc = Feature::zeros(src.c, src.h, src.w);
    matmul(src.c, dy.c, dy.plane(), weight, true, &dy.data, false, &mut dsrc.data, false);
    Some(if stride == 2 { upsample2_scatter(&dsrc, x.h, x.w) } else { dsrc })
}

/// Depthwise 3×3, stride 1, pad 1, no bias.
pub fn depthwise_forward<T: Real>(x: &Feature<T>, weight: &[T]) -> Feature<T> {
    let (h, w) = (x.h, x.w);
    let mut y = Feature::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = &x.data[c * h * w..(c + 1) * h * w];
        let dst = &mut y.data[c * h * w..(c + 1) * h * w];
        let k = &weight[c * 9..c * 9 + 9];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let kv = k[ky * 3 + kx];
                let (x_lo, x_hi) = valid_range(w, kx);
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * w..(oy + 1) * w];
                    for ox in x_lo..x_hi {
                        drow[ox] += kv * srow[ox + kx - 1];
                    }
                }
            }
        }
    }
    y
}

/// Output columns `ox` for which `ox + kx - 1` is inside `[0, w)`.
fn valid_range(w: usize, kx: usize) -> (usize, usize) {
    let lo = if kx == 0 { 1 } else { 0 };
    let hi = if kx == 2 { w.saturating_sub(1) } else { w };
    (lo, hi.max(lo))
}

pub fn depthwise_backward<T: Real>(
    dy: &Feature<T>,
    x: &Feature<T>,
    weight: &[T],
    dweight: &mut [T],
    need_input: bool,
) -> Option<Feature<T>> {
    let (h, w) = (x.h, x.w);
    let mut dx = need_input.then(|| Feature::zeros(x.c, h, w));
    for c in 0..x.c {
        let src = &x.data[c * h * w..(c + 1) * h * w];
        let g = &dy.data[c * h * w..(c + 1) * h * w];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let kv = weight[c * 9 + ky * 3 + kx];
                let (x_lo, x_hi) = valid_range(w, kx);
                let mut acc = T::zero();
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let iy = iy as usize;
                    let srow = &src[iy * w..(iy + 1) * w];
                    let grow = &g[oy * w..(oy + 1) * w];
                    for ox in x_lo..x_hi {
                        acc += grow[ox] * srow[ox + kx - 1];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let drow = &mut dx.data[(c * h + iy) * w..(c * h + iy + 1) * w];
                        for ox in x_lo..x_hi {
                            drow[ox + kx - 1] += kv * grow[ox];
                        }
                    }
                }
                dweight[c * 9 + ky * 3 + kx] += acc;
            }
        }
    }
    dx
}

pub fn relu_inplace<T: Real>(x: &mut Feature<T>) {
    x.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero();
        }
    });
}

/// Gradient through a ReLU given its output (or, equivalently, its input).
pub fn relu_backward<T: Real>(dy: &mut Feature<T>, out: &Feature<T>, dependency: bool) {
    if dependency {
        return;
    }
    dy.data.iter_mut().zip(&out.data).for_each(|(g, &o)| {
        if o <= T::zero() {
            *g = T::zero();
        }
    });
}

/// 3×3 max pooling, stride 2, pad 1 (padding never wins). Returns output and argmax.
pub fn maxpool_forward<T: Real>(x: &Feature<T>) -> (Feature<T>, Vec<u32>) {
    let oh = strided_extent(x.h, 2);
    let ow = strided_extent(x.w, 2);
    let mut y = Feature::zeros(x.c, oh, ow);
    let mut arg = vec![0u32; x.c * oh * ow];
    for c in 0..x.c {
        let src = &x.data[c * x.plane()..(c + 1) * x.plane()];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = 0usize;
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy as usize >= x.h {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix as usize >= x.w {
                            continue;
                        }
                        let i = iy as usize * x.w + ix as usize;
                        if src[i] > best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                y.data[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward<T: Real>(dy: &Feature<T>, argmax: &[u32], in_h: usize, in_w: usize, dependency: bool) -> Feature<T> {
    let mut dx = Feature::zeros(dy.c, in_h, in_w);
    let plane = in_h * in_w;
    for c in 0..dy.c {
        let dst = &mut dx.data[c * plane..(c + 1) * plane];
        for oy in 0..dy.h {
            for ox in 0..dy.w {
                let o = (c * dy.h + oy) * dy.w + ox;
                let g = dy.data[o];
                if dependency {
                    for ky in 0..3 {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy as usize >= in_h {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix >= 0 && (ix as usize) < in_w {
                                dst[iy as usize * in_w + ix as usize] += g;
                            }
                        }
                    }
                } else {
                    dst[argmax[o] as usize] += g;
                }
            }
        }
    }
    dx
}

pub fn add_inplace<T: Real>(a: &mut Feature<T>, b: &Feature<T>) {
    debug_assert_eq!(a.data.len(), b.data.len());
    a.data.iter_mut().zip(&b.data).for_each(|(x, &y)| *x += y);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_feature(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Feature<f64> {
        Feature {
            c,
            h,
            w,
            data: (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn at(x: &Feature<f64>, c: usize, y: isize, xx: isize) -> f64 {
        if y < 0 || xx < 0 || y as usize >= x.h || xx as usize >= x.w {
            0.0
        } else {
            x.data[(c * x.h + y as usize) * x.w + xx as usize]
        }
    }

    #[test]
    fn conv3x3_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_feature(&mut rng, 3, 7, 6);
        let cout = 4;
        let w: Vec<f64> = (0..cout * 27).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        for stride in [1, 2] {
            let (y, _) = conv3x3_forward(&x, &w, &b, cout, stride);
            for co in 0..cout {
                for oy in 0..y.h {
                    for ox in 0..y.w {
                        let mut s = b[co];
                        for ci in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    s += w[co * 27 + ci * 9 + ky * 3 + kx]
                                        * at(&x, ci, (oy * stride + ky) as isize - 1, (ox * stride + kx) as isize - 1);
                                }
                            }
                        }
                        assert!((y.data[(co * y.h + oy) * y.w + ox] - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn depthwise_and_pool_match_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_feature(&mut rng, 2, 5, 7);
        let w: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = depthwise_forward(&x, &w);
        let (p, _) = maxpool_forward(&x);
        for c in 0..2 {
            for oy in 0..5isize {
                for ox in 0..7isize {
                    let mut s = 0.0;
                    for ky in 0..3isize {
                        for kx in 0..3isize {
                            s += w[c * 9 + (ky * 3 + kx) as usize] * at(&x, c, oy + ky - 1, ox + kx - 1);
                        }
                    }
                    assert!((y.data[(c * 5 + oy as usize) * 7 + ox as usize] - s).abs() < 1e-12);
                }
            }
            for oy in 0..p.h {
                for ox in 0..p.w {
                    let mut m = f64::NEG_INFINITY;
                    for ky in 0..3isize {
                        for kx in 0..3isize {
                            let (yy, xx) = (2 * oy as isize + ky - 1, 2 * ox as isize + kx - 1);
                            if yy >= 0 && xx >= 0 && yy < 5 && xx < 7 {
                                m = m.max(at(&x, c, yy, xx));
                            }
                        }
                    }
                    assert_eq!(p.data[(c * p.h + oy) * p.w + ox], m);
                }
            }
        }
        assert_eq!((p.h, p.w), (3, 4));
    }

    /// Checks `<dy, f(x)>` derivatives against central differences for a linear layer.
    fn check_linear_layer(
        forward: impl Fn(&Feature<f64>, &[f64]) -> Feature<f64>,
        backward: impl Fn(&Feature<f64>, &Feature<f64>, &[f64], &mut [f64]) -> Feature<f64>,
        x: Feature<f64>,
        w: Vec<f64>,
        rng: &mut ChaCha8Rng,
    ) {
        let y = forward(&x, &w);
        let dy = random_feature(rng, y.c, y.h, y.w);
        let objective = |x: &Feature<f64>, w: &[f64]| -> f64 {
            forward(x, w).data.iter().zip(&dy.data).map(|(a, b)| a * b).sum()
        };
        let mut dw = vec![0.0; w.len()];
        let dx = backward(&dy, &x, &w, &mut dw);
        let h = 1e-6;
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (objective(&x, &wp) - objective(&x, &wm)) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-6, "weight {i}: {fd} vs {}", dw[i]);
        }
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (objective(&xp, &w) - objective(&xm, &w)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6, "input {i}: {fd} vs {}", dx.data[i]);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for stride in [1usize, 2] {
            let x = random_feature(&mut rng, 2, 5, 6);
            let w: Vec<f64> = (0..3 * 18).map(|_| rng.random_range(-1.0..1.0)).collect();
            check_linear_layer(
                |x, w| conv3x3_forward(x, w, &[0.0; 3], 3, stride).0,
                |dy, x, w, dw| {
                    let (_, cols) = conv3x3_forward(x, w, &[0.0; 3], 3, stride);
                    let mut db = [0.0; 3];
                    conv3x3_backward(dy, &cols, w, x.c, (x.h, x.w), stride, dw, &mut db, true).unwrap()
                },
                x,
                w,
                &mut rng,
            );
            let x = random_feature(&mut rng, 3, 5, 4);
            let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            check_linear_layer(
                |x, w| pointwise_forward(x, w, &[0.0; 2], 2, stride),
                |dy, x, w, dw| {
                    let mut db = [0.0; 2];
                    pointwise_backward(dy, x, w, stride, dw, &mut db, true).unwrap()
                },
                x,
                w,
                &mut rng,
            );
        }
        let x = random_feature(&mut rng, 3, 4, 5);
        let w: Vec<f64> = (0..27).map(|_| rng.random_range(-1.0..1.0)).collect();
        check_linear_layer(
            depthwise_forward,
            |dy, x, w, dw| depthwise_backward(dy, x, w, dw, true).unwrap(),
            x,
            w,
            &mut rng,
        );
    }

    #[test]
    fn dependency_pool_spreads_over_window() {
        let x = Feature::<f64>::zeros(1, 4, 4);
        let (y, arg) = maxpool_forward(&x);
        let mut dy = Feature::zeros(1, y.h, y.w);
        dy.data[0] = 1.0;
        let dx = maxpool_backward(&dy, &arg, 4, 4, true);
        let touched: Vec<usize> = (0..16).filter(|&i| dx.data[i] > 0.0).collect();
        assert_eq!(touched, vec![0, 1, 4, 5]);
    }
}
