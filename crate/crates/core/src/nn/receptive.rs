//! Receptive-field introspection.
//!
//! The measured field of a map cell is the support of the input gradient of
//! that cell's logit in dependency mode: absolute weights, every ReLU open
//! and max pooling routed to its whole window. This is the set of pixels that
//! can influence the cell for some input, so pixels outside it provably never
//! do.

use std::ops::Range;

use super::kernels::Feature;
use super::model::Network;
use super::params::NetworkParams;
use super::scalar::Real;
use crate::error::{Error, Result};
use crate::rgb::RgbImage;

/// Axis-aligned pixel box (half-open ranges).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelBox {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl PixelBox {
    pub fn extent(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.rows.contains(&row) && self.cols.contains(&col)
    }
}

fn bounding_box(mask: impl Iterator<Item = (usize, usize)>) -> Option<PixelBox> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    let mut any = false;
    for (r, c) in mask {
        any = true;
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(c);
        c1 = c1.max(c);
    }
    any.then(|| PixelBox {
        rows: r0..r1 + 1,
        cols: c0..c1 + 1,
    })
}

fn nonzero_pixels<T: Real>(d: &Feature<T>) -> Vec<(usize, usize)> {
    let plane = d.plane();
    (0..plane)
        .filter(|&i| (0..d.c).any(|c| d.data[c * plane + i] != T::zero()))
        .map(|i| (i / d.w, i % d.w))
        .collect()
}

/// Dependency support of map cell `(row, col)` of part `part`.
pub fn dependency_support<T: Real>(
    net: &Network,
    params: &NetworkParams<T>,
    part: usize,
    cell: (usize, usize),
) -> Result<Option<PixelBox>> {
    net.check_params(params)?;
    let (mh, mw) = net.config().map_resolution();
    let n_parts = net.parts().len();
    if part >= n_parts || cell.0 >= mh || cell.1 >= mw {
        return Err(Error::InvalidInput(format!("no map cell {cell:?} for part {part}")));
    }
    let abs = params.with_data(params.as_slice().iter().map(|v| v.abs()).collect());
    let n = net.config().input_size;
    let input = net.prepare_input::<T>(&RgbImage::new(n, n))?;
    let (_, cache) = net.forward_sample(&abs, &input, true);
    let mut dmaps = vec![vec![T::zero(); mh * mw]; n_parts];
    dmaps[part][cell.0 * mw + cell.1] = T::one();
    let mut scratch = abs.zeros_like();
    let d = net
        .backward_sample(&abs, cache.as_ref().unwrap(), &dmaps, &mut scratch, true, true)
        .expect("input gradient requested");
    Ok(bounding_box(nonzero_pixels(&d).into_iter()))
}

/// Support of the true input gradient of one cell for a specific image.
/// Always a subset of [`dependency_support`].
pub fn gradient_support<T: Real>(
    net: &Network,
    params: &NetworkParams<T>,
    image: &RgbImage,
    part: usize,
    cell: (usize, usize),
) -> Result<Vec<(usize, usize)>> {
    net.check_params(params)?;
    let (mh, mw) = net.config().map_resolution();
    let input = net.prepare_input::<T>(image)?;
    let (_, cache) = net.forward_sample(params, &input, true);
    let mut dmaps = vec![vec![T::zero(); mh * mw]; net.parts().len()];
    dmaps[part][cell.0 * mw + cell.1] = T::one();
    let mut scratch = params.zeros_like();
    let d = net
        .backward_sample(params, cache.as_ref().unwrap(), &dmaps, &mut scratch, true, false)
        .expect("input gradient requested");
    Ok(nonzero_pixels(&d))
}

/// Receptive field `(h, w)` in input pixels of the center cell of the first part map.
pub fn receptive_field<T: Real>(net: &Network, params: &NetworkParams<T>) -> Result<(usize, usize)> {
    let (mh, mw) = net.config().map_resolution();
    Ok(dependency_support(net, params, 0, (mh / 2, mw / 2))?
        .map(|b| b.extent())
        .unwrap_or((0, 0)))
}

/// Unclipped receptive field of a chain of `(kernel, stride)` layers.
pub fn analytic_receptive_field(layers: &[(usize, usize)]) -> usize {
    let mut rf = 1;
    let mut jump = 1;
    for &(k, s) in layers {
        rf += (k - 1) * jump;
        jump *= s;
    }
    rf
}
