//! Facial region masks built from 68-point landmarks.
//!
//! Pipeline per region: group landmarks, rasterize (convex hull for nose,
//! mouth and eyes; 1 px polyline for the jaw), dilate with a 3×3 element,
//! gaussian blur, then area-average down to the network map resolution.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const LANDMARK_COUNT: usize = 68;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionId {
    Nose,
    Mouth,
    Eyes,
    Chin,
}

impl RegionId {
    pub const ALL: [RegionId; 4] = [RegionId::Nose, RegionId::Mouth, RegionId::Eyes, RegionId::Chin];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Lowercase name used in filenames and flags.
    pub fn as_str(self) -> &'static str {
        match self {
            RegionId::Nose => "nose",
            RegionId::Mouth => "mouth",
            RegionId::Eyes => "eyes",
            RegionId::Chin => "chin",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            RegionId::Nose => "Nose",
            RegionId::Mouth => "Mouth",
            RegionId::Eyes => "Eyes",
            RegionId::Chin => "Chin",
        }
    }

    /// Landmark indices of this region in the 68-point convention.
    pub fn landmark_indices(self) -> std::ops::Range<usize> {
        match self {
            RegionId::Chin => 0..17,
            RegionId::Nose => 27..36,
            RegionId::Eyes => 36..48,
            RegionId::Mouth => 48..68,
        }
    }

    fn is_polyline(self) -> bool {
        self == RegionId::Chin
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.title())
    }
}

impl FromStr for RegionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nose" => Ok(RegionId::Nose),
            "mouth" => Ok(RegionId::Mouth),
            "eyes" | "eye" => Ok(RegionId::Eyes),
            "chin" | "jaw" | "jawline" => Ok(RegionId::Chin),
            other => Err(Error::InvalidParameter(format!("unknown region `{other}`"))),
        }
    }
}

/// Parses a comma separated region list such as `eyes,chin`; result is sorted and deduplicated.
pub fn parse_regions(s: &str) -> Result<Vec<RegionId>> {
    let mut regions = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(RegionId::from_str)
        .collect::<Result<Vec<_>>>()?;
    regions.sort();
    regions.dedup();
    Ok(regions)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// 68 landmark points in crop pixel coordinates (x right, y down).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct LandmarkSet {
    points: Vec<Point>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(Error::InvalidLandmarks(format!(
                "expected {LANDMARK_COUNT} points, got {}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::InvalidLandmarks(format!("point {i} is not finite")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn region_points(&self, region: RegionId) -> &[Point] {
        &self.points[region.landmark_indices()]
    }
}

impl TryFrom<Vec<[f64; 2]>> for LandmarkSet {
    type Error = Error;

    fn try_from(raw: Vec<[f64; 2]>) -> Result<Self> {
        LandmarkSet::new(raw.into_iter().map(|[x, y]| Point::new(x, y)).collect())
    }
}

impl From<LandmarkSet> for Vec<[f64; 2]> {
    fn from(set: LandmarkSet) -> Self {
        set.points.into_iter().map(|p| [p.x, p.y]).collect()
    }
}

/// Region point groups in `RegionId` order. Eyebrows (17–26) are not used.
pub fn group_landmarks(points: &[Point]) -> Result<[(RegionId, Vec<Point>); 4]> {
    if points.len() != LANDMARK_COUNT {
        return Err(Error::InvalidLandmarks(format!(
            "expected {LANDMARK_COUNT} points, got {}",
            points.len()
        )));
    }
    Ok(RegionId::ALL.map(|r| (r, points[r.landmark_indices()].to_vec())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub region: RegionId,
    pub values: Grid,
}

impl RegionMask {
    pub fn resolution(&self) -> (usize, usize) {
        self.values.shape()
    }

    /// Writes the mask as 8-bit grayscale, `round(255 * m)` per pixel.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.resolution();
        let bytes: Vec<u8> = self
            .values
            .as_slice()
            .iter()
            .map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
            .collect();
        image::GrayImage::from_raw(w as u32, h as u32, bytes)
            .expect("buffer matches dimensions")
            .save(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// One mask per region, all at a common resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMaskSet {
    masks: [RegionMask; 4],
}

impl RegionMaskSet {
    pub fn new(masks: [RegionMask; 4]) -> Result<Self> {
        let res = masks[0].resolution();
        for (expected, m) in RegionId::ALL.iter().zip(&masks) {
            if m.region != *expected {
                return Err(Error::InvalidInput(format!(
                    "mask set out of order: expected {expected}, got {}",
                    m.region
                )));
            }
            if m.resolution() != res {
                return Err(Error::InvalidInput("mask resolutions differ".into()));
            }
        }
        Ok(Self { masks })
    }

    /// Target for real images: every value exactly zero.
    pub fn zeros(resolution: (usize, usize)) -> Self {
        Self {
            masks: RegionId::ALL.map(|region| RegionMask {
                region,
                values: Grid::zeros(resolution.0, resolution.1),
            }),
        }
    }

    pub fn get(&self, region: RegionId) -> &RegionMask {
        &self.masks[region.index()]
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.masks[0].resolution()
    }

    pub fn iter(&self) -> impl Iterator<Item = &RegionMask> {
        self.masks.iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub iterations: usize,
    pub sigma: f64,
    /// When set, downsampled targets are re-binarized at this threshold.
    pub binarize_threshold: Option<f64>,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            iterations: 8,
            sigma: 7.0,
            binarize_threshold: None,
        }
    }
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Convex hull in counter-clockwise order (monotone chain), collinear points dropped.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(pts.len() * 2);
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Rasterizes a region's points into a binary `canvas`-sized mask.
pub fn rasterize_region(points: &[Point], region: RegionId, canvas: (usize, usize)) -> Result<Grid> {
    if points.is_empty() {
        return Err(Error::InvalidInput(format!("{region}: empty point list")));
    }
    let (h, w) = canvas;
    if h == 0 || w == 0 {
        return Err(Error::InvalidInput("canvas must be positive".into()));
    }
    let mut grid = Grid::zeros(h, w);
    if region.is_polyline() {
        if points.len() == 1 {
            draw_segment(&mut grid, points[0], points[0]);
        }
        for pair in points.windows(2) {
            draw_segment(&mut grid, pair[0], pair[1]);
        }
        return Ok(grid);
    }
    let hull = convex_hull(points);
    match hull.len() {
        1 => draw_segment(&mut grid, hull[0], hull[0]),
        2 => draw_segment(&mut grid, hull[0], hull[1]),
        _ => fill_convex(&mut grid, &hull),
    }
    Ok(grid)
}

fn fill_convex(grid: &mut Grid, hull: &[Point]) {
    let (h, w) = grid.shape();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in hull {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let scale = (x1 - x0).max(y1 - y0).max(1.0);
    let eps = 1e-9 * scale;
    let col_lo = x0.ceil().max(0.0);
    let col_hi = x1.floor().min(w as f64 - 1.0);
    let row_lo = y0.ceil().max(0.0);
    let row_hi = y1.floor().min(h as f64 - 1.0);
    if col_lo > col_hi || row_lo > row_hi {
        return;
    }
    let edges: Vec<(Point, Point, f64)> = (0..hull.len())
        .map(|i| {
            let a = hull[i];
            let b = hull[(i + 1) % hull.len()];
            (a, b, ((b.x - a.x).hypot(b.y - a.y)))
        })
        .collect();
    for row in row_lo as usize..=row_hi as usize {
        for col in col_lo as usize..=col_hi as usize {
            let p = Point::new(col as f64, row as f64);
            if edges.iter().all(|&(a, b, len)| cross(a, b, p) >= -eps * len) {
                grid.set(row, col, 1.0);
            }
        }
    }
}

/// Liang–Barsky clip to the pixel-center box, then a Bresenham walk.
fn draw_segment(grid: &mut Grid, a: Point, b: Point) {
    let (h, w) = grid.shape();
    let (xmin, xmax, ymin, ymax) = (-0.5, w as f64 - 0.5, -0.5, h as f64 - 0.5);
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    for (p, q) in [(-dx, a.x - xmin), (dx, xmax - a.x), (-dy, a.y - ymin), (dy, ymax - a.y)] {
        if p == 0.0 {
            if q < 0.0 {
                return;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if t0 > t1 {
        return;
    }
    let start = ((a.x + t0 * dx).round() as i64, (a.y + t0 * dy).round() as i64);
    let end = ((a.x + t1 * dx).round() as i64, (a.y + t1 * dy).round() as i64);
    let (mut x, mut y) = start;
    let sx = if end.0 >= x { 1 } else { -1 };
    let sy = if end.1 >= y { 1 } else { -1 };
    let ddx = (end.0 - x).abs();
    let ddy = -(end.1 - y).abs();
    let mut err = ddx + ddy;
    loop {
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            grid.set(y as usize, x as usize, 1.0);
        }
        if x == end.0 && y == end.1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= ddy {
            err += ddy;
            x += sx;
        }
        if e2 <= ddx {
            err += ddx;
            y += sy;
        }
    }
}

/// Iterated dilation with a 3×3 all-ones element; the border is clipped.
pub fn dilate(mask: &Grid, iterations: usize) -> Grid {
    let (h, w) = mask.shape();
    let mut cur = mask.clone();
    let mut tmp = Grid::zeros(h, w);
    for _ in 0..iterations {
        for r in 0..h {
            for c in 0..w {
                let lo = c.saturating_sub(1);
                let hi = (c + 1).min(w - 1);
                let mut m = f64::NEG_INFINITY;
                for cc in lo..=hi {
                    m = m.max(cur.get(r, cc));
                }
                tmp.set(r, c, m);
            }
        }
        for r in 0..h {
            let lo = r.saturating_sub(1);
            let hi = (r + 1).min(h - 1);
            for c in 0..w {
                let mut m = f64::NEG_INFINITY;
                for rr in lo..=hi {
                    m = m.max(tmp.get(rr, c));
                }
                cur.set(r, c, m);
            }
        }
    }
    cur
}

/// Normalized 1-D gaussian kernel of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("sigma must be > 0, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable gaussian blur with reflect padding.
pub fn gaussian_blur(mask: &Grid, sigma: f64) -> Result<Grid> {
    let kernel = gaussian_kernel(sigma)?;
    let radius = (kernel.len() / 2) as i64;
    let (h, w) = mask.shape();
    let (lo, hi) = (mask.min_value(), mask.max_value());
    let mut tmp = Grid::zeros(h, w);
    // all-zero rows and columns blur to exact zeros, so they are skipped
    for r in 0..h {
        if mask.as_slice()[r * w..(r + 1) * w].iter().all(|&v| v == 0.0) {
            continue;
        }
        for c in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let cc = reflect_index(c as i64 + k as i64 - radius, w);
                acc += kv * mask.get(r, cc);
            }
            tmp.set(r, c, acc);
        }
    }
    let live: Vec<bool> = (0..w).map(|c| (0..h).any(|r| tmp.get(r, c) != 0.0)).collect();
    let mut out = Grid::zeros(h, w);
    for r in 0..h {
        for c in (0..w).filter(|&c| live[c]) {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let rr = reflect_index(r as i64 + k as i64 - radius, h);
                acc += kv * tmp.get(rr, c);
            }
            // a convex combination stays within the input range; clamp away rounding
            out.set(r, c, acc.clamp(lo, hi));
        }
    }
    Ok(out)
}

/// Per-target-cell overlap weights of source indices along one axis.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|t| {
            let lo = t as f64 * scale;
            let hi = (t + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                    (overlap > 0.0).then_some((s, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Area-average pooling onto `target` resolution.
pub fn downsample_mask(mask: &Grid, target: (usize, usize)) -> Result<Grid> {
    let (h, w) = mask.shape();
    let (th, tw) = target;
    if th == 0 || tw == 0 || th > h || tw > w {
        return Err(Error::InvalidParameter(format!(
            "cannot downsample {h}x{w} to {th}x{tw}"
        )));
    }
    let (lo, hi) = (mask.min_value(), mask.max_value());
    let row_w = area_weights(h, th);
    let col_w = area_weights(w, tw);
    let mut rows = Grid::zeros(th, w);
    for (t, weights) in row_w.iter().enumerate() {
        for c in 0..w {
            rows.set(t, c, weights.iter().map(|&(s, wt)| wt * mask.get(s, c)).sum());
        }
    }
    let mut out = Grid::zeros(th, tw);
    for r in 0..th {
        for (t, weights) in col_w.iter().enumerate() {
            let v: f64 = weights.iter().map(|&(s, wt)| wt * rows.get(r, s)).sum();
            out.set(r, t, v.clamp(lo, hi));
        }
    }
    Ok(out)
}

/// Rasterize, dilate and blur one region at full canvas resolution.
pub fn region_mask_full(
    landmarks: &LandmarkSet,
    region: RegionId,
    canvas: (usize, usize),
    params: &MaskParams,
) -> Result<Grid> {
    let raster = rasterize_region(landmarks.region_points(region), region, canvas)?;
    let dilated = dilate(&raster, params.iterations);
    gaussian_blur(&dilated, params.sigma)
}

/// Full pipeline for one region, ending at the network map resolution.
pub fn region_mask(
    landmarks: &LandmarkSet,
    region: RegionId,
    canvas: (usize, usize),
    target: (usize, usize),
    params: &MaskParams,
) -> Result<RegionMask> {
    let full = region_mask_full(landmarks, region, canvas, params)?;
    let mut values = downsample_mask(&full, target)?;
    if let Some(t) = params.binarize_threshold {
        values
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = if *v >= t { 1.0 } else { 0.0 });
    }
    Ok(RegionMask { region, values })
}

pub fn build_region_masks(
    landmarks: &LandmarkSet,
    canvas: (usize, usize),
    target: (usize, usize),
    params: &MaskParams,
) -> Result<RegionMaskSet> {
    let masks = [
        region_mask(landmarks, RegionId::Nose, canvas, target, params)?,
        region_mask(landmarks, RegionId::Mouth, canvas, target, params)?,
        region_mask(landmarks, RegionId::Eyes, canvas, target, params)?,
        region_mask(landmarks, RegionId::Chin, canvas, target, params)?,
    ];
    RegionMaskSet::new(masks)
}
