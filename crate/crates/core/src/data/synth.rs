//! Procedural faces with region-restricted forgery artifacts.
//!
//! Every source identity yields a real video and a paired fake video. Fake
//! frames are the real frame with an artifact applied only inside the
//! undilated hull of the chosen regions, so the difference mass is local by
//! construction.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::CANVAS;
use super::manifest::{write_manifest, DatasetManifest, FrameRecord, Method, Provenance, Split};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::masks::{rasterize_region, LandmarkSet, Point, RegionId, LANDMARK_COUNT};
use crate::rgb::RgbImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Noise,
    Blur,
    Colorshift,
}

impl FromStr for ArtifactKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(ArtifactKind::Noise),
            "blur" => Ok(ArtifactKind::Blur),
            "colorshift" => Ok(ArtifactKind::Colorshift),
            other => Err(Error::Config(format!("unknown artifact kind `{other}`"))),
        }
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArtifactKind::Noise => "noise",
            ArtifactKind::Blur => "blur",
            ArtifactKind::Colorshift => "colorshift",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Source identities; each gives one real and one fake video.
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub artifact_regions: Vec<RegionId>,
    pub artifact_kind: ArtifactKind,
    pub amplitude: f64,
    /// Method tag written on fake records.
    pub method: String,
}

impl SynthConfig {
    pub fn new(n_videos: usize, artifact_regions: &[RegionId], artifact_kind: ArtifactKind, amplitude: f64) -> Self {
        Self {
            n_videos,
            frames_per_video: 4,
            artifact_regions: artifact_regions.to_vec(),
            artifact_kind,
            amplitude,
            method: "synthetic".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_videos == 0 || self.frames_per_video == 0 {
            return Err(Error::Config("n_videos and frames_per_video must be positive".into()));
        }
        if self.frames_per_video >= IDENTITY_STREAM as usize {
            return Err(Error::Config(format!("frames_per_video must be below {IDENTITY_STREAM}")));
        }
        if self.artifact_regions.is_empty() {
            return Err(Error::Config("artifact_regions must not be empty when fakes are generated".into()));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Config(format!("amplitude must be positive, got {}", self.amplitude)));
        }
        if Method::from(self.method.clone()).is_real() {
            return Err(Error::Config("fake method tag cannot be `real`".into()));
        }
        Ok(())
    }
}

const IDENTITY_STREAM: u64 = 1 << 12;
const CENTER: f64 = 144.0;

/// Split by identity index: 14 of every 20 train, 3 val, 3 test.
pub fn split_for_video(index: usize) -> Split {
    match index % 20 {
        0..=13 => Split::Train,
        14..=16 => Split::Val,
        _ => Split::Test,
    }
}

fn ellipse_point(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Point {
    Point::new(cx + a * theta.cos(), cy - b * theta.sin())
}

/// Canonical 68-point layout on the 288 canvas. `mouth_open` scales the inner lip.
pub fn template_landmarks(mouth_open: f64) -> Vec<Point> {
    let mut p = Vec::with_capacity(LANDMARK_COUNT);
    for k in 0..17 {
        let phi = PI * k as f64 / 16.0;
        p.push(Point::new(CENTER - 90.0 * phi.cos(), 125.0 + 122.0 * phi.sin()));
    }
    for x0 in [84.0, 158.0] {
        for k in 0..5 {
            let t = k as f64 / 4.0;
            p.push(Point::new(x0 + 46.0 * t, 95.0 - 6.0 * (PI * t).sin()));
        }
    }
    for y in [105.0, 118.0, 131.0, 144.0] {
        p.push(Point::new(CENTER, y));
    }
    for (x, y) in [(130.0, 160.0), (137.0, 163.0), (144.0, 165.0), (151.0, 163.0), (158.0, 160.0)] {
        p.push(Point::new(x, y));
    }
    for cx in [108.0, 180.0] {
        for k in 0..6 {
            p.push(ellipse_point(cx, 115.0, 18.0, 8.0, PI - PI * k as f64 / 3.0));
        }
    }
    for k in 0..12 {
        p.push(ellipse_point(CENTER, 205.0, 34.0, 13.0, PI - 2.0 * PI * k as f64 / 12.0));
    }
    for k in 0..8 {
        p.push(ellipse_point(CENTER, 205.0, 22.0, 5.0 * mouth_open, PI - 2.0 * PI * k as f64 / 8.0));
    }
    p
}

/// Per-identity appearance.
#[derive(Clone, Debug)]
struct Identity {
    skin: [f64; 3],
    background: [f64; 3],
    iris: [f64; 3],
    lips: [f64; 3],
    brow: [f64; 3],
    scale: (f64, f64),
}

/// Per-frame pose and expression.
#[derive(Clone, Debug)]
struct Pose {
    rotation: f64,
    scale: f64,
    shift: (f64, f64),
    gaze: (f64, f64),
    mouth_open: f64,
}

struct Affine {
    m: [[f64; 2]; 2],
    t: (f64, f64),
}

impl Affine {
    fn for_pose(id: &Identity, pose: &Pose) -> Self {
        let (s, c) = pose.rotation.sin_cos();
        let (sx, sy) = (id.scale.0 * pose.scale, id.scale.1 * pose.scale);
        Self {
            m: [[c * sx, -s * sy], [s * sx, c * sy]],
            t: (CENTER + pose.shift.0, CENTER + pose.shift.1),
        }
    }

    fn apply(&self, p: Point) -> Point {
        let (x, y) = (p.x - CENTER, p.y - CENTER);
        Point::new(
            self.m[0][0] * x + self.m[0][1] * y + self.t.0,
            self.m[1][0] * x + self.m[1][1] * y + self.t.1,
        )
    }

    fn invert(&self, p: Point) -> Point {
        let [[a, b], [c, d]] = self.m;
        let det = a * d - b * c;
        let (x, y) = (p.x - self.t.0, p.y - self.t.1);
        Point::new((d * x - b * y) / det + CENTER, (-c * x + a * y) / det + CENTER)
    }
}

fn in_ellipse(p: Point, cx: f64, cy: f64, a: f64, b: f64) -> bool {
    let (u, v) = ((p.x - cx) / a, (p.y - cy) / b);
    u * u + v * v <= 1.0
}

fn in_triangle(p: Point, a: Point, b: Point, c: Point) -> bool {
    let s = |p1: Point, p2: Point| (p.x - p2.x) * (p1.y - p2.y) - (p1.x - p2.x) * (p.y - p2.y);
    let (d1, d2, d3) = (s(a, b), s(b, c), s(c, a));
    !((d1 < 0.0 || d2 < 0.0 || d3 < 0.0) && (d1 > 0.0 || d2 > 0.0 || d3 > 0.0))
}

fn near_polyline(p: Point, pts: &[Point], radius: f64) -> bool {
    pts.windows(2).any(|w| {
        let (a, b) = (w[0], w[1]);
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
        let (qx, qy) = (a.x + t * dx - p.x, a.y + t * dy - p.y);
        qx * qx + qy * qy <= radius * radius
    })
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

fn identity(rng: &mut ChaCha8Rng) -> Identity {
    let tone = rng.random_range(0.0..1.0);
    let skin = mix([0.93, 0.78, 0.66], [0.45, 0.30, 0.22], tone);
    let mut rgb = |lo: f64, hi: f64| [0; 3].map(|_| rng.random_range(lo..hi));
    let background = rgb(0.1, 0.9);
    let iris = rgb(0.1, 0.5);
    let brow = rgb(0.05, 0.3);
    let lips = mix([0.75, 0.35, 0.35], skin, rng.random_range(0.0..0.4));
    Identity {
        skin,
        background,
        iris,
        lips,
        brow,
        scale: (rng.random_range(0.94..1.06), rng.random_range(0.94..1.06)),
    }
}

fn pose(rng: &mut ChaCha8Rng) -> Pose {
    Pose {
        rotation: rng.random_range(-5.0..5.0f64).to_radians(),
        scale: rng.random_range(0.96..1.04),
        shift: (rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)),
        gaze: (rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5)),
        mouth_open: rng.random_range(0.2..1.0),
    }
}

fn render(id: &Identity, pose: &Pose, rng: &mut ChaCha8Rng) -> (RgbImage, Vec<Point>) {
    let tmpl = template_landmarks(pose.mouth_open);
    let affine = Affine::for_pose(id, pose);
    let landmarks: Vec<Point> = tmpl.iter().map(|&p| affine.apply(p)).collect();
    let brows = [&tmpl[17..22], &tmpl[22..27]];
    let nose_tri = (Point::new(CENTER, 105.0), Point::new(128.0, 166.0), Point::new(160.0, 166.0));
    let noise = Normal::new(0.0, 0.01).expect("positive std");
    let mut img = RgbImage::new(CANVAS, CANVAS);
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            let q = affine.invert(Point::new(x as f64 + 0.5, y as f64 + 0.5));
            let mut c = mix(id.background, [0.0; 3], 0.25 * y as f64 / CANVAS as f64);
            if in_ellipse(q, CENTER, 138.0, 92.0, 118.0) {
                let (u, v) = ((q.x - CENTER) / 92.0, (q.y - 138.0) / 118.0);
                c = id.skin.map(|s| s * (1.0 - 0.18 * (u * u + 0.5 * v * v)));
                if in_triangle(q, nose_tri.0, nose_tri.1, nose_tri.2) {
                    c = c.map(|v| v * 0.92);
                }
                for nx in [134.0, 154.0] {
                    if in_ellipse(q, nx, 166.0, 4.0, 2.5) {
                        c = [0.2, 0.1, 0.08];
                    }
                }
                if brows.iter().any(|b| near_polyline(q, b, 3.0)) {
                    c = id.brow;
                }
                for cx in [108.0, 180.0] {
                    if in_ellipse(q, cx, 115.0, 18.0, 8.0) {
                        c = [0.93, 0.92, 0.9];
                        let (ix, iy) = (cx + pose.gaze.0, 115.0 + pose.gaze.1);
                        if in_ellipse(q, ix, iy, 6.5, 6.5) {
                            c = id.iris;
                        }
                        if in_ellipse(q, ix, iy, 2.5, 2.5) {
                            c = [0.02; 3];
                        }
                    }
                }
                if in_ellipse(q, CENTER, 205.0, 34.0, 13.0) {
                    c = id.lips;
                    if in_ellipse(q, CENTER, 205.0, 22.0, 5.0 * pose.mouth_open) {
                        c = [0.25, 0.05, 0.05];
                    }
                }
            }
            let px = c.map(|v| (v + noise.sample(rng)).clamp(0.0, 1.0) as f32);
            img.set_pixel(x, y, px);
        }
    }
    (img, landmarks)
}

fn quantize(img: &mut RgbImage) {
    img.as_mut_slice().iter_mut().for_each(|v| *v = (*v * 255.0).round() / 255.0);
}

fn apply_artifact(real: &RgbImage, hull: &Grid, kind: ArtifactKind, amplitude: f64, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut fake = real.clone();
    let n = CANVAS;
    match kind {
        ArtifactKind::Noise => {
            let normal = Normal::new(0.0, amplitude).expect("positive amplitude");
            for y in 0..n {
                for x in 0..n {
                    if hull.get(y, x) > 0.0 {
                        let p = real.pixel(x, y);
                        fake.set_pixel(x, y, p.map(|v| (v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32));
                    }
                }
            }
        }
        ArtifactKind::Blur => {
            let r = ((amplitude * 15.0).round() as isize).max(1);
            for y in 0..n {
                for x in 0..n {
                    if hull.get(y, x) == 0.0 {
                        continue;
                    }
                    let mut acc = [0.0f64; 3];
                    let mut count = 0.0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (sx, sy) = (x as isize + dx, y as isize + dy);
                            if sx >= 0 && sy >= 0 && (sx as usize) < n && (sy as usize) < n {
                                let p = real.pixel(sx as usize, sy as usize);
                                for c in 0..3 {
                                    acc[c] += p[c] as f64;
                                }
                                count += 1.0;
                            }
                        }
                    }
                    fake.set_pixel(x, y, acc.map(|v| (v / count) as f32));
                }
            }
        }
        ArtifactKind::Colorshift => {
            let dir = [0; 3].map(|_| rng.random_range(-1.0..1.0f64));
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            let shift = dir.map(|v| amplitude * v / norm);
            for y in 0..n {
                for x in 0..n {
                    if hull.get(y, x) > 0.0 {
                        let p = real.pixel(x, y);
                        fake.set_pixel(x, y, [0, 1, 2].map(|c| (p[c] as f64 + shift[c]).clamp(0.0, 1.0) as f32));
                    }
                }
            }
        }
    }
    quantize(&mut fake);
    fake
}

/// Union of the undilated hull rasters of `regions`.
pub fn artifact_hull(landmarks: &LandmarkSet, regions: &[RegionId]) -> Result<Grid> {
    let mut union = Grid::zeros(CANVAS, CANVAS);
    for &r in regions {
        let g = rasterize_region(landmarks.region_points(r), r, (CANVAS, CANVAS))?;
        for (u, v) in union.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *u = u.max(*v);
        }
    }
    Ok(union)
}

/// Fraction of `Σ|fake − real|` that lies where `mask > 0`.
pub fn difference_mass_inside(real: &RgbImage, fake: &RgbImage, mask: &Grid) -> f64 {
    let (mut inside, mut total) = (0.0, 0.0);
    for y in 0..real.height() {
        for x in 0..real.width() {
            let (a, b) = (real.pixel(x, y), fake.pixel(x, y));
            let d: f64 = (0..3).map(|c| (a[c] - b[c]).abs() as f64).sum();
            total += d;
            if mask.get(y, x) > 0.0 {
                inside += d;
            }
        }
    }
    if total == 0.0 {
        1.0
    } else {
        inside / total
    }
}

#[derive(Clone, Debug)]
pub struct SynthPair {
    pub real: RgbImage,
    pub fake: RgbImage,
    pub landmarks: LandmarkSet,
}

/// Renders frame `frame` of identity `video`. Pure function of its arguments.
pub fn render_pair(config: &SynthConfig, seed: u64, video: usize, frame: usize) -> Result<SynthPair> {
    config.validate()?;
    let mut id_rng = ChaCha8Rng::seed_from_u64(seed);
    id_rng.set_stream(video as u64 * IDENTITY_STREAM + IDENTITY_STREAM - 1);
    let id = identity(&mut id_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(video as u64 * IDENTITY_STREAM + frame as u64);
    let pose = pose(&mut rng);
    let (mut real, pts) = render(&id, &pose, &mut rng);
    quantize(&mut real);
    let landmarks = LandmarkSet::new(pts)?;
    let hull = artifact_hull(&landmarks, &config.artifact_regions)?;
    let fake = apply_artifact(&real, &hull, config.artifact_kind, config.amplitude, &mut rng);
    let inside = difference_mass_inside(&real, &fake, &hull);
    if inside < 0.95 {
        return Err(Error::Data(format!(
            "artifact locality self-test failed for video {video} frame {frame}: {:.3} inside",
            inside
        )));
    }
    Ok(SynthPair { real, fake, landmarks })
}

pub fn real_video_id(video: usize) -> String {
    format!("id{video:04}_real")
}

pub fn fake_video_id(video: usize) -> String {
    format!("id{video:04}_fake")
}

/// Writes images under `out_dir/images` and the manifest to `out_dir/manifest.jsonl`.
pub fn synth_generate(config: &SynthConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let images = out_dir.join("images");
    crate::util::create_dir_all(&images)?;
    let jobs: Vec<(usize, usize)> = (0..config.n_videos)
        .flat_map(|v| (0..config.frames_per_video).map(move |f| (v, f)))
        .collect();
    let method = Method::from(config.method.clone());
    let records = jobs
        .par_iter()
        .map(|&(v, f)| {
            let pair = render_pair(config, seed, v, f)?;
            let real_id = format!("{}_f{f:02}", real_video_id(v));
            let fake_id = format!("{}_f{f:02}", fake_video_id(v));
            let rel = |id: &str| PathBuf::from("images").join(format!("{id}.png"));
            pair.real.save_png(&out_dir.join(rel(&real_id)))?;
            pair.fake.save_png(&out_dir.join(rel(&fake_id)))?;
            let base = |frame_id: &str, video_id: String, method: Method, label: u8| FrameRecord {
                frame_id: frame_id.to_string(),
                video_id,
                split: split_for_video(v),
                method,
                label,
                image_path: rel(frame_id),
                landmarks: pair.landmarks.clone(),
                face_box: [0.0, 0.0, CANVAS as f64, CANVAS as f64],
                paired_real_frame_id: None,
            };
            let real = base(&real_id, real_video_id(v), Method::Real, 0);
            let mut fake = base(&fake_id, fake_video_id(v), method.clone(), 1);
            fake.paired_real_frame_id = Some(real_id.clone());
            Ok([real, fake])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ordered = Vec::with_capacity(records.len() * 2);
    let (mut reals, mut fakes): (Vec<_>, Vec<_>) = (Vec::new(), Vec::new());
    for [r, f] in records {
        reals.push(r);
        fakes.push(f);
    }
    // real video frames first, then its fake video, per identity
    let fpv = config.frames_per_video;
    for v in 0..config.n_videos {
        ordered.extend_from_slice(&reals[v * fpv..(v + 1) * fpv]);
        ordered.extend_from_slice(&fakes[v * fpv..(v + 1) * fpv]);
    }
    let manifest = DatasetManifest::new(
        Some(Provenance {
            source: "synthetic".into(),
            seed,
            methods: vec![method],
        }),
        ordered,
        out_dir.to_path_buf(),
    )?;
    write_manifest(&out_dir.join("manifest.jsonl"), &manifest)?;
    Ok(manifest)
}
