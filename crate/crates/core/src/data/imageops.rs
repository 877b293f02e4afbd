//! Face-crop normalization and JPEG round-trip.

use image::codecs::jpeg::JpegEncoder;
use image::ImageFormat;

use crate::error::{Error, Result};
use crate::masks::{LandmarkSet, Point};
use crate::rgb::RgbImage;

pub const DEFAULT_JPEG_QUALITY: u8 = 95;

/// Integer pixel rectangle `[x0, x1) × [y0, y1)` after clipping to the frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

/// Rounds a `[x0, y0, x1, y1]` face box to pixels and clips it to the frame.
pub fn clip_box(face_box: [f64; 4], width: usize, height: usize) -> Result<PixelRect> {
    let [x0, y0, x1, y1] = face_box;
    if face_box.iter().any(|v| !v.is_finite()) || x1 <= x0 || y1 <= y0 {
        return Err(Error::InvalidBox(format!("degenerate box {face_box:?}")));
    }
    let clip = |v: f64, hi: usize| v.round().clamp(0.0, hi as f64) as usize;
    let r = PixelRect {
        x0: clip(x0, width),
        y0: clip(y0, height),
        x1: clip(x1, width),
        y1: clip(y1, height),
    };
    if r.x1 <= r.x0 || r.y1 <= r.y0 {
        return Err(Error::InvalidBox(format!(
            "box {face_box:?} does not intersect the {width}x{height} frame"
        )));
    }
    Ok(r)
}

/// Nearest-neighbour resample of the clipped box to `size × size`.
/// Destination index `d` reads source offset `floor(d · extent / size)`.
pub fn crop_and_resize(frame: &RgbImage, face_box: [f64; 4], size: usize) -> Result<RgbImage> {
    let r = clip_box(face_box, frame.width(), frame.height())?;
    Ok(resample(frame, r, size))
}

fn resample(frame: &RgbImage, r: PixelRect, size: usize) -> RgbImage {
    let cols: Vec<usize> = (0..size).map(|d| r.x0 + d * r.width() / size).collect();
    let mut out = RgbImage::new(size, size);
    for dy in 0..size {
        let sy = r.y0 + dy * r.height() / size;
        for (dx, &sx) in cols.iter().enumerate() {
            out.set_pixel(dx, dy, frame.pixel(sx, sy));
        }
    }
    out
}

/// Nearest-neighbour resize of a whole square-or-not image to `size × size`.
pub fn resize_nearest(image: &RgbImage, size: usize) -> RgbImage {
    if image.width() == size && image.height() == size {
        return image.clone();
    }
    let r = PixelRect {
        x0: 0,
        y0: 0,
        x1: image.width(),
        y1: image.height(),
    };
    resample(image, r, size)
}

/// Maps frame-space landmarks into the `size × size` crop of `face_box`.
pub fn crop_landmarks(landmarks: &LandmarkSet, face_box: [f64; 4], frame: (usize, usize), size: usize) -> Result<LandmarkSet> {
    let r = clip_box(face_box, frame.0, frame.1)?;
    let sx = size as f64 / r.width() as f64;
    let sy = size as f64 / r.height() as f64;
    LandmarkSet::new(
        landmarks
            .points()
            .iter()
            .map(|p| Point::new((p.x - r.x0 as f64) * sx, (p.y - r.y0 as f64) * sy))
            .collect(),
    )
}

/// Baseline JPEG encode then decode.
pub fn jpeg_roundtrip(image: &RgbImage, quality: u8) -> Result<RgbImage> {
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidParameter(format!("jpeg quality {quality} outside 1..=100")));
    }
    let rgb8 = image.to_rgb8();
    let mut bytes = Vec::new();
    let codec_err = |source| Error::Image {
        path: "<memory>".into(),
        source,
    };
    JpegEncoder::new_with_quality(&mut bytes, quality)
        .encode_image(&rgb8)
        .map_err(codec_err)?;
    let decoded = image::load_from_memory_with_format(&bytes, ImageFormat::Jpeg).map_err(codec_err)?;
    Ok(RgbImage::from_rgb8(&decoded.to_rgb8()))
}
