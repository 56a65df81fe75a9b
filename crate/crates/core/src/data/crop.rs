use image::RgbImage;

use crate::error::{Error, Result};

pub const DEFAULT_CROP_RATIO: f64 = 0.75;

/// Axis-aligned box in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn from_array([x, y, w, h]: [u32; 4]) -> Self {
        BBox { x, y, w, h }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x as u64 + other.w as u64 <= self.x as u64 + self.w as u64
            && other.y as u64 + other.h as u64 <= self.y as u64 + self.h as u64
    }
}

/// Start of a window of length `side` along one axis: centered on the box,
/// then moved the least distance that keeps both the box and the image
/// boundary satisfied.
fn place(start: u32, len: u32, side: u32, extent: u32) -> u32 {
    let (start, len, side, extent) = (start as i64, len as i64, side as i64, extent as i64);
    let centered = (2 * start + len - side).div_euclid(2);
    let x = centered.clamp(start + len - side, start);
    x.clamp(0, extent - side) as u32
}

/// The square window that [`crop_to_ratio`] cuts out of a `width × height`
/// image.
///
/// The side is the largest integer with `max(w, h) / side ≥ ratio`. When that
/// square does not fit, the largest square that fits and still contains the
/// box is used; when no square can contain the box, the whole image is
/// returned.
pub fn crop_window(width: u32, height: u32, bbox: BBox, ratio: f64) -> Result<BBox> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config(format!("crop ratio must lie in (0, 1], got {ratio}")));
    }
    let full = BBox {
        x: 0,
        y: 0,
        w: width,
        h: height,
    };
    if bbox.w == 0 || bbox.h == 0 || !full.contains(&bbox) {
        return Ok(full);
    }
    let long = bbox.w.max(bbox.h);
    let limit = width.min(height);
    let mut side = ((long as f64 / ratio) + 1e-9).floor() as u32;
    side = side.max(long);
    if side > limit {
        if long > limit {
            return Ok(full);
        }
        side = limit;
    }
    Ok(BBox {
        x: place(bbox.x, bbox.w, side, width),
        y: place(bbox.y, bbox.h, side, height),
        w: side,
        h: side,
    })
}

/// Square crop around `bbox` whose longer side fills at least `ratio` of the
/// crop side. See [`crop_window`].
pub fn crop_to_ratio(image: &RgbImage, bbox: BBox, ratio: f64) -> Result<RgbImage> {
    let win = crop_window(image.width(), image.height(), bbox, ratio)?;
    Ok(image::imageops::crop_imm(image, win.x, win.y, win.w, win.h).to_image())
}
