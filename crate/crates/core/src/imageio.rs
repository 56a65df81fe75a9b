//! Conversions between `[-1, 1]` CHW tensors and 8-bit RGB images.

use std::path::Path;

use cvaegan_tensor::{Scalar, Tensor};
use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

/// `round((x + 1)·127.5)`, clamped to `0..=255`.
pub fn to_u8(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn from_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// A `[3, H, W]` tensor (or the `index`-th item of `[N, 3, H, W]`) as RGB.
pub fn tensor_to_rgb<T: Scalar>(t: &Tensor<T>, index: usize) -> Result<RgbImage> {
    let (h, w, base) = match t.shape() {
        [3, h, w] if index == 0 => (*h, *w, 0),
        [n, 3, h, w] if index < *n => (*h, *w, index * 3 * h * w),
        other => {
            return Err(Error::config(format!(
                "cannot take image {index} from a tensor of shape {other:?}"
            )))
        }
    };
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| to_u8(d[base + c * h * w + p].as_f64())))
    }))
}

/// Appends the CHW `[-1, 1]` values of `img` to `out`.
pub fn rgb_to_chw(img: &RgbImage, out: &mut Vec<f32>) {
    for c in 0..3 {
        out.extend(img.pixels().map(|p| from_u8(p.0[c])));
    }
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(Error::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(0.0), 128);
        assert_eq!(to_u8(7.0), 255);
    }

    #[test]
    fn u8_round_trip() {
        for v in 0..=255u8 {
            assert_eq!(to_u8(from_u8(v) as f64), v);
        }
    }

    #[test]
    fn tensor_image_round_trip() {
        let img = RgbImage::from_fn(3, 2, |x, y| Rgb([x as u8 * 40, y as u8 * 90, 7]));
        let mut v = Vec::new();
        rgb_to_chw(&img, &mut v);
        let t = Tensor::new([3, 2, 3], v).unwrap();
        assert_eq!(tensor_to_rgb(&t, 0).unwrap(), img);
    }
}
