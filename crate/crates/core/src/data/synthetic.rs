//! Procedurally rendered colored shapes with attribute embeddings, a small
//! stand-in for captioned image datasets.

use std::path::Path;

use cvaegan_tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use super::crop::BBox;
use super::emb::{save_embeddings, EmbeddingTable};
use super::manifest::{write_manifest, ManifestRecord, EMBEDDINGS_FILE, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::imageio::{save_png, tensor_to_rgb};

pub const EMBED_DIM: usize = 64;
pub const NUM_CLASSES: usize = 3 * COLORS.len();
const EMBED_NOISE: f64 = 0.05;
const BACKGROUND: [f64; 3] = [40.0, 40.0, 40.0];
const SUPERSAMPLE: usize = 4;

pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [230, 30, 30]),
    ("green", [30, 200, 50]),
    ("blue", [40, 70, 235]),
    ("yellow", [240, 220, 40]),
    ("cyan", [40, 220, 230]),
    ("magenta", [220, 40, 210]),
    ("white", [245, 245, 245]),
    ("orange", [250, 140, 20]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub shape: Shape,
    /// Index into [`COLORS`].
    pub color: usize,
    /// Object extent as a fraction of the canvas side, in `[0.3, 0.9]`.
    pub size_fraction: f64,
    /// Center offset from the canvas center as a fraction of the side, each
    /// in `[-0.2, 0.2]`.
    pub offset: (f64, f64),
}

/// `shape · 8 + color`.
pub fn class_label(shape: Shape, color: usize) -> usize {
    shape.index() * COLORS.len() + color
}

impl SyntheticSpec {
    pub fn new(shape: Shape, color: usize, size_fraction: f64, offset: (f64, f64)) -> Result<Self> {
        if color >= COLORS.len() {
            return Err(Error::config(format!("color index {color} out of range")));
        }
        if !(0.3..=0.9).contains(&size_fraction) {
            return Err(Error::config(format!("size fraction {size_fraction} outside [0.3, 0.9]")));
        }
        let limit = 0.2f64.min((1.0 - size_fraction) / 2.0) + 1e-12;
        if offset.0.abs() > limit || offset.1.abs() > limit {
            return Err(Error::config(format!(
                "offset {offset:?} would move a {size_fraction} object off the canvas"
            )));
        }
        Ok(SyntheticSpec {
            shape,
            color,
            size_fraction,
            offset,
        })
    }

    /// Random size and in-canvas position for a given shape and color.
    pub fn random<R: Rng + ?Sized>(shape: Shape, color: usize, rng: &mut R) -> Result<Self> {
        let size = rng.random_range(0.3..=0.9);
        let limit = 0.2f64.min((1.0 - size) / 2.0);
        let off = (rng.random_range(-limit..=limit), rng.random_range(-limit..=limit));
        Self::new(shape, color, size, off)
    }

    pub fn class_label(&self) -> usize {
        class_label(self.shape, self.color)
    }

    fn geometry(&self, size: usize) -> (f64, f64, f64) {
        let s = size as f64;
        (s * (0.5 + self.offset.0), s * (0.5 + self.offset.1), self.size_fraction * s / 2.0)
    }

    fn covers(&self, (cx, cy, r): (f64, f64, f64), x: f64, y: f64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }

    /// Fraction of each pixel covered by the shape, row-major, using 4×4
    /// supersampling.
    pub fn alpha_mask(&self, size: usize) -> Vec<f32> {
        let geom = self.geometry(size);
        let step = 1.0 / SUPERSAMPLE as f64;
        let mut mask = Vec::with_capacity(size * size);
        for py in 0..size {
            for px in 0..size {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = px as f64 + (sx as f64 + 0.5) * step;
                        let y = py as f64 + (sy as f64 + 0.5) * step;
                        hits += self.covers(geom, x, y) as usize;
                    }
                }
                mask.push(hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32);
            }
        }
        mask
    }

    /// Pixel box enclosing the shape.
    pub fn bbox(&self, size: usize) -> BBox {
        let (cx, cy, r) = self.geometry(size);
        let s = size as f64;
        let x0 = (cx - r).floor().clamp(0.0, s);
        let y0 = (cy - r).floor().clamp(0.0, s);
        let x1 = (cx + r).ceil().clamp(0.0, s);
        let y1 = (cy + r).ceil().clamp(0.0, s);
        BBox {
            x: x0 as u32,
            y: y0 as u32,
            w: (x1 - x0) as u32,
            h: (y1 - y0) as u32,
        }
    }

    /// Attribute vector before noise: one-hot shape, one-hot color, size and
    /// the two offsets, zero-padded to [`EMBED_DIM`].
    pub fn clean_embedding(&self) -> Vec<f32> {
        let mut e = vec![0.0f32; EMBED_DIM];
        e[self.shape.index()] = 1.0;
        e[3 + self.color] = 1.0;
        e[11] = self.size_fraction as f32;
        e[12] = self.offset.0 as f32;
        e[13] = self.offset.1 as f32;
        e
    }
}

#[derive(Clone, Debug)]
pub struct Rendered {
    /// `[3, size, size]` in `[-1, 1]`.
    pub image: Tensor<f32>,
    pub embedding: Vec<f32>,
    pub class_label: usize,
    pub bbox: BBox,
}

/// Rasterizes `spec` on a dark background. The image depends only on the
/// spec; `rng` supplies the embedding noise.
pub fn render_synthetic<R: Rng + ?Sized>(spec: &SyntheticSpec, size: usize, rng: &mut R) -> Result<Rendered> {
    if size < 4 {
        return Err(Error::config(format!("canvas size {size} is too small")));
    }
    let mask = spec.alpha_mask(size);
    let color = COLORS[spec.color].1;
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        let (bg, fg) = (BACKGROUND[c], color[c] as f64);
        data.extend(mask.iter().map(|&a| {
            let a = a as f64;
            ((bg * (1.0 - a) + fg * a) / 127.5 - 1.0) as f32
        }));
    }
    let noise = Normal::new(0.0, EMBED_NOISE).expect("valid std");
    let embedding = spec
        .clean_embedding()
        .into_iter()
        .map(|v| v + noise.sample(rng) as f32)
        .collect();
    Ok(Rendered {
        image: Tensor::new([3, size, size], data)?,
        embedding,
        class_label: spec.class_label(),
        bbox: spec.bbox(size),
    })
}

/// Writes `n` rendered records (record `i` has class `i mod 24`) as PNGs plus
/// `manifest.jsonl` and `embeddings.emb` under `dir`.
pub fn write_synthetic_dataset(dir: &Path, n: usize, size: usize, seed: u64) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    let mut table = Vec::with_capacity(n * EMBED_DIM);
    for i in 0..n {
        let class = i % NUM_CLASSES;
        let spec = SyntheticSpec::random(Shape::ALL[class / COLORS.len()], class % COLORS.len(), &mut rng)?;
        let r = render_synthetic(&spec, size, &mut rng)?;
        let name = format!("images/{i:06}.png");
        save_png(&tensor_to_rgb(&r.image, 0)?, &dir.join(&name))?;
        table.extend_from_slice(&r.embedding);
        records.push(ManifestRecord {
            image: name,
            class,
            bbox: Some([r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h]),
            emb_index: i,
        });
    }
    write_manifest(dir.join(MANIFEST_FILE), &records)?;
    save_embeddings(dir.join(EMBEDDINGS_FILE), &EmbeddingTable::new(n, EMBED_DIM, table)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_red_circle() {
        let spec = SyntheticSpec::new(Shape::Circle, 0, 0.5, (0.0, 0.0)).unwrap();
        let a = render_synthetic(&spec, 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = render_synthetic(&spec, 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.embedding, b.embedding);
        let d = a.image.data();
        let center = 8 * 16 + 8;
        let (r, g, bl) = (d[center], d[256 + center], d[512 + center]);
        assert!(r > g && r > bl);
        assert!(d.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a.class_label, 0);
    }

    #[test]
    fn one_hot_shape_prefix() {
        for shape in Shape::ALL {
            let spec = SyntheticSpec::new(shape, 3, 0.4, (0.1, -0.1)).unwrap();
            let e = spec.clean_embedding();
            assert_eq!(e.len(), 64);
            assert_eq!(e[..3].iter().filter(|&&v| v != 0.0).count(), 1);
            assert_eq!(e[3..11].iter().filter(|&&v| v != 0.0).count(), 1);
        }
    }

    #[test]
    fn color_only_changes_channels() {
        let a = SyntheticSpec::new(Shape::Triangle, 1, 0.6, (0.05, 0.0)).unwrap();
        let b = SyntheticSpec { color: 5, ..a };
        assert_eq!(a.alpha_mask(32), b.alpha_mask(32));
        let ra = render_synthetic(&a, 32, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let rb = render_synthetic(&b, 32, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_ne!(ra.image, rb.image);
    }

    #[test]
    fn object_stays_inside_canvas() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..200 {
            let spec = SyntheticSpec::random(Shape::ALL[i % 3], i % 8, &mut rng).unwrap();
            let (cx, cy, r) = spec.geometry(16);
            assert!(cx - r >= -1e-9 && cy - r >= -1e-9 && cx + r <= 16.0 + 1e-9 && cy + r <= 16.0 + 1e-9);
            let bb = spec.bbox(16);
            assert!(bb.x + bb.w <= 16 && bb.y + bb.h <= 16);
        }
    }

    #[test]
    fn rejects_off_canvas_specs() {
        assert!(SyntheticSpec::new(Shape::Square, 0, 0.9, (0.1, 0.0)).is_err());
        assert!(SyntheticSpec::new(Shape::Square, 0, 0.2, (0.0, 0.0)).is_err());
        assert!(SyntheticSpec::new(Shape::Square, 8, 0.5, (0.0, 0.0)).is_err());
    }
}
