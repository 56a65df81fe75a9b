use std::collections::BTreeSet;
use std::path::Path;

use cvaegan_tensor::Tensor;
use image::imageops::{self, FilterType};
use image::RgbImage;

use super::crop::{crop_to_ratio, BBox};
use super::emb::load_embeddings;
use super::manifest::{read_manifest, EMBEDDINGS_FILE, MANIFEST_FILE};
use super::Batch;
use crate::error::{Error, Result};
use crate::imageio::rgb_to_chw;

#[derive(Clone, Debug, PartialEq)]
pub struct LoadOptions {
    /// Stage-1 resolution `S`.
    pub image_size: usize,
    /// Also keep a `4S` copy of every image for stage 2.
    pub hi_res: bool,
    pub crop_ratio: f64,
}

/// Preprocessed images (cropped around their boxes, then resized) held in
/// memory with their embeddings and class labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub image_size: usize,
    pub embed_dim: usize,
    images: Vec<f32>,
    images_hi: Option<Vec<f32>>,
    embeddings: Vec<f32>,
    pub labels: Vec<usize>,
}

fn resize(img: &RgbImage, size: usize) -> RgbImage {
    if img.width() as usize == size && img.height() as usize == size {
        img.clone()
    } else {
        imageops::resize(img, size as u32, size as u32, FilterType::Triangle)
    }
}

impl Dataset {
    /// Reads `manifest.jsonl`, `embeddings.emb` and the referenced PNGs from
    /// `dir`.
    pub fn load(dir: &Path, opts: &LoadOptions) -> Result<Self> {
        let records = read_manifest(dir.join(MANIFEST_FILE))?;
        let table = load_embeddings(dir.join(EMBEDDINGS_FILE))?;
        let s = opts.image_size;
        let mut ds = Dataset {
            image_size: s,
            embed_dim: table.dim,
            images: Vec::with_capacity(records.len() * 3 * s * s),
            images_hi: opts.hi_res.then(|| Vec::with_capacity(records.len() * 48 * s * s)),
            embeddings: Vec::with_capacity(records.len() * table.dim),
            labels: Vec::with_capacity(records.len()),
        };
        for (line, rec) in records.iter().enumerate() {
            if rec.emb_index >= table.count {
                return Err(Error::config(format!(
                    "manifest record {line} references embedding {} of {}",
                    rec.emb_index, table.count
                )));
            }
            let path = dir.join(&rec.image);
            let img = image::open(&path)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?
                .to_rgb8();
            let img = match rec.bbox {
                Some(b) => crop_to_ratio(&img, BBox::from_array(b), opts.crop_ratio)?,
                None => img,
            };
            rgb_to_chw(&resize(&img, s), &mut ds.images);
            if let Some(hi) = &mut ds.images_hi {
                rgb_to_chw(&resize(&img, 4 * s), hi);
            }
            ds.embeddings.extend_from_slice(table.row(rec.emb_index));
            ds.labels.push(rec.class);
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn has_hi_res(&self) -> bool {
        self.images_hi.is_some()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Records whose class is in `classes`, in their original order.
    pub fn with_classes(&self, classes: &[usize]) -> Dataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.select(&keep)
    }

    /// The records at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let lo = 3 * self.image_size * self.image_size;
        let gather = |src: &[f32], stride: usize| -> Vec<f32> {
            indices
                .iter()
                .flat_map(|&i| src[i * stride..(i + 1) * stride].iter().copied())
                .collect()
        };
        Dataset {
            image_size: self.image_size,
            embed_dim: self.embed_dim,
            images: gather(&self.images, lo),
            images_hi: self.images_hi.as_ref().map(|h| gather(h, 16 * lo)),
            embeddings: gather(&self.embeddings, self.embed_dim),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch<f32> {
        let sub = self.select(indices);
        let b = indices.len();
        let s = self.image_size;
        Batch {
            images: Tensor::new([b, 3, s, s], sub.images).expect("gathered lengths match"),
            images_hi: sub
                .images_hi
                .map(|h| Tensor::new([b, 3, 4 * s, 4 * s], h).expect("gathered lengths match")),
            embeddings: Tensor::new([b, self.embed_dim], sub.embeddings).expect("gathered lengths match"),
            labels: sub.labels,
        }
    }

    /// All records as one batch.
    pub fn all(&self) -> Batch<f32> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}
