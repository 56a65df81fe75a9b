//! Dataset ingestion, preprocessing and the synthetic shape dataset.

mod batches;
mod crop;
mod dataset;
mod emb;
mod manifest;
mod split;
mod synthetic;

pub use batches::epoch_batches;
pub use crop::{crop_to_ratio, crop_window, BBox, DEFAULT_CROP_RATIO};
pub use dataset::{Dataset, LoadOptions};
pub use emb::{load_embeddings, parse_embeddings, save_embeddings, EmbeddingTable};
pub use manifest::{read_manifest, write_manifest, ManifestRecord, MANIFEST_FILE, EMBEDDINGS_FILE};
pub use split::class_disjoint_split;
pub use synthetic::{
    class_label, render_synthetic, write_synthetic_dataset, Rendered, Shape, SyntheticSpec, COLORS, EMBED_DIM,
    NUM_CLASSES,
};

use cvaegan_tensor::Tensor;

/// A minibatch of aligned images, embeddings and labels.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[B, 3, S, S]` in `[-1, 1]`.
    pub images: Tensor<T>,
    /// `[B, 3, 4S, 4S]`, present when the dataset was loaded for stage 2.
    pub images_hi: Option<Tensor<T>>,
    /// `[B, embed_dim]`.
    pub embeddings: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}
