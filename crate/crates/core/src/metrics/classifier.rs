use cvaegan_tensor::{Activation, Block, Conv2d, Dense, Graph, Mode, ParamStore, Tensor, Var};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{epoch_batches, Dataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::layers;
use crate::optim::{Adam, AdamConfig};

pub const FEATURE_DIM: usize = 128;
const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl ClassifierConfig {
    /// Three stride-2 convs (16, 32, 64) and a 128-wide feature layer.
    pub fn new(image_size: usize, num_classes: usize) -> Result<Self> {
        if image_size % 8 != 0 || image_size == 0 {
            return Err(Error::config(format!("classifier input {image_size} is not a multiple of 8")));
        }
        Ok(ClassifierConfig {
            image_size,
            channels: vec![16, 32, 64],
            feature_dim: FEATURE_DIM,
            num_classes,
        })
    }

    pub fn synthetic(image_size: usize) -> Result<Self> {
        Self::new(image_size, NUM_CLASSES)
    }
}

/// Small conv net whose pre-activation feature layer feeds the Fréchet
/// distance and whose softmax feeds the Inception Score.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub store: ParamStore<f32>,
    convs: Vec<Block<Conv2d>>,
    features: Dense,
    head: Dense,
}

#[derive(Clone, Debug)]
pub struct ClassifierTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        ClassifierTraining {
            epochs: 8,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl Classifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let mut cin = 3;
        let convs = config
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let b = layers::down(s, &format!("cls.conv{i}"), cin, c, Activation::Relu, &mut rng);
                cin = c;
                b
            })
            .collect();
        let side = config.image_size >> config.channels.len();
        let features = Dense::new(s, "cls.features", cin * side * side, config.feature_dim, true, &mut rng);
        let head = Dense::new(s, "cls.head", config.feature_dim, config.num_classes, true, &mut rng);
        Classifier {
            config,
            store,
            convs,
            features,
            head,
        }
    }

    /// Returns `(features, logits)`; features are taken before the ReLU.
    pub fn forward(&self, g: &mut Graph<f32>, x: Var, mode: Mode) -> Result<(Var, Var)> {
        let mut h = x;
        for (i, block) in self.convs.iter().enumerate() {
            g.scope(format!("cls.conv{i}"));
            h = block.forward(g, &self.store, h, mode)?;
        }
        let h = g.flatten(h)?;
        g.scope("cls.features");
        let f = self.features.forward(g, &self.store, h, mode)?;
        let a = g.relu(f)?;
        g.scope("cls.head");
        let logits = self.head.forward(g, &self.store, a, mode)?;
        Ok((f, logits))
    }

    /// Class probabilities (`N × C`) and features (`N × feature_dim`) for
    /// `[N, 3, H, W]` images, evaluated in chunks in inference mode.
    pub fn outputs(&self, images: &Tensor<f32>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let shape = images.shape();
        let s = self.config.image_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::config(format!("classifier expects [N, 3, {s}, {s}], got {shape:?}")));
        }
        let n = shape[0];
        let per = 3 * s * s;
        let (c, d) = (self.config.num_classes, self.config.feature_dim);
        let mut probs = Vec::with_capacity(n * c);
        let mut feats = Vec::with_capacity(n * d);
        for lo in (0..n).step_by(CHUNK) {
            let hi = (lo + CHUNK).min(n);
            let chunk = Tensor::new([hi - lo, 3, s, s], images.data()[lo * per..hi * per].to_vec())?;
            let mut g = Graph::new();
            let x = g.constant(chunk);
            let (f, logits) = self.forward(&mut g, x, Mode::EVAL)?;
            let p = g.softmax(logits)?;
            probs.extend(g.value(p).data().iter().map(|&v| v as f64));
            feats.extend(g.value(f).data().iter().map(|&v| v as f64));
        }
        Ok((DMatrix::from_row_slice(n, c, &probs), DMatrix::from_row_slice(n, d, &feats)))
    }

    /// Fraction of `images` whose arg-max class equals the label.
    pub fn accuracy(&self, images: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        let (probs, _) = self.outputs(images)?;
        if labels.is_empty() {
            return Ok(0.0);
        }
        let hits = probs
            .row_iter()
            .zip(labels)
            .filter(|(row, &y)| row.transpose().imax() == y)
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Stable identifier derived from the parameter bits (FNV-1a).
    pub fn id(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for e in self.store.entries() {
            for b in e.name.bytes().chain(e.value.data().iter().flat_map(|v| v.to_bits().to_le_bytes())) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        format!("shapes-cnn-{}x{}-{h:016x}", self.config.image_size, self.config.feature_dim)
    }
}

/// Trains on the high-resolution images of `train` with cross-entropy.
pub fn train_classifier(train: &Dataset, opts: &ClassifierTraining) -> Result<Classifier> {
    if !train.has_hi_res() {
        return Err(Error::config("classifier training needs the high-resolution images"));
    }
    let classes = train.labels.iter().copied().max().map_or(0, |m| m + 1).max(NUM_CLASSES);
    let mut cls = Classifier::new(ClassifierConfig::new(4 * train.image_size, classes)?, opts.seed);
    let mut adam = Adam::new(AdamConfig::default());
    for epoch in 0..opts.epochs {
        for idx in epoch_batches(train.len(), opts.batch_size, opts.seed, epoch) {
            let batch = train.batch(&idx);
            let mut g = Graph::new();
            let x = g.constant(batch.images_hi.expect("checked above"));
            let (_, logits) = cls.forward(&mut g, x, Mode::TRAIN)?;
            let loss = g.cross_entropy(logits, &batch.labels)?;
            if !g.value(loss).is_finite() {
                return Err(crate::cvae::non_finite(&g, "classifier"));
            }
            g.backward(loss)?;
            cls.store.absorb(&g);
            adam.step(&mut cls.store, opts.lr)?;
        }
    }
    Ok(cls)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probabilities_and_feature_width() {
        let cls = Classifier::new(ClassifierConfig::synthetic(16).unwrap(), 1);
        let x: Vec<f32> = (0..5 * 3 * 16 * 16).map(|i| ((i % 17) as f32 / 8.0) - 1.0).collect();
        let (p, f) = cls.outputs(&Tensor::new([5, 3, 16, 16], x).unwrap()).unwrap();
        assert_eq!(f.shape(), (5, 128));
        assert_eq!(p.shape(), (5, 24));
        for row in p.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn id_tracks_parameters() {
        let a = Classifier::new(ClassifierConfig::synthetic(16).unwrap(), 1);
        let b = Classifier::new(ClassifierConfig::synthetic(16).unwrap(), 2);
        assert_eq!(a.id(), a.clone().id());
        assert_ne!(a.id(), b.id());
    }
}
