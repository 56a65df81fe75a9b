//! Stage 1: a conditional VAE that draws low-resolution sketches.

use cvaegan_tensor::{Activation, BatchNorm, Block, Conv2d, ConvTranspose2d, Dense, Graph, Mode, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::cond_aug::{kl_to_standard_normal, sample_condition, standard_normal, CondAug, ConditionVars, ConditionedLatent, COND_DIM};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::layers;
use crate::optim::Adam;
use crate::profile::{halvings_to_four, Profile};

pub const LATENT_DIM: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeConfig {
    pub image_size: usize,
    pub embed_dim: usize,
    pub cond_dim: usize,
    pub latent_dim: usize,
    /// Encoder conv widths; the decoder mirrors them.
    pub channels: Vec<usize>,
    /// Width of the dense layer between the flattened bottleneck and the heads.
    pub hidden: usize,
}

impl CvaeConfig {
    /// 64×64 sketches, widths 64-128-256-512, 2048-wide bottleneck dense.
    pub fn paper(embed_dim: usize) -> Self {
        Self::for_profile(Profile::Paper, 64, embed_dim, COND_DIM, LATENT_DIM).expect("valid preset")
    }

    /// 16×16 sketches, widths 32-64, 256-wide bottleneck dense.
    pub fn desk(embed_dim: usize) -> Self {
        Self::for_profile(Profile::Desk, 16, embed_dim, COND_DIM, LATENT_DIM).expect("valid preset")
    }

    /// Channel widths double per stride-2 stage down to a 4×4 map.
    pub fn for_profile(
        profile: Profile,
        image_size: usize,
        embed_dim: usize,
        cond_dim: usize,
        latent_dim: usize,
    ) -> Result<Self> {
        let stages = halvings_to_four(image_size)
            .ok_or_else(|| Error::config(format!("stage-1 image size {image_size} is not 4·2^k with k ≥ 1")))?;
        let (base, hidden) = match profile {
            Profile::Paper => (64, 2048),
            Profile::Desk => (32, 256),
        };
        let config = CvaeConfig {
            image_size,
            embed_dim,
            cond_dim,
            latent_dim,
            channels: (0..stages).map(|i| base << i).collect(),
            hidden,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("cond_dim", self.cond_dim),
            ("latent_dim", self.latent_dim),
            ("hidden", self.hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        match halvings_to_four(self.image_size) {
            Some(n) if n == self.channels.len() && self.channels.iter().all(|&c| c > 0) => Ok(()),
            _ => Err(Error::config(format!(
                "{} conv stages cannot reduce {}×{} to 4×4",
                self.channels.len(),
                self.image_size,
                self.image_size
            ))),
        }
    }

    /// Flattened length of the final 4×4 conv map.
    pub fn bottleneck_features(&self) -> usize {
        self.channels.last().copied().unwrap_or(0) * 16
    }
}

#[derive(Clone, Debug)]
pub struct Cvae<T> {
    pub config: CvaeConfig,
    pub store: ParamStore<T>,
    pub cond_aug: CondAug,
    embed_plane: Dense,
    enc_convs: Vec<Block<Conv2d>>,
    enc_hidden: Dense,
    head_mu: Dense,
    head_log_var: Dense,
    dec_input: Dense,
    dec_norm: BatchNorm,
    dec_ups: Vec<Block<ConvTranspose2d>>,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub mu: Var,
    pub log_var: Var,
    /// Flattened 4×4 conv output.
    pub bottleneck: Var,
    /// Output of the dense layer feeding the two heads.
    pub hidden: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct CvaeForward {
    pub cond: ConditionVars,
    pub enc: EncoderVars,
    pub z: Var,
    pub x_hat: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct CvaeLossVars {
    pub recon: Var,
    pub kl: Var,
    pub total: Var,
}

/// Scalar losses of one training step. `total` is the optimized objective
/// `recon + kl + λ·kl_cond`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CvaeLosses {
    pub recon: f64,
    pub kl: f64,
    pub kl_cond: f64,
    pub total: f64,
}

/// A decoded sketch together with the condition that produced it.
#[derive(Clone, Debug)]
pub struct Stage1Sample<T> {
    pub image: Tensor<T>,
    pub condition: ConditionedLatent<T>,
}

impl<T: Scalar> Cvae<T> {
    pub fn new<R: Rng + ?Sized>(config: CvaeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let cond_aug = CondAug::new(s, "cond_aug", config.embed_dim, config.cond_dim, rng);
        let size = config.image_size;
        let embed_plane = Dense::new(s, "enc.plane", config.embed_dim, size * size, true, rng);

        let mut cin = 4;
        let mut enc_convs = Vec::new();
        for (i, &c) in config.channels.iter().enumerate() {
            enc_convs.push(layers::down(s, &format!("enc.conv{i}"), cin, c, Activation::Relu, rng));
            cin = c;
        }
        let enc_hidden = Dense::new(s, "enc.hidden", config.bottleneck_features(), config.hidden, true, rng);
        let head_mu = Dense::new(s, "enc.mu", config.hidden, config.latent_dim, true, rng);
        let head_log_var = Dense::new(s, "enc.log_var", config.hidden, config.latent_dim, true, rng);

        let top = *config.channels.last().expect("validated");
        let dec_input = Dense::new(s, "dec.input", config.latent_dim + config.cond_dim, top * 16, false, rng);
        let dec_norm = BatchNorm::new(s, "dec.input.bn", top);
        let mut widths: Vec<usize> = config.channels.iter().rev().copied().collect();
        widths.push(3);
        let dec_ups = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| layers::up(s, &format!("dec.up{i}"), w[0], w[1], i + 2 == widths.len(), rng))
            .collect();

        Ok(Cvae {
            config,
            store,
            cond_aug,
            embed_plane,
            enc_convs,
            enc_hidden,
            head_mu,
            head_log_var,
            dec_input,
            dec_norm,
            dec_ups,
        })
    }

    /// The same model at another precision (fresh store uid).
    pub fn cast<U: Scalar>(&self) -> Cvae<U> {
        Cvae {
            config: self.config.clone(),
            store: self.store.cast(),
            cond_aug: self.cond_aug.clone(),
            embed_plane: self.embed_plane.clone(),
            enc_convs: self.enc_convs.clone(),
            enc_hidden: self.enc_hidden.clone(),
            head_mu: self.head_mu.clone(),
            head_log_var: self.head_log_var.clone(),
            dec_input: self.dec_input.clone(),
            dec_norm: self.dec_norm.clone(),
            dec_ups: self.dec_ups.clone(),
        }
    }

    /// `image` is `[B, 3, S, S]`, `phi` is `[B, embed_dim]`.
    pub fn encode(&self, g: &mut Graph<T>, image: Var, phi: Var, mode: Mode) -> Result<EncoderVars> {
        let s = self.config.image_size;
        let shape = g.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::Tensor(cvaegan_tensor::TensorError::Dimension {
                op: "encode",
                axis: "image",
                expected: s,
                got: shape.get(2).copied().unwrap_or(0),
            }));
        }
        let b = shape[0];
        g.scope("enc.plane");
        let plane = self.embed_plane.forward(g, &self.store, phi, mode)?;
        let plane = g.reshape(plane, &[b, 1, s, s])?;
        let mut x = g.concat(&[image, plane])?;
        for (i, block) in self.enc_convs.iter().enumerate() {
            g.scope(format!("enc.conv{i}"));
            x = block.forward(g, &self.store, x, mode)?;
        }
        let bottleneck = g.flatten(x)?;
        g.scope("enc.hidden");
        let h = self.enc_hidden.forward(g, &self.store, bottleneck, mode)?;
        let hidden = g.relu(h)?;
        g.scope("enc.heads");
        let mu = self.head_mu.forward(g, &self.store, hidden, mode)?;
        let log_var = self.head_log_var.forward(g, &self.store, hidden, mode)?;
        Ok(EncoderVars {
            mu,
            log_var,
            bottleneck,
            hidden,
        })
    }

    /// `z` is `[B, latent_dim]`, `c_hat` is `[B, cond_dim]`; returns
    /// `[B, 3, S, S]` in `[-1, 1]`.
    pub fn decode(&self, g: &mut Graph<T>, z: Var, c_hat: Var, mode: Mode) -> Result<Var> {
        let (zs, cs) = (g.shape(z).to_vec(), g.shape(c_hat).to_vec());
        if zs.len() != 2 || zs[1] != self.config.latent_dim || cs.len() != 2 || cs[1] != self.config.cond_dim || zs[0] != cs[0]
        {
            return Err(Error::config(format!(
                "decode expects z [B, {}] and c_hat [B, {}], got {zs:?} and {cs:?}",
                self.config.latent_dim, self.config.cond_dim
            )));
        }
        let top = *self.config.channels.last().expect("validated");
        g.scope("dec.input");
        let zc = g.concat(&[z, c_hat])?;
        let h = self.dec_input.forward(g, &self.store, zc, mode)?;
        let h = g.reshape(h, &[zs[0], top, 4, 4])?;
        let h = self.dec_norm.forward(g, &self.store, h, mode)?;
        let mut x = g.relu(h)?;
        for (i, block) in self.dec_ups.iter().enumerate() {
            g.scope(format!("dec.up{i}"));
            x = block.forward(g, &self.store, x, mode)?;
        }
        Ok(x)
    }

    /// Full training-time pass: condition, encode, reparameterize, decode.
    /// `eps_c` is `[B, cond_dim]` and `eps_z` is `[B, latent_dim]`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        image: Var,
        phi: Var,
        eps_c: Tensor<T>,
        eps_z: Tensor<T>,
        mode: Mode,
    ) -> Result<CvaeForward> {
        g.scope("cond_aug");
        let cond = self.cond_aug.forward(g, &self.store, phi, eps_c, mode)?;
        let enc = self.encode(g, image, phi, mode)?;
        g.scope("reparameterize");
        let eps_z = g.constant(eps_z);
        let z = sample_condition(g, enc.mu, enc.log_var, eps_z)?;
        let x_hat = self.decode(g, z, cond.c_hat, mode)?;
        Ok(CvaeForward { cond, enc, z, x_hat })
    }

    /// Prior sample: `z ~ N(0, I)`, `c_hat` from conditioning augmentation,
    /// decoded in inference mode. Noise is drawn condition-first.
    pub fn generate<R: Rng + ?Sized>(&self, phi: &Tensor<T>, rng: &mut R) -> Result<Stage1Sample<T>> {
        let b = phi.shape().first().copied().unwrap_or(0);
        let eps_c = standard_normal([b, self.config.cond_dim], rng);
        let eps_z = standard_normal([b, self.config.latent_dim], rng);
        let mut g = Graph::new();
        let phi = g.constant(phi.clone());
        let cond = self.cond_aug.forward(&mut g, &self.store, phi, eps_c, Mode::EVAL)?;
        let z = g.constant(eps_z);
        let x = self.decode(&mut g, z, cond.c_hat, Mode::EVAL)?;
        Ok(Stage1Sample {
            image: g.value(x).clone(),
            condition: ConditionedLatent::from_graph(&g, cond),
        })
    }
}

/// `recon = Σ(x − x̂)² / B`, `kl` the Gaussian KL of the latent posterior,
/// `total = recon + kl`.
pub fn cvae_loss<T: Scalar>(g: &mut Graph<T>, x: Var, x_hat: Var, mu: Var, log_var: Var) -> Result<CvaeLossVars> {
    let batch = match g.shape(x) {
        [b, _, ..] => *b,
        _ => 1,
    };
    let diff = g.sub(x, x_hat)?;
    let sq = g.square(diff)?;
    let s = g.sum(sq)?;
    let recon = g.scale(s, 1.0 / batch as f64)?;
    let kl = kl_to_standard_normal(g, mu, log_var)?;
    let total = g.add(recon, kl)?;
    Ok(CvaeLossVars { recon, kl, total })
}

pub(crate) fn non_finite<T: Scalar>(g: &Graph<T>, loss: &str) -> Error {
    Error::NonFinite {
        loss: loss.to_string(),
        origin: g.describe_non_finite().unwrap_or_else(|| "an unknown node".into()),
    }
}

/// One optimizer step on `recon + kl + lambda·kl_cond` for a batch. Noise is
/// drawn from `rng` condition-first, then latent.
pub fn cvae_train_step<T: Scalar, R: Rng + ?Sized>(
    model: &mut Cvae<T>,
    batch: &Batch<T>,
    opt: &mut Adam<T>,
    lr: f64,
    lambda: f64,
    rng: &mut R,
) -> Result<CvaeLosses> {
    let b = batch.len();
    let eps_c = standard_normal([b, model.config.cond_dim], rng);
    let eps_z = standard_normal([b, model.config.latent_dim], rng);
    let mut g = Graph::new();
    let x = g.constant(batch.images.clone());
    let phi = g.constant(batch.embeddings.clone());
    let fwd = model.forward(&mut g, x, phi, eps_c, eps_z, Mode::TRAIN)?;
    g.scope("loss");
    let parts = cvae_loss(&mut g, x, fwd.x_hat, fwd.enc.mu, fwd.enc.log_var)?;
    let kl_cond = kl_to_standard_normal(&mut g, fwd.cond.mu, fwd.cond.log_var)?;
    let weighted = g.scale(kl_cond, lambda)?;
    let total = g.add(parts.total, weighted)?;

    let value = |v: Var| g.value(v).data()[0].as_f64();
    let losses = CvaeLosses {
        recon: value(parts.recon),
        kl: value(parts.kl),
        kl_cond: value(kl_cond),
        total: value(total),
    };
    if !losses.total.is_finite() {
        return Err(non_finite(&g, "stage-1"));
    }
    g.backward(total)?;
    model.store.absorb(&g);
    opt.step(&mut model.store, lr)?;
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss_of(x: &[f64], x_hat: &[f64], mu: &[f64], lv: &[f64]) -> (f64, f64, f64) {
        let mut g = Graph::<f64>::new();
        let n = x.len();
        let x = g.input(Tensor::from_f64([1, n], x).unwrap(), false);
        let x_hat = g.input(Tensor::from_f64([1, n], x_hat).unwrap(), false);
        let mu = g.input(Tensor::from_f64([1, mu.len()], mu).unwrap(), false);
        let lv = g.input(Tensor::from_f64([1, lv.len()], lv).unwrap(), false);
        let l = cvae_loss(&mut g, x, x_hat, mu, lv).unwrap();
        let v = |v| g.value(v).item().unwrap();
        (v(l.recon), v(l.kl), v(l.total))
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss_of(&[0.3, -0.2], &[0.3, -0.2], &[0.0], &[0.0]), (0.0, 0.0, 0.0));
        let (r, k, t) = loss_of(&[0.0], &[0.5], &[0.0], &[0.0]);
        assert_eq!((r, k, t), (0.25, 0.0, 0.25));
        // recon 2.0 (two pixels off by 1) plus KL 0.5.
        let (r, k, t) = loss_of(&[0.0, 0.0], &[1.0, -1.0], &[1.0], &[0.0]);
        assert_eq!(r, 2.0);
        assert!((k - 0.5).abs() < 1e-12 && (t - 2.5).abs() < 1e-12);
    }

    #[test]
    fn configs_follow_profiles() {
        let p = CvaeConfig::paper(1024);
        assert_eq!(p.channels, vec![64, 128, 256, 512]);
        assert_eq!(p.bottleneck_features(), 8192);
        assert_eq!(p.hidden, 2048);
        let d = CvaeConfig::desk(64);
        assert_eq!(d.channels, vec![32, 64]);
        assert!(CvaeConfig::for_profile(Profile::Desk, 24, 64, 128, 100).is_err());
    }

    #[test]
    fn desk_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Cvae::<f32>::new(CvaeConfig::desk(64), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([2, 3, 16, 16]));
        let phi = g.constant(Tensor::zeros([2, 64]));
        let f = model
            .forward(&mut g, x, phi, Tensor::zeros([2, 128]), Tensor::zeros([2, 100]), Mode::TRAIN)
            .unwrap();
        assert_eq!(g.shape(f.enc.mu), &[2, 100]);
        assert_eq!(g.shape(f.enc.log_var), &[2, 100]);
        assert_eq!(g.shape(f.enc.bottleneck), &[2, 64 * 16]);
        assert_eq!(g.shape(f.x_hat), &[2, 3, 16, 16]);
        assert!(g.value(f.x_hat).data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn wrong_image_size_is_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Cvae::<f32>::new(CvaeConfig::desk(8), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([2, 3, 32, 32]));
        let phi = g.constant(Tensor::zeros([2, 8]));
        let err = model.encode(&mut g, x, phi, Mode::TRAIN).unwrap_err();
        assert!(matches!(err, Error::Tensor(cvaegan_tensor::TensorError::Dimension { .. })));
        let z = g.constant(Tensor::zeros([2, 99]));
        let c = g.constant(Tensor::zeros([2, 128]));
        assert!(matches!(model.decode(&mut g, z, c, Mode::EVAL), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weights_give_zero_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = Cvae::<f64>::new(CvaeConfig::desk(8), &mut rng).unwrap();
        for id in model.store.ids().collect::<Vec<_>>() {
            if model.store.name(id).contains("weight") {
                let shape = model.store.value(id).shape().to_vec();
                model.store.set_value(id, Tensor::zeros(shape)).unwrap();
            }
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([2, 3, 16, 16], 0.3));
        let phi = g.constant(Tensor::full([2, 8], 1.0));
        let e = model.encode(&mut g, x, phi, Mode::EVAL).unwrap();
        assert!(g.value(e.mu).data().iter().chain(g.value(e.log_var).data()).all(|&v| v == 0.0));
    }

    #[test]
    fn generate_is_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Cvae::<f32>::new(CvaeConfig::desk(8), &mut rng).unwrap();
        let phi = Tensor::full([3, 8], 0.5);
        let a = model.generate(&phi, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = model.generate(&phi, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.image.shape(), &[3, 3, 16, 16]);
        assert!(a.image.data().iter().all(|v| v.abs() <= 1.0));
    }
}
