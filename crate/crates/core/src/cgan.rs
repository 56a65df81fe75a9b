//! Stage 2: a conditional GAN that refines stage-1 sketches to 4× resolution.

use cvaegan_tensor::{Activation, BatchNorm, Block, Conv2d, ConvTranspose2d, Dense, Graph, Mode, ParamStore, Scalar, Tensor, TensorError, Var};
use rand::Rng;

use crate::cond_aug::kl_to_standard_normal;
use crate::cvae::{non_finite, Cvae};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::layers::{self, LEAK};
use crate::optim::Adam;
use crate::profile::{halvings_to_four, Profile};

/// Probabilities are kept this far from 0 and 1 before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub input_size: usize,
    pub cond_dim: usize,
    /// Widths of the stride-2 convs taking the input down to 8×8.
    pub down: Vec<usize>,
    /// Channels of the spatially replicated condition projection.
    pub cond_proj: usize,
    pub residual_blocks: usize,
    /// Widths of all transposed convs but the last (which emits 3 channels).
    pub up: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub image_size: usize,
    pub embed_dim: usize,
    /// Widths of the stride-2 convs taking the image down to 4×4.
    pub channels: Vec<usize>,
    pub cond_proj: usize,
    /// Channels of the 1×1 reduction at 4×4.
    pub reduce: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Config {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Stage2Config {
    /// Widths for a stage-1 size `s`: the generator goes `s → 8 → 4s`, the
    /// discriminator goes `4s → 4` and ends at 128 channels (2048 features),
    /// reduced to 32 channels (512 features).
    pub fn for_profile(profile: Profile, stage1_size: usize, embed_dim: usize, cond_dim: usize) -> Result<Self> {
        let n_down = match halvings_to_four(stage1_size) {
            Some(n) if n >= 2 => n - 1,
            _ => {
                return Err(Error::config(format!(
                    "stage-1 size {stage1_size} cannot be taken down to 8×8 by stride-2 convs"
                )))
            }
        };
        let (g_base, g_proj, d_base, d_cap, d_proj) = match profile {
            Profile::Paper => (64, 128, 16, 128, 128),
            Profile::Desk => (16, 16, 8, 64, 16),
        };
        let down: Vec<usize> = (0..n_down).map(|i| g_base << i).collect();
        let top = *down.last().expect("n_down ≥ 1");
        let up = (0..n_down + 1).map(|i| (top >> i).max(1)).collect();
        let n_disc = halvings_to_four(4 * stage1_size).expect("4·(4·2^k) is 4·2^(k+2)");
        let channels = (0..n_disc)
            .map(|i| if i + 1 == n_disc { 128 } else { (d_base << i).min(d_cap) })
            .collect();
        let config = Stage2Config {
            generator: GeneratorConfig {
                input_size: stage1_size,
                cond_dim,
                down,
                cond_proj: g_proj,
                residual_blocks: 2,
                up,
            },
            discriminator: DiscriminatorConfig {
                image_size: 4 * stage1_size,
                embed_dim,
                channels,
                cond_proj: d_proj,
                reduce: 32,
            },
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.generator;
        let bottleneck = g.input_size >> g.down.len();
        if g.down.is_empty() || bottleneck << g.down.len() != g.input_size || g.up.len() != g.down.len() + 1 {
            return Err(Error::config("generator must mirror n stride-2 downs with n + 2 stride-2 ups"));
        }
        let d = &self.discriminator;
        if d.image_size != 4 * g.input_size {
            return Err(Error::config("discriminator must see 4× the stage-1 resolution"));
        }
        if halvings_to_four(d.image_size) != Some(d.channels.len()) {
            return Err(Error::config("discriminator convs must reduce the image to 4×4"));
        }
        let dims = [g.cond_dim, g.cond_proj, d.embed_dim, d.cond_proj, d.reduce];
        if dims.contains(&0) || g.down.iter().chain(&g.up).chain(&d.channels).any(|&c| c == 0) {
            return Err(Error::config("all stage-2 widths must be positive"));
        }
        Ok(())
    }
}

/// Two 3×3 conv + batch norm + ReLU layers added back onto the input.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub first: Block<Conv2d>,
    pub second: Block<Conv2d>,
}

impl ResBlock {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        let conv = |store: &mut ParamStore<T>, name: String, rng: &mut R| Block {
            layer: Conv2d::new(store, &name, channels, channels, 3, 1, 1, false, rng),
            norm: Some(BatchNorm::new(store, &format!("{name}.bn"), channels)),
            activation: Some(Activation::Relu),
        };
        ResBlock {
            first: conv(store, format!("{name}.conv0"), rng),
            second: conv(store, format!("{name}.conv1"), rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let h = self.first.forward(g, store, x, mode)?;
        let h = self.second.forward(g, store, h, mode)?;
        Ok(g.add(x, h)?)
    }
}

#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    pub store: ParamStore<T>,
    downs: Vec<Block<Conv2d>>,
    cond_proj: Dense,
    pub residual: Vec<ResBlock>,
    ups: Vec<Block<ConvTranspose2d>>,
}

impl<T: Scalar> Generator<T> {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let s = &mut store;
        let mut cin = 3;
        let downs = config
            .down
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let b = layers::down(s, &format!("gen.down{i}"), cin, c, Activation::Relu, rng);
                cin = c;
                b
            })
            .collect();
        let cond_proj = Dense::new(s, "gen.cond_proj", config.cond_dim, config.cond_proj, true, rng);
        let width = cin + config.cond_proj;
        let residual = (0..config.residual_blocks)
            .map(|i| ResBlock::new(s, &format!("gen.res{i}"), width, rng))
            .collect();
        let mut widths = vec![width];
        widths.extend(&config.up);
        widths.push(3);
        let ups = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| layers::up(s, &format!("gen.up{i}"), w[0], w[1], i + 2 == widths.len(), rng))
            .collect();
        Generator {
            config,
            store,
            downs,
            cond_proj,
            residual,
            ups,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            store: self.store.cast(),
            downs: self.downs.clone(),
            cond_proj: self.cond_proj.clone(),
            residual: self.residual.clone(),
            ups: self.ups.clone(),
        }
    }

    /// `s0` is `[B, 3, S, S]`, `c_hat` is `[B, cond_dim]`; returns
    /// `[B, 3, 4S, 4S]` in `[-1, 1]`.
    pub fn forward(&self, g: &mut Graph<T>, s0: Var, c_hat: Var, mode: Mode) -> Result<Var> {
        let s = self.config.input_size;
        let shape = g.shape(s0).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(TensorError::Dimension {
                op: "generator",
                axis: "image",
                expected: s,
                got: shape.get(2).copied().unwrap_or(0),
            }
            .into());
        }
        let mut x = s0;
        for (i, block) in self.downs.iter().enumerate() {
            g.scope(format!("gen.down{i}"));
            x = block.forward(g, &self.store, x, mode)?;
        }
        g.scope("gen.cond_proj");
        let c = self.cond_proj.forward(g, &self.store, c_hat, mode)?;
        let (h, w) = (g.shape(x)[2], g.shape(x)[3]);
        let c = g.broadcast_spatial(c, h, w)?;
        x = g.concat(&[x, c])?;
        for (i, block) in self.residual.iter().enumerate() {
            g.scope(format!("gen.res{i}"));
            x = block.forward(g, &self.store, x, mode)?;
        }
        for (i, block) in self.ups.iter().enumerate() {
            g.scope(format!("gen.up{i}"));
            x = block.forward(g, &self.store, x, mode)?;
        }
        Ok(x)
    }

    /// Inference-mode refinement of a batch of sketches.
    pub fn generate(&self, s0: &Tensor<T>, c_hat: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let s0 = g.constant(s0.clone());
        let c = g.constant(c_hat.clone());
        let out = self.forward(&mut g, s0, c, Mode::EVAL)?;
        Ok(g.value(out).clone())
    }
}

/// The first conv has a bias and no batch norm: real and fake batches are
/// normalized separately, so a normalized input layer would hide each
/// batch's mean colour from the discriminator.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub config: DiscriminatorConfig,
    pub store: ParamStore<T>,
    convs: Vec<Block<Conv2d>>,
    cond_proj: Dense,
    reduce: Block<Conv2d>,
    pub head: Dense,
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorVars {
    /// Flattened 4×4 conv output (2048 features at the standard widths).
    pub features: Var,
    /// Flattened 1×1 reduction (512 features).
    pub reduced: Var,
    pub logit: Var,
    pub prob: Var,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let s = &mut store;
        let mut cin = 3;
        let convs = config
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let name = format!("disc.conv{i}");
                let b = if i == 0 {
                    Block {
                        layer: Conv2d::new(s, &name, cin, c, 5, 2, 2, true, rng),
                        norm: None,
                        activation: Some(Activation::LeakyRelu(LEAK)),
                    }
                } else {
                    layers::down(s, &name, cin, c, Activation::LeakyRelu(LEAK), rng)
                };
                cin = c;
                b
            })
            .collect();
        let cond_proj = Dense::new(s, "disc.cond_proj", config.embed_dim, config.cond_proj, true, rng);
        let reduce = Block {
            layer: Conv2d::new(s, "disc.reduce", cin + config.cond_proj, config.reduce, 1, 1, 0, false, rng),
            norm: Some(BatchNorm::new(s, "disc.reduce.bn", config.reduce)),
            activation: Some(Activation::LeakyRelu(LEAK)),
        };
        let head = Dense::new(s, "disc.head", config.reduce * 16, 1, true, rng);
        Discriminator {
            config,
            store,
            convs,
            cond_proj,
            reduce,
            head,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config.clone(),
            store: self.store.cast(),
            convs: self.convs.clone(),
            cond_proj: self.cond_proj.clone(),
            reduce: self.reduce.clone(),
            head: self.head.clone(),
        }
    }

    /// `image` is `[B, 3, 4S, 4S]`, `phi` is `[B, embed_dim]`; `prob` is
    /// `[B, 1]`.
    pub fn forward(&self, g: &mut Graph<T>, image: Var, phi: Var, mode: Mode) -> Result<DiscriminatorVars> {
        let s = self.config.image_size;
        let shape = g.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(TensorError::Dimension {
                op: "discriminator",
                axis: "image",
                expected: s,
                got: shape.get(2).copied().unwrap_or(0),
            }
            .into());
        }
        let mut x = image;
        for (i, block) in self.convs.iter().enumerate() {
            g.scope(format!("disc.conv{i}"));
            x = block.forward(g, &self.store, x, mode)?;
        }
        let features = g.flatten(x)?;
        g.scope("disc.cond_proj");
        let c = self.cond_proj.forward(g, &self.store, phi, mode)?;
        let c = g.broadcast_spatial(c, 4, 4)?;
        let x = g.concat(&[x, c])?;
        g.scope("disc.reduce");
        let x = self.reduce.forward(g, &self.store, x, mode)?;
        let reduced = g.flatten(x)?;
        g.scope("disc.head");
        let logit = self.head.forward(g, &self.store, reduced, mode)?;
        let prob = g.sigmoid(logit)?;
        Ok(DiscriminatorVars {
            features,
            reduced,
            logit,
            prob,
        })
    }
}

fn log_clamped<T: Scalar>(g: &mut Graph<T>, p: Var) -> Result<Var> {
    let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    Ok(g.log(p)?)
}

fn log_one_minus_clamped<T: Scalar>(g: &mut Graph<T>, p: Var) -> Result<Var> {
    let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let neg = g.scale(p, -1.0)?;
    let q = g.add_scalar(neg, 1.0)?;
    Ok(g.log(q)?)
}

/// `mean log D(real) + mean log(1 − D(fake))`, to be maximized.
pub fn d_loss<T: Scalar>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    let a = log_clamped(g, d_real)?;
    let a = g.mean(a)?;
    let b = log_one_minus_clamped(g, d_fake)?;
    let b = g.mean(b)?;
    Ok(g.add(a, b)?)
}

/// `mean log(1 − D(fake)) + lambda·kl_cond`, to be minimized.
pub fn g_loss<T: Scalar>(g: &mut Graph<T>, d_fake: Var, kl_cond: Var, lambda: f64) -> Result<Var> {
    let a = log_one_minus_clamped(g, d_fake)?;
    let a = g.mean(a)?;
    let k = g.scale(kl_cond, lambda)?;
    Ok(g.add(a, k)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CganLosses {
    pub d_loss: f64,
    pub g_loss: f64,
    pub kl_cond: f64,
}

/// One discriminator step followed by one generator step.
///
/// Sketches and conditions come from `stage1` in inference mode and are held
/// constant, so no gradient reaches the stage-1 model. During the D step the
/// generator runs without gradients and its batch statistics are discarded;
/// the G step does the same for the discriminator.
#[allow(clippy::too_many_arguments)]
pub fn cgan_train_step<T: Scalar, R: Rng + ?Sized>(
    gen: &mut Generator<T>,
    disc: &mut Discriminator<T>,
    stage1: &Cvae<T>,
    batch: &Batch<T>,
    opt_g: &mut Adam<T>,
    opt_d: &mut Adam<T>,
    lr: f64,
    lambda: f64,
    rng: &mut R,
) -> Result<CganLosses> {
    let real = batch
        .images_hi
        .as_ref()
        .ok_or_else(|| Error::Contract("stage-2 batches need high-resolution images".into()))?;
    let sample = stage1.generate(&batch.embeddings, rng)?;
    let cond = &sample.condition;

    let mut g = Graph::new();
    let s0 = g.constant(sample.image.clone());
    let c_hat = g.constant(cond.c_hat.clone());
    let phi = g.constant(batch.embeddings.clone());
    let fake = gen.forward(&mut g, s0, c_hat, Mode::FROZEN)?;
    let real = g.constant(real.clone());
    let d_real = disc.forward(&mut g, real, phi, Mode::TRAIN)?;
    let d_fake = disc.forward(&mut g, fake, phi, Mode::TRAIN)?;
    g.scope("d_loss");
    let l_d = d_loss(&mut g, d_real.prob, d_fake.prob)?;
    let d_value = g.value(l_d).data()[0].as_f64();
    if !d_value.is_finite() {
        return Err(non_finite(&g, "discriminator"));
    }
    let objective = g.scale(l_d, -1.0)?;
    g.backward(objective)?;
    disc.store.absorb(&g);
    opt_d.step(&mut disc.store, lr)?;

    let mut g = Graph::new();
    let s0 = g.constant(sample.image);
    let c_hat = g.constant(cond.c_hat.clone());
    let phi = g.constant(batch.embeddings.clone());
    let fake = gen.forward(&mut g, s0, c_hat, Mode::TRAIN)?;
    let d_fake = disc.forward(&mut g, fake, phi, Mode::FROZEN)?;
    g.scope("g_loss");
    let mu = g.constant(cond.mu.clone());
    let log_var = g.constant(cond.log_var.clone());
    let kl = kl_to_standard_normal(&mut g, mu, log_var)?;
    let l_g = g_loss(&mut g, d_fake.prob, kl, lambda)?;
    let g_value = g.value(l_g).data()[0].as_f64();
    if !g_value.is_finite() {
        return Err(non_finite(&g, "generator"));
    }
    g.backward(l_g)?;
    gen.store.absorb(&g);
    opt_g.step(&mut gen.store, lr)?;

    Ok(CganLosses {
        d_loss: d_value,
        g_loss: g_value,
        kl_cond: g.value(kl).data()[0].as_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probs(g: &mut Graph<f64>, v: f64) -> Var {
        g.constant(Tensor::full([2, 1], v))
    }

    #[test]
    fn d_loss_examples() {
        let cases = [
            (0.5, 0.5, 2.0 * 0.5f64.ln()),
            (0.9, 0.1, 2.0 * 0.9f64.ln()),
            (1.0 - 1e-7, 1e-7, 2.0 * (1.0f64 - 1e-7).ln()),
        ];
        for (r, f, want) in cases {
            let mut g = Graph::new();
            let (r, f) = (probs(&mut g, r), probs(&mut g, f));
            let l = d_loss(&mut g, r, f).unwrap();
            assert!((g.value(l).item().unwrap() - want).abs() < 1e-12);
        }
        // Exact boundaries are clamped rather than producing infinities.
        let mut g = Graph::new();
        let (r, f) = (probs(&mut g, 0.0), probs(&mut g, 1.0));
        let l = d_loss(&mut g, r, f).unwrap();
        assert!(g.value(l).item().unwrap().is_finite());
    }

    #[test]
    fn g_loss_examples() {
        let cases = [(0.5, 0.0, 1.0, 0.5f64.ln()), (0.1, 0.5, 1.0, 0.9f64.ln() + 0.5), (0.1, 0.5, 0.0, 0.9f64.ln())];
        for (f, kl, lambda, want) in cases {
            let mut g = Graph::new();
            let f = probs(&mut g, f);
            let kl = g.constant(Tensor::scalar(kl));
            let l = g_loss(&mut g, f, kl, lambda).unwrap();
            assert!((g.value(l).item().unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn profile_widths() {
        let p = Stage2Config::for_profile(Profile::Paper, 64, 1024, 128).unwrap();
        assert_eq!(p.generator.down, vec![64, 128, 256]);
        assert_eq!(p.generator.up, vec![256, 128, 64, 32]);
        assert_eq!(p.discriminator.channels, vec![16, 32, 64, 128, 128, 128]);
        let d = Stage2Config::for_profile(Profile::Desk, 16, 64, 128).unwrap();
        assert_eq!(d.generator.down, vec![16]);
        assert_eq!(d.generator.up, vec![16, 8]);
        assert_eq!(d.discriminator.channels, vec![8, 16, 32, 128]);
        assert!(Stage2Config::for_profile(Profile::Desk, 8, 64, 128).is_err());
    }

    #[test]
    fn desk_shapes_and_ranges() {
        let cfg = Stage2Config::for_profile(Profile::Desk, 16, 8, 128).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gen = Generator::<f32>::new(cfg.generator.clone(), &mut rng);
        let disc = Discriminator::<f32>::new(cfg.discriminator.clone(), &mut rng);
        let mut g = Graph::new();
        let s0 = g.constant(Tensor::full([2, 3, 16, 16], 0.1));
        let c = g.constant(Tensor::full([2, 128], 0.2));
        let out = gen.forward(&mut g, s0, c, Mode::TRAIN).unwrap();
        assert_eq!(g.shape(out), &[2, 3, 64, 64]);
        assert!(g.value(out).data().iter().all(|v| v.abs() <= 1.0));
        let phi = g.constant(Tensor::full([2, 8], 0.3));
        let d = disc.forward(&mut g, out, phi, Mode::TRAIN).unwrap();
        assert_eq!(g.shape(d.features), &[2, 2048]);
        assert_eq!(g.shape(d.reduced), &[2, 512]);
        assert!(g.value(d.prob).data().iter().all(|&p| p > 0.0 && p < 1.0));

        let bad = g.constant(Tensor::zeros([2, 3, 32, 32]));
        assert!(matches!(gen.forward(&mut g, bad, c, Mode::EVAL), Err(Error::Tensor(_))));
    }

    #[test]
    fn zero_head_gives_half() {
        let cfg = Stage2Config::for_profile(Profile::Desk, 16, 8, 128).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut disc = Discriminator::<f64>::new(cfg.discriminator, &mut rng);
        disc.store.set_value(disc.head.weight, Tensor::zeros([512, 1])).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([2, 3, 64, 64], -0.4));
        let phi = g.constant(Tensor::full([2, 8], 1.0));
        let d = disc.forward(&mut g, x, phi, Mode::EVAL).unwrap();
        assert!(g.value(d.prob).data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn zeroed_second_conv_makes_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let block = ResBlock::new(&mut store, "r", 3, &mut rng);
        store.set_value(block.second.layer.weight, Tensor::zeros([3, 3, 3, 3])).unwrap();
        let x: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        for mode in [Mode::TRAIN, Mode::EVAL] {
            let mut g = Graph::new();
            let xv = g.constant(Tensor::from_f64([2, 3, 4, 4], &x).unwrap());
            let y = block.forward(&mut g, &store, xv, mode).unwrap();
            assert_eq!(g.value(y).data(), &x[..]);
        }
    }
}
