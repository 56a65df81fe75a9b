//! Converting models to and from checkpoints.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, RngState};
use super::config::TrainConfig;
use crate::cgan::{Discriminator, Generator, Stage2Config};
use crate::cvae::Cvae;
use crate::error::{Error, Result};
use crate::metrics::{Classifier, ClassifierConfig};
use crate::optim::Adam;

/// Architectures are rebuilt from the stored config and then overwritten, so
/// the seed used here never shows.
fn scratch_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn stored_config(ckpt: &Checkpoint, stage: u8) -> Result<TrainConfig> {
    let cfg = TrainConfig::parse(&ckpt.config)?;
    if cfg.stage != stage {
        return Err(Error::config(format!(
            "expected a stage-{stage} checkpoint, found stage {}",
            cfg.stage
        )));
    }
    Ok(cfg)
}

pub fn stage1_checkpoint(cfg: &TrainConfig, model: &Cvae<f32>, adam: &Adam<f32>, epoch: usize, rng: &ChaCha8Rng) -> Checkpoint {
    let stored = TrainConfig {
        resume: None,
        ..cfg.clone()
    };
    let mut c = Checkpoint::new(stored.to_text(), epoch as u32, RngState::capture(rng));
    c.push_store("stage1", &model.store);
    c.push_adam("opt.stage1", adam, &model.store);
    c
}

/// The stage-1 model, its optimizer state and the config it was trained
/// with.
pub fn stage1_from_checkpoint(ckpt: &Checkpoint) -> Result<(TrainConfig, Cvae<f32>, Adam<f32>)> {
    let cfg = stored_config(ckpt, 1)?;
    let mut model = Cvae::new(cfg.cvae_config()?, &mut scratch_rng())?;
    ckpt.load_store("stage1", &mut model.store)?;
    let mut adam = Adam::new(Default::default());
    ckpt.load_adam("opt.stage1", &mut adam, &model.store)?;
    Ok((cfg, model, adam))
}

/// Loads a stage-1 model for use by `expected` (a stage-2 or resumed
/// stage-1 config), checking that the declared dimensions agree.
pub fn load_stage1(path: &Path, expected: &TrainConfig) -> Result<Cvae<f32>> {
    let ckpt = Checkpoint::load(path)?;
    let (cfg, model, _) = stage1_from_checkpoint(&ckpt)?;
    let pairs = [
        ("image_size", cfg.image_size, expected.image_size),
        ("embed_dim", cfg.embed_dim, expected.embed_dim),
        ("cond_dim", cfg.cond_dim, expected.cond_dim),
        ("latent_dim", cfg.latent_dim, expected.latent_dim),
    ];
    for (k, stored, want) in pairs {
        if stored != want {
            return Err(Error::config(format!(
                "{}: stage-1 checkpoint has {k}={stored} but the config declares {want}",
                path.display()
            )));
        }
    }
    if cfg.profile != expected.profile {
        return Err(Error::config(format!(
            "{}: stage-1 checkpoint uses the {} profile, config uses {}",
            path.display(),
            cfg.profile,
            expected.profile
        )));
    }
    Ok(model)
}

pub fn stage2_config(cfg: &TrainConfig) -> Result<Stage2Config> {
    Stage2Config::for_profile(cfg.profile, cfg.image_size, cfg.embed_dim, cfg.cond_dim)
}

#[allow(clippy::too_many_arguments)]
pub fn stage2_checkpoint(
    cfg: &TrainConfig,
    gen: &Generator<f32>,
    disc: &Discriminator<f32>,
    opt_g: &Adam<f32>,
    opt_d: &Adam<f32>,
    epoch: usize,
    rng: &ChaCha8Rng,
) -> Checkpoint {
    let stored = TrainConfig {
        resume: None,
        ..cfg.clone()
    };
    let mut c = Checkpoint::new(stored.to_text(), epoch as u32, RngState::capture(rng));
    c.push_store("gen", &gen.store);
    c.push_store("disc", &disc.store);
    c.push_adam("opt.gen", opt_g, &gen.store);
    c.push_adam("opt.disc", opt_d, &disc.store);
    c
}

pub type Stage2State = (TrainConfig, Generator<f32>, Discriminator<f32>, Adam<f32>, Adam<f32>);

pub fn stage2_from_checkpoint(ckpt: &Checkpoint) -> Result<Stage2State> {
    let cfg = stored_config(ckpt, 2)?;
    let arch = stage2_config(&cfg)?;
    let mut rng = scratch_rng();
    let mut gen = Generator::new(arch.generator, &mut rng);
    let mut disc = Discriminator::new(arch.discriminator, &mut rng);
    ckpt.load_store("gen", &mut gen.store)?;
    ckpt.load_store("disc", &mut disc.store)?;
    let mut opt_g = Adam::new(Default::default());
    let mut opt_d = Adam::new(Default::default());
    ckpt.load_adam("opt.gen", &mut opt_g, &gen.store)?;
    ckpt.load_adam("opt.disc", &mut opt_d, &disc.store)?;
    Ok((cfg, gen, disc, opt_g, opt_d))
}

/// Classifier weights with `image_size`, `num_classes`, and the held-out
/// accuracy in the config text.
pub fn classifier_checkpoint(cls: &Classifier, accuracy: f64, seed: u64) -> Checkpoint {
    let meta = format!(
        "image_size={}\nnum_classes={}\naccuracy={accuracy}\nseed={seed}\n",
        cls.config.image_size, cls.config.num_classes
    );
    let mut c = Checkpoint::new(meta, 0, RngState::capture(&ChaCha8Rng::seed_from_u64(seed)));
    c.push_store("cls", &cls.store);
    c
}

pub fn classifier_from_checkpoint(ckpt: &Checkpoint) -> Result<(Classifier, Option<f64>)> {
    let mut image_size = None;
    let mut num_classes = None;
    let mut accuracy = None;
    for line in ckpt.config.lines() {
        let bad = || Error::config(format!("bad classifier metadata line `{line}`"));
        let (k, v) = line.split_once('=').ok_or_else(bad)?;
        match k {
            "image_size" => image_size = Some(v.parse().map_err(|_| bad())?),
            "num_classes" => num_classes = Some(v.parse().map_err(|_| bad())?),
            "accuracy" => accuracy = Some(v.parse().map_err(|_| bad())?),
            "seed" => {}
            _ => return Err(bad()),
        }
    }
    let (Some(size), Some(classes)) = (image_size, num_classes) else {
        return Err(Error::config("classifier checkpoint lacks image_size or num_classes"));
    };
    let mut cls = Classifier::new(ClassifierConfig::new(size, classes)?, 0);
    ckpt.load_store("cls", &mut cls.store)?;
    Ok((cls, accuracy))
}
