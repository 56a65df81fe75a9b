//! Flat `key=value` training configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cond_aug::COND_DIM;
use crate::cvae::{CvaeConfig, LATENT_DIM};
use crate::data::DEFAULT_CROP_RATIO;
use crate::error::{Error, Result};
use crate::optim::Schedule;
use crate::profile::Profile;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub profile: Profile,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub seed: u64,
    /// Stage-1 resolution; stage 2 works at four times this.
    pub image_size: usize,
    pub embed_dim: usize,
    pub cond_dim: usize,
    pub latent_dim: usize,
    pub lambda: f64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub checkpoint_every: usize,
    pub grid_every: usize,
    pub n_train_classes: usize,
    pub split_seed: u64,
    pub crop_ratio: f64,
    pub stage1_checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

const KEYS: [&str; 22] = [
    "stage",
    "profile",
    "epochs",
    "batch_size",
    "lr",
    "decay_factor",
    "decay_every",
    "seed",
    "image_size",
    "embed_dim",
    "cond_dim",
    "latent_dim",
    "lambda",
    "data_dir",
    "out_dir",
    "checkpoint_every",
    "grid_every",
    "n_train_classes",
    "split_seed",
    "crop_ratio",
    "stage1_checkpoint",
    "resume",
];

impl TrainConfig {
    /// Published hyper-parameters: 64×64 sketches, 150 epochs per stage,
    /// batch 64, learning rate 0.0002 (stage 1) or 0.002 (stage 2) decayed by
    /// 0.2 every 25 epochs, 150 of 200 classes for training.
    pub fn paper(stage: u8) -> Self {
        TrainConfig {
            stage,
            profile: Profile::Paper,
            epochs: 150,
            batch_size: 64,
            lr: if stage == 2 { 0.002 } else { 0.0002 },
            decay_factor: 0.2,
            decay_every: 25,
            seed: 0,
            image_size: 64,
            embed_dim: 1024,
            cond_dim: COND_DIM,
            latent_dim: LATENT_DIM,
            lambda: 1.0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            checkpoint_every: 10,
            grid_every: 10,
            n_train_classes: 150,
            split_seed: 0,
            crop_ratio: DEFAULT_CROP_RATIO,
            stage1_checkpoint: None,
            resume: None,
        }
    }

    /// Laptop-sized runs on the synthetic shapes: 16×16 sketches, 50 + 30
    /// epochs, 18 of 24 classes for training. Stage 2 uses batches of 16 so
    /// the GAN gets enough updates in 30 epochs.
    pub fn desk(stage: u8) -> Self {
        TrainConfig {
            profile: Profile::Desk,
            epochs: if stage == 2 { 30 } else { 50 },
            batch_size: if stage == 2 { 16 } else { 64 },
            image_size: 16,
            embed_dim: crate::data::EMBED_DIM,
            n_train_classes: 18,
            ..Self::paper(stage)
        }
    }

    /// Parses `key=value` lines (`#` starts a comment). `stage` and `profile`
    /// select the defaults that the remaining keys override.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::config(format!("line {}: unknown key `{k}`", i + 1)));
            }
            if pairs.insert(k, (i + 1, v)).is_some() {
                return Err(Error::config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
        }
        fn get<T: FromStr>(pairs: &BTreeMap<&str, (usize, &str)>, key: &str) -> Result<Option<T>> {
            pairs
                .get(key)
                .map(|&(line, v)| {
                    v.parse()
                        .map_err(|_| Error::config(format!("line {line}: invalid value `{v}` for `{key}`")))
                })
                .transpose()
        }
        let stage: u8 = get(&pairs, "stage")?.unwrap_or(1);
        let profile = match pairs.get("profile") {
            Some(&(_, v)) => v.parse()?,
            None => Profile::Desk,
        };
        let mut c = match profile {
            Profile::Desk => Self::desk(stage),
            Profile::Paper => Self::paper(stage),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = get(&pairs, stringify!($field))? {
                    c.$field = v;
                }
            )*};
        }
        set!(
            epochs,
            batch_size,
            lr,
            decay_factor,
            decay_every,
            seed,
            image_size,
            embed_dim,
            cond_dim,
            latent_dim,
            lambda,
            data_dir,
            out_dir,
            checkpoint_every,
            grid_every,
            n_train_classes,
            split_seed,
            crop_ratio
        );
        if let Some(p) = get::<PathBuf>(&pairs, "stage1_checkpoint")? {
            c.stage1_checkpoint = Some(p);
        }
        if let Some(p) = get::<PathBuf>(&pairs, "resume")? {
            c.resume = Some(p);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key in a fixed order; [`parse`](Self::parse) reads it back to an
    /// equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("stage", &self.stage);
        kv("profile", &self.profile);
        kv("epochs", &self.epochs);
        kv("batch_size", &self.batch_size);
        kv("lr", &self.lr);
        kv("decay_factor", &self.decay_factor);
        kv("decay_every", &self.decay_every);
        kv("seed", &self.seed);
        kv("image_size", &self.image_size);
        kv("embed_dim", &self.embed_dim);
        kv("cond_dim", &self.cond_dim);
        kv("latent_dim", &self.latent_dim);
        kv("lambda", &self.lambda);
        kv("data_dir", &self.data_dir.display());
        kv("out_dir", &self.out_dir.display());
        kv("checkpoint_every", &self.checkpoint_every);
        kv("grid_every", &self.grid_every);
        kv("n_train_classes", &self.n_train_classes);
        kv("split_seed", &self.split_seed);
        kv("crop_ratio", &self.crop_ratio);
        if let Some(p) = &self.stage1_checkpoint {
            kv("stage1_checkpoint", &p.display());
        }
        if let Some(p) = &self.resume {
            kv("resume", &p.display());
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stage == 1 || self.stage == 2) {
            return Err(Error::config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("image_size", self.image_size),
            ("embed_dim", self.embed_dim),
            ("cond_dim", self.cond_dim),
            ("latent_dim", self.latent_dim),
            ("checkpoint_every", self.checkpoint_every),
            ("grid_every", self.grid_every),
            ("n_train_classes", self.n_train_classes),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{k} must be positive")));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2 for batch normalization"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.crop_ratio > 0.0 && self.crop_ratio <= 1.0) {
            return Err(Error::config(format!("crop_ratio must lie in (0, 1], got {}", self.crop_ratio)));
        }
        self.schedule()?;
        self.cvae_config()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.lr, self.decay_factor, self.decay_every)
    }

    pub fn cvae_config(&self) -> Result<CvaeConfig> {
        CvaeConfig::for_profile(self.profile, self.image_size, self.embed_dim, self.cond_dim, self.latent_dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults() {
        let c = TrainConfig::paper(1);
        assert_eq!((c.epochs, c.batch_size, c.lr, c.image_size), (150, 64, 0.0002, 64));
        assert_eq!(TrainConfig::paper(2).lr, 0.002);
        assert_eq!((c.cond_dim, c.latent_dim, c.lambda), (128, 100, 1.0));
    }

    #[test]
    fn parse_overrides_profile_defaults() {
        let c = TrainConfig::parse("# desk run\nprofile = desk\nstage=2\nepochs=3\nlr=0.01\n").unwrap();
        assert_eq!(c.profile, Profile::Desk);
        assert_eq!((c.stage, c.epochs, c.lr, c.image_size), (2, 3, 0.01, 16));
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::desk(2);
        c.lr = 0.1 + 0.2;
        c.stage1_checkpoint = Some("runs/a b/stage1.ckpt".into());
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_duplicate_and_invalid() {
        assert!(TrainConfig::parse("colour=red").is_err());
        assert!(TrainConfig::parse("epochs=1\nepochs=2").is_err());
        assert!(TrainConfig::parse("epochs=many").is_err());
        assert!(TrainConfig::parse("image_size=24").is_err());
        assert!(TrainConfig::parse("batch_size=1").is_err());
        assert!(TrainConfig::parse("stage=3").is_err());
    }
}
