use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::grid::{make_grid, GRID_COLUMNS};
use super::losslog::LossLog;
use super::models::{load_stage1, stage1_checkpoint, stage1_from_checkpoint, stage2_checkpoint, stage2_config, stage2_from_checkpoint};
use crate::cgan::{cgan_train_step, Discriminator, Generator};
use crate::cvae::{cvae_train_step, Cvae};
use crate::data::{class_disjoint_split, epoch_batches, Dataset, LoadOptions};
use crate::error::{Error, Result};
use crate::imageio::save_png;
use crate::optim::{Adam, AdamConfig};
use crate::pipeline::generate_images;

pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const STAGE2_CKPT: &str = "stage2.ckpt";
pub const STAGE1_LOG: &str = "stage1_losses.csv";
pub const STAGE2_LOG: &str = "stage2_losses.csv";
const GRID_SIZE: usize = GRID_COLUMNS * GRID_COLUMNS;
const GRID_SALT: u64 = 0x6772_6964;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub log: LossLog,
    /// Sample grids written during the run, oldest first.
    pub grids: Vec<PathBuf>,
}

/// Loads the dataset named by `cfg` and splits it by class into
/// `(train, test)`.
pub fn load_split(cfg: &TrainConfig, hi_res: bool) -> Result<(Dataset, Dataset)> {
    let opts = LoadOptions {
        image_size: cfg.image_size,
        hi_res,
        crop_ratio: cfg.crop_ratio,
    };
    let ds = Dataset::load(&cfg.data_dir, &opts)?;
    if ds.embed_dim != cfg.embed_dim {
        return Err(Error::config(format!(
            "data embeddings have dim {} but the config declares {}",
            ds.embed_dim, cfg.embed_dim
        )));
    }
    let (train, test) = class_disjoint_split(&ds.classes(), cfg.n_train_classes, cfg.split_seed)?;
    Ok((ds.with_classes(&train), ds.with_classes(&test)))
}

fn prepare_out_dir(cfg: &TrainConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))
}

fn resumed_log(path: &Path, epoch: usize) -> Result<LossLog> {
    let mut log = if path.exists() { LossLog::load(path)? } else { LossLog::default() };
    log.truncate_to_epoch(epoch);
    Ok(log)
}

fn check_size(train: &Dataset, cfg: &TrainConfig) -> Result<()> {
    if train.len() < cfg.batch_size {
        return Err(Error::InsufficientData(format!(
            "{} training records for batch size {}",
            train.len(),
            cfg.batch_size
        )));
    }
    Ok(())
}

fn checkpoint_due(cfg: &TrainConfig, done: usize) -> bool {
    done % cfg.checkpoint_every == 0 || done == cfg.epochs
}

/// Trains the stage-1 model; writes `stage1.ckpt` and `stage1_losses.csv`
/// into `out_dir`.
pub fn train_stage1(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(Error::config("train_stage1 needs a stage=1 config"));
    }
    prepare_out_dir(cfg)?;
    let (train, _) = load_split(cfg, false)?;
    check_size(&train, cfg)?;
    let ckpt_path = cfg.out_dir.join(STAGE1_CKPT);
    let log_path = cfg.out_dir.join(STAGE1_LOG);

    let (mut model, mut adam, mut rng, start, mut log) = match &cfg.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let (stored, model, adam) = stage1_from_checkpoint(&ckpt)?;
            if stored.cvae_config()? != cfg.cvae_config()? {
                return Err(Error::config(format!("{}: architecture differs from the config", path.display())));
            }
            let start = ckpt.epoch as usize;
            (model, adam, ckpt.rng.restore(), start, resumed_log(&log_path, start)?)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let model = Cvae::new(cfg.cvae_config()?, &mut rng)?;
            (model, Adam::new(AdamConfig::default()), rng, 0, LossLog::default())
        }
    };
    let schedule = cfg.schedule()?;

    for epoch in start..cfg.epochs {
        let lr = schedule.lr_at(epoch);
        log.push(epoch, 0, "lr", lr);
        let mut sum = 0.0;
        let batches = epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        for (mb, idx) in batches.iter().enumerate() {
            let batch = train.batch(idx);
            match cvae_train_step(&mut model, &batch, &mut adam, lr, cfg.lambda, &mut rng) {
                Ok(l) => {
                    log.push(epoch, mb, "recon", l.recon);
                    log.push(epoch, mb, "kl", l.kl);
                    log.push(epoch, mb, "kl_cond", l.kl_cond);
                    log.push(epoch, mb, "total", l.total);
                    sum += l.total;
                }
                Err(e) => {
                    if matches!(e, Error::NonFinite { .. }) {
                        let path = cfg.out_dir.join("stage1_emergency.ckpt");
                        stage1_checkpoint(cfg, &model, &adam, epoch, &rng).save(&path)?;
                        log.save(&log_path)?;
                        log::error!("non-finite loss; emergency checkpoint at {}", path.display());
                    }
                    return Err(Error::Training {
                        epoch,
                        minibatch: mb,
                        source: Box::new(e),
                    });
                }
            }
        }
        log::info!(
            "stage 1 epoch {epoch}: lr {lr:e}, mean total {:.4}",
            sum / batches.len().max(1) as f64
        );
        if checkpoint_due(cfg, epoch + 1) {
            stage1_checkpoint(cfg, &model, &adam, epoch + 1, &rng).save(&ckpt_path)?;
            log.save(&log_path)?;
        }
    }
    if start >= cfg.epochs {
        stage1_checkpoint(cfg, &model, &adam, start, &rng).save(&ckpt_path)?;
        log.save(&log_path)?;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        log_path,
        log,
        grids: Vec::new(),
    })
}

fn write_grid(
    cfg: &TrainConfig,
    stage1: &Cvae<f32>,
    gen: &Generator<f32>,
    train: &Dataset,
    epoch: usize,
) -> Result<PathBuf> {
    let idx: Vec<usize> = (0..GRID_SIZE).map(|i| i % train.len()).collect();
    let phi = train.batch(&idx).embeddings;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ GRID_SALT);
    let (_, images) = generate_images(stage1, gen, &phi, &mut rng)?;
    let path = cfg.out_dir.join(format!("grid_epoch{epoch:04}.png"));
    save_png(&make_grid(&images, GRID_COLUMNS)?, &path)?;
    Ok(path)
}

/// Trains stage 2 against the frozen stage-1 model at `stage1_ckpt` (or the
/// config's `stage1_checkpoint`); writes `stage2.ckpt`, `stage2_losses.csv`
/// and a sample grid every `grid_every` epochs.
pub fn train_stage2(cfg: &TrainConfig, stage1_ckpt: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != 2 {
        return Err(Error::config("train_stage2 needs a stage=2 config"));
    }
    let s1_path = stage1_ckpt
        .or(cfg.stage1_checkpoint.as_deref())
        .ok_or_else(|| Error::config("stage 2 needs a stage-1 checkpoint"))?;
    if !s1_path.exists() {
        return Err(Error::config(format!("stage-1 checkpoint {} does not exist", s1_path.display())));
    }
    let stage1 = load_stage1(s1_path, cfg)?;
    prepare_out_dir(cfg)?;
    let (train, _) = load_split(cfg, true)?;
    check_size(&train, cfg)?;
    let ckpt_path = cfg.out_dir.join(STAGE2_CKPT);
    let log_path = cfg.out_dir.join(STAGE2_LOG);
    let cfg = &TrainConfig {
        stage1_checkpoint: Some(s1_path.to_path_buf()),
        ..cfg.clone()
    };

    let (mut gen, mut disc, mut opt_g, mut opt_d, mut rng, start, mut log) = match &cfg.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let (stored, gen, disc, opt_g, opt_d) = stage2_from_checkpoint(&ckpt)?;
            if stage2_config(&stored)? != stage2_config(cfg)? {
                return Err(Error::config(format!("{}: architecture differs from the config", path.display())));
            }
            let start = ckpt.epoch as usize;
            (gen, disc, opt_g, opt_d, ckpt.rng.restore(), start, resumed_log(&log_path, start)?)
        }
        None => {
            let arch = stage2_config(cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let gen = Generator::new(arch.generator, &mut rng);
            let disc = Discriminator::new(arch.discriminator, &mut rng);
            let opt = || Adam::new(AdamConfig::default());
            (gen, disc, opt(), opt(), rng, 0, LossLog::default())
        }
    };
    let schedule = cfg.schedule()?;
    let mut grids = Vec::new();

    for epoch in start..cfg.epochs {
        let lr = schedule.lr_at(epoch);
        log.push(epoch, 0, "lr", lr);
        let (mut sd, mut sg) = (0.0, 0.0);
        let batches = epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        for (mb, idx) in batches.iter().enumerate() {
            let batch = train.batch(idx);
            let step = cgan_train_step(
                &mut gen, &mut disc, &stage1, &batch, &mut opt_g, &mut opt_d, lr, cfg.lambda, &mut rng,
            );
            match step {
                Ok(l) => {
                    log.push(epoch, mb, "d_loss", l.d_loss);
                    log.push(epoch, mb, "g_loss", l.g_loss);
                    sd += l.d_loss;
                    sg += l.g_loss;
                }
                Err(e) => {
                    if matches!(e, Error::NonFinite { .. }) {
                        let path = cfg.out_dir.join("stage2_emergency.ckpt");
                        stage2_checkpoint(cfg, &gen, &disc, &opt_g, &opt_d, epoch, &rng).save(&path)?;
                        log.save(&log_path)?;
                        log::error!("non-finite loss; emergency checkpoint at {}", path.display());
                    }
                    return Err(Error::Training {
                        epoch,
                        minibatch: mb,
                        source: Box::new(e),
                    });
                }
            }
        }
        let n = batches.len().max(1) as f64;
        log::info!("stage 2 epoch {epoch}: lr {lr:e}, mean L_D {:.4}, mean L_G {:.4}", sd / n, sg / n);
        let done = epoch + 1;
        if done % cfg.grid_every == 0 || done == cfg.epochs {
            grids.push(write_grid(cfg, &stage1, &gen, &train, done)?);
        }
        if checkpoint_due(cfg, done) {
            stage2_checkpoint(cfg, &gen, &disc, &opt_g, &opt_d, done, &rng).save(&ckpt_path)?;
            log.save(&log_path)?;
        }
    }
    if start >= cfg.epochs {
        stage2_checkpoint(cfg, &gen, &disc, &opt_g, &opt_d, start, &rng).save(&ckpt_path)?;
        log.save(&log_path)?;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        log_path,
        log,
        grids,
    })
}
