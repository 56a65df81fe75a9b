use std::path::{Path, PathBuf};

use cvaegan_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::grid::{make_grid, GRID_COLUMNS};
use super::models::{classifier_checkpoint, classifier_from_checkpoint, load_stage1, stage2_from_checkpoint};
use super::train::load_split;
use crate::data::{load_embeddings, Dataset, LoadOptions};
use crate::error::{Error, Result};
use crate::imageio::{save_png, tensor_to_rgb};
use crate::metrics::{evaluate, train_classifier, Classifier, ClassifierTraining, MetricReport};
use crate::pipeline::generate_images;

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generates one image per embedding row (cycling when `n` exceeds the
/// table) and writes `sample_NNNN.png` files plus `grid.png` into
/// `out_dir`. Returns the written paths, grid last.
pub fn generate_cmd(
    stage1_ckpt: &Path,
    stage2_ckpt: &Path,
    emb_file: &Path,
    n: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let table = load_embeddings(emb_file)?;
    if table.count == 0 || n == 0 {
        return Err(Error::InsufficientData("nothing to generate".into()));
    }
    let (cfg, gen, _, _, _) = stage2_from_checkpoint(&Checkpoint::load(stage2_ckpt)?)?;
    let stage1 = load_stage1(stage1_ckpt, &cfg)?;
    if table.dim != cfg.embed_dim {
        return Err(Error::config(format!(
            "{} holds {}-dim embeddings; the models expect {}",
            emb_file.display(),
            table.dim,
            cfg.embed_dim
        )));
    }
    let rows: Vec<f32> = (0..n).flat_map(|i| table.row(i % table.count).iter().copied()).collect();
    let phi = Tensor::new([n, table.dim], rows)?;
    let (_, images) = generate_images(&stage1, &gen, &phi, &mut ChaCha8Rng::seed_from_u64(seed))?;

    ensure_dir(out_dir)?;
    let mut paths = Vec::with_capacity(n + 1);
    for i in 0..n {
        let path = out_dir.join(format!("sample_{i:04}.png"));
        save_png(&tensor_to_rgb(&images, i)?, &path)?;
        paths.push(path);
    }
    let grid = out_dir.join("grid.png");
    save_png(&make_grid(&images, GRID_COLUMNS)?, &grid)?;
    paths.push(grid);
    Ok(paths)
}

/// Scores the stacked model on the held-out classes of `data_dir` (split as
/// in the stage-1 config) and writes `metrics.json` next to the stage-2
/// checkpoint.
pub fn evaluate_cmd(
    stage1_ckpt: &Path,
    stage2_ckpt: &Path,
    data_dir: &Path,
    classifier_ckpt: &Path,
    n: usize,
    seed: u64,
) -> Result<MetricReport> {
    let (cfg, gen, _, _, _) = stage2_from_checkpoint(&Checkpoint::load(stage2_ckpt)?)?;
    let stage1 = load_stage1(stage1_ckpt, &cfg)?;
    let (classifier, accuracy) = classifier_from_checkpoint(&Checkpoint::load(classifier_ckpt)?)?;
    let cfg = super::config::TrainConfig {
        data_dir: data_dir.to_path_buf(),
        ..cfg
    };
    let (_, test) = load_split(&cfg, true)?;
    let report = evaluate(&stage1, &gen, &classifier, accuracy, &test, n, seed)?;
    let path = stage2_ckpt.with_file_name("metrics.json");
    std::fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct ClassifierOutcome {
    pub classifier: Classifier,
    /// Accuracy on a held-out fifth of the records.
    pub accuracy: f64,
    pub checkpoint: PathBuf,
}

/// Trains the evaluation classifier on a random 80/20 record split of all
/// classes at stage-2 resolution `4·image_size` and saves it to `out`.
pub fn train_classifier_cmd(
    data_dir: &Path,
    image_size: usize,
    crop_ratio: f64,
    opts: &ClassifierTraining,
    out: &Path,
) -> Result<ClassifierOutcome> {
    let ds = Dataset::load(
        data_dir,
        &LoadOptions {
            image_size,
            hi_res: true,
            crop_ratio,
        },
    )?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let n_test = ds.len() / 5;
    if n_test == 0 {
        return Err(Error::InsufficientData(format!("{} records cannot be split for testing", ds.len())));
    }
    let (test_idx, train_idx) = order.split_at(n_test);
    let train = ds.select(train_idx);
    let test = ds.select(test_idx);
    let classifier = train_classifier(&train, opts)?;
    let batch = test.all();
    let accuracy = classifier.accuracy(&batch.images_hi.expect("loaded at high resolution"), &batch.labels)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    classifier_checkpoint(&classifier, accuracy, opts.seed).save(out)?;
    Ok(ClassifierOutcome {
        classifier,
        accuracy,
        checkpoint: out.to_path_buf(),
    })
}
