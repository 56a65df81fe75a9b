use cvaegan_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classifier::Classifier;
use super::gaussian::{fid, fit_gaussian};
use super::score::{inception_score, IS_SPLITS};
use crate::cgan::Generator;
use crate::cvae::Cvae;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::pipeline::generate_images;

pub const ACCURACY_THRESHOLD: f64 = 0.9;
const COV_REGULARIZER: f64 = 1e-6;

/// Scores of one evaluation. Values are only comparable between reports
/// sharing a `classifier_id`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub inception_score_mean: f64,
    pub inception_score_std: f64,
    pub fid: f64,
    pub n_samples: usize,
    pub classifier_id: String,
    pub classifier_accuracy: Option<f64>,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// IS of `generated` and FID between `generated` and `real`, both
/// `[N, 3, H, W]` at the classifier's resolution.
pub fn score_images(
    classifier: &Classifier,
    accuracy: Option<f64>,
    generated: &Tensor<f32>,
    real: &Tensor<f32>,
) -> Result<MetricReport> {
    let mut warnings = Vec::new();
    if let Some(acc) = accuracy.filter(|&a| a < ACCURACY_THRESHOLD) {
        warnings.push(format!(
            "metric-unreliable: classifier accuracy {acc:.3} is below {ACCURACY_THRESHOLD}"
        ));
    }
    let (probs, gen_feats) = classifier.outputs(generated)?;
    let (_, real_feats) = classifier.outputs(real)?;
    let n = probs.nrows();
    if n == 0 {
        return Err(Error::InsufficientData("no generated samples".into()));
    }
    let (is_mean, is_std) = inception_score(&probs, IS_SPLITS.min(n))?;

    let d = gen_feats.ncols();
    let mut gen_stats = fit_gaussian(&gen_feats)?;
    let mut real_stats = fit_gaussian(&real_feats)?;
    for (name, count, stats) in [("generated", n, &mut gen_stats), ("real", real_feats.nrows(), &mut real_stats)] {
        if count < d + 1 {
            warnings.push(format!(
                "singular covariance: {count} {name} samples for {d} features; added {COV_REGULARIZER:e}·I"
            ));
            stats.regularize(COV_REGULARIZER);
        }
    }
    let fid = fid(&real_stats, &gen_stats)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(MetricReport {
        inception_score_mean: is_mean,
        inception_score_std: is_std,
        fid,
        n_samples: n,
        classifier_id: classifier.id(),
        classifier_accuracy: accuracy,
        warnings,
    })
}

/// Generates `n_samples` images from the embeddings of `real` (cycling
/// through its records) and scores them against the real images.
pub fn evaluate(
    stage1: &Cvae<f32>,
    stage2: &Generator<f32>,
    classifier: &Classifier,
    accuracy: Option<f64>,
    real: &Dataset,
    n_samples: usize,
    seed: u64,
) -> Result<MetricReport> {
    if real.is_empty() || !real.has_hi_res() {
        return Err(Error::InsufficientData("evaluation needs real high-resolution images".into()));
    }
    let idx: Vec<usize> = (0..n_samples).map(|i| i % real.len()).collect();
    let phi = real.batch(&idx).embeddings;
    let (_, generated) = generate_images(stage1, stage2, &phi, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let real_images = real.all().images_hi.expect("checked above");
    score_images(classifier, accuracy, &generated, &real_images)
}
