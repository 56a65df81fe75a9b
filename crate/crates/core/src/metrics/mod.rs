//! Inception Score and Fréchet distance computed with a small in-repo
//! classifier as the probability and feature network.

mod classifier;
mod gaussian;
mod report;
mod score;

pub use classifier::{train_classifier, Classifier, ClassifierConfig, ClassifierTraining, FEATURE_DIM};
pub use gaussian::{fid, fid_unclamped, fit_gaussian, matrix_sqrt_psd, GaussianStats};
pub use report::{evaluate, score_images, MetricReport, ACCURACY_THRESHOLD};
pub use score::{inception_score, IS_SPLITS, PROB_FLOOR};
