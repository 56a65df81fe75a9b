use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const IS_SPLITS: usize = 10;
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean and (population) standard deviation over `n_splits` contiguous
/// splits of `exp(mean_x KL(p(y|x) ‖ p(y)))`. `probs` is `N × C` with rows
/// summing to one.
pub fn inception_score(probs: &DMatrix<f64>, n_splits: usize) -> Result<(f64, f64)> {
    let (n, c) = probs.shape();
    if n_splits == 0 || n < n_splits {
        return Err(Error::InsufficientData(format!("{n} samples for {n_splits} splits")));
    }
    for (i, row) in probs.row_iter().enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Contract(format!("row {i} is not a probability vector (sum {s})")));
        }
    }
    let scores: Vec<f64> = (0..n_splits)
        .map(|k| {
            let (lo, hi) = (k * n / n_splits, (k + 1) * n / n_splits);
            let rows = probs.rows(lo, hi - lo);
            let marginal: Vec<f64> = (0..c).map(|j| rows.column(j).mean().max(PROB_FLOOR)).collect();
            let kl: f64 = rows
                .row_iter()
                .map(|r| {
                    r.iter()
                        .zip(&marginal)
                        .map(|(&p, &m)| {
                            let p = p.max(PROB_FLOOR);
                            p * (p.ln() - m.ln())
                        })
                        .sum::<f64>()
                })
                .sum();
            (kl / (hi - lo) as f64).exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / n_splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n_splits as f64;
    Ok((mean, var.sqrt()))
}
