use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Deterministically partitions the distinct classes in `class_ids` into
/// `n_train` training classes and the rest for testing. Both halves are
/// returned sorted.
pub fn class_disjoint_split(class_ids: &[usize], n_train: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut classes: Vec<usize> = class_ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if n_train == 0 || n_train >= classes.len() {
        return Err(Error::config(format!(
            "n_train must lie in 1..{} for {} classes, got {n_train}",
            classes.len(),
            classes.len()
        )));
    }
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = classes.split_off(n_train);
    classes.sort_unstable();
    test.sort_unstable();
    Ok((classes, test))
}
