use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Index batches for one epoch: a permutation of `0..n` seeded by
/// `(seed, epoch)`, cut into `floor(n / batch_size)` full batches.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    if batch_size == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drops_partial_batch() {
        let b = epoch_batches(130, 64, 1, 0);
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|b| b.len() == 64));
    }

    #[test]
    fn deterministic_per_seed_and_epoch() {
        assert_eq!(epoch_batches(50, 8, 3, 2), epoch_batches(50, 8, 3, 2));
        assert_ne!(epoch_batches(50, 8, 3, 2), epoch_batches(50, 8, 3, 3));
    }

    #[test]
    fn no_duplicates() {
        let mut all: Vec<usize> = epoch_batches(100, 7, 9, 0).concat();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 98);
        assert!(all.iter().all(|&i| i < 100));
    }
}
