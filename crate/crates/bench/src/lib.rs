//! Fixtures shared by the criterion benches.

use chunklm::{MemoryEntry, MemoryStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_bytes(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..256)).collect()
}

pub fn random_vectors(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

/// Store filled with `n` random entries from distinct sequences.
pub fn filled_store(mut store: MemoryStore, n: usize, d: usize, seed: u64) -> MemoryStore {
    for (i, key) in random_vectors(n, d, seed).into_iter().enumerate() {
        store
            .store(MemoryEntry::new(&key, &key, i as u64, 0))
            .expect("store entry");
    }
    store
}
