use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded uniform 8:1:1 split of `0..n`.
pub fn random_split(n: usize, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n * 8).div_ceil(10);
    let n_val = (n - n_train) / 2;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Split { train: idx, val, test }
}
