use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit indices of the three partitions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" | "valid" | "validation" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::InvalidInput(format!("no split named {other}"))),
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

impl Split {
    pub fn get(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// Seeded shuffle of `0..n`, then contiguous train/val/test blocks of
/// rounded sizes (the test block takes the remainder).
pub fn split(n: usize, ratios: [f64; 3], seed: u64) -> Result<Split> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {ratios:?} must sum to 1")));
    }
    let n_train = (n as f64 * ratios[0]).round() as usize;
    let n_val = (n as f64 * ratios[1]).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Config(format!(
            "split of {n} units at {ratios:?} leaves an empty partition"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(Split { train: order, val, test })
}

/// Number of units kept for a few-shot fraction: `ceil(fraction * n)`,
/// at least one.
pub fn few_shot_size(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("few-shot fraction {fraction} outside (0, 1]")));
    }
    // guard against products like 0.05 * 120 = 6.000000000000001
    let k = (fraction * n as f64 - 1e-9).ceil().max(1.0) as usize;
    Ok(k.min(n))
}

/// Prefix of one seeded permutation of `train`, so smaller fractions are
/// subsets of larger ones under the same seed.
pub fn few_shot_subset(train: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    let k = few_shot_size(train.len(), fraction)?;
    let mut order = train.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d));
    order.truncate(k);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        let s = split(10, [0.6, 0.2, 0.2], 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        let s = split(100, [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
    }

    #[test]
    fn deterministic_under_seed() {
        assert_eq!(split(50, [0.7, 0.1, 0.2], 9).unwrap(), split(50, [0.7, 0.1, 0.2], 9).unwrap());
        assert_ne!(split(50, [0.7, 0.1, 0.2], 9).unwrap(), split(50, [0.7, 0.1, 0.2], 10).unwrap());
    }

    #[test]
    fn empty_partition_rejected() {
        assert!(matches!(split(3, [0.6, 0.2, 0.2], 0), Err(Error::Config(_))));
        assert!(split(10, [0.5, 0.2, 0.2], 0).is_err());
    }

    #[test]
    fn few_shot_counts() {
        assert_eq!(few_shot_size(120, 0.05).unwrap(), 6);
        assert_eq!(few_shot_size(120, 0.01).unwrap(), 2);
        assert_eq!(few_shot_size(10, 1.0).unwrap(), 10);
        assert!(few_shot_size(10, 0.0).is_err());
    }

    #[test]
    fn few_shot_subsets_nest() {
        let train: Vec<usize> = (100..300).collect();
        let small = few_shot_subset(&train, 0.01, 4).unwrap();
        let big = few_shot_subset(&train, 0.05, 4).unwrap();
        assert!(small.iter().all(|u| big.contains(u)));
    }

    #[test]
    fn split_names() {
        assert_eq!("val".parse::<SplitName>().unwrap(), SplitName::Val);
        assert!("holdout".parse::<SplitName>().is_err());
    }
}
