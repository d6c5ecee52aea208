use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ImageRecord, Split};
use crate::error::{Error, Result};

/// Train/val/test ratios plus the permutation seed. Splits are by image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [0.6, 0.2, 0.2],
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config(format!("split ratios must be non-negative: {:?}", self.ratios)));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// `(train, val, test)` counts for `n` images: val and test get
    /// `floor(n·r)`, train takes the remainder.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let floor = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
        let val = floor(self.ratios[1]);
        let test = floor(self.ratios[2]).min(n - val);
        (n - val - test, val, test)
    }
}

/// Assigns split tags through a seeded permutation of the records. The
/// returned records keep their input order.
pub fn split_corpus(mut records: Vec<ImageRecord>, spec: &SplitSpec) -> Result<Vec<ImageRecord>> {
    spec.validate()?;
    if let Some(r) = records.iter().find(|r| r.split != Split::Unassigned) {
        return Err(Error::Invalid(format!(
            "record `{}` already has split `{}`",
            r.image_id, r.split
        )));
    }
    let n = records.len();
    let (n_train, n_val, n_test) = spec.counts(n);
    for (count, ratio, name) in [
        (n_train, spec.ratios[0], "train"),
        (n_val, spec.ratios[1], "val"),
        (n_test, spec.ratios[2], "test"),
    ] {
        if count == 0 && ratio > 0.0 {
            return Err(Error::EmptySplit(name));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    for (rank, &idx) in order.iter().enumerate() {
        records[idx].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(records)
}
