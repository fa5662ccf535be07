//! Gloss vocabulary construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Ordered gloss inventory with a reserved CTC blank class.
///
/// The blank index is `glosses.len()`: gloss classes occupy `0..size` and
/// blank is appended last, so a classifier over this vocabulary has
/// `size + 1` outputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlossVocabulary {
    pub glosses: Vec<String>,
    pub blank_index: usize,
    pub primitive_seeds: Vec<u64>,
}

impl GlossVocabulary {
    pub fn size(&self) -> usize {
        self.glosses.len()
    }

    /// Class count including the blank.
    pub fn class_count(&self) -> usize {
        self.glosses.len() + 1
    }
}

/// Builds a vocabulary of `size` glosses, each with a deterministic motion
/// primitive seed drawn from `seed`.
pub fn build_vocabulary(size: usize, seed: u64) -> Result<GlossVocabulary> {
    if size < 2 {
        return Err(Error::invalid(format!(
            "vocabulary size must be at least 2, got {size}"
        )));
    }
    let width = (size - 1).to_string().len().max(2);
    let glosses: Vec<String> = (0..size).map(|i| format!("g{i:0width$}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let primitive_seeds: Vec<u64> = (0..size).map(|_| rng.gen()).collect();
    Ok(GlossVocabulary {
        glosses,
        blank_index: size,
        primitive_seeds,
    })
}
