//! CTC loss, decoding and character n-gram shallow fusion. The blank is always
//! the last column of a `[T × (V + 1)]` log-probability matrix.

mod decode;
mod lm;
mod loss;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use decode::{beam_decode, greedy_decode, BeamConfig};
pub use lm::{train_lm, CharNgramLM, LM_FORMAT};
pub use loss::{ctc_loss, min_frames};

/// Target token sequence; blanks excluded.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSeq(pub Vec<usize>);

impl LabelSeq {
    pub fn new(tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::domain(format!(
                "token {bad} outside vocabulary of size {vocab_size}"
            )));
        }
        Ok(LabelSeq(tokens))
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<usize>> for LabelSeq {
    fn from(v: Vec<usize>) -> Self {
        LabelSeq(v)
    }
}
