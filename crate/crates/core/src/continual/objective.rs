use serde::{Deserialize, Serialize};

use super::fisher::FisherState;
use crate::error::{Error, Result};

/// How the per-step loss is assembled. Replay modes expect the batch to be
/// composed from stream and buffer already.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Naive,
    Er,
    Ewc,
    Hybrid,
}

impl Objective {
    pub fn uses_replay(self) -> bool {
        matches!(self, Objective::Er | Objective::Hybrid)
    }

    pub fn uses_penalty(self) -> bool {
        matches!(self, Objective::Ewc | Objective::Hybrid)
    }
}

/// Batch CTC term plus, for penalty modes, the elastic term on both loss and gradient.
pub fn total_objective(
    batch_ctc_loss: f64,
    batch_ctc_grad: &[f64],
    fs: &FisherState,
    theta: &[f64],
    mode: Objective,
) -> Result<(f64, Vec<f64>)> {
    if batch_ctc_grad.len() != theta.len() {
        return Err(Error::shape(format!(
            "CTC gradient has {} entries, parameters {}",
            batch_ctc_grad.len(),
            theta.len()
        )));
    }
    if !mode.uses_penalty() {
        return Ok((batch_ctc_loss, batch_ctc_grad.to_vec()));
    }
    let (pl, pg) = fs.penalty(theta)?;
    let grad = batch_ctc_grad.iter().zip(&pg).map(|(a, b)| a + b).collect();
    Ok((batch_ctc_loss + pl, grad))
}
