//! Replay buffer with hard-example mining, absolute-gradient importance and
//! the elastic penalty, plus their composition into training objectives.

mod buffer;
mod fisher;
mod objective;
mod utterance;

pub use buffer::{mixed_batch, sample_buffer, BufferSnapshot, ReplayBuffer, SnapshotEntry};
pub use fisher::{abs_fisher, AbsFisherAccumulator, FisherState};
pub use objective::{total_objective, Objective};
pub use utterance::{BalanceAttr, Domain, Utterance};
