use serde::{Deserialize, Serialize};

use crate::ctc::LabelSeq;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    General,
    Target,
}

/// Two-valued speaker attribute the general anchor pool is balanced over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BalanceAttr {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T × feat_dim]`
    pub feats: Tensor,
    pub reference: LabelSeq,
    domain: Domain,
    pub balance_attr: BalanceAttr,
    /// Instance CTC loss from the most recent scoring pass.
    pub last_loss: Option<f64>,
}

impl Utterance {
    pub fn new(
        id: impl Into<String>,
        feats: Tensor,
        reference: LabelSeq,
        domain: Domain,
        balance_attr: BalanceAttr,
    ) -> Self {
        Utterance {
            id: id.into(),
            feats,
            reference,
            domain,
            balance_attr,
            last_loss: None,
        }
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn frames(&self) -> usize {
        self.feats.rows()
    }
}
