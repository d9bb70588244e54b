//! Memorization triggers: the positions a proxy model finds hardest to
//! predict.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scorer::ScoreVector;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TriggerError {
    #[error("cannot select triggers from an empty score vector")]
    EmptyScores,
    #[error("trigger count k must be >= 1")]
    ZeroK,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerSet {
    /// Token positions, ascending.
    pub indices: Vec<usize>,
    /// Proxy log-probability at each index.
    pub severities: Vec<f64>,
    pub k: usize,
}

impl TriggerSet {
    /// Indices ordered from most to least severe (earliest first on ties).
    pub fn by_severity(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.indices.len()).collect();
        order.sort_by(|&a, &b| {
            self.severities[a].total_cmp(&self.severities[b]).then(self.indices[a].cmp(&self.indices[b]))
        });
        order.into_iter().map(|i| self.indices[i]).collect()
    }
}

/// Positions of the `k` lowest log-probabilities, earliest position first on
/// ties, returned in position order.
pub fn identify_triggers(scores: &ScoreVector, k: usize) -> Result<TriggerSet, TriggerError> {
    if scores.is_empty() {
        return Err(TriggerError::EmptyScores);
    }
    if k == 0 {
        return Err(TriggerError::ZeroK);
    }
    let lp = &scores.logprobs;
    let mut order: Vec<usize> = (0..lp.len()).collect();
    order.sort_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(a.cmp(&b)));
    order.truncate(k.min(lp.len()));
    order.sort_unstable();
    Ok(TriggerSet { severities: order.iter().map(|&i| lp[i]).collect(), indices: order, k })
}
