//! Per-token conditional log-probabilities and the sequence loss.
//!
//! [`NGramModel`] is the in-repo stand-in for every model role in an
//! experiment (proxy, target, reference, exclusion model); [`RemoteScorer`]
//! forwards scoring to an HTTP endpoint that wraps a real model.

mod ngram;
mod remote;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::TokenId;

pub use ngram::{NGramConfig, NGramModel, TrainRecord, DEFAULT_ALPHA, DEFAULT_ORDER};
pub use remote::{remote_score, RemotePayload, RemoteScorer, RemoteScorerConfig};

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    InvalidId { id: TokenId, vocab_size: usize },
    #[error("cannot compute a loss over an empty sequence")]
    EmptySequence,
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("remote scorer timed out: {0}")]
    Timeout(String),
    #[error("cannot reach remote scorer: {0}")]
    Connection(String),
    #[error("remote scorer returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("remote scorer protocol violation: {0}")]
    Protocol(String),
    #[error("model format: {0}")]
    Format(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Natural-log conditional probabilities aligned with a token sequence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub logprobs: Vec<f64>,
}

impl ScoreVector {
    /// Wraps raw values, enforcing the `<= 0` invariant.
    pub fn new(logprobs: Vec<f64>) -> Result<Self, ScorerError> {
        if let Some((i, v)) = logprobs.iter().enumerate().find(|(_, v)| !(**v <= 0.0)) {
            return Err(ScorerError::Protocol(format!("logprob[{i}] = {v} is not <= 0")));
        }
        Ok(Self { logprobs })
    }

    pub fn len(&self) -> usize {
        self.logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprobs.is_empty()
    }

    /// Per-token negative log-likelihoods.
    pub fn nll(&self) -> impl Iterator<Item = f64> + '_ {
        self.logprobs.iter().map(|l| -l)
    }
}

/// Mean negative log-likelihood: the training loss and log-perplexity.
pub fn sequence_loss(scores: &ScoreVector) -> Result<f64, ScorerError> {
    if scores.is_empty() {
        return Err(ScorerError::EmptySequence);
    }
    Ok(-scores.logprobs.iter().sum::<f64>() / scores.len() as f64)
}

/// Anything that can assign log-probabilities to a token sequence.
pub trait SequenceScorer: Sync {
    fn score_ids(&self, ids: &[TokenId]) -> Result<ScoreVector, ScorerError>;

    /// Log-probabilities at selected positions of `ids`.
    fn score_positions(&self, ids: &[TokenId], positions: &[usize]) -> Result<Vec<f64>, ScorerError> {
        let all = self.score_ids(ids)?;
        positions
            .iter()
            .map(|&p| {
                all.logprobs.get(p).copied().ok_or_else(|| {
                    ScorerError::InvalidParameter(format!("position {p} out of range for {} tokens", ids.len()))
                })
            })
            .collect()
    }
}
