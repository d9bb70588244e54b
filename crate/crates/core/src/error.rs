use thiserror::Error;

use crate::cloak::CloakError;
use crate::harness::HarnessError;
use crate::metrics::MetricsError;
use crate::mia::MiaError;
use crate::optimize::OptimizeError;
use crate::perturb::PerturbError;
use crate::scorer::ScorerError;
use crate::tokenizer::TokenizerError;
use crate::triggers::TriggerError;

/// Umbrella error for callers that drive several modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Trigger(#[from] TriggerError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error(transparent)]
    Cloak(#[from] CloakError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Mia(#[from] MiaError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
