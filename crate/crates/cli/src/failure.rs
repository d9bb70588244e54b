use std::fmt;

use textguard::harness::HarnessError;
use textguard::perturb::PerturbError;
use textguard::scorer::ScorerError;
use textguard::tokenizer::TokenizerError;

/// Process exit status for each failure class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Config = 2,
    Io = 3,
    Plan = 4,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(kind: Kind, error: impl Into<anyhow::Error>) -> Self {
        Self { kind, error: error.into() }
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        Self::new(Kind::Config, anyhow::anyhow!("{msg}"))
    }

    pub fn context(self, ctx: impl fmt::Display + Send + Sync + 'static) -> Self {
        Self { kind: self.kind, error: self.error.context(ctx) }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type Outcome<T> = Result<T, Failure>;

pub trait Classify<T> {
    fn kind(self, kind: Kind, ctx: impl fmt::Display + Send + Sync + 'static) -> Outcome<T>;

    fn io(self, ctx: impl fmt::Display + Send + Sync + 'static) -> Outcome<T>
    where
        Self: Sized,
    {
        self.kind(Kind::Io, ctx)
    }
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn kind(self, kind: Kind, ctx: impl fmt::Display + Send + Sync + 'static) -> Outcome<T> {
        self.map_err(|e| Failure::new(kind, e).context(ctx))
    }
}

pub fn tokenizer_kind(e: &TokenizerError) -> Kind {
    match e {
        TokenizerError::Io(_) => Kind::Io,
        TokenizerError::Format(_) => Kind::Config,
        _ => Kind::Plan,
    }
}

pub fn scorer_kind(e: &ScorerError) -> Kind {
    match e {
        ScorerError::Io(_) => Kind::Io,
        ScorerError::Format(_) | ScorerError::InvalidParameter(_) | ScorerError::VocabMismatch(_) => Kind::Config,
        _ => Kind::Plan,
    }
}

pub fn perturb_kind(e: &PerturbError) -> Kind {
    match e {
        PerturbError::InvalidParameter(_) | PerturbError::MissingProxy(..) => Kind::Config,
        _ => Kind::Plan,
    }
}

pub fn harness_kind(e: &HarnessError) -> Kind {
    match e {
        HarnessError::InvalidConfig(_) | HarnessError::InvalidCorpus(_) | HarnessError::CorpusTooSmall(_) => {
            Kind::Config
        }
        HarnessError::Io(_) => Kind::Io,
        HarnessError::Tokenizer(e) => tokenizer_kind(e),
        HarnessError::Scorer(e) => scorer_kind(e),
        HarnessError::Perturb(e) => perturb_kind(e),
        _ => Kind::Plan,
    }
}
