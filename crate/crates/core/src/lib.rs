//! Invisible, budgeted text perturbations that reduce how much a language
//! model trained on crawled copies memorizes a document, together with the
//! machinery needed to measure it: instance exposure and exploitation,
//! membership-inference signals and attack metrics, and desk-scale
//! experiments driven by an in-repo n-gram scorer.
//!
//! The pipeline mirrors what a data owner does before publishing:
//!
//! 1. tokenize the text with a subword [`tokenizer::Vocabulary`],
//! 2. score it with a proxy model ([`scorer`]) and locate memorization
//!    triggers ([`triggers`]),
//! 3. build a [`perturb::PerturbationPlan`] (random, targeted, pitfall,
//!    optimized or OOV-splitting) within budget,
//! 4. render the plan invisibly ([`cloak`]) as zero-width characters or
//!    hidden HTML spans.
//!
//! [`metrics`], [`mia`] and [`harness`] evaluate the result.

pub mod catalog;
pub mod cloak;
pub mod error;
pub mod exec;
pub mod harness;
pub mod metrics;
pub mod mia;
pub mod optimize;
pub mod perturb;
pub mod rng;
pub mod scorer;
pub mod tokenizer;
pub mod triggers;

pub use catalog::InvisibleCatalog;
pub use error::{Error, Result};
pub use exec::Execution;
pub use tokenizer::{TokenId, TokenSeq, Vocabulary};
