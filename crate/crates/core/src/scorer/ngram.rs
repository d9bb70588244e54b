use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ScoreVector, ScorerError, SequenceScorer};
use crate::tokenizer::{TokenId, TokenSeq};

pub const DEFAULT_ORDER: usize = 4;
pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NGramConfig {
    pub order: usize,
    pub alpha: f64,
    pub vocab_size: usize,
}

impl NGramConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self { order: DEFAULT_ORDER, alpha: DEFAULT_ALPHA, vocab_size }
    }

    pub fn with_order(mut self, order: usize) -> Self {
        self.order = order;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    fn validate(&self) -> Result<(), ScorerError> {
        if self.order < 1 {
            return Err(ScorerError::InvalidParameter("order must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(ScorerError::InvalidParameter("alpha must be positive".into()));
        }
        if self.vocab_size == 0 {
            return Err(ScorerError::InvalidParameter("vocab_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub tag: String,
    pub weight: f64,
}

/// Add-alpha smoothed n-gram model over a fixed vocabulary.
///
/// Contexts are the previous `order - 1` ids, left-padded with a reserved
/// begin-of-sequence id equal to `vocab_size`. Counts are real-valued so a
/// fit weight can stand in for training epochs.
#[derive(Clone, Debug)]
pub struct NGramModel {
    config: NGramConfig,
    counts: HashMap<Box<[TokenId]>, HashMap<TokenId, f64>>,
    context_totals: HashMap<Box<[TokenId]>, f64>,
    train_log: Vec<TrainRecord>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    order: usize,
    alpha: f64,
    vocab_size: usize,
    counts: Vec<(Vec<TokenId>, Vec<(TokenId, f64)>)>,
    train_log: Vec<TrainRecord>,
}

impl NGramModel {
    /// An untrained model: every conditional is uniform.
    pub fn empty(config: NGramConfig) -> Result<Self, ScorerError> {
        config.validate()?;
        Ok(Self {
            config,
            counts: HashMap::new(),
            context_totals: HashMap::new(),
            train_log: Vec::new(),
        })
    }

    pub fn fit<S: AsRef<[TokenId]>>(
        config: NGramConfig,
        corpus: &[S],
        weight: f64,
        tag: &str,
    ) -> Result<Self, ScorerError> {
        Self::empty(config)?.continual_update(corpus, weight, tag)
    }

    /// Adds `weight` to every n-gram of `corpus`. Fitting A then updating
    /// with B equals fitting on A and B together.
    pub fn continual_update<S: AsRef<[TokenId]>>(
        mut self,
        corpus: &[S],
        weight: f64,
        tag: &str,
    ) -> Result<Self, ScorerError> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(ScorerError::InvalidParameter("weight must be positive".into()));
        }
        for seq in corpus {
            if let Some(&id) = seq.as_ref().iter().find(|&&id| id as usize >= self.config.vocab_size) {
                return Err(ScorerError::VocabMismatch(format!(
                    "token id {id} does not fit a vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        let ctx_len = self.config.order - 1;
        let bos = self.bos();
        let mut ctx = Vec::with_capacity(ctx_len);
        for seq in corpus {
            let ids = seq.as_ref();
            for t in 0..ids.len() {
                fill_context(&mut ctx, ids, t, ctx_len, bos);
                let slot = self.counts.entry(ctx.clone().into_boxed_slice()).or_default();
                *slot.entry(ids[t]).or_default() += weight;
                *self.context_totals.entry(ctx.clone().into_boxed_slice()).or_default() += weight;
            }
        }
        self.train_log.push(TrainRecord { tag: tag.to_string(), weight });
        Ok(self)
    }

    pub fn config(&self) -> NGramConfig {
        self.config
    }

    pub fn order(&self) -> usize {
        self.config.order
    }

    pub fn alpha(&self) -> f64 {
        self.config.alpha
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn train_log(&self) -> &[TrainRecord] {
        &self.train_log
    }

    /// Reserved begin-of-sequence id.
    pub fn bos(&self) -> TokenId {
        self.config.vocab_size as TokenId
    }

    pub fn count(&self, context: &[TokenId], token: TokenId) -> f64 {
        self.counts.get(context).and_then(|m| m.get(&token)).copied().unwrap_or(0.0)
    }

    pub fn context_total(&self, context: &[TokenId]) -> f64 {
        self.context_totals.get(context).copied().unwrap_or(0.0)
    }

    /// Number of distinct contexts observed.
    pub fn num_contexts(&self) -> usize {
        self.counts.len()
    }

    /// The padded context preceding position `t` of `ids`.
    pub fn context_at(&self, ids: &[TokenId], t: usize) -> Vec<TokenId> {
        let mut ctx = Vec::with_capacity(self.config.order - 1);
        fill_context(&mut ctx, ids, t, self.config.order - 1, self.bos());
        ctx
    }

    /// P(token | context), with `context` already padded to `order - 1`.
    pub fn prob(&self, context: &[TokenId], token: TokenId) -> f64 {
        let a = self.config.alpha;
        (self.count(context, token) + a) / (self.context_total(context) + a * self.config.vocab_size as f64)
    }

    pub fn logprob(&self, context: &[TokenId], token: TokenId) -> f64 {
        self.prob(context, token).ln()
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<(), ScorerError> {
        match ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            Some(&id) => Err(ScorerError::InvalidId { id, vocab_size: self.config.vocab_size }),
            None => Ok(()),
        }
    }

    pub fn score_sequence(&self, seq: &TokenSeq) -> Result<ScoreVector, ScorerError> {
        self.score_ids(&seq.ids)
    }

    /// Log-probability of `ids[t]` for every `t` in `positions`.
    pub fn logprobs_at(&self, ids: &[TokenId], positions: impl IntoIterator<Item = usize>) -> Vec<f64> {
        let ctx_len = self.config.order - 1;
        let mut ctx = Vec::with_capacity(ctx_len);
        positions
            .into_iter()
            .map(|t| {
                fill_context(&mut ctx, ids, t, ctx_len, self.bos());
                self.logprob(&ctx, ids[t])
            })
            .collect()
    }

    /// The least likely next token after `prefix`; ties go to the smallest id.
    pub fn argmin_next_token(&self, prefix: &[TokenId]) -> TokenId {
        self.argmin_next_token_in(prefix, |_| true)
    }

    /// As [`argmin_next_token`](Self::argmin_next_token), restricted to ids
    /// accepted by `allowed`. Falls back to 0 if nothing is allowed.
    pub fn argmin_next_token_in(&self, prefix: &[TokenId], allowed: impl Fn(TokenId) -> bool) -> TokenId {
        let ctx = self.context_at(prefix, prefix.len());
        let seen = self.counts.get(ctx.as_slice());
        let mut best: Option<(f64, TokenId)> = None;
        for id in 0..self.config.vocab_size as TokenId {
            if !allowed(id) {
                continue;
            }
            let c = seen.and_then(|m| m.get(&id)).copied().unwrap_or(0.0);
            if c == 0.0 {
                // nothing can be smaller, and later ids lose the tie
                return id;
            }
            if best.is_none_or(|(bc, _)| c < bc) {
                best = Some((c, id));
            }
        }
        best.map_or(0, |b| b.1)
    }

    pub fn to_json(&self) -> String {
        let mut counts: Vec<(Vec<TokenId>, Vec<(TokenId, f64)>)> = self
            .counts
            .iter()
            .map(|(ctx, m)| {
                let mut row: Vec<(TokenId, f64)> = m.iter().map(|(&t, &c)| (t, c)).collect();
                row.sort_unstable_by_key(|(t, _)| *t);
                (ctx.to_vec(), row)
            })
            .collect();
        counts.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        let file = ModelFile {
            order: self.config.order,
            alpha: self.config.alpha,
            vocab_size: self.config.vocab_size,
            counts,
            train_log: self.train_log.clone(),
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ScorerError> {
        let file: ModelFile = serde_json::from_str(s).map_err(|e| ScorerError::Format(e.to_string()))?;
        let config = NGramConfig { order: file.order, alpha: file.alpha, vocab_size: file.vocab_size };
        let mut model = Self::empty(config)?;
        for (ctx, row) in file.counts {
            if ctx.len() != config.order - 1 {
                return Err(ScorerError::Format(format!("context of length {} for order {}", ctx.len(), config.order)));
            }
            let mut total = 0.0;
            let mut m = HashMap::with_capacity(row.len());
            for (t, c) in row {
                if !(c >= 0.0) || t as usize >= config.vocab_size {
                    return Err(ScorerError::Format(format!("bad count entry ({t}, {c})")));
                }
                total += c;
                m.insert(t, c);
            }
            model.context_totals.insert(ctx.clone().into_boxed_slice(), total);
            model.counts.insert(ctx.into_boxed_slice(), m);
        }
        model.train_log = file.train_log;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ScorerError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ScorerError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl SequenceScorer for NGramModel {
    fn score_ids(&self, ids: &[TokenId]) -> Result<ScoreVector, ScorerError> {
        self.check_ids(ids)?;
        Ok(ScoreVector { logprobs: self.logprobs_at(ids, 0..ids.len()) })
    }

    fn score_positions(&self, ids: &[TokenId], positions: &[usize]) -> Result<Vec<f64>, ScorerError> {
        self.check_ids(ids)?;
        if let Some(&p) = positions.iter().find(|&&p| p >= ids.len()) {
            return Err(ScorerError::InvalidParameter(format!("position {p} out of range for {} tokens", ids.len())));
        }
        Ok(self.logprobs_at(ids, positions.iter().copied()))
    }
}

fn fill_context(ctx: &mut Vec<TokenId>, ids: &[TokenId], t: usize, ctx_len: usize, bos: TokenId) {
    ctx.clear();
    for k in (1..=ctx_len).rev() {
        ctx.push(if t >= k { ids[t - k] } else { bos });
    }
}
