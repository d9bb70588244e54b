//! Perturbation plans: where to insert what, within a budget.
//!
//! A plan is a list of edits against a tokenized document. Insert edits add
//! whole vocabulary tokens at a gap between tokens (UDP, UNP, TP, TP-P,
//! TP-OP); split edits put one invisible character inside a token (TP-OOV,
//! TP-OOV++). The budget `m = floor(b * t)` counts insertion events: tokens
//! for inserts, characters for splits.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{codepoint_label, parse_codepoint_label, InvisibleCatalog};
use crate::cloak;
use crate::exec::Execution;
use crate::optimize::{self, OptimizeError};
use crate::rng::seeded;
use crate::scorer::{NGramModel, ScoreVector, ScorerError, SequenceScorer};
use crate::tokenizer::{token_edit_distance, TokenId, TokenSeq, TokenizerError, Vocabulary};
use crate::triggers::{identify_triggers, TriggerError};

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("plan does not match the token sequence: {0}")]
    PlanMismatch(String),
    #[error("{0} is not in the invisible catalog")]
    NonCatalogChar(String),
    #[error("strategy {0} needs {1}")]
    MissingProxy(Strategy, &'static str),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Trigger(#[from] TriggerError),
    #[error(transparent)]
    Optimize(#[from] Box<OptimizeError>),
    #[error(transparent)]
    Cloak(#[from] Box<cloak::CloakError>),
}

impl From<cloak::CloakError> for PerturbError {
    fn from(e: cloak::CloakError) -> Self {
        PerturbError::Cloak(Box::new(e))
    }
}

impl From<OptimizeError> for PerturbError {
    fn from(e: OptimizeError) -> Self {
        PerturbError::Optimize(Box::new(e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    /// No protection; the control arm of an experiment.
    #[serde(rename = "np")]
    Np,
    #[serde(rename = "udp")]
    Udp,
    #[serde(rename = "unp")]
    Unp,
    #[serde(rename = "tp")]
    Tp,
    #[serde(rename = "tp-p")]
    TpP,
    #[serde(rename = "tp-op")]
    TpOp,
    #[serde(rename = "tp-oov")]
    TpOov,
    #[serde(rename = "tp-oov++")]
    TpOovPp,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Np,
        Strategy::Udp,
        Strategy::Unp,
        Strategy::Tp,
        Strategy::TpP,
        Strategy::TpOp,
        Strategy::TpOov,
        Strategy::TpOovPp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Np => "np",
            Strategy::Udp => "udp",
            Strategy::Unp => "unp",
            Strategy::Tp => "tp",
            Strategy::TpP => "tp-p",
            Strategy::TpOp => "tp-op",
            Strategy::TpOov => "tp-oov",
            Strategy::TpOovPp => "tp-oov++",
        }
    }

    /// Whether the plan needs proxy scores at all.
    pub fn needs_scores(self) -> bool {
        !matches!(self, Strategy::Np | Strategy::Udp | Strategy::Unp)
    }

    /// Whether the plan needs next-token distributions (n-gram proxy only).
    pub fn needs_ngram(self) -> bool {
        matches!(self, Strategy::TpP | Strategy::TpOp)
    }

    pub fn splits_tokens(self) -> bool {
        matches!(self, Strategy::TpOov | Strategy::TpOovPp)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InvisibleMode {
    #[serde(rename = "chars")]
    Chars,
    #[serde(rename = "style-display-none")]
    DisplayNone,
    #[serde(rename = "style-offscreen")]
    Offscreen,
    #[serde(rename = "style-fontzero")]
    FontZero,
}

impl InvisibleMode {
    pub const ALL: [InvisibleMode; 4] =
        [InvisibleMode::Chars, InvisibleMode::DisplayNone, InvisibleMode::Offscreen, InvisibleMode::FontZero];

    pub fn name(self) -> &'static str {
        match self {
            InvisibleMode::Chars => "chars",
            InvisibleMode::DisplayNone => "style-display-none",
            InvisibleMode::Offscreen => "style-offscreen",
            InvisibleMode::FontZero => "style-fontzero",
        }
    }
}

impl FromStr for InvisibleMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        InvisibleMode::ALL
            .into_iter()
            .find(|m| m.name() == s || m.name().trim_start_matches("style-") == s)
            .ok_or_else(|| format!("unknown invisible mode {s:?}"))
    }
}

pub const DEFAULT_TAU: usize = 50;
pub const DEFAULT_BATCH: usize = 32;
pub const DEFAULT_CAND_K: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuardConfig {
    pub strategy: Strategy,
    /// Budget b in (0, 1].
    pub budget: f64,
    pub seed: u64,
    pub invisible_mode: InvisibleMode,
    pub beta1: i8,
    pub beta2: i8,
    pub tau: usize,
    pub batch_size: usize,
    pub cand_k: usize,
    /// Trigger slot count override; defaults to the insertion budget.
    pub slots: Option<usize>,
    pub catalog: InvisibleCatalog,
    /// How optimizer batches are evaluated.
    pub execution: Execution,
}

impl Default for GuardConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::TpOov,
            budget: 0.4,
            seed: 0,
            invisible_mode: InvisibleMode::Chars,
            beta1: -1,
            beta2: -1,
            tau: DEFAULT_TAU,
            batch_size: DEFAULT_BATCH,
            cand_k: DEFAULT_CAND_K,
            slots: None,
            catalog: InvisibleCatalog::default(),
            execution: Execution::default(),
        }
    }
}

impl GuardConfig {
    pub fn new(strategy: Strategy, budget: f64, seed: u64) -> Self {
        Self { strategy, budget, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PerturbError> {
        if !(self.budget > 0.0 && self.budget <= 1.0) {
            return Err(PerturbError::InvalidParameter(format!("budget {} outside (0, 1]", self.budget)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(-1..=1).contains(&b) {
                return Err(PerturbError::InvalidParameter(format!("{name} must be -1, 0 or 1")));
            }
        }
        if matches!(self.strategy, Strategy::TpOp | Strategy::TpOovPp)
            && (self.tau == 0 || self.batch_size == 0 || self.cand_k == 0)
        {
            return Err(PerturbError::InvalidParameter("tau, batch_size and cand_k must be >= 1".into()));
        }
        if self.slots == Some(0) {
            return Err(PerturbError::InvalidParameter("slots must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Edit {
    Insert {
        #[serde(rename = "pos")]
        position: usize,
        #[serde(rename = "ids")]
        token_ids: Vec<TokenId>,
    },
    Split {
        #[serde(rename = "tok")]
        token_index: usize,
        #[serde(rename = "off")]
        char_offset: usize,
        #[serde(rename = "char", with = "char_label")]
        ch: char,
    },
}

mod char_label {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(c: &char, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&codepoint_label(*c))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<char, D::Error> {
        let s = String::deserialize(d)?;
        parse_codepoint_label(&s).ok_or_else(|| serde::de::Error::custom(format!("bad codepoint label {s:?}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationPlan {
    pub edits: Vec<Edit>,
    #[serde(rename = "spent")]
    pub budget_spent: usize,
}

impl PerturbationPlan {
    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }

    fn from_edits(edits: Vec<Edit>) -> Self {
        let budget_spent = edits
            .iter()
            .map(|e| match e {
                Edit::Insert { token_ids, .. } => token_ids.len(),
                Edit::Split { .. } => 1,
            })
            .sum();
        Self { edits, budget_spent }
    }

    /// Insert edits grouped by gap, in edit order within a gap.
    pub fn inserts_by_gap(&self) -> BTreeMap<usize, Vec<TokenId>> {
        let mut out: BTreeMap<usize, Vec<TokenId>> = BTreeMap::new();
        for e in &self.edits {
            if let Edit::Insert { position, token_ids } = e {
                out.entry(*position).or_default().extend_from_slice(token_ids);
            }
        }
        out
    }

    /// Split edits grouped by token, sorted by offset.
    pub fn splits_by_token(&self) -> BTreeMap<usize, Vec<(usize, char)>> {
        let mut out: BTreeMap<usize, Vec<(usize, char)>> = BTreeMap::new();
        for e in &self.edits {
            if let Edit::Split { token_index, char_offset, ch } = e {
                out.entry(*token_index).or_default().push((*char_offset, *ch));
            }
        }
        for v in out.values_mut() {
            v.sort_unstable();
        }
        out
    }

    /// Checks every invariant of the plan against `seq`.
    pub fn validate(&self, seq: &TokenSeq, catalog: &InvisibleCatalog) -> Result<(), PerturbError> {
        let t = seq.len();
        let mut seen = HashSet::new();
        for e in &self.edits {
            match e {
                Edit::Insert { position, token_ids } => {
                    if *position > t {
                        return Err(PerturbError::PlanMismatch(format!("insert at gap {position} > {t}")));
                    }
                    if token_ids.is_empty() {
                        return Err(PerturbError::PlanMismatch("insert edit without tokens".into()));
                    }
                }
                Edit::Split { token_index, char_offset, ch } => {
                    let Some(&(s, e)) = seq.spans.get(*token_index) else {
                        return Err(PerturbError::PlanMismatch(format!("split of token {token_index} >= {t}")));
                    };
                    if *char_offset == 0 || *char_offset >= e - s {
                        return Err(PerturbError::PlanMismatch(format!(
                            "split offset {char_offset} not interior to token {token_index} of length {}",
                            e - s
                        )));
                    }
                    if !catalog.contains(*ch) {
                        return Err(PerturbError::NonCatalogChar(codepoint_label(*ch)));
                    }
                    if !seen.insert((*token_index, *char_offset)) {
                        return Err(PerturbError::PlanMismatch(format!(
                            "two splits at token {token_index} offset {char_offset}"
                        )));
                    }
                }
            }
        }
        if PerturbationPlan::from_edits(self.edits.clone()).budget_spent != self.budget_spent {
            return Err(PerturbError::PlanMismatch("budget_spent disagrees with edits".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plan serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "warning", rename_all = "snake_case")]
pub enum PlanWarning {
    /// floor(b * t) is zero; nothing was inserted.
    ZeroBudget,
    /// Too few tokens for the strategy's slot geometry.
    SequenceTooShort { tokens: usize },
    /// Every trigger is a single character and cannot be split.
    NoEligibleTrigger,
    /// Split offsets ran out before the budget did.
    BudgetUnspent { unspent: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub plan: PerturbationPlan,
    pub warnings: Vec<PlanWarning>,
}

impl PlanOutcome {
    fn noop(w: PlanWarning) -> Self {
        Self { plan: PerturbationPlan::default(), warnings: vec![w] }
    }
}

/// m = floor(b * t).
pub fn budget(b: f64, t: usize) -> Result<usize, PerturbError> {
    if !(b > 0.0 && b <= 1.0) {
        return Err(PerturbError::InvalidParameter(format!("budget {b} outside (0, 1]")));
    }
    // the epsilon absorbs products like 0.29 * 100 = 28.999999999999996
    Ok(((b * t as f64) + 1e-9).floor() as usize)
}

/// Splits `m` items over `k` slots: floor(m/k) each, the first m mod k get one more.
pub fn distribute(m: usize, k: usize) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    (0..k).map(|j| m / k + usize::from(j < m % k)).collect()
}

/// Token ids eligible as random fill: everything except catalog characters.
pub fn fill_candidates(vocab: &Vocabulary, catalog: &InvisibleCatalog) -> Vec<TokenId> {
    let excluded: HashSet<TokenId> = catalog.chars().iter().filter_map(|c| vocab.id_of(&c.to_string())).collect();
    (0..vocab.len() as TokenId).filter(|id| !excluded.contains(id)).collect()
}

fn uniform_fills<R: Rng>(rng: &mut R, pool: &[TokenId], gaps: &[usize], m: usize) -> Vec<Edit> {
    let tokens: Vec<TokenId> = (0..m).map(|_| pool[rng.random_range(0..pool.len())]).collect();
    let mut it = tokens.into_iter();
    gaps.iter()
        .zip(distribute(m, gaps.len()))
        .map(|(&position, n)| Edit::Insert { position, token_ids: it.by_ref().take(n).collect() })
        .collect()
}

/// Uniform deterministic perturbation: K = min(m, t-1) evenly spaced gaps.
pub fn plan_udp(cfg: &GuardConfig, vocab: &Vocabulary, seq: &TokenSeq) -> Result<PlanOutcome, PerturbError> {
    let t = seq.len();
    let m = budget(cfg.budget, t)?;
    if m == 0 {
        return Ok(PlanOutcome::noop(PlanWarning::ZeroBudget));
    }
    if t < 2 {
        return Ok(PlanOutcome::noop(PlanWarning::SequenceTooShort { tokens: t }));
    }
    let k = m.min(t - 1);
    let gaps: Vec<usize> = (0..k).map(|j| (j + 1) * t / (k + 1)).collect();
    let mut rng = seeded(cfg.seed);
    let pool = fill_candidates(vocab, &cfg.catalog);
    Ok(PlanOutcome { plan: PerturbationPlan::from_edits(uniform_fills(&mut rng, &pool, &gaps, m)), warnings: vec![] })
}

/// Uniform non-deterministic perturbation: K distinct random interior gaps.
pub fn plan_unp(cfg: &GuardConfig, vocab: &Vocabulary, seq: &TokenSeq) -> Result<PlanOutcome, PerturbError> {
    let t = seq.len();
    let m = budget(cfg.budget, t)?;
    if m == 0 {
        return Ok(PlanOutcome::noop(PlanWarning::ZeroBudget));
    }
    if t < 2 {
        return Ok(PlanOutcome::noop(PlanWarning::SequenceTooShort { tokens: t }));
    }
    let k = m.min(t - 1);
    let mut rng = seeded(cfg.seed);
    let mut gaps: Vec<usize> = index::sample(&mut rng, t - 1, k).into_iter().map(|g| g + 1).collect();
    gaps.sort_unstable();
    let pool = fill_candidates(vocab, &cfg.catalog);
    Ok(PlanOutcome { plan: PerturbationPlan::from_edits(uniform_fills(&mut rng, &pool, &gaps, m)), warnings: vec![] })
}

fn check_scores(seq: &TokenSeq, scores: &ScoreVector) -> Result<(), PerturbError> {
    if seq.len() != scores.len() {
        return Err(PerturbError::PlanMismatch(format!(
            "{} proxy scores for {} tokens",
            scores.len(),
            seq.len()
        )));
    }
    Ok(())
}

/// Trigger-slot layout shared by TP, TP-P and TP-OP: (m, trigger gaps in
/// position order, trigger set).
pub(crate) fn trigger_slots(
    cfg: &GuardConfig,
    seq: &TokenSeq,
    scores: &ScoreVector,
) -> Result<Option<(usize, crate::triggers::TriggerSet)>, PerturbError> {
    check_scores(seq, scores)?;
    let t = seq.len();
    let m = budget(cfg.budget, t)?;
    if m == 0 || t == 0 {
        return Ok(None);
    }
    let k = cfg.slots.unwrap_or(m).min(m).min(t);
    Ok(Some((m, identify_triggers(scores, k)?)))
}

/// Targeted perturbation: uniform fills immediately before each trigger.
pub fn plan_tp(
    cfg: &GuardConfig,
    vocab: &Vocabulary,
    seq: &TokenSeq,
    proxy_scores: &ScoreVector,
) -> Result<PlanOutcome, PerturbError> {
    let Some((m, triggers)) = trigger_slots(cfg, seq, proxy_scores)? else {
        return Ok(PlanOutcome::noop(PlanWarning::ZeroBudget));
    };
    let mut rng = seeded(cfg.seed);
    let pool = fill_candidates(vocab, &cfg.catalog);
    Ok(PlanOutcome {
        plan: PerturbationPlan::from_edits(uniform_fills(&mut rng, &pool, &triggers.indices, m)),
        warnings: vec![],
    })
}

/// Original ids with `fills[s]` inserted before `gaps[s]`, cut at gap
/// `upto` after `upto_fills` tokens of that gap's own fill.
fn prefix_with_fills(ids: &[TokenId], gaps: &[usize], fills: &[Vec<TokenId>], slot: usize) -> Vec<TokenId> {
    let cut = gaps[slot];
    let mut out = Vec::with_capacity(cut + fills.iter().map(Vec::len).sum::<usize>());
    let mut at = 0;
    for (s, &g) in gaps.iter().enumerate() {
        if g > cut {
            break;
        }
        out.extend_from_slice(&ids[at..g]);
        at = g;
        out.extend_from_slice(&fills[s]);
        if s == slot {
            break;
        }
    }
    out
}

/// Targeted perturbation with pitfalls: each slot is filled with the proxy's
/// least likely next token, most severe slot first, round-robin until the
/// budget is spent.
pub fn plan_tp_p(
    cfg: &GuardConfig,
    vocab: &Vocabulary,
    seq: &TokenSeq,
    proxy: &NGramModel,
) -> Result<PlanOutcome, PerturbError> {
    let scores = proxy.score_ids(&seq.ids)?;
    let Some((m, triggers)) = trigger_slots(cfg, seq, &scores)? else {
        return Ok(PlanOutcome::noop(PlanWarning::ZeroBudget));
    };
    let gaps = &triggers.indices;
    let by_severity = triggers.by_severity();
    let slot_of: BTreeMap<usize, usize> = gaps.iter().enumerate().map(|(s, &g)| (g, s)).collect();
    let allowed: HashSet<TokenId> = fill_candidates(vocab, &cfg.catalog).into_iter().collect();
    let mut fills: Vec<Vec<TokenId>> = vec![Vec::new(); gaps.len()];
    let mut spent = 0;
    while spent < m {
        for g in &by_severity {
            if spent == m {
                break;
            }
            let slot = slot_of[g];
            let prefix = prefix_with_fills(&seq.ids, gaps, &fills, slot);
            fills[slot].push(proxy.argmin_next_token_in(&prefix, |id| allowed.contains(&id)));
            spent += 1;
        }
    }
    let edits =
        gaps.iter().zip(fills).map(|(&position, token_ids)| Edit::Insert { position, token_ids }).collect();
    Ok(PlanOutcome { plan: PerturbationPlan::from_edits(edits), warnings: vec![] })
}

/// OOV targeted perturbation: split the most severe multi-character
/// triggers with random catalog characters at random interior offsets.
pub fn plan_tp_oov(
    cfg: &GuardConfig,
    vocab: &Vocabulary,
    seq: &TokenSeq,
    proxy_scores: &ScoreVector,
) -> Result<PlanOutcome, PerturbError> {
    check_scores(seq, proxy_scores)?;
    let t = seq.len();
    let m = budget(cfg.budget, t)?;
    if m == 0 || t == 0 {
        return Ok(PlanOutcome::noop(PlanWarning::ZeroBudget));
    }
    let triggers = identify_triggers(proxy_scores, m.min(t))?;
    let eligible: Vec<(usize, usize)> = triggers
        .by_severity()
        .into_iter()
        .map(|i| (i, vocab.token(seq.ids[i]).map(|s| s.chars().count())))
        .filter_map(|(i, len)| match len {
            Ok(n) if n >= 2 => Some(Ok((i, n))),
            Ok(_) => None,
            Err(e) => Some(Err(e)),
        })
        .collect::<Result<_, _>>()?;
    if eligible.is_empty() {
        return Ok(PlanOutcome::noop(PlanWarning::NoEligibleTrigger));
    }
    let mut rng = seeded(cfg.seed);
    let catalog = cfg.catalog.chars();
    let mut used: Vec<HashSet<usize>> = vec![HashSet::new(); eligible.len()];
    let mut edits = Vec::new();
    'passes: while edits.len() < m {
        let mut progressed = false;
        for (slot, &(token_index, len)) in eligible.iter().enumerate() {
            if edits.len() == m {
                break 'passes;
            }
            let free: Vec<usize> = (1..len).filter(|o| !used[slot].contains(o)).collect();
            if free.is_empty() {
                continue;
            }
            let char_offset = free[rng.random_range(0..free.len())];
            let ch = catalog[rng.random_range(0..catalog.len())];
            used[slot].insert(char_offset);
            edits.push(Edit::Split { token_index, char_offset, ch });
            progressed = true;
        }
        if !progressed {
            break;
        }
    }
    let mut warnings = vec![];
    if edits.len() < m {
        warnings.push(PlanWarning::BudgetUnspent { unspent: m - edits.len() });
    }
    Ok(PlanOutcome { plan: PerturbationPlan::from_edits(edits), warnings })
}

/// What the planner may consult.
#[derive(Clone, Copy)]
pub enum Proxy<'a> {
    None,
    NGram(&'a NGramModel),
    Scorer(&'a dyn SequenceScorer),
}

impl Proxy<'_> {
    fn scores(&self, strategy: Strategy, seq: &TokenSeq) -> Result<ScoreVector, PerturbError> {
        match self {
            Proxy::NGram(m) => Ok(m.score_ids(&seq.ids)?),
            Proxy::Scorer(s) => Ok(s.score_ids(&seq.ids)?),
            Proxy::None => Err(PerturbError::MissingProxy(strategy, "a proxy scorer")),
        }
    }

    fn ngram(&self, strategy: Strategy) -> Result<&NGramModel, PerturbError> {
        match self {
            Proxy::NGram(m) => Ok(m),
            _ => Err(PerturbError::MissingProxy(strategy, "an n-gram proxy model")),
        }
    }
}

/// Dispatches on `cfg.strategy`.
pub fn plan(cfg: &GuardConfig, vocab: &Vocabulary, seq: &TokenSeq, proxy: Proxy<'_>) -> Result<PlanOutcome, PerturbError> {
    cfg.validate()?;
    match cfg.strategy {
        Strategy::Np => Ok(PlanOutcome::default()),
        Strategy::Udp => plan_udp(cfg, vocab, seq),
        Strategy::Unp => plan_unp(cfg, vocab, seq),
        Strategy::Tp => plan_tp(cfg, vocab, seq, &proxy.scores(cfg.strategy, seq)?),
        Strategy::TpP => plan_tp_p(cfg, vocab, seq, proxy.ngram(cfg.strategy)?),
        Strategy::TpOp => Ok(optimize::plan_tp_op(cfg, vocab, seq, proxy.ngram(cfg.strategy)?)?),
        Strategy::TpOov => plan_tp_oov(cfg, vocab, seq, &proxy.scores(cfg.strategy, seq)?),
        Strategy::TpOovPp => {
            let scorer: &dyn SequenceScorer = match proxy {
                Proxy::NGram(m) => m,
                Proxy::Scorer(s) => s,
                Proxy::None => return Err(PerturbError::MissingProxy(cfg.strategy, "a proxy scorer")),
            };
            Ok(optimize::plan_tp_oov_pp(cfg, vocab, seq, scorer)?)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuardedText {
    pub original_text: String,
    /// Crawler view: split characters inline, inserted tokens between
    /// zero-width delimiters.
    pub guarded_plain_text: String,
    /// Fragment with hidden spans, for style modes.
    pub guarded_html: Option<String>,
    /// Token sequence of the guarded text with delimiters left out.
    pub guarded_seq: TokenSeq,
    pub plan: PerturbationPlan,
    pub strategy: Strategy,
}

/// Renders a plan. Chars mode and plain text go through
/// [`cloak::inject_chars`]; style modes additionally produce an HTML fragment.
pub fn apply_plan(
    text: &str,
    seq: &TokenSeq,
    plan: &PerturbationPlan,
    vocab: &Vocabulary,
    mode: InvisibleMode,
    strategy: Strategy,
    catalog: &InvisibleCatalog,
) -> Result<GuardedText, PerturbError> {
    let n_chars = text.chars().count();
    if seq.spans.last().map_or(0, |s| s.1) != n_chars {
        return Err(PerturbError::PlanMismatch("token spans do not cover the text".into()));
    }
    plan.validate(seq, catalog)?;
    let guarded_plain_text = cloak::inject_chars(text, seq, plan, vocab, catalog)?;
    let guarded_html = match mode {
        InvisibleMode::Chars => None,
        style => Some(cloak::render_fragment(text, seq, plan, vocab, style)?),
    };
    let guarded_seq = victim_sequence(text, seq, plan, vocab)?;
    Ok(GuardedText {
        original_text: text.to_string(),
        guarded_plain_text,
        guarded_html,
        guarded_seq,
        plan: plan.clone(),
        strategy,
    })
}

/// Segments between insert gaps are re-encoded (picking up any splits) and
/// inserted ids are spliced in verbatim; since delimiters never merge, this
/// is the crawled tokenization minus the delimiter tokens.
fn victim_sequence(
    text: &str,
    seq: &TokenSeq,
    plan: &PerturbationPlan,
    vocab: &Vocabulary,
) -> Result<TokenSeq, PerturbError> {
    let chars: Vec<char> = text.chars().collect();
    let inserts = plan.inserts_by_gap();
    let splits = plan.splits_by_token();
    let t = seq.len();
    let mut ids = Vec::with_capacity(t + plan.budget_spent);
    let mut segment = String::new();
    let flush = |segment: &mut String, ids: &mut Vec<TokenId>| -> Result<(), PerturbError> {
        ids.extend(vocab.encode(segment)?.ids);
        segment.clear();
        Ok(())
    };
    for i in 0..=t {
        if let Some(fill) = inserts.get(&i) {
            flush(&mut segment, &mut ids)?;
            ids.extend_from_slice(fill);
        }
        if i == t {
            break;
        }
        let (s, e) = seq.spans[i];
        let mut at = s;
        for &(off, ch) in splits.get(&i).map(Vec::as_slice).unwrap_or(&[]) {
            segment.extend(&chars[at..s + off]);
            segment.push(ch);
            at = s + off;
        }
        segment.extend(&chars[at..e]);
    }
    flush(&mut segment, &mut ids)?;
    Ok(TokenSeq::from_ids(vocab, ids)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub edit_distance_tokens: usize,
    pub ratio: f64,
    pub insertion_events: usize,
    pub multiset_ok: bool,
    pub budget: f64,
    /// `ratio > budget`; reported, never enforced.
    pub ratio_exceeds_budget: bool,
}

/// Edit-distance ratio and character-multiset preservation.
///
/// `guarded_text` is compared after removing catalog characters; every
/// character of `original_text` must still be present.
pub fn verify_constraints(
    original_text: &str,
    original_seq: &TokenSeq,
    guarded_text: &str,
    guarded_seq: &TokenSeq,
    insertion_events: usize,
    b: f64,
    catalog: &InvisibleCatalog,
) -> BudgetReport {
    let d = token_edit_distance(&original_seq.ids, &guarded_seq.ids);
    let ratio = if original_seq.is_empty() { 0.0 } else { d as f64 / original_seq.len() as f64 };
    BudgetReport {
        edit_distance_tokens: d,
        ratio,
        insertion_events,
        multiset_ok: multiset_contains(&catalog.strip(guarded_text), original_text),
        budget: b,
        ratio_exceeds_budget: ratio > b,
    }
}

impl GuardedText {
    pub fn budget_report(&self, original_seq: &TokenSeq, b: f64, catalog: &InvisibleCatalog) -> BudgetReport {
        verify_constraints(
            &self.original_text,
            original_seq,
            &self.guarded_plain_text,
            &self.guarded_seq,
            self.plan.budget_spent,
            b,
            catalog,
        )
    }
}

/// Whether the character multiset of `big` contains that of `small`.
pub fn multiset_contains(big: &str, small: &str) -> bool {
    let mut counts: BTreeMap<char, i64> = BTreeMap::new();
    for c in big.chars() {
        *counts.entry(c).or_default() += 1;
    }
    for c in small.chars() {
        let e = counts.entry(c).or_default();
        *e -= 1;
        if *e < 0 {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::NGramConfig;
    use crate::tokenizer::train_bpe;
    use proptest::prelude::*;
    use super::Strategy;

    fn vocab() -> Vocabulary {
        train_bpe(&["the language model reads the language of the web and the model learns"], 60).unwrap()
    }

    fn seq_of(n: usize) -> TokenSeq {
        TokenSeq { ids: vec![0; n], spans: (0..n).map(|i| (i, i + 1)).collect() }
    }

    fn gaps(plan: &PerturbationPlan) -> Vec<usize> {
        plan.edits
            .iter()
            .map(|e| match e {
                Edit::Insert { position, .. } => *position,
                _ => panic!("split in insert plan"),
            })
            .collect()
    }

    #[test]
    fn budget_examples() {
        assert_eq!(budget(0.4, 10).unwrap(), 4);
        assert_eq!(budget(1.0, 7).unwrap(), 7);
        assert_eq!(budget(0.01, 50).unwrap(), 0);
        assert_eq!(budget(0.29, 100).unwrap(), 29);
        assert!(budget(0.0, 5).is_err());
        assert!(budget(1.5, 5).is_err());
    }

    #[test]
    fn distribute_rule() {
        assert_eq!(distribute(7, 3), vec![3, 2, 2]);
        assert_eq!(distribute(4, 4), vec![1, 1, 1, 1]);
    }

    #[test]
    fn udp_geometry() {
        let v = vocab();
        let p = plan_udp(&GuardConfig::new(Strategy::Udp, 0.4, 1), &v, &seq_of(10)).unwrap();
        assert_eq!(gaps(&p.plan), vec![2, 4, 6, 8]);
        assert_eq!(p.plan.budget_spent, 4);
        let p = plan_udp(&GuardConfig::new(Strategy::Udp, 0.2, 1), &v, &seq_of(10)).unwrap();
        assert_eq!(gaps(&p.plan), vec![3, 6]);
        let again = plan_udp(&GuardConfig::new(Strategy::Udp, 0.2, 1), &v, &seq_of(10)).unwrap();
        assert_eq!(p, again);
        let short = plan_udp(&GuardConfig::new(Strategy::Udp, 1.0, 1), &v, &seq_of(1)).unwrap();
        assert!(short.plan.is_empty());
        assert_eq!(short.warnings, vec![PlanWarning::SequenceTooShort { tokens: 1 }]);
    }

    #[test]
    fn fills_exclude_catalog() {
        let v = vocab();
        let cat = InvisibleCatalog::default();
        let pool = fill_candidates(&v, &cat);
        assert_eq!(pool.len(), v.len() - cat.len());
        let p = plan_unp(&GuardConfig::new(Strategy::Unp, 1.0, 3), &v, &seq_of(40)).unwrap();
        for (_, ids) in p.plan.inserts_by_gap() {
            for id in ids {
                assert!(pool.contains(&id));
            }
        }
    }

    #[test]
    fn unp_contract() {
        let v = vocab();
        let p = plan_unp(&GuardConfig::new(Strategy::Unp, 0.01, 1), &v, &seq_of(10)).unwrap();
        assert!(p.plan.is_empty());
        assert_eq!(p.warnings, vec![PlanWarning::ZeroBudget]);
        for seed in 0..20 {
            let p = plan_unp(&GuardConfig::new(Strategy::Unp, 0.5, seed), &v, &seq_of(30)).unwrap();
            let g = gaps(&p.plan);
            assert_eq!(g.len(), 15);
            assert!(g.windows(2).all(|w| w[0] < w[1]));
            assert!(g.iter().all(|&x| (1..30).contains(&x)));
        }
    }

    #[test]
    fn unp_seeds_differ() {
        // C(49, 10) ~ 8.2e9 position sets: a collision has probability ~1e-10.
        let v = vocab();
        let a = plan_unp(&GuardConfig::new(Strategy::Unp, 0.2, 1), &v, &seq_of(50)).unwrap();
        let b = plan_unp(&GuardConfig::new(Strategy::Unp, 0.2, 2), &v, &seq_of(50)).unwrap();
        assert_ne!(gaps(&a.plan), gaps(&b.plan));
    }

    #[test]
    fn tp_slots_before_triggers() {
        let v = vocab();
        let scores = ScoreVector::new(vec![-5.0, -0.1, -0.1, -0.1]).unwrap();
        let p = plan_tp(&GuardConfig::new(Strategy::Tp, 0.25, 1), &v, &seq_of(4), &scores).unwrap();
        assert_eq!(gaps(&p.plan), vec![0]);
        let p = plan_tp(&GuardConfig::new(Strategy::Tp, 1.0, 1), &v, &seq_of(4), &scores).unwrap();
        assert_eq!(gaps(&p.plan), vec![0, 1, 2, 3]);
        assert!(p.plan.inserts_by_gap().values().all(|f| f.len() == 1));
        let scores = ScoreVector::new(vec![-1.0, -3.0, -0.5, -2.0, -0.2, -4.0, -0.1, -0.3, -0.9, -0.4]).unwrap();
        let p = plan_tp(&GuardConfig::new(Strategy::Tp, 0.3, 1), &v, &seq_of(10), &scores).unwrap();
        assert_eq!(gaps(&p.plan), identify_triggers(&scores, 3).unwrap().indices);
    }

    #[test]
    fn tp_p_untrained_proxy_fills_with_token_zero() {
        let v = vocab();
        let proxy = NGramModel::empty(NGramConfig::new(v.len())).unwrap();
        let seq = v.encode("the language model reads the web").unwrap();
        let p = plan_tp_p(&GuardConfig::new(Strategy::TpP, 0.5, 1), &v, &seq, &proxy).unwrap();
        assert!(!p.plan.is_empty());
        for (_, ids) in p.plan.inserts_by_gap() {
            assert!(ids.iter().all(|&id| id == 0));
        }
    }

    #[test]
    fn tp_p_round_robin_with_fewer_slots() {
        let v = vocab();
        let proxy = NGramModel::empty(NGramConfig::new(v.len())).unwrap();
        let seq = v.encode("the language model reads the language of the web").unwrap();
        let m = budget(1.0, seq.len()).unwrap();
        let k = m / 2;
        let cfg = GuardConfig { slots: Some(k), ..GuardConfig::new(Strategy::TpP, 1.0, 1) };
        let p = plan_tp_p(&cfg, &v, &seq, &proxy).unwrap();
        let by_gap = p.plan.inserts_by_gap();
        assert_eq!(by_gap.len(), k);
        let mut lens: Vec<usize> = by_gap.values().map(Vec::len).collect();
        lens.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(lens, distribute(m, k), "{by_gap:?}");
    }

    #[test]
    fn tp_p_matches_prefix_scan() {
        let v = vocab();
        let corpus = [v.encode("the language model reads the language of the web and the model learns").unwrap().ids];
        let proxy = NGramModel::fit(NGramConfig::new(v.len()).with_order(2), &corpus, 1.0, "p").unwrap();
        let seq = v.encode("the model reads the web and the language model learns").unwrap();
        let cfg = GuardConfig::new(Strategy::TpP, 0.5, 4);
        let p = plan_tp_p(&cfg, &v, &seq, &proxy).unwrap();
        let pool: HashSet<TokenId> = fill_candidates(&v, &cfg.catalog).into_iter().collect();
        // replay: rebuild the guarded sequence and check each fill by brute force
        let by_gap = p.plan.inserts_by_gap();
        let mut guarded = Vec::new();
        for i in 0..=seq.len() {
            if let Some(f) = by_gap.get(&i) {
                for &tok in f {
                    let ctx = proxy.context_at(&guarded, guarded.len());
                    let best = pool
                        .iter()
                        .copied()
                        .min_by(|&a, &b| proxy.prob(&ctx, a).total_cmp(&proxy.prob(&ctx, b)).then(a.cmp(&b)))
                        .unwrap();
                    assert_eq!(tok, best);
                    guarded.push(tok);
                }
            }
            if i < seq.len() {
                guarded.push(seq.ids[i]);
            }
        }
    }

    #[test]
    fn tp_oov_single_trigger() {
        let v = vocab();
        let seq = v.encode(" language").unwrap();
        assert_eq!(seq.len(), 1);
        let scores = ScoreVector::new(vec![-3.0]).unwrap();
        let p = plan_tp_oov(&GuardConfig::new(Strategy::TpOov, 1.0, 9), &v, &seq, &scores).unwrap();
        assert_eq!(p.plan.edits.len(), 1);
        match p.plan.edits[0] {
            Edit::Split { token_index: 0, char_offset, .. } => assert!(0 < char_offset && char_offset < 9),
            ref e => panic!("{e:?}"),
        }
    }

    #[test]
    fn tp_oov_exhaustion_is_reported() {
        let v = vocab();
        // " model" has 5 interior offsets, "the" 2; single-char tokens are skipped
        let seq = v.encode("the model").unwrap();
        let interior: usize = seq.ids.iter().map(|&id| v.token(id).unwrap().chars().count().saturating_sub(1)).sum();
        let scores = ScoreVector::new(vec![-1.0; seq.len()]).unwrap();
        let cfg = GuardConfig { slots: None, ..GuardConfig::new(Strategy::TpOov, 1.0, 2) };
        let p = plan_tp_oov(&cfg, &v, &seq, &scores).unwrap();
        let m = seq.len();
        assert_eq!(p.plan.budget_spent, m.min(interior));
        if interior < m {
            assert_eq!(p.warnings, vec![PlanWarning::BudgetUnspent { unspent: m - interior }]);
        }
        // single-character triggers only
        let seq = v.encode("e").unwrap();
        let p = plan_tp_oov(&cfg, &v, &seq, &ScoreVector::new(vec![-1.0]).unwrap()).unwrap();
        assert_eq!(p.warnings, vec![PlanWarning::NoEligibleTrigger]);
    }

    #[test]
    fn tp_oov_budget_beyond_offsets() {
        let v = vocab();
        let seq = v.encode(" language").unwrap();
        assert_eq!(seq.len(), 1);
        let mut cfg = GuardConfig::new(Strategy::TpOov, 1.0, 2);
        cfg.budget = 1.0;
        let scores = ScoreVector::new(vec![-2.0]).unwrap();
        let p = plan_tp_oov(&cfg, &v, &seq, &scores).unwrap();
        // m = 1 for a single token, so exactly one split
        assert_eq!(p.plan.budget_spent, 1);
        let g = apply_plan(" language", &seq, &p.plan, &v, InvisibleMode::Chars, Strategy::TpOov, &cfg.catalog).unwrap();
        assert!(v.encode(&g.guarded_plain_text).unwrap().len() > seq.len());
    }

    #[test]
    fn apply_examples() {
        let v = train_bpe(&["ab ab ab"], 5).unwrap();
        let seq = v.encode("ab").unwrap();
        assert_eq!(seq.len(), 1);
        let cat = InvisibleCatalog::default();
        let empty = apply_plan("ab", &seq, &PerturbationPlan::default(), &v, InvisibleMode::Chars, Strategy::Np, &cat).unwrap();
        assert_eq!(empty.guarded_plain_text, "ab");
        let plan = PerturbationPlan::from_edits(vec![Edit::Split { token_index: 0, char_offset: 1, ch: '\u{200B}' }]);
        let g = apply_plan("ab", &seq, &plan, &v, InvisibleMode::Chars, Strategy::TpOov, &cat).unwrap();
        assert_eq!(g.guarded_plain_text, "a\u{200B}b");
        assert_eq!(g.guarded_seq.len(), 3);
        let report = g.budget_report(&seq, 1.0, &cat);
        assert_eq!(report.edit_distance_tokens, 3);
        assert!(report.multiset_ok);
    }

    #[test]
    fn unp_distance_equals_insertions() {
        let v = vocab();
        let text = "the language model reads the language of the web";
        let seq = v.encode(text).unwrap();
        let cfg = GuardConfig::new(Strategy::Unp, 0.5, 11);
        let p = plan_unp(&cfg, &v, &seq).unwrap();
        let g = apply_plan(text, &seq, &p.plan, &v, InvisibleMode::Chars, cfg.strategy, &cfg.catalog).unwrap();
        let r = g.budget_report(&seq, cfg.budget, &cfg.catalog);
        assert_eq!(r.edit_distance_tokens, p.plan.budget_spent);
        assert!(r.multiset_ok);
        assert_eq!(r.insertion_events, budget(0.5, seq.len()).unwrap());
    }

    #[test]
    fn unmodified_report() {
        let v = vocab();
        let text = "the web";
        let seq = v.encode(text).unwrap();
        let r = verify_constraints(text, &seq, text, &seq, 0, 0.4, &InvisibleCatalog::default());
        assert_eq!((r.edit_distance_tokens, r.ratio, r.multiset_ok), (0, 0.0, true));
    }

    #[test]
    fn oov_split_distance_matches_dp() {
        let v = train_bpe(&["language language language"], 40).unwrap();
        let text = "language";
        let seq = v.encode(text).unwrap();
        assert_eq!(seq.len(), 1);
        let plan = PerturbationPlan::from_edits(vec![Edit::Split { token_index: 0, char_offset: 4, ch: '\u{200B}' }]);
        let cat = InvisibleCatalog::default();
        let g = apply_plan(text, &seq, &plan, &v, InvisibleMode::Chars, Strategy::TpOov, &cat).unwrap();
        let pieces = g.guarded_seq.len();
        // one substitution plus (pieces - 1) insertions
        assert_eq!(g.budget_report(&seq, 1.0, &cat).edit_distance_tokens, pieces);
    }

    #[test]
    fn plan_validation() {
        let seq = seq_of(3);
        let cat = InvisibleCatalog::default();
        let bad = PerturbationPlan::from_edits(vec![Edit::Insert { position: 4, token_ids: vec![1] }]);
        assert!(bad.validate(&seq, &cat).is_err());
        let seq2 = TokenSeq { ids: vec![0], spans: vec![(0, 3)] };
        let bad = PerturbationPlan::from_edits(vec![Edit::Split { token_index: 0, char_offset: 3, ch: '\u{200B}' }]);
        assert!(bad.validate(&seq2, &cat).is_err());
        let bad = PerturbationPlan::from_edits(vec![Edit::Split { token_index: 0, char_offset: 1, ch: 'x' }]);
        assert!(matches!(bad.validate(&seq2, &cat), Err(PerturbError::NonCatalogChar(_))));
        let dup = PerturbationPlan::from_edits(vec![
            Edit::Split { token_index: 0, char_offset: 1, ch: '\u{200B}' },
            Edit::Split { token_index: 0, char_offset: 1, ch: '\u{200C}' },
        ]);
        assert!(dup.validate(&seq2, &cat).is_err());
    }

    #[test]
    fn plan_json_format() {
        let plan = PerturbationPlan::from_edits(vec![
            Edit::Insert { position: 2, token_ids: vec![5, 6] },
            Edit::Split { token_index: 1, char_offset: 3, ch: '\u{200B}' },
        ]);
        let json = plan.to_json();
        assert_eq!(
            json,
            r#"{"edits":[{"kind":"insert","pos":2,"ids":[5,6]},{"kind":"split","tok":1,"off":3,"char":"U+200B"}],"spent":3}"#
        );
        let back: PerturbationPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn strategy_and_mode_names() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
        for m in InvisibleMode::ALL {
            assert_eq!(m.name().parse::<InvisibleMode>().unwrap(), m);
        }
        assert_eq!("offscreen".parse::<InvisibleMode>().unwrap(), InvisibleMode::Offscreen);
    }

    #[test]
    fn config_validation() {
        assert!(GuardConfig::new(Strategy::Tp, 0.0, 0).validate().is_err());
        let mut c = GuardConfig::new(Strategy::TpOp, 0.4, 0);
        c.tau = 0;
        assert!(c.validate().is_err());
        c.strategy = Strategy::Tp;
        assert!(c.validate().is_ok());
        c.beta1 = 2;
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn every_strategy_preserves_characters(seed in 0u64..200, b in 0.05f64..1.0, si in 1usize..8) {
            let v = vocab();
            let text = "the language model reads the language of the web and the model learns";
            let seq = v.encode(text).unwrap();
            let corpus = [seq.ids.clone()];
            let proxy = NGramModel::fit(NGramConfig::new(v.len()).with_order(2), &corpus, 1.0, "p").unwrap();
            let mut cfg = GuardConfig::new(Strategy::ALL[si], b, seed);
            cfg.tau = 3;
            cfg.batch_size = 4;
            cfg.cand_k = 4;
            let out = plan(&cfg, &v, &seq, Proxy::NGram(&proxy)).unwrap();
            out.plan.validate(&seq, &cfg.catalog).unwrap();
            prop_assert!(out.plan.budget_spent <= budget(b, seq.len()).unwrap());
            let again = plan(&cfg, &v, &seq, Proxy::NGram(&proxy)).unwrap();
            prop_assert_eq!(&out, &again);
            let g = apply_plan(text, &seq, &out.plan, &v, InvisibleMode::Chars, cfg.strategy, &cfg.catalog).unwrap();
            prop_assert!(multiset_contains(&cfg.catalog.strip(&g.guarded_plain_text), text));
            // the delimited crawler text tokenizes to the victim view plus delimiters
            let crawled = v.encode(&g.guarded_plain_text).unwrap();
            prop_assert!(crawled.len() >= g.guarded_seq.len());
        }
    }
}
