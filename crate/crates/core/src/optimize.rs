//! Pitfall optimization: a propose-then-batch-evaluate coordinate search over
//! the tokens inserted at trigger slots (TP-OP), and an exhaustive search
//! over split offsets and invisible characters (TP-OOV++).
//!
//! The objective is minimized. With `beta1 = beta2 = -1` that means making
//! the inserted tokens, and the token after each, as surprising as possible
//! to the proxy.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::exec::Execution;
use crate::perturb::{
    budget, distribute, fill_candidates, trigger_slots, Edit, GuardConfig, PerturbError, PerturbationPlan,
    PlanOutcome, PlanWarning,
};
use crate::rng::{seeded, sub_seed, GuardRng};
use crate::scorer::{NGramModel, ScorerError, SequenceScorer};
use crate::tokenizer::{TokenId, TokenSeq, TokenizerError, Vocabulary};
use crate::triggers::{identify_triggers, TriggerError};
use crate::InvisibleCatalog;

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("the position set is empty")]
    EmptyPositions,
    #[error("position {pos} out of range for {len} tokens")]
    PositionOutOfRange { pos: usize, len: usize },
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Trigger(#[from] TriggerError),
    #[error(transparent)]
    Perturb(#[from] Box<PerturbError>),
}

impl From<PerturbError> for OptimizeError {
    fn from(e: PerturbError) -> Self {
        OptimizeError::Perturb(Box::new(e))
    }
}

/// `beta1 * mean_{i in I} NLL(x[i]) + beta2 * mean NLL(x[i+1])`, the second
/// mean taken over the `i` with `i + 1` in range.
pub fn pitfall_objective(
    scorer: &dyn SequenceScorer,
    ids: &[TokenId],
    positions: &[usize],
    beta1: i8,
    beta2: i8,
) -> Result<f64, OptimizeError> {
    if positions.is_empty() {
        return Err(OptimizeError::EmptyPositions);
    }
    if let Some(&pos) = positions.iter().find(|&&p| p >= ids.len()) {
        return Err(OptimizeError::PositionOutOfRange { pos, len: ids.len() });
    }
    if beta1 == 0 && beta2 == 0 {
        return Ok(0.0);
    }
    let next: Vec<usize> = positions.iter().map(|p| p + 1).filter(|&p| p < ids.len()).collect();
    let mut query = positions.to_vec();
    if beta2 != 0 {
        query.extend_from_slice(&next);
    }
    let lp = scorer.score_positions(ids, &query)?;
    let (own, after) = lp.split_at(positions.len());
    let mut value = f64::from(beta1) * -own.iter().sum::<f64>() / own.len() as f64;
    if beta2 != 0 && !after.is_empty() {
        value += f64::from(beta2) * -after.iter().sum::<f64>() / after.len() as f64;
    }
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GcgParams {
    pub tau: usize,
    pub batch_size: usize,
    pub cand_k: usize,
    pub beta1: i8,
    pub beta2: i8,
    pub seed: u64,
}

impl GcgParams {
    pub fn from_config(cfg: &GuardConfig) -> Self {
        Self {
            tau: cfg.tau,
            batch_size: cfg.batch_size,
            cand_k: cfg.cand_k,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            seed: sub_seed(cfg.seed, "gcg"),
        }
    }
}

/// Incumbent of the coordinate search.
#[derive(Clone, Debug)]
pub struct SearchState {
    pub ids: Vec<TokenId>,
    /// Fill positions I within `ids`.
    pub positions: Vec<usize>,
    pub objective: f64,
    pub iteration: usize,
    pub rng: GuardRng,
}

impl SearchState {
    pub fn new(
        scorer: &dyn SequenceScorer,
        ids: Vec<TokenId>,
        positions: Vec<usize>,
        params: &GcgParams,
    ) -> Result<Self, OptimizeError> {
        let objective = pitfall_objective(scorer, &ids, &positions, params.beta1, params.beta2)?;
        Ok(Self { ids, positions, objective, iteration: 0, rng: seeded(params.seed) })
    }

    /// Whether the cached objective matches a fresh evaluation.
    pub fn is_coherent(&self, scorer: &dyn SequenceScorer, beta1: i8, beta2: i8) -> bool {
        pitfall_objective(scorer, &self.ids, &self.positions, beta1, beta2)
            .is_ok_and(|v| (v - self.objective).abs() <= 1e-9 * (1.0 + v.abs()))
    }
}

/// Where per-position candidate tokens come from.
pub trait CandidateSource: Sync {
    fn candidates(&self, ids: &[TokenId], position: usize, cand_k: usize, rng: &mut GuardRng) -> Vec<TokenId>;
}

/// Loss-query shortlist over an n-gram proxy.
pub struct ShortlistSource<'a> {
    pub model: &'a NGramModel,
    pub pool: &'a [TokenId],
    pub beta1: i8,
    pub beta2: i8,
}

impl CandidateSource for ShortlistSource<'_> {
    fn candidates(&self, ids: &[TokenId], position: usize, cand_k: usize, rng: &mut GuardRng) -> Vec<TokenId> {
        propose_candidates(self.model, ids, position, cand_k, self.pool, self.beta1, self.beta2, rng)
    }
}

/// The `cand_k` tokens from `pool` whose substitution at `position` gives
/// the lowest local objective. The shortlist scored is the ⌈k/2⌉ tokens the
/// local context makes least likely (most likely when `beta1 > 0`) plus
/// ⌈k/2⌉ uniform draws from the rest; with `cand_k >= pool.len()` it is the
/// whole pool.
#[allow(clippy::too_many_arguments)]
pub fn propose_candidates<R: Rng>(
    model: &NGramModel,
    ids: &[TokenId],
    position: usize,
    cand_k: usize,
    pool: &[TokenId],
    beta1: i8,
    beta2: i8,
    rng: &mut R,
) -> Vec<TokenId> {
    if cand_k == 0 || pool.is_empty() {
        return Vec::new();
    }
    let ctx = model.context_at(ids, position);
    let mut shortlist: Vec<TokenId> = if cand_k >= pool.len() {
        pool.to_vec()
    } else {
        let half = cand_k.div_ceil(2);
        let sign = if beta1 > 0 { -1.0 } else { 1.0 };
        let mut ranked: Vec<(f64, TokenId)> = pool.iter().map(|&v| (sign * model.prob(&ctx, v), v)).collect();
        let cmp = |a: &(f64, TokenId), b: &(f64, TokenId)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        ranked.select_nth_unstable_by(half - 1, cmp);
        ranked.truncate(half);
        ranked.sort_unstable_by(cmp);
        let mut short: Vec<TokenId> = ranked.into_iter().map(|(_, v)| v).collect();
        let rest: Vec<TokenId> = pool.iter().copied().filter(|v| !short.contains(v)).collect();
        let draws = half.min(rest.len());
        short.extend(index::sample(rng, rest.len(), draws).into_iter().map(|j| rest[j]));
        short
    };
    let mut probe = ids.to_vec();
    let mut scored: Vec<(f64, TokenId)> = shortlist
        .drain(..)
        .map(|v| {
            probe[position] = v;
            let mut local = f64::from(beta1) * -model.prob(&ctx, v).ln();
            if beta2 != 0 && position + 1 < probe.len() {
                let next_ctx = model.context_at(&probe, position + 1);
                local += f64::from(beta2) * -model.logprob(&next_ctx, probe[position + 1]);
            }
            (local, v)
        })
        .collect();
    scored.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(cand_k);
    scored.into_iter().map(|(_, v)| v).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub ids: Vec<TokenId>,
    pub initial_objective: f64,
    pub objective: f64,
    /// Incumbent objective after each iteration.
    pub trace: Vec<f64>,
}

/// Coordinate search: each iteration draws `batch_size` single-position
/// substitutions from the per-position candidate lists, evaluates them, and
/// keeps the best only if it beats the incumbent.
pub fn gcg_search(
    scorer: &dyn SequenceScorer,
    source: &dyn CandidateSource,
    ids: Vec<TokenId>,
    positions: Vec<usize>,
    params: &GcgParams,
    exec: Execution,
) -> Result<SearchOutcome, OptimizeError> {
    let mut state = SearchState::new(scorer, ids, positions, params)?;
    let initial_objective = state.objective;
    let mut trace = Vec::with_capacity(params.tau);
    while state.iteration < params.tau {
        let mut lists: HashMap<usize, Vec<TokenId>> = HashMap::new();
        let mut batch: Vec<(usize, TokenId)> = Vec::with_capacity(params.batch_size);
        for _ in 0..params.batch_size {
            let pos = state.positions[state.rng.random_range(0..state.positions.len())];
            if !lists.contains_key(&pos) {
                let list = source.candidates(&state.ids, pos, params.cand_k, &mut state.rng);
                lists.insert(pos, list);
            }
            let list = &lists[&pos];
            if list.is_empty() {
                continue;
            }
            batch.push((pos, list[state.rng.random_range(0..list.len())]));
        }
        let values = exec.map(&batch, |&(pos, tok)| {
            let mut cand = state.ids.clone();
            cand[pos] = tok;
            pitfall_objective(scorer, &cand, &state.positions, params.beta1, params.beta2)
        });
        let mut best: Option<(f64, usize)> = None;
        for (j, v) in values.into_iter().enumerate() {
            let v = v?;
            if best.is_none_or(|(b, _)| v < b) {
                best = Some((v, j));
            }
        }
        if let Some((v, j)) = best {
            if v < state.objective {
                let (pos, tok) = batch[j];
                state.ids[pos] = tok;
                state.objective = v;
            }
        }
        state.iteration += 1;
        trace.push(state.objective);
    }
    Ok(SearchOutcome { ids: state.ids, initial_objective, objective: state.objective, trace })
}

/// Optimized pitfalls: TP slots, random initial fills, then [`gcg_search`].
pub fn plan_tp_op(
    cfg: &GuardConfig,
    vocab: &Vocabulary,
    seq: &TokenSeq,
    proxy: &NGramModel,
) -> Result<PlanOutcome, OptimizeError> {
    Ok(plan_tp_op_traced(cfg, vocab, seq, proxy)?.0)
}

/// [`plan_tp_op`] together with the search outcome (`None` for a no-op plan).
pub fn plan_tp_op_traced(
    cfg: &GuardConfig,
    vocab: &Vocabulary,
    seq: &TokenSeq,
    proxy: &NGramModel,
) -> Result<(PlanOutcome, Option<SearchOutcome>), OptimizeError> {
    let scores = proxy.score_ids(&seq.ids)?;
    let Some((m, triggers)) = trigger_slots(cfg, seq, &scores)? else {
        return Ok((PlanOutcome { plan: PerturbationPlan::default(), warnings: vec![PlanWarning::ZeroBudget] }, None));
    };
    let gaps = &triggers.indices;
    let counts = distribute(m, gaps.len());
    let pool = fill_candidates(vocab, &cfg.catalog);
    let mut rng = seeded(cfg.seed);
    let mut ids = Vec::with_capacity(seq.len() + m);
    let mut positions = Vec::with_capacity(m);
    let mut at = 0;
    for (&g, &n) in gaps.iter().zip(&counts) {
        ids.extend_from_slice(&seq.ids[at..g]);
        at = g;
        for _ in 0..n {
            positions.push(ids.len());
            ids.push(pool[rng.random_range(0..pool.len())]);
        }
    }
    ids.extend_from_slice(&seq.ids[at..]);
    let params = GcgParams::from_config(cfg);
    let source = ShortlistSource { model: proxy, pool: &pool, beta1: cfg.beta1, beta2: cfg.beta2 };
    let out = gcg_search(proxy, &source, ids, positions.clone(), &params, cfg.execution)?;
    let mut fills = positions.iter().map(|&p| out.ids[p]);
    let edits = gaps
        .iter()
        .zip(&counts)
        .map(|(&position, &n)| Edit::Insert { position, token_ids: fills.by_ref().take(n).collect() })
        .collect();
    Ok((PlanOutcome { plan: plan_from_edits(edits), warnings: vec![] }, Some(out)))
}

fn plan_from_edits(edits: Vec<Edit>) -> PerturbationPlan {
    let budget_spent = edits
        .iter()
        .map(|e| match e {
            Edit::Insert { token_ids, .. } => token_ids.len(),
            Edit::Split { .. } => 1,
        })
        .sum();
    PerturbationPlan { edits, budget_spent }
}

/// Every free (interior offset, catalog character) pair of a token of
/// `len` characters, offset-major.
pub fn oov_candidates(len: usize, used: &[usize], catalog: &InvisibleCatalog) -> Vec<(usize, char)> {
    (1..len.max(1))
        .filter(|o| !used.contains(o))
        .flat_map(|o| catalog.chars().iter().map(move |&c| (o, c)))
        .collect()
}

/// Token-level chunking that greedy encoding never crosses: a chunk starts
/// at whitespace and around every catalog character.
fn chunk_starts(vocab: &Vocabulary, seq: &TokenSeq, catalog: &InvisibleCatalog) -> Result<Vec<usize>, OptimizeError> {
    let mut starts = Vec::new();
    let mut prev_catalog = false;
    for (k, &id) in seq.ids.iter().enumerate() {
        let tok = vocab.token(id)?;
        let first = tok.chars().next().unwrap_or(' ');
        let is_catalog = tok.chars().count() == 1 && catalog.contains(first);
        if k == 0 || first.is_whitespace() || is_catalog || prev_catalog {
            starts.push(k);
        }
        prev_catalog = is_catalog;
    }
    Ok(starts)
}

struct OovState<'a> {
    vocab: &'a Vocabulary,
    chars: Vec<char>,
    seq: &'a TokenSeq,
    /// Token range of every chunk.
    chunks: Vec<(usize, usize)>,
    chunk_of: Vec<usize>,
    splits: Vec<Vec<(usize, char)>>,
    /// Current encoding of every chunk.
    chunk_ids: Vec<Vec<TokenId>>,
}

impl OovState<'_> {
    /// Renders chunk `c` with token `j` using `splits_j` instead of its
    /// current splits; returns the encoding and the char range of token `j`.
    fn render(&self, c: usize, j: usize, splits_j: &[(usize, char)]) -> Result<(TokenSeq, (usize, usize)), OptimizeError> {
        let (a, b) = self.chunks[c];
        let mut text = String::new();
        let mut range = (0, 0);
        let mut n = 0;
        for k in a..b {
            let (s, e) = self.seq.spans[k];
            let sp = if k == j { splits_j } else { &self.splits[k] };
            let begin = n;
            let mut at = s;
            for &(off, ch) in sp {
                text.extend(&self.chars[at..s + off]);
                text.push(ch);
                n += s + off - at + 1;
                at = s + off;
            }
            text.extend(&self.chars[at..e]);
            n += e - at;
            if k == j {
                range = (begin, n);
            }
        }
        Ok((self.vocab.encode(&text)?, range))
    }

    fn offset_of(&self, c: usize) -> usize {
        self.chunk_ids[..c].iter().map(Vec::len).sum()
    }
}

/// Optimized OOV splits: triggers are visited as in TP-OOV, but each split
/// is the exhaustive best (offset, character) pair under the pitfall
/// objective on the re-encoded sequence.
pub fn plan_tp_oov_pp(
    cfg: &GuardConfig,
    vocab: &Vocabulary,
    seq: &TokenSeq,
    scorer: &dyn SequenceScorer,
) -> Result<PlanOutcome, OptimizeError> {
    let t = seq.len();
    let m = budget(cfg.budget, t)?;
    if m == 0 || t == 0 {
        return Ok(PlanOutcome { plan: PerturbationPlan::default(), warnings: vec![PlanWarning::ZeroBudget] });
    }
    let scores = scorer.score_ids(&seq.ids)?;
    if scores.len() != t {
        return Err(PerturbError::PlanMismatch(format!("{} proxy scores for {t} tokens", scores.len())).into());
    }
    let triggers = identify_triggers(&scores, m.min(t))?;
    let mut eligible = Vec::new();
    for i in triggers.by_severity() {
        let len = vocab.token(seq.ids[i])?.chars().count();
        if len >= 2 {
            eligible.push((i, len));
        }
    }
    if eligible.is_empty() {
        return Ok(PlanOutcome { plan: PerturbationPlan::default(), warnings: vec![PlanWarning::NoEligibleTrigger] });
    }
    let starts = chunk_starts(vocab, seq, &cfg.catalog)?;
    let chunks: Vec<(usize, usize)> =
        starts.iter().zip(starts.iter().skip(1).copied().chain(std::iter::once(t))).map(|(&a, b)| (a, b)).collect();
    let mut chunk_of = vec![0; t];
    for (c, &(a, b)) in chunks.iter().enumerate() {
        chunk_of[a..b].fill(c);
    }
    let mut st = OovState {
        vocab,
        chars: vocab.decode(seq)?.chars().collect(),
        seq,
        chunk_ids: chunks.iter().map(|&(a, b)| seq.ids[a..b].to_vec()).collect(),
        chunks,
        chunk_of,
        splits: vec![Vec::new(); t],
    };
    let mut edits = Vec::new();
    'passes: while edits.len() < m {
        let mut progressed = false;
        for &(j, len) in &eligible {
            if edits.len() == m {
                break 'passes;
            }
            let used: Vec<usize> = st.splits[j].iter().map(|s| s.0).collect();
            let cands = oov_candidates(len, &used, &cfg.catalog);
            if cands.is_empty() {
                continue;
            }
            let c = st.chunk_of[j];
            let base = st.offset_of(c);
            let (a, b) = (base, base + st.chunk_ids[c].len());
            let flat: Vec<TokenId> = st.chunk_ids.concat();
            let st_ref = &st;
            let evals = cfg.execution.map(&cands, |&(off, ch)| -> Result<(f64, Vec<TokenId>), OptimizeError> {
                let mut sp = st_ref.splits[j].clone();
                sp.push((off, ch));
                sp.sort_unstable();
                let (enc, (r0, r1)) = st_ref.render(c, j, &sp)?;
                let positions: Vec<usize> = enc
                    .spans
                    .iter()
                    .enumerate()
                    .filter(|(_, &(s, e))| s < r1 && e > r0)
                    .map(|(i, _)| base + i)
                    .collect();
                let mut ids = Vec::with_capacity(flat.len() + enc.len());
                ids.extend_from_slice(&flat[..a]);
                ids.extend_from_slice(&enc.ids);
                ids.extend_from_slice(&flat[b..]);
                let v = pitfall_objective(scorer, &ids, &positions, cfg.beta1, cfg.beta2)?;
                Ok((v, enc.ids))
            });
            let mut best: Option<(f64, usize, Vec<TokenId>)> = None;
            for (idx, r) in evals.into_iter().enumerate() {
                let (v, ids) = r?;
                if best.as_ref().is_none_or(|(bv, _, _)| v < *bv) {
                    best = Some((v, idx, ids));
                }
            }
            let (_, idx, ids) = best.expect("candidates are non-empty");
            let (off, ch) = cands[idx];
            st.splits[j].push((off, ch));
            st.splits[j].sort_unstable();
            st.chunk_ids[c] = ids;
            edits.push(Edit::Split { token_index: j, char_offset: off, ch });
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
    Ok(PlanOutcome { plan: plan_from_edits(edits), warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::perturb::{apply_plan, plan_tp, plan_tp_oov, InvisibleMode, Strategy};
    use crate::scorer::NGramConfig;
    use crate::tokenizer::train_bpe;
    use proptest::prelude::*;

    const TEXT: &str = "the language model reads the language of the web and the model learns the words";

    fn setup() -> (Vocabulary, NGramModel) {
        let v = train_bpe(&[TEXT], 80).unwrap();
        let corpus = [v.encode(TEXT).unwrap().ids];
        let m = NGramModel::fit(NGramConfig::new(v.len()).with_order(2), &corpus, 1.0, "p").unwrap();
        (v, m)
    }

    #[test]
    fn objective_examples() {
        let (v, m) = setup();
        let ids = v.encode("the web").unwrap().ids;
        assert_eq!(pitfall_objective(&m, &ids, &[0], 0, 0).unwrap(), 0.0);
        let untrained = NGramModel::empty(NGramConfig::new(v.len())).unwrap();
        let got = pitfall_objective(&untrained, &ids, &[0], 1, 0).unwrap();
        assert!((got - (v.len() as f64).ln()).abs() < 1e-12);
        assert!(matches!(pitfall_objective(&m, &ids, &[], 1, 1), Err(OptimizeError::EmptyPositions)));
        assert!(pitfall_objective(&m, &ids, &[ids.len()], 1, 1).is_err());
    }

    /// Direct recomputation from the full score vector.
    fn objective_oracle(m: &NGramModel, ids: &[TokenId], pos: &[usize], b1: i8, b2: i8) -> f64 {
        let s = m.score_ids(ids).unwrap().logprobs;
        let own: Vec<f64> = pos.iter().map(|&i| -s[i]).collect();
        let next: Vec<f64> = pos.iter().filter(|&&i| i + 1 < s.len()).map(|&i| -s[i + 1]).collect();
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        f64::from(b1) * mean(&own) + f64::from(b2) * mean(&next)
    }

    proptest! {
        #[test]
        fn objective_matches_oracle(
            raw in proptest::collection::vec(0u32..1000, 2..30),
            picks in proptest::collection::vec(0usize..1000, 1..5),
            b1 in -1i8..=1, b2 in -1i8..=1,
        ) {
            let (v, m) = setup();
            let ids: Vec<TokenId> = raw.iter().map(|r| r % v.len() as u32).collect();
            let mut pos: Vec<usize> = picks.iter().map(|p| p % ids.len()).collect();
            pos.sort_unstable();
            pos.dedup();
            let got = pitfall_objective(&m, &ids, &pos, b1, b2).unwrap();
            prop_assert!((got - objective_oracle(&m, &ids, &pos, b1, b2)).abs() < 1e-9);
        }
    }

    #[test]
    fn candidate_contract() {
        let (v, m) = setup();
        let pool = fill_candidates(&v, &InvisibleCatalog::default());
        let ids = v.encode(TEXT).unwrap().ids;
        let mut rng = seeded(1);
        let all = propose_candidates(&m, &ids, 3, pool.len(), &pool, -1, -1, &mut rng);
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, pool);
        for k in [1, 2, 7, 16] {
            let c = propose_candidates(&m, &ids, 3, k, &pool, -1, -1, &mut rng);
            assert_eq!(c.len(), k.min(pool.len()));
            let mut d = c.clone();
            d.sort_unstable();
            d.dedup();
            assert_eq!(d.len(), c.len());
        }
        let a = propose_candidates(&m, &ids, 3, 8, &pool, -1, -1, &mut seeded(5));
        let b = propose_candidates(&m, &ids, 3, 8, &pool, -1, -1, &mut seeded(5));
        assert_eq!(a, b);
    }

    #[test]
    fn batch_best_never_beats_exhaustive_scan() {
        let v = train_bpe(&["ab ba abba baab"], 0).unwrap();
        assert!(v.len() <= 50);
        let corpus = [v.encode("ab ba abba baab ab").unwrap().ids];
        let m = NGramModel::fit(NGramConfig::new(v.len()).with_order(2), &corpus, 1.0, "p").unwrap();
        let pool = fill_candidates(&v, &InvisibleCatalog::default());
        let ids = v.encode("abba ab").unwrap().ids;
        for pos in 0..ids.len() {
            let best_exhaustive = pool
                .iter()
                .map(|&tok| {
                    let mut c = ids.clone();
                    c[pos] = tok;
                    pitfall_objective(&m, &c, &[pos], -1, -1).unwrap()
                })
                .fold(f64::INFINITY, f64::min);
            let params = GcgParams { tau: 5, batch_size: 8, cand_k: 4, beta1: -1, beta2: -1, seed: pos as u64 };
            let source = ShortlistSource { model: &m, pool: &pool, beta1: -1, beta2: -1 };
            let out = gcg_search(&m, &source, ids.clone(), vec![pos], &params, Execution::Sequential).unwrap();
            assert!(out.objective >= best_exhaustive - 1e-12);
        }
    }

    #[test]
    fn tau_zero_and_monotone_trace() {
        let (v, m) = setup();
        let pool = fill_candidates(&v, &InvisibleCatalog::default());
        let ids = v.encode(TEXT).unwrap().ids;
        let positions = vec![2, 5, 9];
        let source = ShortlistSource { model: &m, pool: &pool, beta1: -1, beta2: -1 };
        let p0 = GcgParams { tau: 0, batch_size: 8, cand_k: 8, beta1: -1, beta2: -1, seed: 3 };
        let out = gcg_search(&m, &source, ids.clone(), positions.clone(), &p0, Execution::Sequential).unwrap();
        assert_eq!(out.ids, ids);
        assert!(out.trace.is_empty());
        let p = GcgParams { tau: 30, ..p0 };
        let out = gcg_search(&m, &source, ids.clone(), positions.clone(), &p, Execution::Sequential).unwrap();
        assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.objective <= out.initial_objective);
        let coherent = SearchState {
            ids: out.ids.clone(),
            positions: positions.clone(),
            objective: out.objective,
            iteration: 30,
            rng: seeded(0),
        };
        assert!(coherent.is_coherent(&m, -1, -1));
        // only fill positions change
        for (i, (a, b)) in ids.iter().zip(&out.ids).enumerate() {
            if !positions.contains(&i) {
                assert_eq!(a, b);
            }
        }
        let par = gcg_search(&m, &source, ids, positions, &p, Execution::Parallel).unwrap();
        assert_eq!(par, out);
    }

    /// 10-token vocabulary, two fill positions: the search should reach the
    /// optimum of the 100 fill pairs in nearly every seeded trial.
    #[test]
    fn reaches_global_optimum_on_tiny_problem() {
        let v = train_bpe(&["abcdefghij"], 0).unwrap();
        let v = Vocabulary::from_parts(
            v.tokens().iter().filter(|t| !InvisibleCatalog::default().contains(t.chars().next().unwrap())).cloned().collect(),
            v.base_alphabet().iter().copied().filter(|c| c.is_ascii()).collect(),
            0,
        )
        .unwrap();
        assert_eq!(v.len(), 10);
        let mut hits = 0;
        for trial in 0..100u64 {
            let mut rng = seeded(trial);
            let text: String = (0..40).map(|_| (b'a' + rng.random_range(0..10u8)) as char).collect();
            let corpus = [v.encode(&text).unwrap().ids];
            let m = NGramModel::fit(NGramConfig::new(10).with_order(2), &corpus, 1.0, "p").unwrap();
            let ids = v.encode("abcdefgh").unwrap().ids;
            let positions = vec![2, 5];
            let pool: Vec<TokenId> = (0..10).collect();
            let mut best = f64::INFINITY;
            for x in 0..10 {
                for y in 0..10 {
                    let mut c = ids.clone();
                    c[2] = x;
                    c[5] = y;
                    best = best.min(pitfall_objective(&m, &c, &positions, -1, -1).unwrap());
                }
            }
            let source = ShortlistSource { model: &m, pool: &pool, beta1: -1, beta2: -1 };
            let params = GcgParams { tau: 20, batch_size: 32, cand_k: 16, beta1: -1, beta2: -1, seed: trial };
            let out = gcg_search(&m, &source, ids, positions, &params, Execution::Sequential).unwrap();
            if (out.objective - best).abs() < 1e-9 {
                hits += 1;
            }
        }
        assert!(hits >= 95, "{hits}/100");
    }

    #[test]
    fn tp_op_shares_tp_positions_and_improves() {
        let (v, m) = setup();
        let seq = v.encode(TEXT).unwrap();
        let mut cfg = GuardConfig::new(Strategy::TpOp, 0.3, 7);
        cfg.tau = 20;
        let (op, out) = plan_tp_op_traced(&cfg, &v, &seq, &m).unwrap();
        let tp = plan_tp(&cfg, &v, &seq, &m.score_ids(&seq.ids).unwrap()).unwrap();
        let keys = |p: &PerturbationPlan| p.inserts_by_gap().into_keys().collect::<Vec<_>>();
        assert_eq!(keys(&op.plan), keys(&tp.plan));
        let out = out.unwrap();
        assert!(out.objective <= out.initial_objective);
        assert_eq!((GuardConfig::default().beta1, GuardConfig::default().beta2), (-1, -1));
    }

    #[test]
    fn oov_candidate_counts() {
        let cat = InvisibleCatalog::default();
        assert_eq!(oov_candidates(2, &[], &cat).len(), 5);
        assert_eq!(oov_candidates(8, &[], &cat).len(), 35);
        assert_eq!(oov_candidates(8, &[3], &cat).len(), 30);
        assert!(oov_candidates(1, &[], &cat).is_empty());
    }

    #[test]
    fn oov_pp_adopts_exhaustive_best() {
        let (v, m) = setup();
        let text = "the language";
        let seq = v.encode(text).unwrap();
        let mut cfg = GuardConfig::new(Strategy::TpOovPp, 0.5, 1);
        cfg.slots = None;
        let out = plan_tp_oov_pp(&cfg, &v, &seq, &m).unwrap();
        let Edit::Split { token_index, char_offset, ch } = out.plan.edits[0] else { panic!() };
        // recompute every alternative for the first split directly on the re-encoded text
        let len = v.token(seq.ids[token_index]).unwrap().chars().count();
        let value = |off: usize, c: char| {
            let plan = plan_from_edits(vec![Edit::Split { token_index, char_offset: off, ch: c }]);
            let g = apply_plan(text, &seq, &plan, &v, InvisibleMode::Chars, Strategy::TpOovPp, &cfg.catalog).unwrap();
            let enc = v.encode(&g.guarded_plain_text).unwrap();
            let (s, _) = seq.spans[token_index];
            let (lo, hi) = (s, seq.spans[token_index].1 + 1);
            let pos: Vec<usize> =
                enc.spans.iter().enumerate().filter(|(_, &(a, b))| a < hi && b > lo).map(|(i, _)| i).collect();
            pitfall_objective(&m, &enc.ids, &pos, -1, -1).unwrap()
        };
        let chosen = value(char_offset, ch);
        for (off, c) in oov_candidates(len, &[], &cfg.catalog) {
            assert!(chosen <= value(off, c) + 1e-12);
        }
    }

    #[test]
    fn oov_pp_beats_random_splits() {
        let (v, m) = setup();
        let seq = v.encode(TEXT).unwrap();
        let mut wins = 0;
        let mut total = 0;
        for seed in 0..10 {
            let mut cfg = GuardConfig::new(Strategy::TpOovPp, 0.1, seed);
            cfg.beta2 = 0;
            let pp = plan_tp_oov_pp(&cfg, &v, &seq, &m).unwrap();
            let rnd = plan_tp_oov(&cfg, &v, &seq, &m.score_ids(&seq.ids).unwrap()).unwrap();
            // summed per-trigger objective over the pieces of each split token
            let score = |p: &PerturbationPlan| {
                let g = apply_plan(TEXT, &seq, p, &v, InvisibleMode::Chars, cfg.strategy, &cfg.catalog).unwrap();
                let splits = p.splits_by_token();
                let mut shift = 0;
                let mut total = 0.0;
                for (i, &(s, e)) in seq.spans.iter().enumerate() {
                    let n = splits.get(&i).map_or(0, Vec::len);
                    let (gs, ge) = (s + shift, e + shift + n);
                    shift += n;
                    if n == 0 {
                        continue;
                    }
                    let pos: Vec<usize> = g
                        .guarded_seq
                        .spans
                        .iter()
                        .enumerate()
                        .filter(|(_, &(a, b))| a < ge && b > gs)
                        .map(|(k, _)| k)
                        .collect();
                    total += pitfall_objective(&m, &g.guarded_seq.ids, &pos, cfg.beta1, cfg.beta2).unwrap();
                }
                total
            };
            total += 1;
            if score(&pp.plan) <= score(&rnd.plan) + 1e-9 {
                wins += 1;
            }
        }
        assert!(wins * 10 >= total * 9, "{wins}/{total}");
    }

    #[test]
    fn oov_pp_matches_guarded_encoding() {
        let (v, m) = setup();
        let seq = v.encode(TEXT).unwrap();
        let cfg = GuardConfig::new(Strategy::TpOovPp, 0.4, 2);
        let out = plan_tp_oov_pp(&cfg, &v, &seq, &m).unwrap();
        out.plan.validate(&seq, &cfg.catalog).unwrap();
        let g = apply_plan(TEXT, &seq, &out.plan, &v, InvisibleMode::Chars, cfg.strategy, &cfg.catalog).unwrap();
        assert_eq!(v.encode(&g.guarded_plain_text).unwrap().ids, g.guarded_seq.ids);
        assert!(g.guarded_seq.len() > seq.len());
    }
}
