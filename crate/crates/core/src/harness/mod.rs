//! End-to-end experiments on a split corpus.
//!
//! [`prepare`] builds everything that does not depend on the protection
//! strategy (split, vocabulary, proxy and reference models, the exposure
//! reference population); [`run_with`] then guards D_pro, trains the target
//! on the crawled copies and evaluates it. Reports contain no timings or
//! thread counts, so two runs with one config serialize byte-identically.

mod corpus;
mod studies;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use corpus::{
    split_corpus, synth_corpus, synth_documents, Corpus, CorpusSplit, Document, SplitSpec, SynthSpec, PINNED_SEED,
};
pub use studies::{
    detectability, ks_distance, utility_report, watermark_detect, watermark_statistic, DetectabilityReport,
    UtilityReport, WatermarkResult, WatermarkSpec,
};

use crate::catalog::INSERT_DELIMITER;
use crate::cloak::{self, CloakError};
use crate::exec::Execution;
use crate::metrics::{self, ExploitationRecord, MetricsError, RefKind, SkewNormalFit};
use crate::mia::{self, MaxMetrics, MiaError, MiaResult, SignalRecord};
use crate::perturb::{self, BudgetReport, GuardConfig, InvisibleMode, PerturbError, PlanWarning, Proxy, Strategy};
use crate::rng::{doc_seed, seeded, sub_seed};
use crate::scorer::{sequence_loss, NGramConfig, NGramModel, ScorerError, SequenceScorer, TrainRecord};
use crate::tokenizer::{train_bpe, TokenId, TokenizerError, Vocabulary};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),
    #[error("corpus too small: {0}")]
    CorpusTooSmall(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Cloak(#[from] CloakError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Mia(#[from] MiaError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CorpusSource {
    Synthetic(SynthSpec),
    Jsonl { path: PathBuf },
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Synthetic(SynthSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinualSpec {
    /// Evaluation points including the initial one; 1 disables the study.
    pub stages: usize,
    pub fresh_docs_per_stage: usize,
}

impl Default for ContinualSpec {
    fn default() -> Self {
        Self { stages: 1, fresh_docs_per_stage: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusSource,
    pub split: SplitSpec,
    pub vocab_merges: usize,
    pub guard: GuardConfig,
    pub target_order: usize,
    pub alpha: f64,
    pub proxy_order: usize,
    pub chunk_tokens: usize,
    pub k_frac: f64,
    pub fprs: Vec<f64>,
    pub bootstrap_iters: usize,
    /// Warm the target on D_aux before D.
    pub backdoor: bool,
    pub aux_weight: f64,
    pub continual: ContinualSpec,
    pub execution: Execution,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: PINNED_SEED,
            corpus: CorpusSource::default(),
            split: SplitSpec::default(),
            vocab_merges: 2000,
            guard: GuardConfig::default(),
            target_order: 4,
            alpha: 0.1,
            proxy_order: 2,
            chunk_tokens: 64,
            k_frac: mia::DEFAULT_MINK_FRAC,
            fprs: mia::DEFAULT_FPRS.to_vec(),
            bootstrap_iters: 200,
            backdoor: false,
            aux_weight: 2.0,
            continual: ContinualSpec::default(),
            execution: Execution::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.guard.validate()?;
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.into()));
        if self.target_order == 0 || self.proxy_order == 0 {
            return bad("model orders must be >= 1");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if self.chunk_tokens == 0 {
            return bad("chunk_tokens must be >= 1");
        }
        if !(self.k_frac > 0.0 && self.k_frac <= 1.0) {
            return bad("k_frac must be in (0, 1]");
        }
        if self.fprs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("fprs must be in [0, 1]");
        }
        if self.bootstrap_iters == 0 {
            return bad("bootstrap_iters must be >= 1");
        }
        if !(self.aux_weight > 0.0 && self.aux_weight.is_finite()) {
            return bad("aux_weight must be positive");
        }
        if self.continual.stages == 0 {
            return bad("continual.stages must be >= 1");
        }
        if self.backdoor && !(self.split.ratios[0] > 0.0) {
            return bad("backdoor training needs a non-empty D_aux split");
        }
        Ok(())
    }

    /// The part of the config that [`prepare`] depends on.
    fn preparation_key(&self) -> Self {
        Self { guard: GuardConfig::default(), execution: Execution::default(), ..self.clone() }
    }
}

fn ngram(vocab: &Vocabulary, order: usize, alpha: f64) -> NGramConfig {
    NGramConfig::new(vocab.len()).with_order(order).with_alpha(alpha)
}

fn encode_all(vocab: &Vocabulary, docs: &[Document], exec: Execution) -> Result<Vec<Vec<TokenId>>, HarnessError> {
    Ok(exec.try_map(docs, |d| vocab.encode(&d.text).map(|s| s.ids))?)
}

fn losses(model: &dyn SequenceScorer, seqs: &[Vec<TokenId>], exec: Execution) -> Result<Vec<f64>, HarnessError> {
    Ok(exec.try_map(seqs, |ids| -> Result<f64, ScorerError> { sequence_loss(&model.score_ids(ids)?) })?)
}

/// Non-overlapping windows of `size` tokens; a tail shorter than half a
/// window joins the previous one.
pub fn chunk_ids(ids: &[TokenId], size: usize) -> Vec<&[TokenId]> {
    let mut out: Vec<&[TokenId]> = Vec::new();
    let mut at = 0;
    while at < ids.len() {
        let end = (at + size).min(ids.len());
        if end - at < size.div_ceil(2) && !out.is_empty() {
            let prev_start = at - out.last().expect("non-empty").len();
            *out.last_mut().expect("non-empty") = &ids[prev_start..end];
        } else {
            out.push(&ids[at..end]);
        }
        at = end;
    }
    out
}

/// Everything an experiment needs that does not depend on the guard.
pub struct Prepared {
    key: ExperimentConfig,
    pub corpus: Corpus,
    pub split: CorpusSplit,
    /// Documents reserved for continual-training stages.
    pub fresh: Vec<Document>,
    pub vocab: Vocabulary,
    aux_ids: Vec<Vec<TokenId>>,
    un_ids: Vec<Vec<TokenId>>,
    pro_ids: Vec<Vec<TokenId>>,
    non_ids: Vec<Vec<TokenId>>,
    test_ids: Vec<Vec<TokenId>>,
    fresh_ids: Vec<Vec<TokenId>>,
    /// Indices into D_non of the non-member sample.
    nonmember_idx: Vec<usize>,
    pub proxy: NGramModel,
    /// Reference model for the calibrated loss signal.
    pub mia_ref: NGramModel,
    /// Target stand-in trained without D_pro.
    pub exposure_ref: NGramModel,
    np_target: NGramModel,
    ref_fit: SkewNormalFit,
}

impl Prepared {
    pub fn nonmembers(&self) -> Vec<&Document> {
        self.nonmember_idx.iter().map(|&i| &self.split.non[i]).collect()
    }

    /// Warm start of every target: empty, or D_aux at `aux_weight`.
    fn base_model(&self, cfg: &ExperimentConfig) -> Result<NGramModel, HarnessError> {
        let empty = NGramModel::empty(ngram(&self.vocab, cfg.target_order, cfg.alpha))?;
        Ok(if cfg.backdoor { empty.continual_update(&self.aux_ids, cfg.aux_weight, "aux")? } else { empty })
    }
}

fn fresh_documents(cfg: &ExperimentConfig, split: &CorpusSplit) -> Result<Vec<Document>, HarnessError> {
    let need = (cfg.continual.stages - 1) * cfg.continual.fresh_docs_per_stage;
    if need == 0 {
        return Ok(Vec::new());
    }
    match &cfg.corpus {
        CorpusSource::Synthetic(spec) => Ok(synth_documents(spec, spec.n_docs..spec.n_docs + need)),
        CorpusSource::Jsonl { .. } => {
            if split.test.len() < need {
                return Err(HarnessError::CorpusTooSmall(format!(
                    "continual training needs {need} fresh documents, the test split has {}",
                    split.test.len()
                )));
            }
            Ok(split.test[..need].to_vec())
        }
    }
}

pub fn load_corpus(source: &CorpusSource) -> Result<Corpus, HarnessError> {
    match source {
        CorpusSource::Synthetic(spec) => synth_corpus(spec),
        CorpusSource::Jsonl { path } => Corpus::load_jsonl(path),
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, HarnessError> {
    let corpus = load_corpus(&cfg.corpus)?;
    prepare_corpus(cfg, corpus)
}

pub fn prepare_corpus(cfg: &ExperimentConfig, corpus: Corpus) -> Result<Prepared, HarnessError> {
    cfg.validate()?;
    let exec = cfg.execution;
    let split = split_corpus(&corpus, &cfg.split)?;
    let fresh = fresh_documents(cfg, &split)?;
    let mut texts = corpus.texts();
    texts.extend(fresh.iter().map(|d| d.text.as_str()));
    let vocab = train_bpe(&texts, cfg.vocab_merges)?;

    let aux_ids = encode_all(&vocab, &split.aux, exec)?;
    let un_ids = encode_all(&vocab, split.unprotected(), exec)?;
    let pro_ids = encode_all(&vocab, split.protected(), exec)?;
    let non_ids = encode_all(&vocab, &split.non, exec)?;
    let test_ids = encode_all(&vocab, &split.test, exec)?;
    let fresh_ids = encode_all(&vocab, &fresh, exec)?;

    let n_pro = pro_ids.len();
    let mut nonmember_idx = if non_ids.len() <= n_pro {
        (0..non_ids.len()).collect()
    } else {
        index::sample(&mut seeded(sub_seed(cfg.seed, "nonmembers")), non_ids.len(), n_pro).into_vec()
    };
    nonmember_idx.sort_unstable();

    let proxy = NGramModel::fit(ngram(&vocab, cfg.proxy_order, cfg.alpha), &aux_ids, 1.0, "aux")?;
    let mut prep = Prepared {
        key: cfg.preparation_key(),
        corpus,
        split,
        fresh,
        vocab,
        aux_ids,
        un_ids,
        pro_ids,
        non_ids,
        test_ids,
        fresh_ids,
        nonmember_idx,
        mia_ref: proxy.clone(),
        exposure_ref: proxy.clone(),
        np_target: proxy.clone(),
        proxy,
        ref_fit: SkewNormalFit::from_params(0.0, 1.0, 0.0),
    };
    let base = prep.base_model(cfg)?;
    prep.mia_ref = if cfg.backdoor {
        base.clone()
    } else {
        NGramModel::fit(ngram(&prep.vocab, cfg.target_order, cfg.alpha), &prep.aux_ids, 1.0, "aux")?
    };
    prep.exposure_ref = base.continual_update(&prep.un_ids, 1.0, "d_un")?;
    prep.np_target = prep.exposure_ref.clone().continual_update(&prep.pro_ids, 1.0, "d_pro")?;
    let population = losses(&prep.exposure_ref, &prep.non_ids, exec)?;
    prep.ref_fit = metrics::fit_skew_normal(&population)?;
    Ok(prep)
}

/// One protected document after guarding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuardedDoc {
    pub id: String,
    /// What a crawler collects: the plain-text rendering, or the text
    /// content of the HTML fragment in style modes.
    pub crawled_text: String,
    pub crawled_ids: Vec<TokenId>,
    pub report: BudgetReport,
    pub warnings: Vec<PlanWarning>,
}

/// Plans and renders one document with the per-document seed.
pub fn guard_document(
    doc: &Document,
    guard: &GuardConfig,
    vocab: &Vocabulary,
    proxy: Proxy<'_>,
) -> Result<GuardedDoc, HarnessError> {
    let seq = vocab.encode(&doc.text)?;
    let cfg = GuardConfig { seed: doc_seed(guard.seed, &doc.id), ..guard.clone() };
    let outcome = perturb::plan(&cfg, vocab, &seq, proxy)?;
    let guarded =
        perturb::apply_plan(&doc.text, &seq, &outcome.plan, vocab, cfg.invisible_mode, cfg.strategy, &cfg.catalog)?;
    let report = guarded.budget_report(&seq, cfg.budget, &cfg.catalog);
    let crawled_text = match &guarded.guarded_html {
        Some(html) if cfg.invisible_mode != InvisibleMode::Chars => cloak::crawler_text(html)?,
        _ => guarded.guarded_plain_text.clone(),
    };
    let crawled_ids = vocab.encode(&crawled_text)?.ids;
    Ok(GuardedDoc { id: doc.id.clone(), crawled_text, crawled_ids, report, warnings: outcome.warnings })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub provenance: String,
    pub documents: usize,
    pub aux: usize,
    pub d: usize,
    pub protected: usize,
    pub non: usize,
    pub nonmember_sample: usize,
    pub test: usize,
    pub fresh: usize,
    pub vocab_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtectionSummary {
    pub documents: usize,
    pub mean_edit_ratio: f64,
    pub max_edit_ratio: f64,
    pub mean_insertion_events: f64,
    pub multiset_ok: bool,
    pub ratio_exceeds_budget: usize,
    pub warnings: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaLevel {
    pub members: usize,
    pub nonmembers: usize,
    pub results: Vec<MiaResult>,
    pub max: MaxMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExposureSummary {
    pub population: usize,
    pub target_fit: SkewNormalFit,
    pub ref_fit: SkewNormalFit,
    pub mean_exploitation: f64,
    pub positive_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: usize,
    pub fresh_docs: usize,
    pub max_auc_sample: f64,
    pub max_auc_user: f64,
    pub test_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub strategy: Strategy,
    pub budget: f64,
    pub invisible_mode: InvisibleMode,
    pub backdoor: bool,
    pub seed: u64,
    pub guard_seed: u64,
    pub corpus: CorpusSummary,
    pub protection: ProtectionSummary,
    pub train_log: Vec<TrainRecord>,
    pub sample_level: MiaLevel,
    pub user_level: MiaLevel,
    pub exposure: ExposureSummary,
    pub exploitation: Vec<ExploitationRecord>,
    pub detectability: DetectabilityReport,
    pub utility: UtilityReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub continual: Option<Vec<StageResult>>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// Max-over-signals sample-level AUC.
    pub fn max_auc(&self) -> f64 {
        self.sample_level.max.auc
    }
}

/// Signal records for the chunks of each document.
fn chunk_records(
    vocab: &Vocabulary,
    target: &NGramModel,
    reference: &NGramModel,
    docs: &[(&Document, &Vec<TokenId>)],
    cfg: &ExperimentConfig,
) -> Result<Vec<SignalRecord>, HarnessError> {
    let per_doc = cfg.execution.try_map(docs, |(doc, ids)| -> Result<Vec<SignalRecord>, HarnessError> {
        let mut out = Vec::new();
        for (k, chunk) in chunk_ids(ids, cfg.chunk_tokens).into_iter().enumerate() {
            let t = target.score_ids(chunk)?;
            let r = reference.score_ids(chunk)?;
            let raw = vocab.decode_ids(chunk)?;
            out.push(SignalRecord::compute(
                format!("{}#{k}", doc.id),
                Some(doc.owner().to_string()),
                &t,
                Some(&r),
                raw.as_bytes(),
                cfg.k_frac,
            )?);
        }
        Ok(out)
    })?;
    Ok(per_doc.into_iter().flatten().collect())
}

fn mia_levels(
    prep: &Prepared,
    target: &NGramModel,
    cfg: &ExperimentConfig,
) -> Result<(MiaLevel, MiaLevel), HarnessError> {
    let members: Vec<(&Document, &Vec<TokenId>)> = prep.split.protected().iter().zip(&prep.pro_ids).collect();
    let nonmembers: Vec<(&Document, &Vec<TokenId>)> =
        prep.nonmember_idx.iter().map(|&i| (&prep.split.non[i], &prep.non_ids[i])).collect();
    let m = chunk_records(&prep.vocab, target, &prep.mia_ref, &members, cfg)?;
    let n = chunk_records(&prep.vocab, target, &prep.mia_ref, &nonmembers, cfg)?;
    let level = |m: &[SignalRecord], n: &[SignalRecord], label: &str| -> Result<MiaLevel, HarnessError> {
        let results =
            mia::evaluate_records(m, n, &cfg.fprs, cfg.bootstrap_iters, sub_seed(cfg.seed, label), cfg.execution)?;
        let max = mia::max_metrics(&results).ok_or(MiaError::Empty("signals"))?;
        Ok(MiaLevel { members: m.len(), nonmembers: n.len(), results, max })
    };
    let sample = level(&m, &n, "mia:sample")?;
    let user = level(&mia::aggregate_user_level(&m)?, &mia::aggregate_user_level(&n)?, "mia:user")?;
    Ok((sample, user))
}

fn protection_summary(guarded: &[GuardedDoc]) -> ProtectionSummary {
    let n = guarded.len().max(1) as f64;
    let mut warnings = BTreeMap::new();
    for g in guarded {
        for w in &g.warnings {
            let key = serde_json::to_value(w).ok().and_then(|v| v["warning"].as_str().map(String::from));
            *warnings.entry(key.unwrap_or_default()).or_default() += 1;
        }
    }
    ProtectionSummary {
        documents: guarded.len(),
        mean_edit_ratio: guarded.iter().map(|g| g.report.ratio).sum::<f64>() / n,
        max_edit_ratio: guarded.iter().map(|g| g.report.ratio).fold(0.0, f64::max),
        mean_insertion_events: guarded.iter().map(|g| g.report.insertion_events as f64).sum::<f64>() / n,
        multiset_ok: guarded.iter().all(|g| g.report.multiset_ok),
        ratio_exceeds_budget: guarded.iter().filter(|g| g.report.ratio_exceeds_budget).count(),
        warnings,
    }
}

/// Guards D_pro with `cfg.guard` and returns the crawled documents.
pub fn guard_protected(prep: &Prepared, cfg: &ExperimentConfig) -> Result<Vec<GuardedDoc>, HarnessError> {
    let proxy = if cfg.guard.strategy == Strategy::Np { Proxy::None } else { Proxy::NGram(&prep.proxy) };
    cfg.execution.try_map(prep.split.protected(), |d| guard_document(d, &cfg.guard, &prep.vocab, proxy))
}

/// Target trained on D_un plus the crawled copies of D_pro.
pub fn train_target(prep: &Prepared, cfg: &ExperimentConfig, guarded: &[GuardedDoc]) -> Result<NGramModel, HarnessError> {
    let mut train: Vec<&[TokenId]> = prep.un_ids.iter().map(Vec::as_slice).collect();
    train.extend(guarded.iter().map(|g| g.crawled_ids.as_slice()));
    Ok(prep.base_model(cfg)?.continual_update(&train, 1.0, "d")?)
}

/// Runs one protection experiment on prepared data. `cfg` may differ from
/// the preparation config only in `guard` and `execution`.
pub fn run_with(prep: &Prepared, cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    cfg.validate()?;
    if cfg.preparation_key() != prep.key {
        return Err(HarnessError::InvalidConfig("config differs from the one the data was prepared with".into()));
    }
    let exec = cfg.execution;
    let guarded = guard_protected(prep, cfg)?;
    let target = train_target(prep, cfg, &guarded)?;
    let (sample_level, user_level) = mia_levels(prep, &target, cfg)?;

    let population = losses(&target, &prep.non_ids, exec)?;
    let target_fit = metrics::fit_skew_normal(&population)?;
    let px_target = losses(&target, &prep.pro_ids, exec)?;
    let px_ref = losses(&prep.exposure_ref, &prep.pro_ids, exec)?;
    let exploitation: Vec<ExploitationRecord> = prep
        .split
        .protected()
        .iter()
        .zip(px_target.iter().zip(&px_ref))
        .map(|(d, (&pt, &pr))| {
            let e_t = metrics::approx_exposure(&target_fit, pt);
            let e_r = metrics::approx_exposure(&prep.ref_fit, pr);
            ExploitationRecord::new(d.id.clone(), pt, e_t, e_r, RefKind::Approx)
        })
        .collect();
    let n_ex = exploitation.len().max(1) as f64;
    let exposure = ExposureSummary {
        population: population.len(),
        target_fit,
        ref_fit: prep.ref_fit,
        mean_exploitation: exploitation.iter().map(|r| r.ex).sum::<f64>() / n_ex,
        positive_fraction: exploitation.iter().filter(|r| r.ex > 0.0).count() as f64 / n_ex,
    };

    let crawled: Vec<Vec<TokenId>> = guarded.iter().map(|g| g.crawled_ids.clone()).collect();
    let detect = detectability(&crawled, &prep.pro_ids, &prep.mia_ref, exec)?;
    let mut train_seqs: Vec<Vec<TokenId>> = prep.un_ids.clone();
    train_seqs.extend(crawled);
    let utility = utility_report(&target, &prep.np_target, &prep.test_ids, &train_seqs, &prep.pro_ids, exec)?;
    let continual = if cfg.continual.stages > 1 { Some(run_stages(prep, cfg, target.clone(), &sample_level, &user_level, utility.test_loss)?) } else { None };

    let s = &prep.split;
    Ok(ExperimentReport {
        strategy: cfg.guard.strategy,
        budget: cfg.guard.budget,
        invisible_mode: cfg.guard.invisible_mode,
        backdoor: cfg.backdoor,
        seed: cfg.seed,
        guard_seed: cfg.guard.seed,
        corpus: CorpusSummary {
            provenance: prep.corpus.provenance.clone(),
            documents: prep.corpus.len(),
            aux: s.aux.len(),
            d: s.d.len(),
            protected: s.n_protected,
            non: s.non.len(),
            nonmember_sample: prep.nonmember_idx.len(),
            test: s.test.len(),
            fresh: prep.fresh.len(),
            vocab_size: prep.vocab.len(),
        },
        protection: protection_summary(&guarded),
        train_log: target.train_log().to_vec(),
        sample_level,
        user_level,
        exposure,
        exploitation,
        detectability: detect,
        utility,
        continual,
    })
}

fn run_stages(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    mut target: NGramModel,
    sample: &MiaLevel,
    user: &MiaLevel,
    test_loss: f64,
) -> Result<Vec<StageResult>, HarnessError> {
    let per = cfg.continual.fresh_docs_per_stage;
    let mut out = vec![StageResult {
        stage: 0,
        fresh_docs: 0,
        max_auc_sample: sample.max.auc,
        max_auc_user: user.max.auc,
        test_loss,
    }];
    for stage in 1..cfg.continual.stages {
        let slice = &prep.fresh_ids[(stage - 1) * per..stage * per];
        target = target.continual_update(slice, 1.0, &format!("fresh:{stage}"))?;
        let (s, u) = mia_levels(prep, &target, cfg)?;
        let test = losses(&target, &prep.test_ids, cfg.execution)?;
        out.push(StageResult {
            stage,
            fresh_docs: stage * per,
            max_auc_sample: s.max.auc,
            max_auc_user: u.max.auc,
            test_loss: test.iter().sum::<f64>() / test.len() as f64,
        });
    }
    Ok(out)
}

pub fn run_protection_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    run_with(&prepare(cfg)?, cfg)
}

/// Same experiment with the target warmed on D_aux at `aux_weight`.
pub fn run_backdoor(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    run_protection_experiment(&ExperimentConfig { backdoor: true, ..cfg.clone() })
}

/// Same experiment followed by continual training on fresh data.
pub fn run_continual(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    if cfg.continual.stages < 2 {
        return Err(HarnessError::InvalidConfig("continual training needs at least 2 stages".into()));
    }
    run_protection_experiment(cfg)
}

/// Crawled ids of a plain-text rendering built piecewise, with the
/// positions of inserted tokens. Plans must not split tokens.
pub(crate) fn crawled_with_fills(
    vocab: &Vocabulary,
    text: &str,
    seq: &crate::tokenizer::TokenSeq,
    plan: &perturb::PerturbationPlan,
) -> Result<(Vec<TokenId>, Vec<usize>), HarnessError> {
    let delim = vocab
        .id_of(&INSERT_DELIMITER.to_string())
        .ok_or_else(|| HarnessError::InvalidConfig("vocabulary lacks the insert delimiter".into()))?;
    if !plan.splits_by_token().is_empty() {
        return Err(HarnessError::InvalidConfig("watermarks need an insertion strategy".into()));
    }
    let chars: Vec<char> = text.chars().collect();
    let inserts = plan.inserts_by_gap();
    let mut ids = Vec::new();
    let mut fills = Vec::new();
    let mut from = 0;
    for (&gap, fill) in &inserts {
        let at = if gap == seq.len() { chars.len() } else { seq.spans[gap].0 };
        let segment: String = chars[from..at].iter().collect();
        ids.extend(vocab.encode(&segment)?.ids);
        ids.push(delim);
        for &f in fill {
            fills.push(ids.len());
            ids.push(f);
            ids.push(delim);
        }
        from = at;
    }
    let segment: String = chars[from..].iter().collect();
    ids.extend(vocab.encode(&segment)?.ids);
    Ok((ids, fills))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            corpus: CorpusSource::Synthetic(SynthSpec { n_docs: 200, users: 50, ..SynthSpec::default() }),
            vocab_merges: 400,
            bootstrap_iters: 20,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn chunking() {
        let ids: Vec<TokenId> = (0..10).collect();
        let c = chunk_ids(&ids, 4);
        assert_eq!(c, vec![&ids[0..4], &ids[4..8], &ids[8..10]]);
        let c = chunk_ids(&ids, 6);
        assert_eq!(c, vec![&ids[0..6], &ids[6..10]]);
        let c = chunk_ids(&ids[..7], 6);
        assert_eq!(c, vec![&ids[0..7]]);
        assert_eq!(chunk_ids(&ids[..2], 64), vec![&ids[0..2]]);
        assert!(chunk_ids(&[], 4).is_empty());
    }

    #[test]
    fn np_experiment_shape() {
        let cfg = ExperimentConfig { guard: GuardConfig::new(Strategy::Np, 0.4, 3), ..small_config() };
        let prep = prepare(&cfg).unwrap();
        let r = run_with(&prep, &cfg).unwrap();
        assert_eq!(r.exploitation.len(), prep.split.n_protected);
        assert_eq!(r.corpus.protected, prep.split.protected().len());
        assert_eq!(r.detectability.ks_distance, 0.0);
        assert!((r.detectability.detector_auc - 0.5).abs() < 1e-12);
        assert!((r.utility.initial_loss - (prep.vocab.len() as f64).ln()).abs() < 1e-9);
        assert_eq!(r.utility.test_loss, r.utility.np_test_loss);
        assert!(r.max_auc() > 0.75, "{}", r.max_auc());
        let other = ExperimentConfig { alpha: 0.2, ..cfg.clone() };
        assert!(matches!(run_with(&prep, &other), Err(HarnessError::InvalidConfig(_))));
    }

    #[test]
    fn backdoor_logs_aux_weight() {
        let cfg = ExperimentConfig { guard: GuardConfig::new(Strategy::Np, 0.4, 3), ..small_config() };
        let r = run_backdoor(&cfg).unwrap();
        assert_eq!(r.train_log[0], TrainRecord { tag: "aux".into(), weight: 2.0 });
        assert_eq!(r.train_log[1].tag, "d");
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let cfg = ExperimentConfig::default();
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial: ExperimentConfig =
            serde_json::from_str(r#"{"seed": 5, "corpus": {"kind": "synthetic", "n_docs": 50}}"#).unwrap();
        assert_eq!(partial.seed, 5);
        assert!(matches!(partial.corpus, CorpusSource::Synthetic(SynthSpec { n_docs: 50, .. })));
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"seeed": 5}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"guard": {"budgett": 1}}"#).is_err());
        let no_aux = ExperimentConfig {
            backdoor: true,
            split: SplitSpec { ratios: [0.0, 4.0, 4.0, 1.0], ..SplitSpec::default() },
            ..ExperimentConfig::default()
        };
        assert!(matches!(no_aux.validate(), Err(HarnessError::InvalidConfig(_))));
    }

    #[test]
    fn continual_needs_two_stages() {
        assert!(run_continual(&small_config()).is_err());
        let cfg = ExperimentConfig {
            continual: ContinualSpec { stages: 3, fresh_docs_per_stage: 20 },
            guard: GuardConfig::new(Strategy::Np, 0.4, 3),
            ..small_config()
        };
        let r = run_continual(&cfg).unwrap();
        let stages = r.continual.unwrap();
        assert_eq!(stages.len(), 3);
        assert_eq!(stages[2].fresh_docs, 40);
    }

    #[test]
    fn reports_are_deterministic_across_execution() {
        let cfg = ExperimentConfig { guard: GuardConfig::new(Strategy::TpOov, 0.4, 9), ..small_config() };
        let a = run_protection_experiment(&cfg).unwrap().to_json();
        let seq = ExperimentConfig { execution: Execution::Sequential, ..cfg };
        assert_eq!(a, run_protection_experiment(&seq).unwrap().to_json());
    }

    #[test]
    fn piecewise_crawl_matches_encoding() {
        let cfg = small_config();
        let prep = prepare(&cfg).unwrap();
        let guard = GuardConfig::new(Strategy::Unp, 0.3, 5);
        for doc in prep.split.protected() {
            let seq = prep.vocab.encode(&doc.text).unwrap();
            let g = GuardConfig { seed: doc_seed(guard.seed, &doc.id), ..guard.clone() };
            let plan = perturb::plan(&g, &prep.vocab, &seq, Proxy::None).unwrap().plan;
            let (ids, fills) = crawled_with_fills(&prep.vocab, &doc.text, &seq, &plan).unwrap();
            let gd = guard_document(doc, &guard, &prep.vocab, Proxy::None).unwrap();
            assert_eq!(ids, gd.crawled_ids);
            let inserted: Vec<TokenId> = plan.inserts_by_gap().into_values().flatten().collect();
            assert_eq!(fills.iter().map(|&p| ids[p]).collect::<Vec<_>>(), inserted);
        }
    }
}
