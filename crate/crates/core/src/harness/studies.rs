use serde::{Deserialize, Serialize};

use super::{crawled_with_fills, losses, Document, HarnessError};
use crate::exec::Execution;
use crate::metrics::normal_cdf;
use crate::mia;
use crate::perturb::{self, GuardConfig, Proxy};
use crate::rng::{doc_seed, sub_seed};
use crate::scorer::{NGramConfig, NGramModel, SequenceScorer};
use crate::tokenizer::{TokenId, Vocabulary};

/// Two-sample Kolmogorov-Smirnov distance sup |F_a - F_b|.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectabilityReport {
    pub ks_distance: f64,
    /// AUC of perplexity as a detector of guarded text.
    pub detector_auc: f64,
    pub guarded_mean_loss: f64,
    pub clean_mean_loss: f64,
}

/// How well a scorer's per-document loss separates guarded from clean text.
pub fn detectability(
    guarded: &[Vec<TokenId>],
    clean: &[Vec<TokenId>],
    scorer: &dyn SequenceScorer,
    exec: Execution,
) -> Result<DetectabilityReport, HarnessError> {
    let g = losses(scorer, guarded, exec)?;
    let c = losses(scorer, clean, exec)?;
    Ok(DetectabilityReport {
        ks_distance: ks_distance(&g, &c),
        detector_auc: mia::auc(&g, &c)?,
        guarded_mean_loss: g.iter().sum::<f64>() / g.len() as f64,
        clean_mean_loss: c.iter().sum::<f64>() / c.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    /// Mean per-document loss on the test split.
    pub test_loss: f64,
    /// Same for the target trained on unguarded D.
    pub np_test_loss: f64,
    /// Untrained model: ln V.
    pub initial_loss: f64,
    pub train_loss: f64,
    /// Target loss on the original protected documents.
    pub protected_loss: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

pub fn utility_report(
    target: &NGramModel,
    np_target: &NGramModel,
    test: &[Vec<TokenId>],
    train: &[Vec<TokenId>],
    protected: &[Vec<TokenId>],
    exec: Execution,
) -> Result<UtilityReport, HarnessError> {
    let initial = NGramModel::empty(NGramConfig { order: 1, ..target.config() })?;
    Ok(UtilityReport {
        test_loss: mean(&losses(target, test, exec)?),
        np_test_loss: mean(&losses(np_target, test, exec)?),
        initial_loss: mean(&losses(&initial, test, exec)?),
        train_loss: mean(&losses(target, train, exec)?),
        protected_loss: mean(&losses(target, protected, exec)?),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WatermarkSpec {
    pub n_null: usize,
    /// Score inserted tokens in place rather than on their own.
    pub with_context: bool,
    pub seed: u64,
}

impl Default for WatermarkSpec {
    fn default() -> Self {
        Self { n_null: 100, with_context: true, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WatermarkResult {
    pub observed: f64,
    pub null_mean: f64,
    pub null_std: f64,
    pub n_null: usize,
    pub with_context: bool,
    pub z: f64,
    /// Lower-tail p-value Φ(z).
    pub p: f64,
}

/// Mean target NLL of the tokens the guard inserts into `docs` when run
/// with `guard` (each document on its own seed).
pub fn watermark_statistic(
    target: &dyn SequenceScorer,
    vocab: &Vocabulary,
    docs: &[Document],
    guard: &GuardConfig,
    proxy: Proxy<'_>,
    with_context: bool,
) -> Result<f64, HarnessError> {
    let (mut sum, mut n) = (0.0, 0usize);
    for doc in docs {
        let seq = vocab.encode(&doc.text)?;
        let cfg = GuardConfig { seed: doc_seed(guard.seed, &doc.id), ..guard.clone() };
        let plan = perturb::plan(&cfg, vocab, &seq, proxy)?.plan;
        if with_context {
            let (ids, fills) = crawled_with_fills(vocab, &doc.text, &seq, &plan)?;
            if fills.is_empty() {
                continue;
            }
            for lp in target.score_positions(&ids, &fills)? {
                sum -= lp;
                n += 1;
            }
        } else {
            for fill in plan.inserts_by_gap().values() {
                let s = target.score_ids(fill)?;
                sum -= s.logprobs.iter().sum::<f64>();
                n += fill.len();
            }
        }
    }
    if n == 0 {
        return Err(HarnessError::InvalidConfig("the guard inserted no tokens".into()));
    }
    Ok(sum / n as f64)
}

/// z-test of the owner's perturbations against `n_null` fresh ones that
/// the target never saw. Memorized watermarks give z < 0.
pub fn watermark_detect(
    target: &dyn SequenceScorer,
    vocab: &Vocabulary,
    docs: &[Document],
    guard: &GuardConfig,
    proxy: Proxy<'_>,
    spec: &WatermarkSpec,
    exec: Execution,
) -> Result<WatermarkResult, HarnessError> {
    if spec.n_null < 2 {
        return Err(HarnessError::InvalidConfig("watermark test needs n_null >= 2".into()));
    }
    let observed = watermark_statistic(target, vocab, docs, guard, proxy, spec.with_context)?;
    let null = exec.map_range(spec.n_null, |i| {
        let g = GuardConfig { seed: sub_seed(spec.seed, &format!("null:{i}")), ..guard.clone() };
        watermark_statistic(target, vocab, docs, &g, proxy, spec.with_context)
    });
    let null: Vec<f64> = null.into_iter().collect::<Result<_, _>>()?;
    let null_mean = mean(&null);
    let var = null.iter().map(|x| (x - null_mean).powi(2)).sum::<f64>() / (null.len() - 1) as f64;
    let null_std = var.sqrt();
    if !(null_std > 1e-12 * null_mean.abs().max(1.0)) {
        return Err(HarnessError::InvalidConfig("null distribution has zero variance".into()));
    }
    let z = (observed - null_mean) / null_std;
    Ok(WatermarkResult {
        observed,
        null_mean,
        null_std,
        n_null: spec.n_null,
        with_context: spec.with_context,
        z,
        p: normal_cdf(z),
    })
}
