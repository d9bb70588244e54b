//! Membership-inference signals and attack metrics.
//!
//! Every signal is oriented so that a larger value means "more likely a
//! training member", so one AUC convention serves all of them.

use std::collections::BTreeMap;
use std::io::Write as _;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::rng::{seeded, sub_seed};
use crate::scorer::{sequence_loss, ScoreVector, ScorerError};

#[derive(Debug, Error)]
pub enum MiaError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("score vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("record {0} has no user id")]
    MissingUser(String),
    #[error("non-finite score")]
    NonFinite,
    #[error(transparent)]
    Scorer(#[from] ScorerError),
}

pub const DEFAULT_MINK_FRAC: f64 = 0.2;
pub const DEFAULT_BOOTSTRAP_ITERS: usize = 1000;
pub const DEFAULT_FPRS: [f64; 2] = [0.01, 0.05];
/// Identity of the compressor behind the zlib signal.
pub const ZLIB_COMPRESSOR: &str = "zlib deflate, level 9";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    Loss,
    LossRef,
    #[serde(rename = "mink")]
    MinK,
    Zlib,
}

impl Signal {
    pub const ALL: [Signal; 4] = [Signal::Loss, Signal::LossRef, Signal::MinK, Signal::Zlib];

    pub fn name(self) -> &'static str {
        match self {
            Signal::Loss => "loss",
            Signal::LossRef => "loss_ref",
            Signal::MinK => "mink",
            Signal::Zlib => "zlib",
        }
    }
}

/// Negated mean NLL.
pub fn signal_loss(scores: &ScoreVector) -> Result<f64, MiaError> {
    Ok(-sequence_loss(scores)?)
}

/// Target loss calibrated by a reference model's loss.
pub fn signal_loss_ref(target: &ScoreVector, reference: &ScoreVector) -> Result<f64, MiaError> {
    if target.len() != reference.len() {
        return Err(MiaError::LengthMismatch(target.len(), reference.len()));
    }
    Ok(-(sequence_loss(target)? - sequence_loss(reference)?))
}

/// Mean of the ⌈k·len⌉ lowest log-probabilities.
pub fn signal_mink(scores: &ScoreVector, k_frac: f64) -> Result<f64, MiaError> {
    if !(k_frac > 0.0 && k_frac <= 1.0) {
        return Err(MiaError::InvalidParameter(format!("k_frac {k_frac} outside (0, 1]")));
    }
    if scores.is_empty() {
        return Err(MiaError::Empty("score vector"));
    }
    let n = scores.len();
    let k = ((k_frac * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut lp = scores.logprobs.clone();
    lp.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(lp[..k].iter().sum::<f64>() / k as f64)
}

/// Byte length of the zlib stream at level 9.
pub fn zlib_len(raw: &[u8]) -> usize {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::best());
    enc.write_all(raw).expect("writing to memory");
    enc.finish().expect("writing to memory").len()
}

/// Total log-likelihood over the compressed size in bits.
pub fn signal_zlib(scores: &ScoreVector, raw: &[u8]) -> Result<f64, MiaError> {
    if raw.is_empty() {
        return Err(MiaError::Empty("text"));
    }
    if scores.is_empty() {
        return Err(MiaError::Empty("score vector"));
    }
    Ok(scores.logprobs.iter().sum::<f64>() / (8 * zlib_len(raw)) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalRecord {
    pub id: String,
    pub user: Option<String>,
    /// A signal the inputs could not support is absent, never zero.
    pub signals: BTreeMap<Signal, f64>,
}

impl SignalRecord {
    pub fn compute(
        id: impl Into<String>,
        user: Option<String>,
        target: &ScoreVector,
        reference: Option<&ScoreVector>,
        raw_text: &[u8],
        k_frac: f64,
    ) -> Result<Self, MiaError> {
        let mut signals = BTreeMap::new();
        signals.insert(Signal::Loss, signal_loss(target)?);
        if let Some(r) = reference {
            signals.insert(Signal::LossRef, signal_loss_ref(target, r)?);
        }
        signals.insert(Signal::MinK, signal_mink(target, k_frac)?);
        if !raw_text.is_empty() {
            signals.insert(Signal::Zlib, signal_zlib(target, raw_text)?);
        }
        Ok(Self { id: id.into(), user, signals })
    }

    pub fn get(&self, s: Signal) -> Option<f64> {
        self.signals.get(&s).copied()
    }
}

fn check(members: &[f64], nonmembers: &[f64]) -> Result<(), MiaError> {
    if members.is_empty() {
        return Err(MiaError::Empty("member scores"));
    }
    if nonmembers.is_empty() {
        return Err(MiaError::Empty("non-member scores"));
    }
    if members.iter().chain(nonmembers).any(|x| x.is_nan()) {
        return Err(MiaError::NonFinite);
    }
    Ok(())
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Mann–Whitney AUC: P(member > non-member) + ½ P(tie).
pub fn auc(members: &[f64], nonmembers: &[f64]) -> Result<f64, MiaError> {
    check(members, nonmembers)?;
    let non = sorted(nonmembers);
    let mut wins = 0.0;
    for &m in members {
        let below = non.partition_point(|&x| x < m);
        let not_above = non.partition_point(|&x| x <= m);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (members.len() as f64 * non.len() as f64))
}

/// TPR at the smallest threshold whose non-member pass rate is at most `fpr`.
pub fn tpr_at_fpr(members: &[f64], nonmembers: &[f64], fpr: f64) -> Result<f64, MiaError> {
    check(members, nonmembers)?;
    if !(0.0..=1.0).contains(&fpr) {
        return Err(MiaError::InvalidParameter(format!("fpr {fpr} outside [0, 1]")));
    }
    let n = nonmembers.len();
    let allowed = (fpr * n as f64 + 1e-9).floor() as usize;
    if allowed >= n {
        return Ok(1.0);
    }
    // the threshold must sit above the (allowed+1)-th largest non-member
    let desc = {
        let mut v = sorted(nonmembers);
        v.reverse();
        v
    };
    let v = desc[allowed];
    Ok(members.iter().filter(|&&m| m > v).count() as f64 / members.len() as f64)
}

/// ROC points from (0, 0) to (1, 1), one per distinct score, descending.
pub fn roc(members: &[f64], nonmembers: &[f64]) -> Result<Vec<(f64, f64)>, MiaError> {
    check(members, nonmembers)?;
    let (m, n) = (sorted(members), sorted(nonmembers));
    let mut thresholds: Vec<f64> = m.iter().chain(&n).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut out = vec![(0.0, 0.0)];
    for t in thresholds {
        let fp = n.len() - n.partition_point(|&x| x < t);
        let tp = m.len() - m.partition_point(|&x| x < t);
        out.push((fp as f64 / n.len() as f64, tp as f64 / m.len() as f64));
    }
    Ok(out)
}

/// Mean AUC over `iters` resamples (with replacement) of both sides.
pub fn bootstrap_auc(
    members: &[f64],
    nonmembers: &[f64],
    iters: usize,
    seed: u64,
    exec: Execution,
) -> Result<f64, MiaError> {
    check(members, nonmembers)?;
    if iters == 0 {
        return Err(MiaError::InvalidParameter("bootstrap iterations must be >= 1".into()));
    }
    let aucs = exec.map_range(iters, |i| {
        let mut rng = seeded(sub_seed(seed, &format!("boot:{i}")));
        let m: Vec<f64> = (0..members.len()).map(|_| members[rng.random_range(0..members.len())]).collect();
        let n: Vec<f64> = (0..nonmembers.len()).map(|_| nonmembers[rng.random_range(0..nonmembers.len())]).collect();
        auc(&m, &n).expect("resamples are non-empty")
    });
    Ok(aucs.iter().sum::<f64>() / iters as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaResult {
    pub signal: Signal,
    pub auc: f64,
    /// Keyed by the FPR formatted with up to 4 decimals.
    pub tpr_at_fpr: BTreeMap<String, f64>,
    pub roc: Vec<(f64, f64)>,
    pub bootstrap_mean_auc: f64,
    pub bootstrap_iters: usize,
}

pub fn fpr_key(fpr: f64) -> String {
    let s = format!("{fpr:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub fn evaluate_signal(
    signal: Signal,
    members: &[f64],
    nonmembers: &[f64],
    fprs: &[f64],
    bootstrap_iters: usize,
    seed: u64,
    exec: Execution,
) -> Result<MiaResult, MiaError> {
    let mut tprs = BTreeMap::new();
    for &f in fprs {
        tprs.insert(fpr_key(f), tpr_at_fpr(members, nonmembers, f)?);
    }
    Ok(MiaResult {
        signal,
        auc: auc(members, nonmembers)?,
        tpr_at_fpr: tprs,
        roc: roc(members, nonmembers)?,
        bootstrap_mean_auc: bootstrap_auc(members, nonmembers, bootstrap_iters, sub_seed(seed, signal.name()), exec)?,
        bootstrap_iters,
    })
}

/// Per-signal evaluation over member and non-member records; signals
/// missing from any record are skipped.
pub fn evaluate_records(
    members: &[SignalRecord],
    nonmembers: &[SignalRecord],
    fprs: &[f64],
    bootstrap_iters: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<MiaResult>, MiaError> {
    let mut out = Vec::new();
    for s in Signal::ALL {
        let m: Option<Vec<f64>> = members.iter().map(|r| r.get(s)).collect();
        let n: Option<Vec<f64>> = nonmembers.iter().map(|r| r.get(s)).collect();
        if let (Some(m), Some(n)) = (m, n) {
            if !m.is_empty() && !n.is_empty() {
                out.push(evaluate_signal(s, &m, &n, fprs, bootstrap_iters, seed, exec)?);
            }
        }
    }
    Ok(out)
}

/// Elementwise maximum over signals of AUC and each TPR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxMetrics {
    pub auc: f64,
    pub tpr_at_fpr: BTreeMap<String, f64>,
}

pub fn max_metrics(results: &[MiaResult]) -> Option<MaxMetrics> {
    let first = results.first()?;
    let mut out = MaxMetrics { auc: first.auc, tpr_at_fpr: first.tpr_at_fpr.clone() };
    for r in &results[1..] {
        out.auc = out.auc.max(r.auc);
        for (k, &v) in &r.tpr_at_fpr {
            let e = out.tpr_at_fpr.entry(k.clone()).or_insert(v);
            *e = e.max(v);
        }
    }
    Some(out)
}

/// Mean of each signal over a user's chunks. Users appear in order of
/// first occurrence; the record id becomes the user id.
pub fn aggregate_user_level(records: &[SignalRecord]) -> Result<Vec<SignalRecord>, MiaError> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, BTreeMap<Signal, (f64, usize)>> = BTreeMap::new();
    for r in records {
        let user = r.user.clone().ok_or_else(|| MiaError::MissingUser(r.id.clone()))?;
        if !acc.contains_key(&user) {
            order.push(user.clone());
        }
        let entry = acc.entry(user).or_default();
        for (&s, &v) in &r.signals {
            let e = entry.entry(s).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    Ok(order
        .into_iter()
        .map(|u| {
            let signals = acc[&u].iter().map(|(&s, &(sum, n))| (s, sum / n as f64)).collect();
            SignalRecord { id: u.clone(), user: Some(u), signals }
        })
        .collect())
}

pub fn roc_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("fpr,tpr\n");
    for (f, t) in points {
        out.push_str(&format!("{f},{t}\n"));
    }
    out
}
