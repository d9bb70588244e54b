use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::rng::{seeded, sub_seed, GuardRng};

/// Seed of the synthetic corpus every pinned experiment runs on.
pub const PINNED_SEED: u64 = 1729;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_id: Option<String>,
    pub text: String,
}

impl Document {
    /// The owner key: the user id, or the document id for anonymous text.
    pub fn owner(&self) -> &str {
        self.user_id.as_deref().unwrap_or(&self.id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub provenance: String,
}

impl Corpus {
    pub fn new(documents: Vec<Document>, provenance: impl Into<String>) -> Result<Self, HarnessError> {
        let mut seen = HashSet::new();
        for d in &documents {
            if !seen.insert(d.id.as_str()) {
                return Err(HarnessError::InvalidCorpus(format!("duplicate document id {:?}", d.id)));
            }
            if d.text.is_empty() {
                return Err(HarnessError::InvalidCorpus(format!("document {:?} has empty text", d.id)));
            }
        }
        Ok(Self { documents, provenance: provenance.into() })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.documents.iter().map(|d| d.text.as_str()).collect()
    }

    /// One `{"id", "user_id", "text"}` object per line; blank lines skipped.
    pub fn read_jsonl<R: BufRead>(reader: R, provenance: impl Into<String>) -> Result<Self, HarnessError> {
        let mut docs = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: Document = serde_json::from_str(&line)
                .map_err(|e| HarnessError::InvalidCorpus(format!("line {}: {e}", n + 1)))?;
            docs.push(doc);
        }
        Self::new(docs, provenance)
    }

    pub fn load_jsonl(path: &Path) -> Result<Self, HarnessError> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f), path.display().to_string())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), HarnessError> {
        for d in &self.documents {
            serde_json::to_writer(&mut out, d).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_docs: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Size of the common-word alphabet.
    pub vocab_words: usize,
    pub users: usize,
    pub names_per_user: usize,
    /// Distinct successors per Markov state.
    pub branching: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: PINNED_SEED,
            n_docs: 1000,
            min_words: 60,
            max_words: 120,
            vocab_words: 400,
            users: 250,
            names_per_user: 3,
            branching: 5,
        }
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const RARE: &[u8] = b"qxjwyhc";

fn syllable(rng: &mut GuardRng, consonants: &[u8]) -> String {
    let mut s = String::new();
    s.push(consonants[rng.random_range(0..consonants.len())] as char);
    s.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
    if rng.random_bool(0.3) {
        s.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
    }
    s
}

fn common_words(spec: &SynthSpec) -> Vec<String> {
    let mut rng = seeded(sub_seed(spec.seed, "words"));
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(spec.vocab_words);
    while out.len() < spec.vocab_words {
        let n = 1 + usize::from(rng.random_bool(0.6)) + usize::from(rng.random_bool(0.2));
        let w: String = (0..n).map(|_| syllable(&mut rng, CONSONANTS)).collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn user_names(spec: &SynthSpec, user: usize) -> Vec<String> {
    let mut rng = seeded(sub_seed(spec.seed, &format!("user:{user}")));
    (0..spec.names_per_user)
        .map(|_| {
            let mut w = syllable(&mut rng, RARE);
            w.push_str(&syllable(&mut rng, CONSONANTS));
            w.push_str(&syllable(&mut rng, RARE));
            let mut cs = w.chars();
            let first = cs.next().expect("non-empty").to_ascii_uppercase();
            std::iter::once(first).chain(cs).collect()
        })
        .collect()
}

struct Source {
    words: Vec<String>,
    cumulative: Vec<f64>,
    seed: u64,
    branching: usize,
}

impl Source {
    fn new(spec: &SynthSpec) -> Self {
        let words = common_words(spec);
        let mut acc = 0.0;
        let cumulative = (0..words.len())
            .map(|r| {
                acc += 1.0 / ((r + 1) as f64).powf(1.1);
                acc
            })
            .collect();
        Self { words, cumulative, seed: spec.seed, branching: spec.branching.max(1) }
    }

    fn zipf(&self, rng: &mut GuardRng) -> usize {
        let total = *self.cumulative.last().expect("non-empty alphabet");
        let u = rng.random_range(0.0..total);
        self.cumulative.partition_point(|&c| c <= u).min(self.words.len() - 1)
    }

    /// Successor of the state (a, b): one of `branching` words fixed by the
    /// state itself.
    fn next(&self, a: usize, b: usize, rng: &mut GuardRng) -> usize {
        let pick = rng.random_range(0..self.branching);
        let mut state = seeded(sub_seed(self.seed, &format!("{a}:{b}:{pick}")));
        self.zipf(&mut state)
    }
}

/// Documents `range` of the synthetic source. Indices past `spec.n_docs`
/// belong to fresh users.
pub fn synth_documents(spec: &SynthSpec, range: std::ops::Range<usize>) -> Vec<Document> {
    let source = Source::new(spec);
    let per_user = spec.n_docs.div_ceil(spec.users.max(1)).max(1);
    let mut names_cache: HashMap<usize, Vec<String>> = HashMap::new();
    range
        .map(|i| {
            let user = i / per_user;
            let names = names_cache.entry(user).or_insert_with(|| user_names(spec, user)).clone();
            let mut rng = seeded(sub_seed(spec.seed, &format!("doc:{i}")));
            let n_words = rng.random_range(spec.min_words..=spec.max_words.max(spec.min_words));
            let mut text = String::new();
            let (mut a, mut b) = (source.zipf(&mut rng), source.zipf(&mut rng));
            let mut written = 0;
            while written < n_words {
                let len = rng.random_range(6..=14);
                for k in 0..len {
                    let c = source.next(a, b, &mut rng);
                    if !text.is_empty() {
                        text.push(' ');
                    }
                    text.push_str(&source.words[c]);
                    if k + 1 == len {
                        text.push('.');
                    }
                    (a, b) = (b, c);
                    written += 1;
                }
                if !names.is_empty() && rng.random_bool(0.5) {
                    let n1 = &names[rng.random_range(0..names.len())];
                    let n2 = &names[rng.random_range(0..names.len())];
                    let fact = match rng.random_range(0..3) {
                        0 => format!(" {n1} {n2} id {}.", rng.random_range(1000..100_000)),
                        1 => format!(" contact {n1} at {}-{}.", rng.random_range(100..1000), rng.random_range(1000..10_000)),
                        _ => format!(" {n1} paid {} to {n2}.", rng.random_range(10..10_000)),
                    };
                    text.push_str(&fact);
                }
            }
            Document { id: format!("doc-{i:05}"), user_id: Some(format!("user-{user:04}")), text }
        })
        .collect()
}

/// Seeded order-2 Markov text over a Zipf word alphabet, with per-user
/// names and per-document numbers mixed in.
pub fn synth_corpus(spec: &SynthSpec) -> Result<Corpus, HarnessError> {
    if spec.n_docs == 0 || spec.vocab_words < 2 || spec.users == 0 || spec.min_words == 0 {
        return Err(HarnessError::InvalidConfig("synthetic corpus sizes must be positive".into()));
    }
    Corpus::new(synth_documents(spec, 0..spec.n_docs), format!("synthetic(seed={})", spec.seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    /// Relative sizes of (D_aux, D, D_non, test).
    pub ratios: [f64; 4],
    /// Protected fraction of D.
    pub r: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { ratios: [1.0, 4.0, 4.0, 1.0], r: 0.1, seed: PINNED_SEED }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub aux: Vec<Document>,
    pub d: Vec<Document>,
    pub non: Vec<Document>,
    pub test: Vec<Document>,
    /// `d[..n_protected]` is D_pro, the rest D_un.
    pub n_protected: usize,
}

impl CorpusSplit {
    pub fn protected(&self) -> &[Document] {
        &self.d[..self.n_protected]
    }

    pub fn unprotected(&self) -> &[Document] {
        &self.d[self.n_protected..]
    }
}

/// Seeded shuffle of owners, then a contiguous ratio cut that never splits
/// an owner; the first ⌊r·|D|⌋ (at least one) documents of D are protected.
pub fn split_corpus(corpus: &Corpus, spec: &SplitSpec) -> Result<CorpusSplit, HarnessError> {
    if spec.ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(HarnessError::InvalidConfig("split ratios must be positive".into()));
    }
    if !(spec.r > 0.0 && spec.r <= 1.0) {
        return Err(HarnessError::InvalidConfig(format!("protected fraction {} outside (0, 1]", spec.r)));
    }
    let mut owners: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&Document>> = HashMap::new();
    for d in &corpus.documents {
        let o = d.owner();
        if !groups.contains_key(o) {
            owners.push(o);
        }
        groups.entry(o).or_default().push(d);
    }
    owners.shuffle(&mut seeded(spec.seed));
    let n = corpus.len();
    let total: f64 = spec.ratios.iter().sum();
    let mut cuts = [0usize; 3];
    let mut acc = 0.0;
    for (k, c) in cuts.iter_mut().enumerate() {
        acc += spec.ratios[k];
        *c = (n as f64 * acc / total + 1e-9).round() as usize;
    }
    let mut parts: [Vec<Document>; 4] = Default::default();
    let mut start = 0;
    for o in owners {
        let part = cuts.iter().filter(|&&c| start >= c).count();
        for d in &groups[o] {
            parts[part].push((*d).clone());
        }
        start += groups[o].len();
    }
    if let Some(k) = parts.iter().position(Vec::is_empty) {
        return Err(HarnessError::CorpusTooSmall(format!("split part {k} is empty with {n} documents")));
    }
    let [aux, d, non, test] = parts;
    let n_protected = ((spec.r * d.len() as f64 + 1e-9).floor() as usize).clamp(1, d.len());
    Ok(CorpusSplit { aux, d, non, test, n_protected })
}
