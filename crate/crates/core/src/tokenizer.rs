//! Subword vocabulary training and greedy longest-match segmentation.
//!
//! Training is ordinary byte-pair merging over characters. Documents are
//! pre-split before every whitespace character (so `" word"` can become one
//! token but no token spans two words), and catalog characters are isolated
//! chunks that never take part in a merge. The latter is what guarantees the
//! splitting property the OOV perturbations rely on: a catalog character
//! inserted inside a token always breaks it.
//!
//! Encoding is greedy longest match from the left, not merge-rank replay.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::InvisibleCatalog;

pub type TokenId = u32;

pub const DEFAULT_NUM_MERGES: usize = 2000;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unknown character U+{:04X} at char offset {offset}", *.ch as u32)]
    UnknownChar { ch: char, offset: usize },
    #[error("token id {0} out of range")]
    InvalidId(TokenId),
    #[error("vocabulary format: {0}")]
    Format(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Token ids plus the half-open character span each one covers.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub spans: Vec<(usize, usize)>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// A sequence whose spans are synthesized from token lengths, for ids
    /// that did not come out of [`Vocabulary::encode`].
    pub fn from_ids(vocab: &Vocabulary, ids: Vec<TokenId>) -> Result<Self, TokenizerError> {
        let mut spans = Vec::with_capacity(ids.len());
        let mut at = 0;
        for &id in &ids {
            let n = vocab.token(id)?.chars().count();
            spans.push((at, at + n));
            at += n;
        }
        Ok(Self { ids, spans })
    }
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, TokenId>,
    base_alphabet: BTreeSet<char>,
    merge_count: usize,
    max_token_chars: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    tokens: Vec<String>,
    merge_count: usize,
    base_alphabet: Vec<String>,
}

impl Vocabulary {
    /// Assembles a vocabulary from tokens in id order.
    pub fn from_parts(
        tokens: Vec<String>,
        base_alphabet: BTreeSet<char>,
        merge_count: usize,
    ) -> Result<Self, TokenizerError> {
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(TokenizerError::Format("empty token string".into()));
            }
            if id_of.insert(t.clone(), i as TokenId).is_some() {
                return Err(TokenizerError::Format(format!("duplicate token {t:?}")));
            }
        }
        for c in &base_alphabet {
            if !id_of.contains_key(c.to_string().as_str()) {
                return Err(TokenizerError::Format(format!(
                    "base character U+{:04X} has no single-character token",
                    *c as u32
                )));
            }
        }
        let max_token_chars = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(0);
        Ok(Self { tokens, id_of, base_alphabet, merge_count, max_token_chars })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Result<&str, TokenizerError> {
        self.tokens.get(id as usize).map(String::as_str).ok_or(TokenizerError::InvalidId(id))
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    pub fn base_alphabet(&self) -> &BTreeSet<char> {
        &self.base_alphabet
    }

    pub fn merge_count(&self) -> usize {
        self.merge_count
    }

    pub fn contains_char(&self, c: char) -> bool {
        let mut buf = [0u8; 4];
        self.id_of.contains_key(&*c.encode_utf8(&mut buf))
    }

    /// Greedy left-to-right longest-match segmentation.
    pub fn encode(&self, text: &str) -> Result<TokenSeq, TokenizerError> {
        // byte offset of every char boundary, plus the end
        let bounds: Vec<usize> =
            text.char_indices().map(|(b, _)| b).chain(std::iter::once(text.len())).collect();
        let n = bounds.len() - 1;
        let mut seq = TokenSeq { ids: Vec::with_capacity(n / 2), spans: Vec::with_capacity(n / 2) };
        let mut i = 0;
        while i < n {
            let longest = self.max_token_chars.min(n - i);
            let hit = (1..=longest).rev().find_map(|len| {
                self.id_of.get(&text[bounds[i]..bounds[i + len]]).map(|&id| (id, len))
            });
            match hit {
                Some((id, len)) => {
                    seq.ids.push(id);
                    seq.spans.push((i, i + len));
                    i += len;
                }
                None => {
                    let ch = text[bounds[i]..].chars().next().unwrap_or_default();
                    return Err(TokenizerError::UnknownChar { ch, offset: i });
                }
            }
        }
        Ok(seq)
    }

    pub fn decode(&self, seq: &TokenSeq) -> Result<String, TokenizerError> {
        self.decode_ids(&seq.ids)
    }

    pub fn decode_ids(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for &id in ids {
            out.push_str(self.token(id)?);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let file = VocabularyFile {
            tokens: self.tokens.clone(),
            merge_count: self.merge_count,
            base_alphabet: self.base_alphabet.iter().map(|c| c.to_string()).collect(),
        };
        serde_json::to_string(&file).expect("vocabulary serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, TokenizerError> {
        let file: VocabularyFile =
            serde_json::from_str(s).map_err(|e| TokenizerError::Format(e.to_string()))?;
        let mut alphabet = BTreeSet::new();
        for s in &file.base_alphabet {
            let mut cs = s.chars();
            match (cs.next(), cs.next()) {
                (Some(c), None) => {
                    alphabet.insert(c);
                }
                _ => return Err(TokenizerError::Format(format!("base_alphabet entry {s:?}"))),
            }
        }
        Self::from_parts(file.tokens, alphabet, file.merge_count)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Splits a document into merge units: a new unit starts before every
/// whitespace character, and every catalog character is a unit on its own.
fn pretokenize<'a>(text: &'a str, catalog: &InvisibleCatalog, out: &mut Vec<&'a str>) {
    let mut start = 0;
    for (b, c) in text.char_indices() {
        if catalog.contains(c) {
            if start < b {
                out.push(&text[start..b]);
            }
            out.push(&text[b..b + c.len_utf8()]);
            start = b + c.len_utf8();
        } else if c.is_whitespace() && b > start {
            out.push(&text[start..b]);
            start = b;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
}

/// Byte-pair-merge training using the default invisible catalog.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], num_merges: usize) -> Result<Vocabulary, TokenizerError> {
    train_bpe_with_catalog(corpus, num_merges, &InvisibleCatalog::default())
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    // lexicographically smaller merged pair wins ties
    key: Reverse<(String, String)>,
    pair: (TokenId, TokenId),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count.cmp(&other.count).then_with(|| self.key.cmp(&other.key))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub fn train_bpe_with_catalog<S: AsRef<str>>(
    corpus: &[S],
    num_merges: usize,
    catalog: &InvisibleCatalog,
) -> Result<Vocabulary, TokenizerError> {
    if corpus.is_empty() {
        return Err(TokenizerError::InvalidInput("empty corpus".into()));
    }

    let mut chunk_freq: HashMap<&str, u64> = HashMap::new();
    let mut units = Vec::new();
    for doc in corpus {
        units.clear();
        pretokenize(doc.as_ref(), catalog, &mut units);
        for u in &units {
            *chunk_freq.entry(u).or_default() += 1;
        }
    }

    let mut alphabet: BTreeSet<char> = chunk_freq.keys().flat_map(|s| s.chars()).collect();
    alphabet.extend(catalog.chars().iter().copied());

    let mut tokens: Vec<String> = alphabet.iter().map(|c| c.to_string()).collect();
    let mut id_of: HashMap<String, TokenId> =
        tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();

    // Sort chunks so training is independent of hash-map iteration order.
    let mut chunks: Vec<(&str, u64)> = chunk_freq.into_iter().collect();
    chunks.sort_unstable();
    let mut words: Vec<(Vec<TokenId>, u64)> = chunks
        .iter()
        .filter(|(s, _)| !(s.chars().count() == 1 && catalog.contains(s.chars().next().unwrap())))
        .map(|(s, f)| (s.chars().map(|c| id_of[c.to_string().as_str()]).collect(), *f))
        .collect();
    words.retain(|(w, _)| w.len() >= 2);

    let mut pair_count: HashMap<(TokenId, TokenId), u64> = HashMap::new();
    let mut pair_words: HashMap<(TokenId, TokenId), HashSet<usize>> = HashMap::new();
    for (wi, (w, f)) in words.iter().enumerate() {
        for p in w.windows(2) {
            let key = (p[0], p[1]);
            *pair_count.entry(key).or_default() += f;
            pair_words.entry(key).or_default().insert(wi);
        }
    }

    let candidate = |pair: (TokenId, TokenId), count: u64, tokens: &[String]| Candidate {
        count,
        key: Reverse((tokens[pair.0 as usize].clone(), tokens[pair.1 as usize].clone())),
        pair,
    };
    let mut heap: BinaryHeap<Candidate> =
        pair_count.iter().map(|(&p, &c)| candidate(p, c, &tokens)).collect();

    let mut merges = 0;
    while merges < num_merges {
        let Some(top) = heap.pop() else { break };
        let current = pair_count.get(&top.pair).copied().unwrap_or(0);
        if current == 0 {
            continue;
        }
        if current != top.count {
            // stale entry
            heap.push(candidate(top.pair, current, &tokens));
            continue;
        }

        let (a, b) = top.pair;
        let merged = format!("{}{}", tokens[a as usize], tokens[b as usize]);
        let new_id = match id_of.get(&merged) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as TokenId;
                id_of.insert(merged.clone(), id);
                tokens.push(merged);
                id
            }
        };
        merges += 1;

        let affected: Vec<usize> = {
            let mut v: Vec<usize> =
                pair_words.get(&top.pair).map(|s| s.iter().copied().collect()).unwrap_or_default();
            v.sort_unstable();
            v
        };
        let mut touched: HashSet<(TokenId, TokenId)> = HashSet::new();
        for wi in affected {
            let (word, freq) = &mut words[wi];
            let freq = *freq;
            for p in word.windows(2) {
                let key = (p[0], p[1]);
                if let Some(c) = pair_count.get_mut(&key) {
                    *c -= freq;
                }
                touched.insert(key);
            }
            let mut out = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == a && word[i + 1] == b {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(word[i]);
                    i += 1;
                }
            }
            *word = out;
            for p in word.windows(2) {
                let key = (p[0], p[1]);
                *pair_count.entry(key).or_default() += freq;
                pair_words.entry(key).or_default().insert(wi);
                touched.insert(key);
            }
        }
        let mut touched: Vec<_> = touched.into_iter().collect();
        touched.sort_unstable();
        for key in touched {
            match pair_count.get(&key).copied() {
                Some(0) => {
                    pair_count.remove(&key);
                    pair_words.remove(&key);
                }
                Some(c) => heap.push(candidate(key, c, &tokens)),
                None => {}
            }
        }
    }

    Vocabulary::from_parts(tokens, alphabet, merges)
}

/// Unit-cost Levenshtein distance over token ids.
pub fn token_edit_distance(a: &[TokenId], b: &[TokenId]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}
