//! Invisible rendering of plans, and the two readers of a page.
//!
//! A human reader sees [`visible_text`]: hidden elements and catalog
//! characters are gone. A crawler sees [`crawler_text`]: every text node,
//! hidden or not, with format characters intact. [`strip_guard`] models a
//! trainer that knows exactly what to remove.

mod html;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use html::{escape_text, hides, Attr, HtmlDoc, Node, NodeKind, ParseError, TextNodeId};

use crate::catalog::{codepoint_label, InvisibleCatalog, INSERT_DELIMITER};
use crate::perturb::{self, BudgetReport, GuardConfig, InvisibleMode, PerturbError, PerturbationPlan, PlanOutcome, Proxy};
use crate::rng::sub_seed;
use crate::tokenizer::{TokenId, TokenSeq, TokenizerError, Vocabulary};

#[derive(Debug, Error)]
pub enum CloakError {
    #[error("html parse error at {0}")]
    Parse(#[from] ParseError),
    #[error("text node {0} does not exist")]
    NotATextNode(TextNodeId),
    #[error("{0} is not in the invisible catalog")]
    NonCatalogChar(String),
    #[error("plan does not match the text: {0}")]
    PlanMismatch(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("text node {node}: {source}")]
    Node { node: TextNodeId, source: Box<PerturbError> },
    #[error(transparent)]
    Perturb(#[from] Box<PerturbError>),
}

impl From<PerturbError> for CloakError {
    fn from(e: PerturbError) -> Self {
        CloakError::Perturb(Box::new(e))
    }
}

/// Opening tag of the hidden span for a style mode. Chars mode has no span
/// of its own; inserted tokens use the display-none form.
pub fn span_open(mode: InvisibleMode) -> &'static str {
    match mode {
        InvisibleMode::Chars | InvisibleMode::DisplayNone => r#"<span style="display: none;" aria-hidden="true">"#,
        InvisibleMode::Offscreen => {
            r#"<span style="position: absolute; left: -9999px; font-size: 0;" aria-hidden="true">"#
        }
        InvisibleMode::FontZero => r#"<span style="font-size: 0;" aria-hidden="true">"#,
    }
}

pub const SPAN_CLOSE: &str = "</span>";

/// Inserted tokens as they appear in text: between delimiters.
pub fn fill_text(vocab: &Vocabulary, ids: &[TokenId]) -> Result<String, TokenizerError> {
    let mut out = String::new();
    out.push(INSERT_DELIMITER);
    for (k, &id) in ids.iter().enumerate() {
        if k > 0 {
            out.push(INSERT_DELIMITER);
        }
        out.push_str(vocab.token(id)?);
    }
    out.push(INSERT_DELIMITER);
    Ok(out)
}

pub fn hidden_span(mode: InvisibleMode, content: &str) -> String {
    format!("{}{}{}", span_open(mode), escape_text(content), SPAN_CLOSE)
}

enum Piece {
    /// Original characters, with split characters inline.
    Text(String),
    Fill(String),
}

fn check_plan(
    text: &str,
    seq: &TokenSeq,
    plan: &PerturbationPlan,
    catalog: &InvisibleCatalog,
) -> Result<(), CloakError> {
    let n = text.chars().count();
    if seq.spans.last().map_or(0, |s| s.1) != n {
        return Err(CloakError::PlanMismatch("token spans do not cover the text".into()));
    }
    for e in &plan.edits {
        if let perturb::Edit::Split { ch, .. } = e {
            if !catalog.contains(*ch) {
                return Err(CloakError::NonCatalogChar(codepoint_label(*ch)));
            }
        }
    }
    plan.validate(seq, catalog).map_err(|e| CloakError::PlanMismatch(e.to_string()))
}

fn pieces(text: &str, seq: &TokenSeq, plan: &PerturbationPlan, vocab: &Vocabulary) -> Result<Vec<Piece>, CloakError> {
    let chars: Vec<char> = text.chars().collect();
    let inserts = plan.inserts_by_gap();
    let splits = plan.splits_by_token();
    let mut out = Vec::new();
    let mut cur = String::new();
    for i in 0..=seq.len() {
        if let Some(ids) = inserts.get(&i) {
            if !cur.is_empty() {
                out.push(Piece::Text(std::mem::take(&mut cur)));
            }
            out.push(Piece::Fill(fill_text(vocab, ids)?));
        }
        if i == seq.len() {
            break;
        }
        let (s, e) = seq.spans[i];
        let mut at = s;
        for &(off, ch) in splits.get(&i).map(Vec::as_slice).unwrap_or(&[]) {
            cur.extend(&chars[at..s + off]);
            cur.push(ch);
            at = s + off;
        }
        cur.extend(&chars[at..e]);
    }
    if !cur.is_empty() {
        out.push(Piece::Text(cur));
    }
    Ok(out)
}

/// Plain-text rendering: split characters inline, inserted tokens between
/// zero-width delimiters.
pub fn inject_chars(
    text: &str,
    seq: &TokenSeq,
    plan: &PerturbationPlan,
    vocab: &Vocabulary,
    catalog: &InvisibleCatalog,
) -> Result<String, CloakError> {
    check_plan(text, seq, plan, catalog)?;
    Ok(pieces(text, seq, plan, vocab)?
        .into_iter()
        .map(|p| match p {
            Piece::Text(s) | Piece::Fill(s) => s,
        })
        .collect())
}

/// HTML fragment for a plain-text document: escaped text with inserted
/// tokens in hidden spans.
pub fn render_fragment(
    text: &str,
    seq: &TokenSeq,
    plan: &PerturbationPlan,
    vocab: &Vocabulary,
    mode: InvisibleMode,
) -> Result<String, CloakError> {
    Ok(pieces(text, seq, plan, vocab)?
        .into_iter()
        .map(|p| match p {
            Piece::Text(s) => escape_text(&s),
            Piece::Fill(s) => hidden_span(mode, &s),
        })
        .collect())
}

fn node_splices(
    doc: &HtmlDoc,
    node: TextNodeId,
    seq: &TokenSeq,
    plan: &PerturbationPlan,
    vocab: &Vocabulary,
    mode: InvisibleMode,
    catalog: &InvisibleCatalog,
) -> Result<Vec<(usize, String)>, CloakError> {
    let text = doc.text(node).ok_or(CloakError::NotATextNode(node))?;
    check_plan(text, seq, plan, catalog)?;
    let offset = |ci: usize| doc.source_offset(node, ci).ok_or(CloakError::NotATextNode(node));
    let mut out = Vec::new();
    for (gap, ids) in plan.inserts_by_gap() {
        let ci = if gap == seq.len() { seq.spans.last().map_or(0, |s| s.1) } else { seq.spans[gap].0 };
        out.push((offset(ci)?, hidden_span(mode, &fill_text(vocab, &ids)?)));
    }
    for (tok, splits) in plan.splits_by_token() {
        for (off, ch) in splits {
            out.push((offset(seq.spans[tok].0 + off)?, ch.to_string()));
        }
    }
    Ok(out)
}

/// Renders `plan` into one text node: inserted tokens become hidden spans,
/// split characters go inline.
pub fn inject_style(
    doc: &HtmlDoc,
    node: TextNodeId,
    seq: &TokenSeq,
    plan: &PerturbationPlan,
    vocab: &Vocabulary,
    mode: InvisibleMode,
    catalog: &InvisibleCatalog,
) -> Result<HtmlDoc, CloakError> {
    let splices = node_splices(doc, node, seq, plan, vocab, mode, catalog)?;
    if splices.is_empty() {
        return Ok(doc.clone());
    }
    Ok(doc.splice(&splices, &[])?)
}

/// What a human reader sees.
pub fn visible_text(html: &str, catalog: &InvisibleCatalog) -> Result<String, CloakError> {
    Ok(catalog.strip(&HtmlDoc::parse(html)?.collect_text(false)))
}

/// What a crawler keeps.
pub fn crawler_text(html: &str) -> Result<String, CloakError> {
    Ok(HtmlDoc::parse(html)?.collect_text(true))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Text,
    Html,
}

/// Removes catalog characters from plain text. Inserted tokens are
/// indistinguishable from content once rendered as plain text and stay.
pub fn strip_guard_text(text: &str, catalog: &InvisibleCatalog) -> String {
    catalog.strip(text)
}

/// Removes hidden elements and every catalog character (literal or entity)
/// from the remaining text.
pub fn strip_guard_html(html: &str, catalog: &InvisibleCatalog) -> Result<String, CloakError> {
    let doc = HtmlDoc::parse(html)?;
    let mut deletes = doc.hidden_ranges();
    deletes.extend(doc.char_ranges_where(|c| catalog.contains(c)));
    if deletes.is_empty() {
        return Ok(doc.into_string());
    }
    Ok(doc.splice(&[], &deletes)?.into_string())
}

pub fn strip_guard(input: &str, format: Format, catalog: &InvisibleCatalog) -> Result<String, CloakError> {
    match format {
        Format::Text => Ok(strip_guard_text(input, catalog)),
        Format::Html => strip_guard_html(input, catalog),
    }
}

pub const DEFAULT_MIN_TOKENS: usize = 8;

/// Elements whose text is not rendered as markup, so spans cannot go there.
const OPAQUE: [&str; 6] = ["head", "title", "textarea", "option", "noscript", "template"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodePlan {
    pub node: TextNodeId,
    pub tokens: usize,
    pub outcome: PlanOutcome,
    pub report: BudgetReport,
}

#[derive(Clone, Debug)]
pub struct ProtectedHtml {
    pub doc: HtmlDoc,
    pub nodes: Vec<NodePlan>,
}

fn in_opaque(doc: &HtmlDoc, node: TextNodeId) -> bool {
    let nodes = doc.nodes();
    let Some(mut cur) = doc_node_index(doc, node) else { return true };
    while let Some(p) = nodes[cur].parent {
        if let NodeKind::Element { name, .. } = &nodes[p].kind {
            if OPAQUE.contains(&name.as_str()) {
                return true;
            }
        }
        cur = p;
    }
    false
}

fn doc_node_index(doc: &HtmlDoc, node: TextNodeId) -> Option<usize> {
    doc.nodes()
        .iter()
        .enumerate()
        .filter(|(_, n)| matches!(n.kind, NodeKind::Text { raw: false, .. }))
        .nth(node)
        .map(|(i, _)| i)
}

/// Plans and renders every visible text node of at least `min_tokens`
/// tokens. Node `k` plans with seed `sub_seed(cfg.seed, "node:k")`.
pub fn protect_html(
    html: &str,
    cfg: &GuardConfig,
    vocab: &Vocabulary,
    proxy: Proxy<'_>,
    min_tokens: usize,
) -> Result<ProtectedHtml, CloakError> {
    let doc = HtmlDoc::parse(html)?;
    let eligible: Vec<TextNodeId> = (0..doc.text_node_count())
        .filter(|&k| doc.is_hidden(k) == Some(false) && !in_opaque(&doc, k))
        .collect();
    let planned = cfg.execution.try_map(&eligible, |&node| -> Result<Option<(NodePlan, Vec<(usize, String)>)>, CloakError> {
        let wrap = |e: PerturbError| CloakError::Node { node, source: Box::new(e) };
        let text = doc.text(node).ok_or(CloakError::NotATextNode(node))?;
        let seq = vocab.encode(text).map_err(|e| wrap(e.into()))?;
        if seq.len() < min_tokens.max(1) {
            return Ok(None);
        }
        let ncfg = GuardConfig { seed: sub_seed(cfg.seed, &format!("node:{node}")), ..cfg.clone() };
        let outcome = perturb::plan(&ncfg, vocab, &seq, proxy).map_err(wrap)?;
        let guarded = perturb::apply_plan(text, &seq, &outcome.plan, vocab, InvisibleMode::Chars, cfg.strategy, &cfg.catalog)
            .map_err(wrap)?;
        let report = guarded.budget_report(&seq, cfg.budget, &cfg.catalog);
        let splices = node_splices(&doc, node, &seq, &outcome.plan, vocab, cfg.invisible_mode, &cfg.catalog)?;
        Ok(Some((NodePlan { node, tokens: seq.len(), outcome, report }, splices)))
    })?;
    let mut nodes = Vec::new();
    let mut splices = Vec::new();
    for (plan, s) in planned.into_iter().flatten() {
        nodes.push(plan);
        splices.extend(s);
    }
    let doc = if splices.is_empty() { doc } else { doc.splice(&splices, &[])? };
    Ok(ProtectedHtml { doc, nodes })
}
