//! A small HTML parser for the subset the extractors need: elements with
//! attributes, text, comments, doctypes, and raw `script`/`style` bodies.
//!
//! The document keeps its source verbatim. Edits are byte splices followed
//! by a reparse, so serializing an unedited document is byte-identical.

use std::fmt;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.column, self.message)
    }
}

impl std::error::Error for ParseError {}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Attr {
    pub name: String,
    pub value: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Document,
    Element { name: String, attrs: Vec<Attr> },
    /// `raw` marks script and style bodies, which are not text for any view.
    Text { decoded: String, char_ranges: Vec<(usize, usize)>, raw: bool },
    Comment,
    Doctype,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Node {
    pub kind: NodeKind,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Byte range in the source, closing tag included.
    pub range: (usize, usize),
    /// Hidden by its own style or an ancestor's.
    pub hidden: bool,
    /// Hidden by its own attributes, not merely inherited.
    pub hides: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HtmlDoc {
    source: String,
    nodes: Vec<Node>,
    text_nodes: Vec<usize>,
}

/// Address of a text node: its ordinal among non-raw text nodes in
/// document order.
pub type TextNodeId = usize;

const VOID: [&str; 14] =
    ["area", "base", "br", "col", "embed", "hr", "img", "input", "link", "meta", "source", "track", "wbr", "param"];
const RAW: [&str; 2] = ["script", "style"];

const ENTITIES: [(&str, char); 22] = [
    ("amp", '&'),
    ("lt", '<'),
    ("gt", '>'),
    ("quot", '"'),
    ("apos", '\''),
    ("nbsp", '\u{A0}'),
    ("ZeroWidthSpace", '\u{200B}'),
    ("zwnj", '\u{200C}'),
    ("zwj", '\u{200D}'),
    ("NoBreak", '\u{2060}'),
    ("shy", '\u{AD}'),
    ("copy", '\u{A9}'),
    ("reg", '\u{AE}'),
    ("hellip", '\u{2026}'),
    ("mdash", '\u{2014}'),
    ("ndash", '\u{2013}'),
    ("lsquo", '\u{2018}'),
    ("rsquo", '\u{2019}'),
    ("ldquo", '\u{201C}'),
    ("rdquo", '\u{201D}'),
    ("laquo", '\u{AB}'),
    ("raquo", '\u{BB}'),
];

impl HtmlDoc {
    pub fn parse(source: &str) -> Result<Self, ParseError> {
        Parser { src: source, pos: 0, nodes: Vec::new(), stack: Vec::new() }.run()
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn into_string(self) -> String {
        self.source
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn text_node_count(&self) -> usize {
        self.text_nodes.len()
    }

    fn text_node(&self, id: TextNodeId) -> Option<(&Node, &str, &[(usize, usize)])> {
        let node = &self.nodes[*self.text_nodes.get(id)?];
        match &node.kind {
            NodeKind::Text { decoded, char_ranges, .. } => Some((node, decoded, char_ranges)),
            _ => None,
        }
    }

    /// Decoded text of a text node.
    pub fn text(&self, id: TextNodeId) -> Option<&str> {
        self.text_node(id).map(|(_, t, _)| t)
    }

    pub fn is_hidden(&self, id: TextNodeId) -> Option<bool> {
        self.text_node(id).map(|(n, _, _)| n.hidden)
    }

    /// Source byte offset of decoded character `char_index` of a text node;
    /// `char_index == len` maps to the end of the node.
    pub fn source_offset(&self, id: TextNodeId, char_index: usize) -> Option<usize> {
        let (node, _, ranges) = self.text_node(id)?;
        match char_index.cmp(&ranges.len()) {
            std::cmp::Ordering::Less => Some(ranges[char_index].0),
            std::cmp::Ordering::Equal => Some(node.range.1),
            std::cmp::Ordering::Greater => None,
        }
    }

    /// Decoded text of every text node outside script/style, filtered.
    pub fn collect_text(&self, include_hidden: bool) -> String {
        let mut out = String::new();
        for &i in &self.text_nodes {
            let node = &self.nodes[i];
            if let NodeKind::Text { decoded, .. } = &node.kind {
                if include_hidden || !node.hidden {
                    out.push_str(decoded);
                }
            }
        }
        out
    }

    /// Outermost hidden elements, by byte range.
    pub fn hidden_ranges(&self) -> Vec<(usize, usize)> {
        self.nodes
            .iter()
            .filter(|n| n.hides && !n.parent.is_some_and(|p| self.nodes[p].hidden))
            .map(|n| n.range)
            .collect()
    }

    /// Byte ranges of decoded characters matching `pred` in text nodes that
    /// are not hidden.
    pub fn char_ranges_where(&self, pred: impl Fn(char) -> bool) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for &i in &self.text_nodes {
            let node = &self.nodes[i];
            if let NodeKind::Text { decoded, char_ranges, .. } = &node.kind {
                if node.hidden {
                    continue;
                }
                for (c, &r) in decoded.chars().zip(char_ranges) {
                    if pred(c) {
                        out.push(r);
                    }
                }
            }
        }
        out
    }

    /// Applies insertions `(offset, text)` and deletions, then reparses.
    /// Offsets refer to the current source; ties keep input order.
    pub fn splice(&self, inserts: &[(usize, String)], deletes: &[(usize, usize)]) -> Result<HtmlDoc, ParseError> {
        enum Op<'a> {
            Ins(&'a str),
            Del(usize),
        }
        let mut ops: Vec<(usize, usize, Op)> = Vec::new();
        for (k, (at, s)) in inserts.iter().enumerate() {
            ops.push((*at, k, Op::Ins(s)));
        }
        for (k, &(a, b)) in deletes.iter().enumerate() {
            ops.push((a, inserts.len() + k, Op::Del(b)));
        }
        // ascending, so a single forward copy works
        ops.sort_by_key(|(at, k, _)| (*at, *k));
        let mut out = String::with_capacity(self.source.len() + inserts.iter().map(|i| i.1.len()).sum::<usize>());
        let mut cursor = 0;
        for (at, _, op) in ops {
            if at > cursor {
                out.push_str(&self.source[cursor..at]);
                cursor = at;
            }
            match op {
                Op::Ins(s) => out.push_str(s),
                Op::Del(end) => cursor = cursor.max(end),
            }
        }
        out.push_str(&self.source[cursor..]);
        HtmlDoc::parse(&out)
    }
}

impl fmt::Display for HtmlDoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

/// Escapes text for use in element content.
pub fn escape_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            _ => out.push(c),
        }
    }
    out
}

/// Whether inline attributes hide an element from a human reader.
pub fn hides(attrs: &[Attr]) -> bool {
    if attrs.iter().any(|a| a.name == "hidden") {
        return true;
    }
    let Some(style) = attrs.iter().find(|a| a.name == "style").and_then(|a| a.value.as_deref()) else {
        return false;
    };
    let mut positioned = false;
    let mut far_off = false;
    for decl in style.split(';') {
        let Some((k, v)) = decl.split_once(':') else { continue };
        let k = k.trim().to_ascii_lowercase();
        let v = v.trim().trim_end_matches("!important").trim().to_ascii_lowercase();
        match k.as_str() {
            "display" if v == "none" => return true,
            "visibility" if v == "hidden" || v == "collapse" => return true,
            "font-size" if is_zero_length(&v) => return true,
            "position" if v == "absolute" || v == "fixed" => positioned = true,
            "left" | "top" => far_off |= css_px(&v).is_some_and(|x| x <= -1000.0),
            _ => {}
        }
    }
    positioned && far_off
}

fn is_zero_length(v: &str) -> bool {
    let num: String = v.chars().take_while(|c| c.is_ascii_digit() || *c == '.' || *c == '-' || *c == '+').collect();
    !num.is_empty() && num.parse::<f64>().is_ok_and(|x| x == 0.0)
}

fn css_px(v: &str) -> Option<f64> {
    let v = v.strip_suffix("px").unwrap_or(v).trim();
    v.parse().ok()
}

fn decode_entity(s: &str) -> Option<(char, usize)> {
    // `s` starts at '&'; returns the char and the entity's byte length
    let end = s[1..].find(';').filter(|&e| e <= 32)? + 1;
    let body = &s[1..end];
    let c = if let Some(num) = body.strip_prefix('#') {
        let code = match num.strip_prefix(['x', 'X']) {
            Some(hex) => u32::from_str_radix(hex, 16).ok()?,
            None => num.parse().ok()?,
        };
        char::from_u32(code)?
    } else {
        ENTITIES.iter().find(|(n, _)| *n == body)?.1
    };
    Some((c, end + 1))
}

/// Decodes entities, recording the source range of each decoded char
/// relative to `base`.
fn decode(raw: &str, base: usize) -> (String, Vec<(usize, usize)>) {
    let mut out = String::with_capacity(raw.len());
    let mut ranges = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        let rest = &raw[i..];
        if rest.starts_with('&') {
            if let Some((c, n)) = decode_entity(rest) {
                out.push(c);
                ranges.push((base + i, base + i + n));
                i += n;
                continue;
            }
        }
        let c = rest.chars().next().expect("in bounds");
        out.push(c);
        ranges.push((base + i, base + i + c.len_utf8()));
        i += c.len_utf8();
    }
    (out, ranges)
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    nodes: Vec<Node>,
    stack: Vec<usize>,
}

impl<'a> Parser<'a> {
    fn error(&self, at: usize, message: impl Into<String>) -> ParseError {
        let before = &self.src[..at.min(self.src.len())];
        let line = before.matches('\n').count() + 1;
        let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
        ParseError { line, column, message: message.into() }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn add(&mut self, kind: NodeKind, range: (usize, usize)) -> usize {
        let parent = *self.stack.last().expect("document is on the stack");
        let own = matches!(&kind, NodeKind::Element { attrs, .. } if hides(attrs));
        let hidden = own || self.nodes[parent].hidden;
        let id = self.nodes.len();
        self.nodes.push(Node { kind, parent: Some(parent), children: Vec::new(), range, hidden, hides: own });
        self.nodes[parent].children.push(id);
        id
    }

    fn run(mut self) -> Result<HtmlDoc, ParseError> {
        self.nodes.push(Node {
            kind: NodeKind::Document,
            parent: None,
            children: Vec::new(),
            range: (0, self.src.len()),
            hidden: false,
            hides: false,
        });
        self.stack.push(0);
        while self.pos < self.src.len() {
            let rest = self.rest();
            let next = rest.as_bytes().get(1).copied().unwrap_or(0);
            if rest.starts_with("<!--") {
                let end = rest[4..].find("-->").ok_or_else(|| self.error(self.pos, "unterminated comment"))?;
                let stop = self.pos + 4 + end + 3;
                self.add(NodeKind::Comment, (self.pos, stop));
                self.pos = stop;
            } else if rest.starts_with("<!") || rest.starts_with("<?") {
                let end = rest.find('>').ok_or_else(|| self.error(self.pos, "unterminated declaration"))?;
                self.add(NodeKind::Doctype, (self.pos, self.pos + end + 1));
                self.pos += end + 1;
            } else if rest.starts_with("</") && rest.as_bytes().get(2).is_some_and(u8::is_ascii_alphabetic) {
                self.close_tag()?;
            } else if rest.starts_with('<') && next.is_ascii_alphabetic() {
                self.open_tag()?;
            } else {
                self.text();
            }
        }
        let end = self.src.len();
        while self.stack.len() > 1 {
            let id = self.stack.pop().expect("non-empty");
            self.nodes[id].range.1 = end;
        }
        let text_nodes = (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].kind, NodeKind::Text { raw: false, .. }))
            .collect();
        Ok(HtmlDoc { source: self.src.to_string(), nodes: self.nodes, text_nodes })
    }

    fn text(&mut self) {
        let start = self.pos;
        let bytes = self.src.as_bytes();
        let mut i = start + 1;
        while i < bytes.len() {
            if bytes[i] == b'<' {
                let n = bytes.get(i + 1).copied().unwrap_or(0);
                if n.is_ascii_alphabetic() || n == b'!' || n == b'?' || (n == b'/' && bytes.get(i + 2).is_some_and(u8::is_ascii_alphabetic)) {
                    break;
                }
            }
            i += 1;
        }
        let (decoded, char_ranges) = decode(&self.src[start..i], start);
        self.add(NodeKind::Text { decoded, char_ranges, raw: false }, (start, i));
        self.pos = i;
    }

    fn name_at(&self, at: usize) -> &'a str {
        let s = &self.src[at..];
        let n = s.find(|c: char| !(c.is_ascii_alphanumeric() || c == '-' || c == ':' || c == '_')).unwrap_or(s.len());
        &s[..n]
    }

    fn skip_ws(&mut self) {
        let s = self.rest();
        self.pos += s.len() - s.trim_start().len();
    }

    fn close_tag(&mut self) -> Result<(), ParseError> {
        let start = self.pos;
        let name = self.name_at(start + 2).to_ascii_lowercase();
        self.pos = start + 2 + name.len();
        self.skip_ws();
        if !self.rest().starts_with('>') {
            return Err(self.error(self.pos, format!("malformed closing tag </{name}")));
        }
        self.pos += 1;
        let Some(depth) = self.stack.iter().rposition(|&id| {
            matches!(&self.nodes[id].kind, NodeKind::Element { name: n, .. } if *n == name)
        }) else {
            return Err(self.error(start, format!("closing tag </{name}> without a matching open tag")));
        };
        while self.stack.len() > depth + 1 {
            let id = self.stack.pop().expect("deeper than depth");
            self.nodes[id].range.1 = start;
        }
        let id = self.stack.pop().expect("matched element");
        self.nodes[id].range.1 = self.pos;
        Ok(())
    }

    fn open_tag(&mut self) -> Result<(), ParseError> {
        let start = self.pos;
        let name = self.name_at(start + 1).to_ascii_lowercase();
        self.pos = start + 1 + name.len();
        let mut attrs = Vec::new();
        let self_closing = loop {
            self.skip_ws();
            let rest = self.rest();
            if rest.is_empty() {
                return Err(self.error(start, format!("unterminated tag <{name}")));
            }
            if rest.starts_with("/>") {
                self.pos += 2;
                break true;
            }
            if rest.starts_with('>') {
                self.pos += 1;
                break false;
            }
            let n = rest.find(|c: char| c.is_whitespace() || c == '=' || c == '>' || c == '/').unwrap_or(rest.len());
            if n == 0 {
                if rest.starts_with('/') {
                    // a stray slash inside the tag
                    self.pos += 1;
                    continue;
                }
                return Err(self.error(self.pos, format!("malformed attribute in <{name}>")));
            }
            let attr_name = rest[..n].to_ascii_lowercase();
            self.pos += n;
            self.skip_ws();
            let mut value = None;
            if self.rest().starts_with('=') {
                self.pos += 1;
                self.skip_ws();
                let rest = self.rest();
                let raw = match rest.chars().next() {
                    Some(q @ ('"' | '\'')) => {
                        let end = rest[1..]
                            .find(q)
                            .ok_or_else(|| self.error(self.pos, format!("unterminated value for attribute {attr_name}")))?;
                        self.pos += end + 2;
                        &rest[1..end + 1]
                    }
                    _ => {
                        let end = rest.find(|c: char| c.is_whitespace() || c == '>').unwrap_or(rest.len());
                        self.pos += end;
                        &rest[..end]
                    }
                };
                value = Some(decode(raw, 0).0);
            }
            attrs.push(Attr { name: attr_name, value });
        };
        let tag_end = self.pos;
        let is_raw = RAW.contains(&name.as_str());
        let id = self.add(NodeKind::Element { name: name.clone(), attrs }, (start, tag_end));
        if self_closing || VOID.contains(&name.as_str()) {
            return Ok(());
        }
        if is_raw {
            let closing = format!("</{name}");
            let lower = self.rest().to_ascii_lowercase();
            let body_len = lower.find(&closing).ok_or_else(|| self.error(start, format!("unterminated <{name}>")))?;
            self.stack.push(id);
            if body_len > 0 {
                let body = (self.pos, self.pos + body_len);
                let decoded = self.src[body.0..body.1].to_string();
                let char_ranges = Vec::new();
                self.add(NodeKind::Text { decoded, char_ranges, raw: true }, body);
            }
            self.pos += body_len;
            return self.close_tag();
        }
        self.stack.push(id);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let src = "<!DOCTYPE html>\n<html><head><title>T &amp; U</title><style>p{color:red}</style></head>\
                   <body class=x><p id='a'>Hello <b>world</b>&nbsp;!</p><!-- c --><br><img src=a.png/></body></html>";
        let doc = HtmlDoc::parse(src).unwrap();
        assert_eq!(doc.as_str(), src);
        assert_eq!(doc.to_string(), src);
        assert_eq!(doc.collect_text(true), "\nT & UHello world\u{A0}!");
    }

    #[test]
    fn hiding_rules() {
        let cases = [
            ("display: none", true),
            ("DISPLAY:NONE !important", true),
            ("font-size: 0", true),
            ("font-size:0px", true),
            ("font-size: 0.0em", true),
            ("font-size: 10px", false),
            ("visibility: hidden", true),
            ("position: absolute; left: -9999px; font-size: 0;", true),
            ("position: absolute; left: -9999px", true),
            ("position: fixed; top: -2000px", true),
            ("position: absolute; left: -10px", false),
            ("left: -9999px", false),
            ("color: red", false),
        ];
        for (style, hidden) in cases {
            let attrs = vec![Attr { name: "style".into(), value: Some(style.into()) }];
            assert_eq!(hides(&attrs), hidden, "{style}");
        }
        assert!(hides(&[Attr { name: "hidden".into(), value: None }]));
    }

    #[test]
    fn views() {
        let doc = HtmlDoc::parse(r#"a<span style="display: none;">X<i>Y</i></span>b<script>var z = "<p>";</script>"#).unwrap();
        assert_eq!(doc.collect_text(true), "aXYb");
        assert_eq!(doc.collect_text(false), "ab");
        assert_eq!(doc.hidden_ranges().len(), 1);
    }

    #[test]
    fn entity_ranges() {
        let doc = HtmlDoc::parse("x&#8203;y&ZeroWidthSpace;z&#x200b;&unknown; &").unwrap();
        assert_eq!(doc.text(0).unwrap(), "x\u{200B}y\u{200B}z\u{200B}&unknown; &");
        let zw = doc.char_ranges_where(|c| c == '\u{200B}');
        assert_eq!(zw, vec![(1, 8), (9, 25), (26, 34)]);
        assert_eq!(doc.source_offset(0, 2), Some(8));
    }

    #[test]
    fn errors_have_locations() {
        let e = HtmlDoc::parse("<p>ok</p>\n<div class=\"x>").unwrap_err();
        assert_eq!((e.line, e.column), (2, 12));
        let e = HtmlDoc::parse("abc</div>").unwrap_err();
        assert_eq!((e.line, e.column), (1, 4));
        assert!(HtmlDoc::parse("<!-- open").is_err());
        assert!(HtmlDoc::parse("<p").is_err());
    }

    #[test]
    fn lenient_text_and_unclosed_elements() {
        let doc = HtmlDoc::parse("1 < 2 and 3 </ 4 <p>para").unwrap();
        assert_eq!(doc.collect_text(true), "1 < 2 and 3 </ 4 para");
        let doc = HtmlDoc::parse("<div><p>a</div>b").unwrap();
        assert_eq!(doc.collect_text(true), "ab");
    }

    #[test]
    fn splice_inserts_and_deletes() {
        let doc = HtmlDoc::parse("<p>abc</p>").unwrap();
        let d = doc.splice(&[(4, "<i>x</i>".into()), (4, "y".into())], &[(5, 6)]).unwrap();
        assert_eq!(d.as_str(), "<p>a<i>x</i>yb</p>");
    }
}
