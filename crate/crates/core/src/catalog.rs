use serde::{Deserialize, Serialize};

/// Zero-width / format code points used to hide perturbations.
///
/// U+00AD (soft hyphen) is deliberately absent: it renders at line breaks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvisibleCatalog {
    codepoints: Vec<char>,
}

pub const DEFAULT_CATALOG: [char; 5] = ['\u{200B}', '\u{200C}', '\u{200D}', '\u{2060}', '\u{FEFF}'];

/// Delimiter wrapped around inserted token strings in plain text.
pub const INSERT_DELIMITER: char = '\u{200B}';

impl Default for InvisibleCatalog {
    fn default() -> Self {
        Self { codepoints: DEFAULT_CATALOG.to_vec() }
    }
}

impl InvisibleCatalog {
    /// Builds a catalog, rejecting empty sets and anything that is not a
    /// zero-width or format character.
    pub fn new(mut codepoints: Vec<char>) -> Result<Self, String> {
        codepoints.sort_unstable();
        codepoints.dedup();
        if codepoints.is_empty() {
            return Err("invisible catalog must not be empty".into());
        }
        if let Some(c) = codepoints.iter().find(|c| !is_format_char(**c)) {
            return Err(format!("U+{:04X} is not a zero-width/format character", *c as u32));
        }
        Ok(Self { codepoints })
    }

    pub fn chars(&self) -> &[char] {
        &self.codepoints
    }

    pub fn len(&self) -> usize {
        self.codepoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codepoints.is_empty()
    }

    pub fn contains(&self, c: char) -> bool {
        self.codepoints.contains(&c)
    }

    pub fn strip(&self, s: &str) -> String {
        s.chars().filter(|c| !self.contains(*c)).collect()
    }
}

/// Unicode Cf characters that are invisible in normal rendering.
fn is_format_char(c: char) -> bool {
    matches!(c as u32,
        0x200B..=0x200F | 0x202A..=0x202E | 0x2060..=0x2064 | 0x2066..=0x206F | 0xFEFF | 0x180E)
}

/// `U+200B` style label used by the plan JSON format.
pub fn codepoint_label(c: char) -> String {
    format!("U+{:04X}", c as u32)
}

pub fn parse_codepoint_label(s: &str) -> Option<char> {
    let hex = s.strip_prefix("U+").or_else(|| s.strip_prefix("u+"))?;
    u32::from_str_radix(hex, 16).ok().and_then(char::from_u32)
}
