use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use textguard::perturb::{InvisibleMode, Strategy, DEFAULT_BATCH, DEFAULT_CAND_K, DEFAULT_TAU};

use crate::failure::{Classify, Failure, Kind, Outcome};

/// Reads a TOML file, or JSON when the extension is `.json`. Unknown keys
/// are rejected by the target type.
pub fn load_file<T: DeserializeOwned>(path: &Path) -> Outcome<T> {
    let text = fs::read_to_string(path).io(format!("reading {}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::from_str(&text).map_err(anyhow::Error::from)
    } else {
        toml::from_str(&text).map_err(anyhow::Error::from)
    };
    parsed.kind(Kind::Config, format!("config file {}", path.display()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FormatChoice {
    /// `.html`/`.htm` files are HTML, everything else plain text.
    #[default]
    Auto,
    Text,
    Html,
}

impl FormatChoice {
    pub fn is_html(self, path: &Path) -> bool {
        match self {
            FormatChoice::Html => true,
            FormatChoice::Text => false,
            FormatChoice::Auto => path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("html") || e.eq_ignore_ascii_case("htm")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtectSettings {
    pub strategy: Strategy,
    /// 0 copies inputs unchanged.
    pub budget: f64,
    pub mode: InvisibleMode,
    pub seed: u64,
    pub vocab: Option<PathBuf>,
    pub proxy_model: Option<PathBuf>,
    pub remote_endpoint: Option<String>,
    pub format: FormatChoice,
    /// HTML text nodes shorter than this are left alone.
    pub min_tokens: usize,
    pub tau: usize,
    pub batch_size: usize,
    pub cand_k: usize,
}

impl Default for ProtectSettings {
    fn default() -> Self {
        Self {
            strategy: Strategy::TpOov,
            budget: 0.4,
            mode: InvisibleMode::Chars,
            seed: 0,
            vocab: None,
            proxy_model: None,
            remote_endpoint: None,
            format: FormatChoice::Auto,
            min_tokens: textguard::cloak::DEFAULT_MIN_TOKENS,
            tau: DEFAULT_TAU,
            batch_size: DEFAULT_BATCH,
            cand_k: DEFAULT_CAND_K,
        }
    }
}

impl ProtectSettings {
    pub fn validate(&self) -> Outcome<()> {
        if !(0.0..=1.0).contains(&self.budget) {
            return Err(Failure::config(format!("budget {} outside [0, 1]", self.budget)));
        }
        if self.proxy_model.is_some() && self.remote_endpoint.is_some() {
            return Err(Failure::config("give either a proxy model or a remote endpoint, not both"));
        }
        if self.budget == 0.0 {
            return Ok(());
        }
        if self.vocab.is_none() {
            return Err(Failure::config("a vocabulary is required"));
        }
        if self.strategy.needs_ngram() && self.proxy_model.is_none() {
            return Err(Failure::config(format!("strategy {} needs --proxy-model", self.strategy)));
        }
        if self.strategy.needs_scores() && self.proxy_model.is_none() && self.remote_endpoint.is_none() {
            return Err(Failure::config(format!(
                "strategy {} needs --proxy-model or --remote-endpoint",
                self.strategy
            )));
        }
        Ok(())
    }
}
