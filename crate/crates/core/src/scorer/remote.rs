use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ScoreVector, ScorerError, SequenceScorer};
use crate::tokenizer::{TokenId, Vocabulary};

pub const SCORE_PATH: &str = "/v1/score";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteScorerConfig {
    /// Base URL of the service; `/v1/score` is appended unless already present.
    pub endpoint: String,
    #[serde(with = "secs")]
    pub timeout: Duration,
    pub auth_token: Option<String>,
    /// Send decoded text instead of token ids.
    pub send_text: bool,
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

impl RemoteScorerConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self { endpoint: endpoint.into(), timeout: Duration::from_secs(30), auth_token: None, send_text: false }
    }

    pub fn url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with(SCORE_PATH) {
            base.to_string()
        } else {
            format!("{base}{SCORE_PATH}")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum RemotePayload {
    Text { text: String },
    TokenIds { token_ids: Vec<TokenId> },
}

impl RemotePayload {
    fn expected_len(&self) -> Option<usize> {
        match self {
            RemotePayload::TokenIds { token_ids } => Some(token_ids.len()),
            RemotePayload::Text { .. } => None,
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            RemotePayload::TokenIds { token_ids } => token_ids.is_empty(),
            RemotePayload::Text { text } => text.is_empty(),
        }
    }
}

#[derive(Deserialize)]
struct ScoreResponse {
    logprobs: Vec<f64>,
}

/// POSTs `payload` to the scoring endpoint and validates the reply.
pub fn remote_score(config: &RemoteScorerConfig, payload: &RemotePayload) -> Result<ScoreVector, ScorerError> {
    if config.endpoint.trim().is_empty() {
        return Err(ScorerError::InvalidParameter("remote endpoint is empty".into()));
    }
    let client = reqwest::blocking::Client::builder()
        .timeout(config.timeout)
        .build()
        .map_err(|e| ScorerError::Connection(e.to_string()))?;
    let mut req = client.post(config.url()).json(payload);
    if let Some(token) = &config.auth_token {
        req = req.bearer_auth(token);
    }
    let resp = req.send().map_err(classify)?;
    let status = resp.status();
    let body = resp.text().map_err(classify)?;
    if !status.is_success() {
        return Err(ScorerError::Http { status: status.as_u16(), body });
    }
    parse_response(&body, payload)
}

fn classify(e: reqwest::Error) -> ScorerError {
    if e.is_timeout() {
        ScorerError::Timeout(e.to_string())
    } else if e.is_connect() || e.is_request() {
        ScorerError::Connection(e.to_string())
    } else {
        ScorerError::Protocol(e.to_string())
    }
}

fn parse_response(body: &str, payload: &RemotePayload) -> Result<ScoreVector, ScorerError> {
    let parsed: ScoreResponse =
        serde_json::from_str(body).map_err(|e| ScorerError::Protocol(format!("malformed response: {e}")))?;
    if parsed.logprobs.is_empty() && !payload.is_empty() {
        return Err(ScorerError::Protocol("empty logprobs for non-empty input".into()));
    }
    if let Some(n) = payload.expected_len() {
        if parsed.logprobs.len() != n {
            return Err(ScorerError::Protocol(format!("expected {n} logprobs, got {}", parsed.logprobs.len())));
        }
    }
    ScoreVector::new(parsed.logprobs)
}

/// [`SequenceScorer`] backed by a remote endpoint.
#[derive(Clone, Debug)]
pub struct RemoteScorer {
    config: RemoteScorerConfig,
    vocab: Option<Vocabulary>,
}

impl RemoteScorer {
    /// `vocab` is needed only when the endpoint takes text.
    pub fn new(config: RemoteScorerConfig, vocab: Option<Vocabulary>) -> Result<Self, ScorerError> {
        if config.endpoint.trim().is_empty() {
            return Err(ScorerError::InvalidParameter("remote endpoint is empty".into()));
        }
        if config.send_text && vocab.is_none() {
            return Err(ScorerError::InvalidParameter("text mode needs a vocabulary to decode ids".into()));
        }
        Ok(Self { config, vocab })
    }
}

impl SequenceScorer for RemoteScorer {
    fn score_ids(&self, ids: &[TokenId]) -> Result<ScoreVector, ScorerError> {
        let payload = match (&self.vocab, self.config.send_text) {
            (Some(v), true) => RemotePayload::Text {
                text: v.decode_ids(ids).map_err(|e| ScorerError::InvalidParameter(e.to_string()))?,
            },
            _ => RemotePayload::TokenIds { token_ids: ids.to_vec() },
        };
        let scores = remote_score(&self.config, &payload)?;
        if scores.len() != ids.len() {
            return Err(ScorerError::Protocol(format!(
                "remote returned {} logprobs for {} tokens",
                scores.len(),
                ids.len()
            )));
        }
        Ok(scores)
    }
}
