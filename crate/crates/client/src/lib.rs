//! Thin async client for the culicid surveillance service.
//!
//! ```no_run
//! # async fn demo() -> Result<(), culicid_client::ClientError> {
//! let client = culicid_client::Client::new("http://127.0.0.1:8642");
//! let image = std::fs::read("specimen-1.png").unwrap();
//! let r = client.ingest(&[("specimen-1.png".into(), image)], None).await?;
//! println!("{} {:.2}", r.label, r.confidence);
//! # Ok(()) }
//! ```

use std::collections::BTreeMap;
use std::fmt;

use reqwest::multipart::{Form, Part};
use reqwest::{RequestBuilder, StatusCode};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    /// The service answered with a non-success status.
    #[error("{status}: {message}")]
    Api { status: StatusCode, message: String },
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub genus: String,
    pub species: String,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut g = self.genus.chars();
        match g.next() {
            Some(c) => write!(f, "{}{} {}", c.to_uppercase(), g.as_str(), self.species),
            None => f.write_str(&self.species),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestMetadata {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub specimen_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trap_id: Option<String>,
    /// `YYYY-MM-DD`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub capture_date: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub location: Option<Location>,
    /// Field identification, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub species: String,
    pub severity: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestResponse {
    pub specimen_id: String,
    pub model_id: String,
    pub label: Label,
    pub confidence: f64,
    pub probabilities: BTreeMap<String, f64>,
    #[serde(default)]
    pub genus_probabilities: Option<Vec<f64>>,
    pub alert: Option<Alert>,
    pub review_requested: bool,
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_loaded: bool,
    pub model_id: Option<String>,
    pub mode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingItem {
    pub specimen_id: String,
    pub label: Label,
    pub confidence: f64,
    pub trap_id: Option<String>,
    pub created: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewImage {
    pub image_id: String,
    /// Base64 of the stored upload.
    pub image: String,
    /// Base64 PNG of the activation-map overlay.
    pub cam_overlay: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub specimen_id: String,
    pub trap_id: Option<String>,
    pub capture_date: Option<String>,
    pub prediction: Option<Value>,
    pub review: Option<Value>,
    pub images: Vec<ReviewImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    Confirm,
    Override { label: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRequest {
    #[serde(flatten)]
    pub decision: Decision,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reviewer: Option<String>,
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionResponse {
    pub specimen_id: String,
    pub label: Option<Label>,
    pub review: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub specimen_id: String,
    pub label: Label,
    /// `review`, `prediction` or `field`.
    pub label_source: String,
    pub images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub generated: String,
    pub items: Vec<CorpusItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub since: Option<String>,
    pub specimens: u64,
    pub reviewed: u64,
    pub pending_review: u64,
    pub per_species: BTreeMap<String, u64>,
    pub alerts: BTreeMap<String, u64>,
    pub per_trap: BTreeMap<String, BTreeMap<String, u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertEvent {
    pub specimen_id: String,
    #[serde(default)]
    pub trap_id: Option<String>,
    pub species: String,
    pub severity: String,
    pub confidence: f64,
    pub timestamp: String,
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    token: Option<String>,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base: base_url.into().trim_end_matches('/').to_owned(),
            token: None,
            http: reqwest::Client::new(),
        }
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn auth(&self, rb: RequestBuilder) -> RequestBuilder {
        match &self.token {
            Some(t) => rb.bearer_auth(t),
            None => rb,
        }
    }

    async fn send<T: DeserializeOwned>(&self, rb: RequestBuilder) -> Result<T> {
        let resp = self.auth(rb).send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await.unwrap_or_default();
        let message = serde_json::from_str::<Value>(&text)
            .ok()
            .and_then(|v| v.get("error").and_then(Value::as_str).map(str::to_owned))
            .unwrap_or(text);
        Err(ClientError::Api { status, message })
    }

    pub async fn health(&self) -> Result<Health> {
        self.send(self.http.get(self.url("/health"))).await
    }

    /// Uploads one specimen's images (`(file name, bytes)`) for
    /// classification.
    pub async fn ingest(&self, images: &[(String, Vec<u8>)], metadata: Option<&IngestMetadata>) -> Result<IngestResponse> {
        let mut form = Form::new();
        if let Some(m) = metadata {
            form = form.text("metadata", serde_json::to_string(m).expect("metadata serializes"));
        }
        for (name, bytes) in images {
            form = form.part("image", Part::bytes(bytes.clone()).file_name(name.clone()));
        }
        self.send(self.http.post(self.url("/specimens")).multipart(form)).await
    }

    pub async fn specimen(&self, id: &str) -> Result<Value> {
        self.send(self.http.get(self.url(&format!("/specimens/{id}")))).await
    }

    pub async fn pending(&self) -> Result<Vec<PendingItem>> {
        self.send(self.http.get(self.url("/review/pending"))).await
    }

    pub async fn review_item(&self, id: &str) -> Result<ReviewItem> {
        self.send(self.http.get(self.url(&format!("/review/{id}")))).await
    }

    pub async fn decide(&self, id: &str, request: &DecisionRequest) -> Result<DecisionResponse> {
        self.send(self.http.post(self.url(&format!("/review/{id}/decision"))).json(request))
            .await
    }

    pub async fn export_corpus(&self, reviewed_only: bool) -> Result<Corpus> {
        let q = if reviewed_only { "?reviewed_only=true" } else { "" };
        self.send(self.http.get(self.url(&format!("/export/training-corpus{q}")))).await
    }

    pub async fn summary(&self, since: Option<&str>) -> Result<Summary> {
        let mut rb = self.http.get(self.url("/summary"));
        if let Some(s) = since {
            rb = rb.query(&[("since", s)]);
        }
        self.send(rb).await
    }

    pub async fn alerts(&self, since: Option<&str>) -> Result<Vec<AlertEvent>> {
        let mut rb = self.http.get(self.url("/alerts"));
        if let Some(s) = since {
            rb = rb.query(&[("since", s)]);
        }
        self.send(rb).await
    }

    /// Asks the service to load the bundle at `path` (on the server's
    /// filesystem) and swap it in; returns the new model id.
    pub async fn swap_model(&self, path: &str) -> Result<String> {
        let v: Value = self
            .send(self.http.post(self.url("/model")).json(&serde_json::json!({ "path": path })))
            .await?;
        Ok(v["model_id"].as_str().unwrap_or_default().to_owned())
    }
}
