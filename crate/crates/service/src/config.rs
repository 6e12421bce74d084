use std::path::{Path, PathBuf};

use culicid_core::bundle::ClassifyMode;
use culicid_core::catalog::{AlertRecord, Severity};
use culicid_core::{Species, TaxonLabel};
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Which predictions raise an alert, and how loudly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlertPolicy {
    pub watchlist: Vec<Species>,
    pub critical: Vec<Species>,
    pub min_confidence: f64,
}

impl Default for AlertPolicy {
    fn default() -> Self {
        Self {
            watchlist: Species::ALL.to_vec(),
            critical: vec![Species::Aegypti, Species::Stephensi],
            min_confidence: 0.5,
        }
    }
}

impl AlertPolicy {
    pub fn evaluate(&self, label: TaxonLabel, confidence: f64) -> Option<AlertRecord> {
        let species = label.species();
        if !self.watchlist.contains(&species) || confidence < self.min_confidence {
            return None;
        }
        let severity = if self.critical.contains(&species) {
            Severity::Critical
        } else {
            Severity::Watch
        };
        Some(AlertRecord {
            species,
            severity,
            confidence,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// Directory holding the record log, alert log, images and maps.
    pub store: PathBuf,
    /// Model bundle directory loaded at startup.
    pub model: Option<PathBuf>,
    pub mode: ClassifyMode,
    /// Predictions below this confidence are queued for review.
    pub review_threshold: f64,
    pub alerts: AlertPolicy,
    /// When set, every route except `/health` needs `Authorization: Bearer <token>`.
    pub auth_token: Option<String>,
    pub max_images: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8642".into(),
            store: PathBuf::from("culicid-store"),
            model: None,
            mode: ClassifyMode::Direct,
            review_threshold: 0.6,
            alerts: AlertPolicy::default(),
            auth_token: None,
            max_images: 12,
        }
    }
}

impl ServiceConfig {
    /// Reads a JSON config file (or starts from defaults) and applies
    /// `CULICID_BIND` and `CULICID_STORE` from the environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(bind) = lookup("CULICID_BIND") {
            self.bind = bind;
        }
        if let Some(store) = lookup("CULICID_STORE") {
            self.store = PathBuf::from(store);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.review_threshold) {
            return Err(ConfigError(format!("review_threshold {} outside [0, 1]", self.review_threshold)));
        }
        if !(0.0..=1.0).contains(&self.alerts.min_confidence) {
            return Err(ConfigError(format!(
                "alerts.min_confidence {} outside [0, 1]",
                self.alerts.min_confidence
            )));
        }
        if self.max_images == 0 {
            return Err(ConfigError("max_images must be at least 1".into()));
        }
        Ok(())
    }
}
