use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Utc};
use culicid_core::bundle::{BundleError, ModelBundle};
use culicid_core::catalog::{RecordStore, Severity};
use culicid_core::Species;
use serde::{Deserialize, Serialize};

use crate::config::ServiceConfig;

/// One line of the append-only alert log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertEvent {
    pub specimen_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trap_id: Option<String>,
    pub species: Species,
    pub severity: Severity,
    pub confidence: f64,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone)]
pub struct AlertLog {
    path: PathBuf,
}

impl AlertLog {
    pub fn new(path: PathBuf) -> Self {
        Self { path }
    }

    pub fn append(&self, event: &AlertEvent) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(event).map_err(std::io::Error::other)?;
        line.push(b'\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.lock()?;
        let r = f.write_all(&line).and_then(|_| f.sync_data());
        f.unlock()?;
        r
    }

    /// Every parseable line; torn or foreign lines are skipped.
    pub fn read(&self) -> std::io::Result<Vec<AlertEvent>> {
        match std::fs::read_to_string(&self.path) {
            Ok(text) => Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e),
        }
    }
}

/// Shared service state. The model sits behind an `Arc` swapped under a
/// lock, so a request sees either the old or the new model, never a mix.
pub struct AppState {
    pub config: ServiceConfig,
    pub records: RecordStore,
    pub alerts: AlertLog,
    model: RwLock<Option<Arc<ModelBundle>>>,
    /// Serializes check-then-append sequences on the record log.
    pub write_lock: tokio::sync::Mutex<()>,
}

impl AppState {
    pub fn open(config: ServiceConfig) -> Result<Self, crate::Error> {
        std::fs::create_dir_all(&config.store).map_err(|e| crate::Error::Store(format!("{}: {e}", config.store.display())))?;
        let records = RecordStore::open(config.store.join("records.jsonl")).map_err(|e| crate::Error::Store(e.to_string()))?;
        let alerts = AlertLog::new(config.store.join("alerts.jsonl"));
        let model = match &config.model {
            Some(dir) => Some(Arc::new(ModelBundle::load(dir)?)),
            None => None,
        };
        Ok(Self {
            config,
            records,
            alerts,
            model: RwLock::new(model),
            write_lock: tokio::sync::Mutex::new(()),
        })
    }

    pub fn store_dir(&self) -> &Path {
        &self.config.store
    }

    pub fn model(&self) -> Option<Arc<ModelBundle>> {
        self.model.read().expect("model lock").clone()
    }

    pub fn swap_model(&self, bundle: ModelBundle) -> Arc<ModelBundle> {
        let bundle = Arc::new(bundle);
        *self.model.write().expect("model lock") = Some(bundle.clone());
        bundle
    }

    pub fn load_model(&self, dir: &Path) -> Result<Arc<ModelBundle>, BundleError> {
        Ok(self.swap_model(ModelBundle::load(dir)?))
    }
}
