//! Append-only specimen record log.
//!
//! Each line of the store is one JSON event carrying a schema version
//! `"v": 1` and a `kind`: `specimen` registers a specimen with its images,
//! `prediction` attaches a classifier output and `review` a taxonomist
//! decision. Loading folds the events into [`SpecimenRecord`]s. A line
//! that fails to parse is reported with its number and skipped; every
//! other line still loads, so a torn final write never hides earlier
//! records.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxon::{Species, TaxonLabel};

pub const RECORD_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("record encoding failed: {0}")]
    Encode(#[from] serde_json::Error),
    #[error("duplicate image id {0:?} in specimen")]
    DuplicateImage(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phone: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Critical,
    Watch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRecord {
    pub species: Species,
    pub severity: Severity,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub model_id: String,
    /// Class names in the order of `probabilities`.
    pub classes: Vec<String>,
    pub probabilities: Vec<f64>,
    pub label: TaxonLabel,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genus_probabilities: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alert: Option<AlertRecord>,
    #[serde(default)]
    pub review_requested: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cam_path: Option<String>,
}

impl Prediction {
    pub fn confidence(&self) -> f64 {
        self.probabilities.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    Confirm,
    Override { label: TaxonLabel },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Review {
    #[serde(flatten)]
    pub decision: Decision,
    pub reviewer: String,
    pub timestamp: DateTime<Utc>,
    #[serde(default)]
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecimenInfo {
    pub specimen_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trap_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capture_date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<Location>,
    pub images: Vec<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<TaxonLabel>,
    pub created: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Specimen(SpecimenInfo),
    Prediction {
        specimen_id: String,
        #[serde(flatten)]
        prediction: Prediction,
    },
    Review {
        specimen_id: String,
        #[serde(flatten)]
        review: Review,
    },
}

impl Event {
    pub fn specimen_id(&self) -> &str {
        match self {
            Event::Specimen(s) => &s.specimen_id,
            Event::Prediction { specimen_id, .. } | Event::Review { specimen_id, .. } => specimen_id,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Line {
    v: u32,
    #[serde(flatten)]
    event: Event,
}

/// A specimen with everything the log knows about it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpecimenRecord {
    #[serde(flatten)]
    pub info: SpecimenInfo,
    pub predictions: Vec<Prediction>,
    /// Every decision in log order; see [`SpecimenRecord::review`].
    pub reviews: Vec<Review>,
}

impl SpecimenRecord {
    pub fn new(info: SpecimenInfo) -> Self {
        Self {
            info,
            predictions: Vec::new(),
            reviews: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.info.specimen_id
    }

    pub fn latest_prediction(&self) -> Option<&Prediction> {
        self.predictions.last()
    }

    /// The active decision: latest timestamp, later log lines winning ties
    /// (`max_by_key` keeps the last maximum).
    pub fn review(&self) -> Option<&Review> {
        self.reviews.iter().max_by_key(|r| r.timestamp)
    }

    /// Label established by a reviewer, if any.
    pub fn reviewed_label(&self) -> Option<TaxonLabel> {
        match self.review()?.decision {
            Decision::Override { label } => Some(label),
            Decision::Confirm => self.latest_prediction().map(|p| p.label).or(self.info.label),
        }
    }

    /// Reviewed label where present, else the latest prediction.
    pub fn effective_label(&self) -> Option<TaxonLabel> {
        self.reviewed_label().or_else(|| self.latest_prediction().map(|p| p.label))
    }

    fn apply(&mut self, event: Event) {
        match event {
            Event::Specimen(_) => unreachable!("specimen events create records"),
            Event::Prediction { prediction, .. } => self.predictions.push(prediction),
            Event::Review { review, .. } => self.reviews.push(review),
        }
    }
}

#[derive(Debug, Default)]
pub struct LoadedRecords {
    pub records: Vec<SpecimenRecord>,
    pub errors: Vec<LineError>,
}

impl LoadedRecords {
    pub fn get(&self, specimen_id: &str) -> Option<&SpecimenRecord> {
        self.records.iter().find(|r| r.id() == specimen_id)
    }
}

/// Folds an event stream (with 1-based line numbers) into records.
pub fn fold_events(events: impl IntoIterator<Item = (usize, Event)>) -> LoadedRecords {
    let mut out = LoadedRecords::default();
    let mut index = std::collections::HashMap::new();
    for (line, event) in events {
        match event {
            Event::Specimen(info) => {
                if index.contains_key(&info.specimen_id) {
                    out.errors.push(LineError {
                        line,
                        message: format!("duplicate specimen {:?}", info.specimen_id),
                    });
                    continue;
                }
                index.insert(info.specimen_id.clone(), out.records.len());
                out.records.push(SpecimenRecord::new(info));
            }
            other => match index.get(other.specimen_id()) {
                Some(&i) => out.records[i].apply(other),
                None => out.errors.push(LineError {
                    line,
                    message: format!("event for unknown specimen {:?}", other.specimen_id()),
                }),
            },
        }
    }
    out
}

pub fn parse_log(text: &str) -> LoadedRecords {
    let mut errors = Vec::new();
    let mut events = Vec::new();
    for (i, raw) in text.split('\n').enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Line>(raw) {
            Ok(l) if l.v == RECORD_VERSION => events.push((i + 1, l.event)),
            Ok(l) => errors.push(LineError {
                line: i + 1,
                message: format!("unsupported record version {}", l.v),
            }),
            Err(e) => errors.push(LineError {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    let mut loaded = fold_events(events);
    errors.append(&mut loaded.errors);
    errors.sort_by_key(|e| e.line);
    loaded.errors = errors;
    loaded
}

/// Reads the log at `path`. A missing file is an empty store.
pub fn load_records(path: impl AsRef<Path>) -> Result<LoadedRecords, RecordError> {
    match std::fs::read(path) {
        Ok(bytes) => Ok(parse_log(&String::from_utf8_lossy(&bytes))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(LoadedRecords::default()),
        Err(e) => Err(e.into()),
    }
}

/// Single-writer handle on a record log. Every append takes an exclusive
/// file lock, writes one complete line and syncs it before returning.
#[derive(Debug, Clone)]
pub struct RecordStore {
    path: PathBuf,
}

impl RecordStore {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, RecordError> {
        let path = path.into();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn load(&self) -> Result<LoadedRecords, RecordError> {
        load_records(&self.path)
    }

    pub fn append(&self, event: &Event) -> Result<(), RecordError> {
        if let Event::Specimen(info) = event {
            let mut seen = std::collections::HashSet::new();
            for img in &info.images {
                if !seen.insert(&img.image_id) {
                    return Err(RecordError::DuplicateImage(img.image_id.clone()));
                }
            }
        }
        let mut line = serde_json::to_vec(&LineRef {
            v: RECORD_VERSION,
            event,
        })?;
        line.push(b'\n');

        let mut file = OpenOptions::new().read(true).append(true).open(&self.path)?;
        file.lock()?;
        let result = write_line(&mut file, &line);
        let unlock = file.unlock();
        result?;
        unlock?;
        Ok(())
    }

    pub fn append_record(&self, info: SpecimenInfo) -> Result<(), RecordError> {
        self.append(&Event::Specimen(info))
    }

    pub fn append_prediction(&self, specimen_id: &str, prediction: Prediction) -> Result<(), RecordError> {
        self.append(&Event::Prediction {
            specimen_id: specimen_id.to_owned(),
            prediction,
        })
    }

    pub fn append_review(&self, specimen_id: &str, review: Review) -> Result<(), RecordError> {
        self.append(&Event::Review {
            specimen_id: specimen_id.to_owned(),
            review,
        })
    }
}

#[derive(Serialize)]
struct LineRef<'a> {
    v: u32,
    #[serde(flatten)]
    event: &'a Event,
}

fn write_line(file: &mut File, line: &[u8]) -> std::io::Result<()> {
    // a torn previous write leaves no trailing newline; start a fresh line
    // so the new record is not glued onto the fragment
    let len = file.seek(SeekFrom::End(0))?;
    if len > 0 {
        file.seek(SeekFrom::Start(len - 1))?;
        let mut last = [0u8; 1];
        file.read_exact(&mut last)?;
        if last[0] != b'\n' {
            file.write_all(b"\n")?;
        }
    }
    file.write_all(line)?;
    file.sync_data()
}
