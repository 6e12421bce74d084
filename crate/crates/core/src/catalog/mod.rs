//! Persistence: the FMAP tensor container, the specimen record log and
//! dataset manifests.

pub mod fmap;
pub mod manifest;
pub mod records;

pub use fmap::{fmap_read, fmap_write, FmapContainer, FmapError, NamedTensor};
pub use manifest::{split, DatasetManifest, ManifestEntry, ManifestError, Partition};
pub use records::{
    load_records, AlertRecord, Decision, Event, ImageRef, LineError, LoadedRecords, Location, Prediction, RecordError,
    RecordStore, Review, Severity, SpecimenInfo, SpecimenRecord,
};
