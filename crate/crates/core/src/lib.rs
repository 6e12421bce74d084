//! Core pipeline for smartphone-image mosquito vector identification:
//! image handling, non-local means denoising, augmentation, a small
//! neural-network core, classifier heads over a pluggable backbone,
//! training, class activation maps, evaluation and persistence.

pub mod augment;
pub mod bundle;
pub mod catalog;
pub mod denoise;
pub mod eval;
pub mod explain;
pub mod gradcheck;
pub mod heads;
pub mod image;
pub mod nn;
pub mod preprocess;
pub mod taxon;
pub mod train;

pub use image::{ImageTensor, Scale};
pub use taxon::{Genus, Species, TaxonLabel};
