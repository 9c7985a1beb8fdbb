//! Segmentation-conditioned adversarial enhancement of ultra-low-field brain MRI.

pub mod checkpoint;
pub mod cyclegan;
pub mod enhance;
pub mod ensemble;
pub mod error;
pub mod figures;
pub mod filters;
pub mod gan;
pub mod gradcheck;
pub mod hallucination;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod segmentation;
pub mod slab;
pub mod trex;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Contrast, ContrastMap, NormState, Subject, Volume};
