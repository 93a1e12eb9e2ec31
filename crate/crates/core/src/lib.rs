//! Count, crop and recognise: recognising individuals in video frames from
//! frame-level identity labels alone.
//!
//! A counting network's class activation map proposes a zoomed-in region,
//! which is cropped at full resolution and handed to a multilabel identity
//! classifier. Face- and body-track recognition is simulated alongside so
//! the three levels of localisation can be compared with track-aware
//! precision/recall metrics.

pub mod detsim;
pub mod error;
pub mod eval;
pub mod imageops;
pub mod model;
pub mod numerics;
pub mod proposal;
pub mod seeds;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
