pub mod attacks;
pub mod data;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod models;
pub mod rng;

pub use error::{CoreError, Result};

/// Class labels shared by datasets, models, and metrics.
pub const LABEL_BONA_FIDE: u8 = 0;
pub const LABEL_MORPH: u8 = 1;
