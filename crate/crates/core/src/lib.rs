//! Contrastive clustering with a geographical prior for geotagged
//! street-level images, plus the post-clustering assignment and grid-map
//! workflow that turns clusters into a land-use map.

pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod geo;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pcva;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
