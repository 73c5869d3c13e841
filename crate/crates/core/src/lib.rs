//! Decoupled spatial/temporal graph grounding.
//!
//! Pipeline: synthetic videos ([`synthdata`]) -> region features
//! ([`featurize`]) -> spatial/temporal graphs ([`stgraph`]) -> graph encoder
//! and cross-modal decoder ([`model`]) trained with matching plus
//! spatio-temporal consistency losses ([`objectives`], [`trainer`]) ->
//! proposal-free tube linking and tube NMS ([`grounding`]) -> vIoU/tIoU
//! evaluation ([`metrics`]) and static reports ([`report`]).

pub mod error;
pub mod featurize;
pub mod geometry;
pub mod grounding;
pub mod langenc;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod params;
pub mod report;
pub mod stgraph;
pub mod synthdata;
pub mod tape;
pub mod trainer;

pub use error::{DstgError, Result};
