//! Nested k-nearest-neighbor detection of precipitation occurrence and
//! phase from multichannel microwave brightness temperatures.
//!
//! The pipeline runs in five steps:
//!
//! 1. [`database`] merges reference phase labels, classifies snow cover and
//!    builds a stratified, balanced a-priori database.
//! 2. [`knn`] answers exact weighted-Euclidean nearest-neighbor queries.
//! 3. [`detector`] runs the three-stage occurrence / liquid / solid-mixed
//!    vote cascade for each query.
//! 4. [`calibration`] picks `(k, p)` per stage from ROC curves.
//! 5. [`metrics`] and [`grid`] score detections and aggregate them onto
//!    latitude/longitude grids.
//!
//! [`synth`] generates labeled synthetic samples for desk-scale runs and
//! [`cli`] exposes everything as a single executable.

pub mod calibration;
pub mod cli;
pub mod config;
pub mod database;
pub mod detector;
pub mod envelope;
pub mod error;
pub mod grid;
pub mod io;
pub mod knn;
pub mod metrics;
pub mod model;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
pub use model::{
    validate_sample, AtmosphericClass, ChannelVector, ContingencyTable, LandSurfaceClass,
    MatchedSample, PhaseLabel, StageParams, VoteFraction, WeightMatrix,
};
