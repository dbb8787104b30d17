//! Agent-based travel demand pipeline.
//!
//! The library covers the full chain from weighted survey microdata to a
//! validated traffic picture:
//!
//! 1. [`population`] — weight scaling, TRS integerization, IPF, expansion
//!    into a synthetic agent population.
//! 2. [`persona`] / [`schedule`] / [`modes`] — prompt construction, response
//!    parsing and repair for a pluggable text-generation [`backend`].
//! 3. [`locations`] — categorized building catalog from OSM extracts, home
//!    sampling and nearest-building destination choice.
//! 4. [`network`] / [`transit`] / [`routing`] — per-mode road graphs, a GTFS
//!    timetable with round-based earliest-arrival search, and per-trip route
//!    options.
//! 5. [`assignment`] — hourly BPR volume-delay assignment iterated with the
//!    method of successive averages.
//! 6. [`eval`] — modal splits, length/duration histograms, RMSE indicators
//!    and traffic-count profile comparison against reference datasets.
//! 7. [`pipeline`] — staged orchestration with run manifests and resumability.

pub mod assignment;
pub mod backend;
pub mod error;
pub mod eval;
pub mod locations;
pub mod modes;
pub mod network;
pub mod osm;
pub mod persona;
pub mod pipeline;
pub mod population;
pub mod routing;
pub mod schedule;
pub mod schema;
pub mod transit;

pub use error::{Error, Result};
