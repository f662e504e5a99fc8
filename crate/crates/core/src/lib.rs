//! Static detection of trigger-guarded sensitive behavior in programs written
//! in TBIR, a small three-address representation of component-structured apps.
//!
//! The pipeline: parse ([`ir`]), build the entry model ([`model`]), build
//! graphs ([`graphs`]), model values ([`symex`]), recover and minimize path
//! predicates ([`predicates`]), classify suspicious checks ([`classify`]),
//! search guarded regions for sensitive calls ([`controldep`]), filter
//! ([`filters`]) and report ([`report`]). [`batch`] drives corpora and
//! experiments.

pub mod ir;
pub mod model;
pub mod graphs;
pub mod deadline;
pub mod symex;
pub mod predicates;
pub mod classify;
pub mod controldep;
pub mod filters;
pub mod report;
pub mod pipeline;
pub mod stats;
pub mod batch;
pub mod synth;

/// Per-program analysis budget used when none is configured.
pub const DEFAULT_TIMEOUT_SECS: u64 = 60;
