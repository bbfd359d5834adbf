//! Gaze-to-scene registration and visual-search analytics.
//!
//! Reference images of a site are featured and annotated with areas of
//! interest ([`registry`]); first-person frames from a walkthrough are
//! localized against them and the wearer's gaze is carried into reference
//! coordinates ([`session`]); fixations and dwells feed the search metrics
//! and statistics in [`metrics`]. [`synth`] renders scenes and sessions
//! with known ground truth.

pub mod features;
pub mod geometry;
pub mod metrics;
pub mod registry;
pub mod session;
pub mod synth;
