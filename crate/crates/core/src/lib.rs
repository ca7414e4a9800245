//! Motion-aware video-to-audio pipeline.
//!
//! Frames arrive in pairs, a small classifier decides whether the scene is
//! still or moving, and the matching branch asks a scene interpreter for a
//! description, hazard alert or sound effect. Audio is synthesized or pulled
//! from a content-addressed cache, then gated by per-category throttles
//! before it is sent back to the client.

pub mod cache;
pub mod category;
pub mod classifier;
pub mod corpus;
pub mod features;
pub mod frame;
pub mod interpreter;
pub mod metrics;
pub mod pipeline;
pub mod policy;
pub mod synth;

#[cfg(feature = "live")]
pub mod live;
