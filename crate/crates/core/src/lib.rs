//! Core library for natural-language driven GPU kernel optimization.

pub mod backend;
pub mod context;
pub mod perf;
pub mod rng;
pub mod spec;
pub mod store;
pub mod template;
pub mod transform;
pub mod validation;
