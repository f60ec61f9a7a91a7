//! Pipeline library behind the `relidar` binary: configuration, stage
//! orchestration, and a synthetic scene generator for demos and tests.

pub mod config;
pub mod pipeline;
pub mod scene_gen;
