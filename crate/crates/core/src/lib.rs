//! Traffic-sign map metadata from sparse reconstructions, and change
//! detection against it from new drive data.

pub mod geodesy;
pub mod semantics;
pub mod metadata;
pub mod sfm;
pub mod pose;
pub mod spatial;
pub mod realtime;
pub mod change;
pub mod metrics;
pub mod synth;
pub mod config;
pub mod pipeline;
