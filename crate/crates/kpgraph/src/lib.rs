//! File formats, training runs, evaluation and the command-line pipeline
//! around `kpgraph-core`.

pub mod checkpoint;
pub mod dataset;
pub mod evaluate;
pub mod formats;
pub mod io;
pub mod pipeline;
pub mod run;

pub use kpgraph_core as core;
