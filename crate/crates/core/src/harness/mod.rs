//! Configuration, file formats, checkpoints and the command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod genotype_io;
pub mod gradsuite;
pub mod lock;
pub mod pipeline;

pub use checkpoint::{Checkpoint, Phase};
pub use config::{parse_config, DatasetKind, RunConfig};
pub use dataset::{gen_toy_dataset, read_dataset, render_toy, write_dataset};
pub use genotype_io::{parse_genotype, serialize_genotype};
