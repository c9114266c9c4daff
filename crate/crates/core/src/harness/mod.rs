//! Configuration, procedural data, training loops, proxy metrics and file formats.

pub mod config;
pub mod data;
pub mod io;
pub mod metrics;
pub mod train;

pub use config::{Mode, RunConfig};
pub use data::{gen_toy_domains, Domain, DomainDataset};
pub use io::Checkpoint;
pub use metrics::{evaluate_metrics, EvalMetrics, MetricsRow};
pub use train::{adapt, pretrain, sample, AdaptOutput, PretrainOutput};
