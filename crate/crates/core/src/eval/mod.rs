//! Representation quality: per-block linear probes, class-balanced subsets
//! and whole-network finetuning.

mod features;
mod finetune;
mod probe;
mod report;
mod subset;

pub use features::{adapt_image, batch_tensor, extract_block_features, FeatureTable};
pub use finetune::{semi_supervised_finetune, FinetuneResult, FinetuneSchedule};
pub use probe::{fit_linear, linear_probe, LinearModel, ProbeResult, ProbeSchedule};
pub use report::{FinetuneSummary, ProbeReport, Protocol};
pub use subset::{class_balanced_subset, SubsetSpec};
