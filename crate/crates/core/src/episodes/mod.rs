//! Corpus model, synthetic data and N-way K-shot episode sampling.

mod dataset;
mod sampler;
mod synthetic;

pub use dataset::{label_description, load_dataset, Dataset, DomainStats, LabeledUtterance, UtteranceRecord};
pub use sampler::{sample_episode, DomainSplit, Episode, EpisodeClass, EpisodeItem, EpisodeSpec};
pub use synthetic::{generate_synthetic, SyntheticConfig};
