//! Finite-difference check of the complete training objective on a tiny
//! sampled episode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcalc::{finite_diff_check, GradCheckReport};
use crate::encoder::Vocab;
use crate::episodes::{generate_synthetic, sample_episode, SyntheticConfig};
use crate::error::{Error, Result};
use crate::graph::AggregationMode;
use crate::model::Model;
use crate::train::TrainConfig;

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

/// d = 8, N = 3, K = 1, T = 2, L = 2.
pub fn tiny_config(aggregation: AggregationMode) -> TrainConfig {
    TrainConfig {
        hidden: 8,
        attn_hidden: 8,
        layers: 2,
        n_way: 3,
        k_shot: 1,
        n_query: 2,
        aggregation,
        ..TrainConfig::default()
    }
}

fn tiny_corpus(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        classes: 6,
        vocab_size: 48,
        instances: 90,
        domains: 1,
        seed,
        ..SyntheticConfig::default()
    }
}

/// Compares analytic and central-difference gradients of the weighted
/// objective for every parameter of a freshly initialised model.
pub fn full_loss_gradcheck(config: &TrainConfig, seed: u64, step: f64) -> Result<GradCheckReport> {
    config.validate()?;
    let dataset = generate_synthetic(&tiny_corpus(seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let episode = sample_episode(&dataset, &dataset.domains, &config.episode_spec(), &mut rng)?;
    let mut model = Model::new(config.model(), Vocab::build(dataset.words()), seed)?;
    let input = model.prepare(&episode)?;
    let objective = config.objective();
    let mut store = std::mem::take(&mut model.store);
    let report = finite_diff_check(&mut store, step, |s, tape| {
        let pass = model.forward_with(s, tape, &input, &objective)?;
        pass.losses
            .map(|l| l.total)
            .ok_or_else(|| Error::contract("gradient check needs labelled queries"))
    });
    model.store = store;
    report
}
