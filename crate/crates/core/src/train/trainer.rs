use std::path::Path;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::optim::{adamw_step, AdamW, OptimizerState};
use super::schedule::warmup_lr;
use crate::diffcalc::Tape;
use crate::encoder::Vocab;
use crate::episodes::{sample_episode, Dataset, Episode};
use crate::error::{Error, Result};
use crate::loss::{predict, LossBreakdown};
use crate::metrics::{aggregate, episode_metrics, AggregateMetrics, EpisodeMetrics};
use crate::model::Model;

const TRAIN_STREAM: u64 = 1;

/// Seed of an evaluation-only generator, derived from the run seed.
pub fn eval_seed(seed: u64, purpose: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(purpose)
}

pub const VALID_PURPOSE: u64 = 1;
pub const TEST_PURPOSE: u64 = 2;

/// Generator for evaluation episode `index`.
pub fn episode_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub mean_loss: f64,
    pub mean_support_loss: f64,
    pub mean_query_loss: f64,
    /// Total loss of every step, in order.
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_episode: Vec<EpisodeMetrics>,
    pub aggregate: AggregateMetrics,
}

/// Model, optimizer and sampling state of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub hp: AdamW,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model(), vocab, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self {
            optimizer: OptimizerState::new(&model.store),
            hp: AdamW::new(config.weight_decay),
            config,
            model,
            rng,
            step: 0,
        })
    }

    /// Vocabulary covers every utterance and description word.
    pub fn for_dataset(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        Self::new(config, Vocab::build(dataset.words()))
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let config = ckpt.config.clone();
        config.validate()?;
        let rng = ckpt.rng.clone().ok_or_else(|| Error::contract("checkpoint has no sampler state"))?;
        let step = ckpt.step;
        let optimizer = ckpt.optimizer.clone().ok_or_else(|| Error::contract("checkpoint has no optimizer state"))?;
        let model = ckpt.into_model()?;
        optimizer.check(&model.store)?;
        Ok(Self {
            hp: AdamW::new(config.weight_decay),
            config,
            model,
            optimizer,
            rng,
            step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            vocab: self.model.vocab.clone(),
            params: self.model.store.clone(),
            optimizer: Some(self.optimizer.clone()),
            step: self.step,
            rng: Some(self.rng.clone()),
        }
    }

    /// Forward, backward and one optimizer update. Parameters are untouched
    /// when any stage fails.
    pub fn train_step(&mut self, episode: &Episode) -> Result<LossBreakdown> {
        let objective = self.config.objective();
        let input = self.model.prepare(episode)?;
        let mut tape = Tape::new();
        let pass = self.model.forward(&mut tape, &input, &objective)?;
        let losses = pass
            .losses
            .ok_or_else(|| Error::contract("training episodes need labelled queries"))?;
        self.model.store.zero_grad();
        tape.backward(losses.total, &mut self.model.store)?;
        let lr = warmup_lr(
            self.step as usize + 1,
            self.config.total_steps(),
            self.config.lr,
            self.config.warmup,
        );
        adamw_step(&mut self.model.store, &mut self.optimizer, &self.hp, lr)?;
        self.step += 1;
        LossBreakdown::new(
            tape.value(losses.support).item(),
            tape.value(losses.query).item(),
            objective.alpha,
            objective.beta,
        )
    }

    /// One pass of `tasks_per_epoch` episodes from the training domains.
    pub fn train_epoch(&mut self, dataset: &Dataset, domains: &[String]) -> Result<EpochReport> {
        let spec = self.config.episode_spec();
        let n = self.config.tasks_per_epoch;
        let (mut s, mut q) = (0.0, 0.0);
        let mut losses = Vec::with_capacity(n);
        for _ in 0..n {
            let episode = sample_episode(dataset, domains, &spec, &mut self.rng)?;
            let b = self.train_step(&episode)?;
            s += b.support;
            q += b.query;
            losses.push(b.total);
        }
        Ok(EpochReport {
            mean_loss: losses.iter().sum::<f64>() / n as f64,
            mean_support_loss: s / n as f64,
            mean_query_loss: q / n as f64,
            losses,
        })
    }
}

/// Metrics over `episodes` episodes sampled from `domains`. Episode `i` uses
/// its own generator, so results do not depend on scheduling.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    domains: &[String],
    config: &TrainConfig,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::contract("evaluation needs at least one episode"));
    }
    let spec = config.episode_spec();
    let objective = config.objective();
    let per_episode = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let episode = sample_episode(dataset, domains, &spec, &mut episode_rng(seed, i))?;
            let input = model.prepare(&episode)?;
            let truth = input
                .query_truth()
                .ok_or_else(|| Error::contract("evaluation episodes need labelled queries"))?;
            let out = model.infer(&input, &objective)?;
            let preds = predict(&out.scores, config.force_top1);
            episode_metrics(&out.scores, &preds, &truth)
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(&per_episode)?;
    Ok(EvalReport { per_episode, aggregate })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_support_loss: f64,
    pub mean_query_loss: f64,
    pub valid: AggregateMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<EpochSummary>,
    /// 1-based epoch whose validation score was best.
    pub best_epoch: usize,
    pub test: EvalReport,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub report: FitReport,
    /// Parameters of the best validation epoch.
    pub best: Checkpoint,
    /// Full state after the final epoch.
    pub last: Checkpoint,
}

fn better(a: &AggregateMetrics, b: &AggregateMetrics) -> bool {
    let auc = |m: &AggregateMetrics| m.auc_mean.unwrap_or(f64::NEG_INFINITY);
    a.macro_f1_mean > b.macro_f1_mean || (a.macro_f1_mean == b.macro_f1_mean && auc(a) > auc(b))
}

/// Trains for `epochs`, validating after each, and reports the test metrics
/// of the best validation epoch. With `checkpoint_dir`, writes `best.ckpt`
/// and `last.ckpt`, or `last-good.ckpt` if training hits a numeric failure.
pub fn fit(trainer: &mut Trainer, dataset: &Dataset, checkpoint_dir: Option<&Path>) -> Result<FitOutcome> {
    let config = trainer.config.clone();
    let split = config.resolve_split(&dataset.domains)?;
    let valid_seed = eval_seed(config.seed, VALID_PURPOSE);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, AggregateMetrics, Checkpoint)> = None;
    for epoch in 1..=config.epochs {
        let report = match trainer.train_epoch(dataset, &split.train) {
            Ok(r) => r,
            Err(e @ Error::Numeric { .. }) => {
                if let Some(dir) = checkpoint_dir {
                    let path = dir.join("last-good.ckpt");
                    warn!("numeric failure in epoch {epoch}; saving last good state to {}", path.display());
                    trainer.checkpoint().save(&path)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let valid = evaluate(&trainer.model, dataset, &split.valid, &config, config.eval_episodes, valid_seed)?;
        info!(
            "epoch {epoch}: loss {:.4} (support {:.4}, query {:.4}) valid auc {:?} f1 {:.4}",
            report.mean_loss, report.mean_support_loss, report.mean_query_loss, valid.aggregate.auc_mean, valid.aggregate.macro_f1_mean
        );
        if best.as_ref().is_none_or(|(_, m, _)| better(&valid.aggregate, m)) {
            best = Some((epoch, valid.aggregate.clone(), Checkpoint::from_model(&config, &trainer.model)));
        }
        epochs.push(EpochSummary {
            epoch,
            mean_loss: report.mean_loss,
            mean_support_loss: report.mean_support_loss,
            mean_query_loss: report.mean_query_loss,
            valid: valid.aggregate,
        });
    }
    let (best_epoch, _, best) = best.expect("at least one epoch");
    let best_model = best.clone().into_model()?;
    let test = evaluate(
        &best_model,
        dataset,
        &split.test,
        &config,
        config.eval_episodes,
        eval_seed(config.seed, TEST_PURPOSE),
    )?;
    let last = trainer.checkpoint();
    if let Some(dir) = checkpoint_dir {
        best.save(&dir.join("best.ckpt"))?;
        last.save(&dir.join("last.ckpt"))?;
    }
    Ok(FitOutcome {
        report: FitReport {
            epochs,
            best_epoch,
            test,
        },
        best,
        last,
    })
}
