use serde::{Deserialize, Serialize};

use crate::episodes::{DomainSplit, EpisodeSpec};
use crate::error::{Error, Result};
use crate::graph::{AggregationMode, EdgeFeatureMode};
use crate::loss::{RelationMode, VoteMode};
use crate::model::{ModelConfig, Objective};

/// Every knob of a training run. Serialized as a flat JSON object; missing
/// fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub layers: usize,
    pub hidden: usize,
    pub attn_hidden: usize,
    pub attn_rows: usize,
    pub lr: f64,
    pub warmup: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub tasks_per_epoch: usize,
    /// Episodes per validation pass and for the final test report.
    pub eval_episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub seed: u64,
    pub aggregation: AggregationMode,
    pub relation_mode: RelationMode,
    pub vote_mode: VoteMode,
    pub edge_features: EdgeFeatureMode,
    pub use_class_descriptions: bool,
    pub force_top1: bool,
    /// Explicit domain split; when absent the last two domains are held out
    /// for validation and test.
    pub split: Option<DomainSplit>,
}

pub const FIDELITY_LR: f64 = 5e-5;

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let o = Objective::default();
        Self {
            alpha: o.alpha,
            beta: o.beta,
            layers: m.layers,
            hidden: m.hidden,
            attn_hidden: m.attn_hidden,
            attn_rows: m.attn_rows,
            lr: 1e-3,
            warmup: 0.05,
            weight_decay: 0.01,
            epochs: 30,
            tasks_per_epoch: 100,
            eval_episodes: 100,
            n_way: 5,
            k_shot: 1,
            n_query: 16,
            seed: 1,
            aggregation: m.aggregation,
            relation_mode: o.relation_mode,
            vote_mode: o.vote_mode,
            edge_features: m.edge_features,
            use_class_descriptions: m.use_class_descriptions,
            force_top1: false,
            split: None,
        }
    }
}

impl TrainConfig {
    /// Defaults with the small learning rate used for pretrained encoders.
    pub fn fidelity() -> Self {
        Self {
            lr: FIDELITY_LR,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return bad(format!("warmup proportion must lie in [0, 1), got {}", self.warmup));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return bad(format!("loss weights must be nonnegative, got alpha={} beta={}", self.alpha, self.beta));
        }
        if self.epochs == 0 || self.tasks_per_epoch == 0 || self.eval_episodes == 0 {
            return bad("epochs, tasks_per_epoch and eval_episodes must be positive".into());
        }
        if self.hidden == 0 || self.attn_hidden == 0 || self.attn_rows == 0 || self.layers == 0 {
            return bad("model sizes must be positive".into());
        }
        self.episode_spec().validate()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            attn_hidden: self.attn_hidden,
            attn_rows: self.attn_rows,
            layers: self.layers,
            aggregation: self.aggregation,
            edge_features: self.edge_features,
            use_class_descriptions: self.use_class_descriptions,
        }
    }

    pub fn objective(&self) -> Objective {
        Objective {
            alpha: self.alpha,
            beta: self.beta,
            relation_mode: self.relation_mode,
            vote_mode: self.vote_mode,
        }
    }

    pub fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            n_way: self.n_way,
            k_shot: self.k_shot,
            n_query: self.n_query,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.tasks_per_epoch
    }

    /// Resolves the domain split against a dataset's domains.
    pub fn resolve_split(&self, domains: &[String]) -> Result<DomainSplit> {
        let split = match &self.split {
            Some(s) => s.clone(),
            None => DomainSplit::hold_out_last(domains)?,
        };
        split.validate(domains)?;
        Ok(split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.alpha, c.beta, c.layers), (0.1, 1.0, 2));
        assert_eq!(c.tasks_per_epoch, 100);
        assert_eq!((c.warmup, c.weight_decay, c.lr), (0.05, 0.01, 1e-3));
        assert_eq!(TrainConfig::fidelity().lr, 5e-5);
        c.validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"k_shot": 3, "edge_features": "cosine"}"#).unwrap();
        assert_eq!(c.k_shot, 3);
        assert_eq!(c.edge_features, EdgeFeatureMode::Cosine);
        assert_eq!(c.n_way, 5);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"k_shots": 3}"#).is_err());
        let round: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(round, c);
    }

    #[test]
    fn invalid_values_rejected() {
        for c in [
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { warmup: 1.0, ..Default::default() },
            TrainConfig { alpha: -0.1, ..Default::default() },
            TrainConfig { tasks_per_epoch: 0, ..Default::default() },
            TrainConfig { n_way: 1, ..Default::default() },
        ] {
            assert!(matches!(c.validate(), Err(Error::Contract(_))), "{c:?}");
        }
    }
}
