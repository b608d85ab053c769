//! The full episode model: encoder, relation graph and the training objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcalc::{ParamStore, Tape, Tensor, Var};
use crate::encoder::{EncoderDims, EncoderParams, TokenSeq, Vocab};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::graph::{propagate, AggregationMode, EdgeFeatureMode, EpisodeGraph, GraphParams};
use crate::loss::{
    class_scores, query_loss, relation_targets, support_loss, total_loss, vote_matrix, LabelSet, LossBreakdown,
    RelationMode, VoteMode,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub attn_hidden: usize,
    pub attn_rows: usize,
    /// Propagation rounds `L`.
    pub layers: usize,
    pub aggregation: AggregationMode,
    pub edge_features: EdgeFeatureMode,
    pub use_class_descriptions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            attn_hidden: 64,
            attn_rows: 1,
            layers: 2,
            aggregation: AggregationMode::default(),
            edge_features: EdgeFeatureMode::default(),
            use_class_descriptions: true,
        }
    }
}

/// Loss weights and label interpretation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub alpha: f64,
    pub beta: f64,
    pub relation_mode: RelationMode,
    pub vote_mode: VoteMode,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1.0,
            relation_mode: RelationMode::default(),
            vote_mode: VoteMode::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SupportInput {
    pub tokens: TokenSeq,
    /// Description of the class this support was drawn for.
    pub description: TokenSeq,
    pub labels: LabelSet,
    pub sampled_class: usize,
}

#[derive(Clone, Debug)]
pub struct QueryInput {
    pub tokens: TokenSeq,
    pub labels: Option<LabelSet>,
}

/// An episode converted to token ids and label vectors.
#[derive(Clone, Debug)]
pub struct EpisodeInput {
    pub n_classes: usize,
    pub supports: Vec<SupportInput>,
    pub queries: Vec<QueryInput>,
}

impl EpisodeInput {
    pub fn query_truth(&self) -> Option<Vec<Vec<bool>>> {
        self.queries.iter().map(|q| q.labels.as_ref().map(|l| l.flags().to_vec())).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub support: Var,
    pub query: Var,
    pub total: Var,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub graph: EpisodeGraph,
    /// `|Q| x N` class scores.
    pub scores: Var,
    /// Present when every query is labelled.
    pub losses: Option<LossVars>,
}

/// Plain values of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutput {
    pub scores: Tensor,
    pub loss: Option<LossBreakdown>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub graph: GraphParams,
}

impl Model {
    fn dims(config: &ModelConfig, vocab: &Vocab) -> EncoderDims {
        EncoderDims {
            vocab: vocab.len(),
            hidden: config.hidden,
            attn_hidden: config.attn_hidden,
            attn_rows: config.attn_rows,
        }
    }

    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&mut store, Self::dims(&config, &vocab), &mut rng)?;
        let graph = GraphParams::init(&mut store, config.hidden, config.layers, &mut rng)?;
        Ok(Self {
            config,
            vocab,
            store,
            encoder,
            graph,
        })
    }

    /// Wraps an existing parameter store, binding handles by name.
    pub fn from_store(config: ModelConfig, vocab: Vocab, store: ParamStore) -> Result<Self> {
        let encoder = EncoderParams::bind(&store, Self::dims(&config, &vocab))?;
        let graph = GraphParams::bind(&store, config.hidden, config.layers)?;
        Ok(Self {
            config,
            vocab,
            store,
            encoder,
            graph,
        })
    }

    pub fn prepare(&self, episode: &Episode) -> Result<EpisodeInput> {
        let n = episode.n_way();
        let descriptions = episode
            .classes
            .iter()
            .map(|c| self.vocab.encode(&c.description))
            .collect::<Result<Vec<_>>>()?;
        let supports = episode
            .support
            .iter()
            .map(|s| {
                let sampled = s
                    .sampled_class
                    .filter(|&c| c < n)
                    .ok_or_else(|| Error::contract(format!("support {} has no sampled class", s.utterance)))?;
                Ok(SupportInput {
                    tokens: self.vocab.encode(&s.tokens)?,
                    description: descriptions[sampled].clone(),
                    labels: LabelSet::from_indices(n, &s.labels)?,
                    sampled_class: sampled,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let queries = episode
            .query
            .iter()
            .map(|q| {
                Ok(QueryInput {
                    tokens: self.vocab.encode(&q.tokens)?,
                    labels: if q.labels.is_empty() {
                        None
                    } else {
                        Some(LabelSet::from_indices(n, &q.labels)?)
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EpisodeInput {
            n_classes: n,
            supports,
            queries,
        })
    }

    /// Encodes, propagates and scores one episode; builds the loss when all
    /// queries carry labels.
    pub fn forward(&self, tape: &mut Tape, input: &EpisodeInput, objective: &Objective) -> Result<ForwardPass> {
        self.forward_with(&self.store, tape, input, objective)
    }

    /// [`Model::forward`] reading parameter values from `store`, which must
    /// have the same layout as the model's own.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        input: &EpisodeInput,
        objective: &Objective,
    ) -> Result<ForwardPass> {
        let support_feats = input
            .supports
            .iter()
            .map(|s| {
                let desc = self.config.use_class_descriptions.then_some(&s.description);
                Ok(self.encoder.encode_support(tape, store, &s.tokens, desc)?.features)
            })
            .collect::<Result<Vec<_>>>()?;
        let query_feats = input
            .queries
            .iter()
            .map(|q| self.encoder.encode_query(tape, store, &q.tokens))
            .collect::<Result<Vec<_>>>()?;
        let graph = propagate(
            tape,
            store,
            &self.graph,
            &support_feats,
            &query_feats,
            self.config.aggregation,
            self.config.edge_features,
        )?;

        let support_labels: Vec<LabelSet> = input.supports.iter().map(|s| s.labels.clone()).collect();
        let sampled: Vec<usize> = input.supports.iter().map(|s| s.sampled_class).collect();
        let votes = vote_matrix(&support_labels, &sampled, objective.vote_mode, input.n_classes)?;
        let scores = class_scores(tape, graph.final_edges(), &votes, &graph.support_mask)?;

        let query_labels: Option<Vec<LabelSet>> = input.queries.iter().map(|q| q.labels.clone()).collect();
        let losses = match query_labels {
            Some(query_labels) => {
                let all: Vec<Option<&LabelSet>> = support_labels.iter().chain(&query_labels).map(Some).collect();
                let targets = relation_targets(&all, &graph.support_mask, objective.relation_mode)?;
                let ls = support_loss(tape, &graph.edges, &targets, &graph.support_mask)?;
                let lq = query_loss(tape, scores, &query_labels)?;
                let total = total_loss(tape, ls, lq, objective.alpha, objective.beta)?;
                Some(LossVars {
                    support: ls,
                    query: lq,
                    total,
                })
            }
            None => None,
        };
        Ok(ForwardPass { graph, scores, losses })
    }

    /// Forward pass on a scratch tape, returning plain values.
    pub fn infer(&self, input: &EpisodeInput, objective: &Objective) -> Result<EpisodeOutput> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, input, objective)?;
        let loss = match pass.losses {
            Some(l) => Some(LossBreakdown::new(
                tape.value(l.support).item(),
                tape.value(l.query).item(),
                objective.alpha,
                objective.beta,
            )?),
            None => None,
        };
        Ok(EpisodeOutput {
            scores: tape.value(pass.scores).clone(),
            loss,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{EpisodeClass, EpisodeItem};

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn item(id: usize, text: &str, labels: &[usize], sampled: Option<usize>) -> EpisodeItem {
        EpisodeItem {
            utterance: id,
            tokens: words(text),
            labels: labels.to_vec(),
            sampled_class: sampled,
        }
    }

    fn toy_episode() -> Episode {
        Episode {
            classes: vec![
                EpisodeClass { name: "a".into(), description: words("alpha") },
                EpisodeClass { name: "b".into(), description: words("beta") },
            ],
            support: vec![item(0, "x y", &[0], Some(0)), item(1, "z w", &[1], Some(1))],
            query: vec![item(2, "x w", &[0, 1], None), item(3, "y", &[0], None)],
        }
    }

    fn toy_model(config: ModelConfig) -> Model {
        let vocab = Vocab::build(["x", "y", "z", "w", "alpha", "beta"]);
        Model::new(config, vocab, 11).unwrap()
    }

    fn small() -> ModelConfig {
        ModelConfig {
            hidden: 6,
            attn_hidden: 5,
            ..Default::default()
        }
    }

    #[test]
    fn forward_shapes_and_loss_identity() {
        let model = toy_model(small());
        let input = model.prepare(&toy_episode()).unwrap();
        let out = model.infer(&input, &Objective::default()).unwrap();
        assert_eq!(out.scores.shape(), [2, 2]);
        let loss = out.loss.unwrap();
        assert!(loss.support > 0.0 && loss.query > 0.0);
        assert_eq!(loss.total, 0.1 * loss.support + loss.query);
    }

    #[test]
    fn unlabelled_queries_skip_the_loss() {
        let model = toy_model(small());
        let mut ep = toy_episode();
        ep.query[1].labels.clear();
        let input = model.prepare(&ep).unwrap();
        assert!(input.query_truth().is_none());
        assert!(model.infer(&input, &Objective::default()).unwrap().loss.is_none());
    }

    #[test]
    fn support_without_sampled_class_rejected() {
        let model = toy_model(small());
        let mut ep = toy_episode();
        ep.support[0].sampled_class = None;
        assert!(matches!(model.prepare(&ep), Err(Error::Contract(_))));
    }

    #[test]
    fn rebinding_the_store_gives_identical_outputs() {
        let model = toy_model(small());
        let input = model.prepare(&toy_episode()).unwrap();
        let again = Model::from_store(model.config, model.vocab.clone(), model.store.clone()).unwrap();
        let obj = Objective::default();
        assert_eq!(model.infer(&input, &obj).unwrap(), again.infer(&input, &obj).unwrap());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = toy_model(small());
        let b = toy_model(small());
        for (p, q) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(p.value, q.value);
        }
    }
}
