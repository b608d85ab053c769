use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Shape of an N-way K-shot episode with T queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot < 1 || self.n_query < 1 {
            return Err(Error::contract(format!("episode spec needs N >= 2, K >= 1, T >= 1, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeClass {
    pub name: String,
    pub description: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeItem {
    /// Id of the utterance in the dataset.
    pub utterance: usize,
    pub tokens: Vec<String>,
    /// Episode class indices, sorted; labels outside the episode are dropped.
    pub labels: Vec<usize>,
    /// For supports, the class this instance was drawn to cover.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampled_class: Option<usize>,
}

/// One meta-task: `N` classes, a support set and a query set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub classes: Vec<EpisodeClass>,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    /// Checks the structural invariants of a sampled episode.
    pub fn validate(&self, k_shot: usize) -> Result<()> {
        let n = self.classes.len();
        for item in self.support.iter().chain(&self.query) {
            if item.labels.is_empty() || item.labels.iter().any(|&c| c >= n) {
                return Err(Error::contract(format!("utterance {} has labels {:?} outside {n} classes", item.utterance, item.labels)));
            }
        }
        for c in 0..n {
            let count = self.support.iter().filter(|s| s.labels.contains(&c)).count();
            if count < k_shot {
                return Err(Error::contract(format!("class '{}' has {count} < {k_shot} supports", self.classes[c].name)));
            }
        }
        let support_ids: BTreeSet<usize> = self.support.iter().map(|s| s.utterance).collect();
        if support_ids.len() != self.support.len() || self.query.iter().any(|q| support_ids.contains(&q.utterance)) {
            return Err(Error::contract("support and query instances overlap"));
        }
        if self.support.len() > n * k_shot + n {
            return Err(Error::contract("support set larger than N*K + N"));
        }
        Ok(())
    }
}

/// Draws an episode from the utterances of `domains`.
///
/// Classes are chosen uniformly among those with at least `K + 1` instances.
/// Supports are added greedily: the class furthest below `K` occurrences
/// (lowest episode index on ties) receives a random unused instance
/// containing it, and every class in that instance's restricted label set is
/// credited. Queries are drawn uniformly from the remaining instances with a
/// nonempty restricted label set.
pub fn sample_episode(dataset: &Dataset, domains: &[String], spec: &EpisodeSpec, rng: &mut impl Rng) -> Result<Episode> {
    spec.validate()?;
    let pool: Vec<usize> = dataset
        .utterances
        .iter()
        .filter(|u| domains.contains(&u.domain))
        .map(|u| u.id)
        .collect();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for &i in &pool {
        for l in &dataset.utterances[i].labels {
            *counts.entry(l.as_str()).or_default() += 1;
        }
    }
    let eligible: Vec<&str> = counts.iter().filter(|(_, &c)| c > spec.k_shot).map(|(&l, _)| l).collect();
    if eligible.len() < spec.n_way {
        let deficient = counts
            .iter()
            .find(|(_, &c)| c <= spec.k_shot)
            .map(|(l, c)| format!("; class '{l}' has only {c} instances"))
            .unwrap_or_default();
        return Err(Error::Sampling(format!(
            "{} classes in {domains:?} have at least {} instances, need {}{deficient}",
            eligible.len(),
            spec.k_shot + 1,
            spec.n_way
        )));
    }
    let chosen: Vec<&str> = index::sample(rng, eligible.len(), spec.n_way)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let restrict = |id: usize| -> Vec<usize> {
        let labels = &dataset.utterances[id].labels;
        (0..chosen.len()).filter(|&c| labels.iter().any(|l| l == chosen[c])).collect()
    };

    let mut used = BTreeSet::new();
    let mut covered = vec![0usize; chosen.len()];
    let mut support = Vec::new();
    loop {
        let Some(target) = (0..chosen.len())
            .filter(|&c| covered[c] < spec.k_shot)
            .max_by(|&a, &b| (spec.k_shot - covered[a]).cmp(&(spec.k_shot - covered[b])).then(b.cmp(&a)))
        else {
            break;
        };
        let candidates: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|id| !used.contains(id) && restrict(*id).contains(&target))
            .collect();
        if candidates.is_empty() {
            return Err(Error::Sampling(format!("class '{}' ran out of support instances", chosen[target])));
        }
        let id = candidates[rng.random_range(0..candidates.len())];
        let labels = restrict(id);
        for &c in &labels {
            covered[c] += 1;
        }
        used.insert(id);
        support.push(EpisodeItem {
            utterance: id,
            tokens: dataset.utterances[id].tokens.clone(),
            labels,
            sampled_class: Some(target),
        });
    }

    let remaining: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|id| !used.contains(id) && !restrict(*id).is_empty())
        .collect();
    if remaining.len() < spec.n_query {
        return Err(Error::Sampling(format!(
            "only {} query candidates remain, need {}",
            remaining.len(),
            spec.n_query
        )));
    }
    let query = index::sample(rng, remaining.len(), spec.n_query)
        .into_iter()
        .map(|k| {
            let id = remaining[k];
            EpisodeItem {
                utterance: id,
                tokens: dataset.utterances[id].tokens.clone(),
                labels: restrict(id),
                sampled_class: None,
            }
        })
        .collect();

    let classes = chosen
        .iter()
        .map(|&name| EpisodeClass {
            name: name.to_string(),
            description: dataset.catalog[name].clone(),
        })
        .collect();
    Ok(Episode { classes, support, query })
}

/// Disjoint train / validation / test domain lists.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSplit {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl DomainSplit {
    /// Last domain for test, the one before it for validation, the rest for
    /// training.
    pub fn hold_out_last(domains: &[String]) -> Result<Self> {
        if domains.len() < 3 {
            return Err(Error::contract(format!("need at least 3 domains to split, got {}", domains.len())));
        }
        let n = domains.len();
        Ok(Self {
            train: domains[..n - 2].to_vec(),
            valid: vec![domains[n - 2].clone()],
            test: vec![domains[n - 1].clone()],
        })
    }

    /// Checks the split is disjoint and covers exactly `domains`.
    pub fn validate(&self, domains: &[String]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for d in self.train.iter().chain(&self.valid).chain(&self.test) {
            if !seen.insert(d) {
                return Err(Error::contract(format!("domain '{d}' appears in more than one split")));
            }
            if !domains.contains(d) {
                return Err(Error::contract(format!("unknown domain '{d}'")));
            }
        }
        if seen.len() != domains.len() {
            return Err(Error::contract("domain split does not cover every domain"));
        }
        if self.train.is_empty() || self.valid.is_empty() || self.test.is_empty() {
            return Err(Error::contract("every split needs at least one domain"));
        }
        Ok(())
    }
}
