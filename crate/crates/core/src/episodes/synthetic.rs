use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, UtteranceRecord};
use crate::error::{Error, Result};

/// Parameters of the synthetic multi-label intent corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub vocab_size: usize,
    /// Signature tokens owned by each class. `0` picks `vocab / (2 * classes)`.
    pub tokens_per_class: usize,
    pub multi_label_rate: f64,
    pub instances: usize,
    /// Classes are split into this many contiguous domains.
    pub domains: usize,
    /// Probability that a segment token comes from the class pool rather
    /// than the shared noise pool.
    pub signal_rate: f64,
    pub min_segment: usize,
    pub max_segment: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 20,
            vocab_size: 400,
            tokens_per_class: 4,
            multi_label_rate: 0.4,
            instances: 4000,
            domains: 4,
            signal_rate: 0.9,
            min_segment: 4,
            max_segment: 8,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    fn pool_size(&self) -> usize {
        if self.tokens_per_class == 0 {
            self.vocab_size / (2 * self.classes.max(1))
        } else {
            self.tokens_per_class
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(m));
        if self.classes < 4 {
            return bad(format!("synthetic corpus needs at least 4 classes, got {}", self.classes));
        }
        if self.vocab_size < 2 * self.classes {
            return bad(format!("vocab size {} below twice the class count", self.vocab_size));
        }
        let pool = self.pool_size();
        if pool == 0 || pool * self.classes >= self.vocab_size {
            return bad(format!("{pool} tokens per class leaves no noise pool in a vocab of {}", self.vocab_size));
        }
        if self.domains == 0 || self.domains > self.classes {
            return bad(format!("{} domains for {} classes", self.domains, self.classes));
        }
        if self.multi_label_rate > 0.0 && self.classes / self.domains < 2 {
            return bad("multi-label utterances need at least 2 classes per domain".into());
        }
        if !(0.0..=1.0).contains(&self.multi_label_rate) || !(0.0..=1.0).contains(&self.signal_rate) {
            return bad("rates must lie in [0, 1]".into());
        }
        if self.instances == 0 || self.min_segment == 0 || self.min_segment > self.max_segment {
            return bad("need instances >= 1 and 1 <= min_segment <= max_segment".into());
        }
        Ok(())
    }

    pub fn domain_of(&self, class: usize) -> usize {
        class * self.domains / self.classes
    }

    pub fn domain_name(&self, domain: usize) -> String {
        format!("domain_{domain}")
    }
}

fn token(i: usize) -> String {
    format!("w{i:04}")
}

/// Generates a corpus where every class owns a disjoint pool of signature
/// tokens; all classes share a noise pool. Multi-label utterances join
/// segments of two classes from the same domain.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let pool = config.pool_size();
    let noise_start = pool * config.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let names: Vec<String> = (0..config.classes)
        .map(|c| {
            let base = c * pool;
            if pool >= 2 {
                format!("{}_{}", token(base), token(base + 1))
            } else {
                token(base)
            }
        })
        .collect();
    let catalog: BTreeMap<String, String> = names.iter().map(|n| (n.clone(), n.replace('_', " "))).collect();

    let members: Vec<Vec<usize>> = (0..config.domains)
        .map(|d| (0..config.classes).filter(|&c| config.domain_of(c) == d).collect())
        .collect();

    let segment = |rng: &mut ChaCha8Rng, class: usize| -> Vec<String> {
        let len = rng.random_range(config.min_segment..=config.max_segment);
        (0..len)
            .map(|_| {
                if rng.random_bool(config.signal_rate) {
                    token(class * pool + rng.random_range(0..pool))
                } else {
                    token(rng.random_range(noise_start..config.vocab_size))
                }
            })
            .collect()
    };

    let mut records = Vec::with_capacity(config.instances);
    for _ in 0..config.instances {
        let class = rng.random_range(0..config.classes);
        let domain = config.domain_of(class);
        let mut words = segment(&mut rng, class);
        let mut labels = vec![names[class].clone()];
        if config.multi_label_rate > 0.0 && rng.random_bool(config.multi_label_rate) {
            let peers: Vec<usize> = members[domain].iter().copied().filter(|&c| c != class).collect();
            let other = peers[rng.random_range(0..peers.len())];
            words.extend(segment(&mut rng, other));
            labels.push(names[other].clone());
        }
        records.push(UtteranceRecord {
            text: words.join(" "),
            labels,
            domain: config.domain_name(domain),
        });
    }
    Dataset::from_records(records, catalog)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, rate: f64) -> SyntheticConfig {
        SyntheticConfig {
            classes: 8,
            vocab_size: 80,
            multi_label_rate: rate,
            instances: 300,
            domains: 2,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn zero_rate_gives_single_labels() {
        let ds = generate_synthetic(&small(1, 0.0)).unwrap();
        assert!(ds.utterances.iter().all(|u| u.labels.len() == 1));
    }

    #[test]
    fn multi_label_pairs_stay_in_domain() {
        let cfg = small(2, 0.5);
        let ds = generate_synthetic(&cfg).unwrap();
        let multi = ds.utterances.iter().filter(|u| u.labels.len() == 2).count();
        assert!(multi > 100 && multi < 200, "{multi}");
        let class_domain: BTreeMap<&str, &str> = ds
            .utterances
            .iter()
            .filter(|u| u.labels.len() == 1)
            .map(|u| (u.labels[0].as_str(), u.domain.as_str()))
            .collect();
        for u in &ds.utterances {
            for l in &u.labels {
                assert_eq!(class_domain[l.as_str()], u.domain);
            }
        }
        assert_eq!(ds.domains.len(), 2);
    }

    #[test]
    fn too_few_classes_rejected() {
        let cfg = SyntheticConfig {
            classes: 2,
            ..small(3, 0.0)
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Contract(_))));
        let cfg = SyntheticConfig {
            vocab_size: 10,
            ..small(3, 0.0)
        };
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for k in 0..2 {
            let ds = generate_synthetic(&small(4, 0.4)).unwrap();
            let (d, c) = (dir.path().join(format!("{k}.jsonl")), dir.path().join(format!("{k}.json")));
            ds.save(&d, &c).unwrap();
            bytes.push((std::fs::read(d).unwrap(), std::fs::read(c).unwrap()));
        }
        assert_eq!(bytes[0], bytes[1]);
        assert_ne!(generate_synthetic(&small(5, 0.4)).unwrap(), generate_synthetic(&small(4, 0.4)).unwrap());
    }

    #[test]
    fn descriptions_come_from_signature_tokens() {
        let ds = generate_synthetic(&small(6, 0.0)).unwrap();
        assert_eq!(ds.catalog["w0000_w0001"], vec!["w0000", "w0001"]);
    }
}
