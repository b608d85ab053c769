use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::tokenize;
use crate::error::{Error, Result};

/// One utterance with its intent labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledUtterance {
    pub id: usize,
    pub text: String,
    pub tokens: Vec<String>,
    /// Sorted, unique, nonempty.
    pub labels: Vec<String>,
    pub domain: String,
}

/// On-disk record: one JSON object per line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub text: String,
    pub labels: Vec<String>,
    pub domain: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub utterances: Vec<LabeledUtterance>,
    /// Label name to description words.
    pub catalog: BTreeMap<String, Vec<String>>,
    /// Domains in first-seen order.
    pub domains: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DomainStats {
    pub domain: String,
    pub classes: usize,
    pub instances: usize,
}

/// Default description of a label: its name with underscores as spaces.
pub fn label_description(label: &str) -> Vec<String> {
    tokenize(&label.replace('_', " "))
}

impl Dataset {
    /// Validates records against the catalog and assigns ids in order.
    pub fn from_records(records: Vec<UtteranceRecord>, catalog: BTreeMap<String, String>) -> Result<Self> {
        let catalog: BTreeMap<String, Vec<String>> = catalog
            .into_iter()
            .map(|(label, desc)| {
                let mut words = tokenize(&desc);
                if words.is_empty() {
                    words = label_description(&label);
                }
                if words.is_empty() {
                    return Err(Error::contract(format!("label '{label}' has no usable description")));
                }
                Ok((label, words))
            })
            .collect::<Result<_>>()?;
        let mut utterances = Vec::with_capacity(records.len());
        let mut domains = Vec::new();
        for (id, rec) in records.into_iter().enumerate() {
            let utt = Self::check_record(id, rec, &catalog)?;
            if !domains.contains(&utt.domain) {
                domains.push(utt.domain.clone());
            }
            utterances.push(utt);
        }
        Ok(Self {
            utterances,
            catalog,
            domains,
        })
    }

    fn check_record(id: usize, rec: UtteranceRecord, catalog: &BTreeMap<String, Vec<String>>) -> Result<LabeledUtterance> {
        let tokens = tokenize(&rec.text);
        if tokens.is_empty() {
            return Err(Error::contract(format!("utterance {id} has no tokens")));
        }
        let labels: BTreeSet<String> = rec.labels.into_iter().collect();
        if labels.is_empty() {
            return Err(Error::contract(format!("utterance {id} has no labels")));
        }
        if let Some(bad) = labels.iter().find(|l| !catalog.contains_key(*l)) {
            return Err(Error::Catalog { label: bad.clone() });
        }
        if rec.domain.is_empty() {
            return Err(Error::contract(format!("utterance {id} has an empty domain")));
        }
        Ok(LabeledUtterance {
            id,
            text: rec.text,
            tokens,
            labels: labels.into_iter().collect(),
            domain: rec.domain,
        })
    }

    pub fn records(&self) -> impl Iterator<Item = UtteranceRecord> + '_ {
        self.utterances.iter().map(|u| UtteranceRecord {
            text: u.text.clone(),
            labels: u.labels.clone(),
            domain: u.domain.clone(),
        })
    }

    /// Per-domain class and instance counts.
    pub fn report(&self) -> Vec<DomainStats> {
        self.domains
            .iter()
            .map(|d| {
                let in_domain: Vec<_> = self.utterances.iter().filter(|u| &u.domain == d).collect();
                let classes: BTreeSet<&str> = in_domain.iter().flat_map(|u| u.labels.iter().map(String::as_str)).collect();
                DomainStats {
                    domain: d.clone(),
                    classes: classes.len(),
                    instances: in_domain.len(),
                }
            })
            .collect()
    }

    /// All words appearing in utterances and descriptions, first-seen order.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.utterances
            .iter()
            .flat_map(|u| u.tokens.iter())
            .chain(self.catalog.values().flatten())
            .map(String::as_str)
    }

    pub fn save(&self, path: &Path, catalog_path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for rec in self.records() {
            serde_json::to_writer(&mut out, &rec)?;
            out.push(b'\n');
        }
        fs::File::create(path)?.write_all(&out)?;
        let catalog: BTreeMap<&String, String> = self.catalog.iter().map(|(k, v)| (k, v.join(" "))).collect();
        fs::write(catalog_path, serde_json::to_string_pretty(&catalog)? + "\n")?;
        Ok(())
    }
}

/// Reads a JSON-lines dataset and its label catalog. Blank lines are skipped.
pub fn load_dataset(path: &Path, catalog_path: &Path) -> Result<Dataset> {
    let catalog_text = fs::read_to_string(catalog_path)?;
    let catalog: BTreeMap<String, String> = serde_json::from_str(&catalog_text).map_err(|e| Error::Parse {
        path: catalog_path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Dataset::from_records(records, catalog)
}
