//! Per-episode macro AUC / Macro-F1 and cross-episode aggregation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffcalc::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Macro one-vs-rest AUC; `None` when every class was degenerate.
    pub auc: Option<f64>,
    pub macro_f1: f64,
    /// Classes without both a positive and a negative query.
    pub auc_skipped_classes: usize,
    /// Classes absent from both predictions and truth.
    pub f1_skipped_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub episodes: usize,
    pub auc_mean: Option<f64>,
    pub auc_std: Option<f64>,
    /// Episodes whose AUC was undefined.
    pub auc_undefined: usize,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
}

/// Probability a positive outranks a negative, ties counting half.
pub fn binary_auc(positives: &[f64], negatives: &[f64]) -> Option<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    // rank-sum form with midranks for ties
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|e| e.1).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (positives.len() as f64, negatives.len() as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Macro one-vs-rest AUC over the columns of a `queries x classes` score
/// matrix. Returns the mean and the number of skipped classes.
pub fn roc_auc_macro(scores: &Tensor, truth: &[Vec<bool>]) -> (Option<f64>, usize) {
    let (q, n) = scores.dims2().unwrap_or((0, 0));
    let mut per_class = Vec::new();
    let mut skipped = 0;
    for k in 0..n {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for i in 0..q {
            let s = scores.at(i, k);
            if truth[i][k] {
                pos.push(s)
            } else {
                neg.push(s)
            }
        }
        match binary_auc(&pos, &neg) {
            Some(a) => per_class.push(a),
            None => skipped += 1,
        }
    }
    let mean = (!per_class.is_empty()).then(|| per_class.iter().sum::<f64>() / per_class.len() as f64);
    (mean, skipped)
}

/// Macro-F1 over classes present in the predictions or the truth.
/// Returns the score and the number of excluded classes.
pub fn macro_f1(preds: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<(f64, usize)> {
    if preds.len() != truth.len() || preds.iter().zip(truth).any(|(p, t)| p.len() != t.len()) {
        return Err(Error::contract("prediction and truth shapes differ"));
    }
    let n = truth.first().map_or(0, Vec::len);
    let mut scores = Vec::new();
    for k in 0..n {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (p, t) in preds.iter().zip(truth) {
            match (p[k], t[k]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        if tp + fp + fn_ == 0 {
            continue;
        }
        // 2PR/(P+R) == 2tp/(2tp+fp+fn), and 0 when tp == 0
        scores.push(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
    }
    let skipped = n - scores.len();
    let f1 = if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    Ok((f1, skipped))
}

pub fn episode_metrics(scores: &Tensor, preds: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<EpisodeMetrics> {
    if truth.is_empty() || scores.rows() != truth.len() {
        return Err(Error::contract("one truth row per query required"));
    }
    let (auc, auc_skipped_classes) = roc_auc_macro(scores, truth);
    let (macro_f1, f1_skipped_classes) = macro_f1(preds, truth)?;
    Ok(EpisodeMetrics {
        auc,
        macro_f1,
        auc_skipped_classes,
        f1_skipped_classes,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Means and population standard deviations; undefined AUCs are left out of
/// the AUC statistics and counted.
pub fn aggregate(per_episode: &[EpisodeMetrics]) -> Result<AggregateMetrics> {
    if per_episode.is_empty() {
        return Err(Error::contract("cannot aggregate zero episodes"));
    }
    let aucs: Vec<f64> = per_episode.iter().filter_map(|m| m.auc).collect();
    let f1s: Vec<f64> = per_episode.iter().map(|m| m.macro_f1).collect();
    let (f1_mean, f1_std) = mean_std(&f1s);
    let auc_stats = (!aucs.is_empty()).then(|| mean_std(&aucs));
    Ok(AggregateMetrics {
        episodes: per_episode.len(),
        auc_mean: auc_stats.map(|s| s.0),
        auc_std: auc_stats.map(|s| s.1),
        auc_undefined: per_episode.len() - aucs.len(),
        macro_f1_mean: f1_mean,
        macro_f1_std: f1_std,
    })
}

/// One JSON object per episode followed by an `{"aggregate": ...}` record.
pub fn write_jsonl(mut out: impl Write, per_episode: &[EpisodeMetrics], agg: &AggregateMetrics) -> Result<()> {
    for (i, m) in per_episode.iter().enumerate() {
        let rec = serde_json::json!({ "episode": i, "auc": m.auc, "macro_f1": m.macro_f1,
            "auc_skipped_classes": m.auc_skipped_classes, "f1_skipped_classes": m.f1_skipped_classes });
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    serde_json::to_writer(&mut out, &serde_json::json!({ "aggregate": agg }))?;
    out.write_all(b"\n")?;
    Ok(())
}

pub const CSV_HEADER: &str = "split,episodes,auc_mean,auc_std,auc_undefined,macro_f1_mean,macro_f1_std";

pub fn csv_row(split: &str, agg: &AggregateMetrics) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    format!(
        "{split},{},{},{},{},{:.6},{:.6}",
        agg.episodes,
        opt(agg.auc_mean),
        opt(agg.auc_std),
        agg.auc_undefined,
        agg.macro_f1_mean,
        agg.macro_f1_std
    )
}
