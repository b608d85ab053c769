//! Dual relation-enhanced loss, edge-voting class scores and zero-threshold
//! multi-label prediction.

use serde::{Deserialize, Serialize};

use crate::diffcalc::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Multi-hot label vector over the episode's classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet(Vec<bool>);

impl LabelSet {
    /// Fails when no class is set.
    pub fn new(flags: Vec<bool>) -> Result<Self> {
        if !flags.iter().any(|&f| f) {
            return Err(Error::contract("label set must contain at least one class"));
        }
        Ok(Self(flags))
    }

    pub fn from_indices(n_classes: usize, indices: &[usize]) -> Result<Self> {
        let mut flags = vec![false; n_classes];
        for &i in indices {
            if i >= n_classes {
                return Err(Error::contract(format!("class index {i} outside {n_classes} classes")));
            }
            flags[i] = true;
        }
        Self::new(flags)
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0.get(class).copied().unwrap_or(false)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i)
    }

    pub fn intersects(&self, other: &LabelSet) -> bool {
        self.0.iter().zip(&other.0).any(|(a, b)| *a && *b)
    }
}

/// Pair relation used by the support-level loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelationMode {
    /// Same class iff the label sets are identical.
    #[default]
    Exact,
    /// Same class iff the label sets share a class.
    Overlap,
}

/// Which classes a support node votes for.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VoteMode {
    /// Every class in the support's label set.
    #[default]
    AllLabels,
    /// Only the class the support was sampled for.
    SampledClass,
}

/// Binary same-class targets `y_ij` anchored at support rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationTargets {
    size: usize,
    rows: Vec<Option<Vec<bool>>>,
}

impl RelationTargets {
    pub fn size(&self) -> usize {
        self.size
    }

    /// `Some(y_ij)` for a support anchor `i`, `None` for query rows.
    /// The diagonal entry is present but never used by the loss.
    pub fn get(&self, i: usize, j: usize) -> Option<bool> {
        self.rows[i].as_ref().map(|r| r[j])
    }
}

/// Builds `y_ij` for every support anchor `i` and every node `j`. `labels`
/// covers all nodes in graph order; query labels must be present.
pub fn relation_targets(labels: &[Option<&LabelSet>], support_mask: &[bool], mode: RelationMode) -> Result<RelationTargets> {
    if labels.len() != support_mask.len() {
        return Err(Error::contract("one label entry per node required"));
    }
    let known: Vec<&LabelSet> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| Error::contract(format!("labels for node {i} are required to build relation targets"))))
        .collect::<Result<_>>()?;
    let rows = support_mask
        .iter()
        .enumerate()
        .map(|(i, &is_support)| {
            is_support.then(|| {
                known
                    .iter()
                    .map(|other| match mode {
                        RelationMode::Exact => known[i] == *other,
                        RelationMode::Overlap => known[i].intersects(other),
                    })
                    .collect()
            })
        })
        .collect();
    Ok(RelationTargets {
        size: labels.len(),
        rows,
    })
}

fn pos_neg_loss(tape: &mut Tape, x: Var, pos: &[usize], neg: &[usize]) -> Result<Var> {
    let n = tape.select(x, neg)?;
    let neg_term = tape.log1p_sum_exp(n)?;
    let p = tape.select(x, pos)?;
    let p = tape.neg(p)?;
    let pos_term = tape.log1p_sum_exp(p)?;
    tape.add(neg_term, pos_term)
}

fn sum_scalars(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let stacked = tape.concat_rows(terms)?;
    tape.sum(stacked)
}

/// Support-level loss over edge layers `0..=L`: for every support anchor,
/// `log(1 + sum_neg exp(e)) + log(1 + sum_pos exp(-e))`, averaged over
/// anchors per layer and summed over layers.
pub fn support_loss(tape: &mut Tape, edges: &[Var], targets: &RelationTargets, support_mask: &[bool]) -> Result<Var> {
    let m = support_mask.len();
    if targets.size() != m {
        return Err(Error::contract("relation targets do not match node count"));
    }
    let anchors: Vec<usize> = (0..m).filter(|&i| support_mask[i]).collect();
    if anchors.is_empty() {
        return Err(Error::contract("support loss needs at least one support node"));
    }
    let mut partition = Vec::with_capacity(anchors.len());
    for &i in &anchors {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for j in (0..m).filter(|&j| j != i) {
            match targets.get(i, j) {
                Some(true) => pos.push(i * m + j),
                Some(false) => neg.push(i * m + j),
                None => return Err(Error::contract(format!("missing relation targets for support node {i}"))),
            }
        }
        partition.push((pos, neg));
    }
    let mut layer_terms = Vec::with_capacity(edges.len());
    for &e in edges {
        if tape.value(e).shape() != [m, m] {
            return Err(Error::dim("support_loss", format!("edge layer {:?} for {m} nodes", tape.value(e).shape())));
        }
        let mut anchor_terms = Vec::with_capacity(anchors.len());
        for (pos, neg) in &partition {
            anchor_terms.push(pos_neg_loss(tape, e, pos, neg)?);
        }
        let total = sum_scalars(tape, &anchor_terms)?;
        layer_terms.push(tape.scale(total, 1.0 / anchors.len() as f64)?);
    }
    sum_scalars(tape, &layer_terms)
}

/// Support-by-class 0/1 vote matrix.
pub fn vote_matrix(support_labels: &[LabelSet], sampled: &[usize], mode: VoteMode, n_classes: usize) -> Result<Tensor> {
    if support_labels.len() != sampled.len() {
        return Err(Error::contract("one sampled class per support node required"));
    }
    let mut out = vec![0.0; support_labels.len() * n_classes];
    for (j, (labels, &s)) in support_labels.iter().zip(sampled).enumerate() {
        if labels.len() != n_classes {
            return Err(Error::contract(format!("support {j} has {} label slots, expected {n_classes}", labels.len())));
        }
        if s >= n_classes {
            return Err(Error::contract(format!("support {j} sampled for unknown class {s}")));
        }
        match mode {
            VoteMode::AllLabels => {
                for c in labels.indices() {
                    out[j * n_classes + c] = 1.0;
                }
            }
            VoteMode::SampledClass => out[j * n_classes + s] = 1.0,
        }
    }
    Tensor::matrix(support_labels.len(), n_classes, out)
}

/// `p(i, k) = sum_j e_ji * vote(j, k)` over support nodes `j`, using the
/// directed edge from each support `j` to query `i`. Returns `|Q| x N`.
pub fn class_scores(tape: &mut Tape, final_edges: Var, votes: &Tensor, support_mask: &[bool]) -> Result<Var> {
    let support: Vec<usize> = (0..support_mask.len()).filter(|&i| support_mask[i]).collect();
    let query: Vec<usize> = (0..support_mask.len()).filter(|&i| !support_mask[i]).collect();
    if votes.rows() != support.len() {
        return Err(Error::contract(format!("vote matrix has {} rows for {} supports", votes.rows(), support.len())));
    }
    let to_query = tape.submatrix(final_edges, &support, &query)?; // S x Q
    let from_support = tape.transpose(to_query)?;
    let votes = tape.constant(votes.clone())?;
    tape.matmul(from_support, votes)
}

/// Query-level loss: mean over queries of
/// `log(1 + sum_neg exp(p)) + log(1 + sum_pos exp(-p))`.
pub fn query_loss(tape: &mut Tape, scores: Var, query_labels: &[LabelSet]) -> Result<Var> {
    let (q, n) = tape.value(scores).dims2().ok_or_else(|| Error::dim("query_loss", "scores must be a matrix"))?;
    if q != query_labels.len() || q == 0 {
        return Err(Error::contract(format!("{} label sets for {q} queries", query_labels.len())));
    }
    let mut terms = Vec::with_capacity(q);
    for (i, labels) in query_labels.iter().enumerate() {
        if labels.len() != n {
            return Err(Error::contract(format!("query {i} has {} label slots, expected {n}", labels.len())));
        }
        if labels.indices().next().is_none() {
            return Err(Error::contract(format!("query {i} has an empty label set")));
        }
        let pos: Vec<usize> = (0..n).filter(|&k| labels.contains(k)).map(|k| i * n + k).collect();
        let neg: Vec<usize> = (0..n).filter(|&k| !labels.contains(k)).map(|k| i * n + k).collect();
        terms.push(pos_neg_loss(tape, scores, &pos, &neg)?);
    }
    let total = sum_scalars(tape, &terms)?;
    tape.scale(total, 1.0 / q as f64)
}

/// Scalar values of the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub support: f64,
    pub query: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn new(support: f64, query: f64, alpha: f64, beta: f64) -> Result<Self> {
        check_weights(alpha, beta)?;
        Ok(Self {
            support,
            query,
            total: alpha * support + beta * query,
            alpha,
            beta,
        })
    }
}

fn check_weights(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha >= 0.0 && beta >= 0.0) || !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::contract(format!("loss weights must be nonnegative, got alpha={alpha} beta={beta}")));
    }
    Ok(())
}

/// `alpha * support + beta * query` on the tape.
pub fn total_loss(tape: &mut Tape, support: Var, query: Var, alpha: f64, beta: f64) -> Result<Var> {
    check_weights(alpha, beta)?;
    let a = tape.scale(support, alpha)?;
    let b = tape.scale(query, beta)?;
    tape.add(a, b)
}

/// Zero-threshold decision: class `k` is predicted iff `p(i, k) > 0`.
/// With `force_top1`, a row with no positive score predicts its argmax
/// (lowest index on ties).
pub fn predict(scores: &Tensor, force_top1: bool) -> Vec<Vec<bool>> {
    let (q, n) = scores.dims2().unwrap_or((0, 0));
    (0..q)
        .map(|i| {
            let row = &scores.data()[i * n..(i + 1) * n];
            let mut out: Vec<bool> = row.iter().map(|&p| p > 0.0).collect();
            if force_top1 && !out.iter().any(|&b| b) && n > 0 {
                let best = (0..n).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                out[best] = true;
            }
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const LN4: f64 = 1.3862943611198906;

    fn ls(n: usize, idx: &[usize]) -> LabelSet {
        LabelSet::from_indices(n, idx).unwrap()
    }

    #[test]
    fn relation_target_modes() {
        let a = ls(2, &[0]);
        let b = ls(2, &[1]);
        let ab = ls(2, &[0, 1]);
        let mask = [true, true, true, false];
        let labels = [Some(&a), Some(&a), Some(&ab), Some(&b)];
        let exact = relation_targets(&labels, &mask, RelationMode::Exact).unwrap();
        assert_eq!(exact.get(0, 1), Some(true));
        assert_eq!(exact.get(0, 3), Some(false));
        assert_eq!(exact.get(2, 0), Some(false));
        assert_eq!(exact.get(3, 0), None);
        let overlap = relation_targets(&labels, &mask, RelationMode::Overlap).unwrap();
        assert_eq!(overlap.get(2, 0), Some(true));
        assert_eq!(overlap.get(0, 3), Some(false));
        let missing = [Some(&a), None];
        assert!(relation_targets(&missing, &[true, false], RelationMode::Exact).is_err());
    }

    #[test]
    fn support_loss_single_anchor_at_zero() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::zeros(&[3, 3])).unwrap();
        let a = ls(2, &[0]);
        let b = ls(2, &[1]);
        // anchor 0 (support), node 1 same class, node 2 other class
        let targets = relation_targets(&[Some(&a), Some(&a), Some(&b)], &[true, false, false], RelationMode::Exact).unwrap();
        let l = support_loss(&mut tape, &[e], &targets, &[true, false, false]).unwrap();
        assert!((tape.value(l).item() - LN4).abs() < 1e-12);
    }

    #[test]
    fn support_loss_vanishes_in_the_limit() {
        let mut tape = Tape::new();
        let e = tape
            .constant(Tensor::matrix(3, 3, vec![0.0, 200.0, -200.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let a = ls(2, &[0]);
        let b = ls(2, &[1]);
        let targets = relation_targets(&[Some(&a), Some(&a), Some(&b)], &[true, false, false], RelationMode::Exact).unwrap();
        let l = support_loss(&mut tape, &[e], &targets, &[true, false, false]).unwrap();
        assert!(tape.value(l).item() < 1e-80);
    }

    #[test]
    fn class_score_examples() {
        let mut tape = Tape::new();
        // nodes: s0 {A}, s1 {B}, q
        let e = tape
            .constant(Tensor::matrix(3, 3, vec![0.0, 0.0, 0.7, 0.0, 0.0, -0.2, 0.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let votes = vote_matrix(&[ls(2, &[0]), ls(2, &[1])], &[0, 1], VoteMode::AllLabels, 2).unwrap();
        let p = class_scores(&mut tape, e, &votes, &[true, true, false]).unwrap();
        assert_eq!(tape.value(p).data(), &[0.7, -0.2]);

        let e = tape
            .constant(Tensor::matrix(3, 3, vec![0.0, 0.0, 0.3, 0.0, 0.0, 0.4, 0.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let votes = vote_matrix(&[ls(2, &[0]), ls(2, &[0])], &[0, 0], VoteMode::AllLabels, 2).unwrap();
        let p = class_scores(&mut tape, e, &votes, &[true, true, false]).unwrap();
        assert!((tape.value(p).data()[0] - 0.7).abs() < 1e-15);

        let e = tape.constant(Tensor::matrix(2, 2, vec![0.0, 0.5, 0.0, 0.0]).unwrap()).unwrap();
        let all = vote_matrix(&[ls(2, &[0, 1])], &[0], VoteMode::AllLabels, 2).unwrap();
        let p = class_scores(&mut tape, e, &all, &[true, false]).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);
        let sampled = vote_matrix(&[ls(2, &[0, 1])], &[0], VoteMode::SampledClass, 2).unwrap();
        let p = class_scores(&mut tape, e, &sampled, &[true, false]).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.0]);

        assert!(vote_matrix(&[ls(2, &[0])], &[5], VoteMode::SampledClass, 2).is_err());
    }

    #[test]
    fn query_loss_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()).unwrap();
        let l = query_loss(&mut tape, p, &[ls(2, &[1])]).unwrap();
        assert!((tape.value(l).item() - LN4).abs() < 1e-12);

        let p = tape.constant(Tensor::matrix(1, 2, vec![-300.0, 300.0]).unwrap()).unwrap();
        let l = query_loss(&mut tape, p, &[ls(2, &[1])]).unwrap();
        assert!(tape.value(l).item() < 1e-100);

        assert!(LabelSet::new(vec![false, false]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let b = LossBreakdown::new(2.0, 3.0, 0.1, 1.0).unwrap();
        assert!((b.total - 3.2).abs() < 1e-15);
        assert_eq!(LossBreakdown::new(2.0, 3.0, 0.0, 1.0).unwrap().total, 3.0);
        assert_eq!(LossBreakdown::new(2.0, 3.0, 0.0, 0.0).unwrap().total, 0.0);
        assert!(LossBreakdown::new(2.0, 3.0, -0.1, 1.0).is_err());

        let mut tape = Tape::new();
        let s = tape.constant(Tensor::scalar(2.0)).unwrap();
        let q = tape.constant(Tensor::scalar(3.0)).unwrap();
        let t = total_loss(&mut tape, s, q, 0.1, 1.0).unwrap();
        assert_eq!(tape.value(t).item(), 0.1 * 2.0 + 1.0 * 3.0);
        assert!(total_loss(&mut tape, s, q, 0.1, -1.0).is_err());
    }

    #[test]
    fn predict_examples() {
        let p = Tensor::matrix(1, 3, vec![0.7, -0.2, 0.0]).unwrap();
        assert_eq!(predict(&p, false), vec![vec![true, false, false]]);
        let p = Tensor::matrix(1, 2, vec![-1.0, -2.0]).unwrap();
        assert_eq!(predict(&p, true), vec![vec![true, false]]);
        assert_eq!(predict(&p, false), vec![vec![false, false]]);
        let tie = Tensor::matrix(1, 3, vec![-1.0, -0.5, -0.5]).unwrap();
        assert_eq!(predict(&tie, true), vec![vec![false, true, false]]);
    }

    fn support_loss_value(e: &Tensor, targets: &RelationTargets, mask: &[bool]) -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(e.clone()).unwrap();
        let l = support_loss(&mut tape, &[v], targets, mask).unwrap();
        tape.value(l).item()
    }

    proptest! {
        #[test]
        fn support_loss_monotone_in_edges(
            vals in proptest::collection::vec(-5.0f64..5.0, 16),
            bump in 0.01f64..2.0,
            j in 1usize..4,
        ) {
            let a = ls(2, &[0]);
            let b = ls(2, &[1]);
            let labels = [Some(&a), Some(&b), Some(&a), Some(&b)];
            let mask = [true, true, false, false];
            let targets = relation_targets(&labels, &mask, RelationMode::Exact).unwrap();
            let base = Tensor::matrix(4, 4, vals).unwrap();
            let mut up = base.clone();
            up.data_mut()[j] += bump;
            let (l0, l1) = (support_loss_value(&base, &targets, &mask), support_loss_value(&up, &targets, &mask));
            prop_assert!(l0 > 0.0);
            if targets.get(0, j) == Some(true) {
                prop_assert!(l1 <= l0);
            } else {
                prop_assert!(l1 >= l0);
            }
        }

        #[test]
        fn predict_depends_only_on_signs(
            vals in proptest::collection::vec(-3.0f64..3.0, 12),
            c in 1e-3f64..1e3,
            force in any::<bool>(),
        ) {
            let p = Tensor::matrix(3, 4, vals.clone()).unwrap();
            let scaled = Tensor::matrix(3, 4, vals.iter().map(|v| v * c).collect()).unwrap();
            prop_assert_eq!(predict(&p, force), predict(&scaled, force));
        }
    }
}
