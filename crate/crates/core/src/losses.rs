//! Loss terms of the joint objective and their gradients with respect to
//! the embedding.
//!
//! Target losses are defined over a softmax on similarities to the memory
//! bank, `p_ij = exp(v_j.f_i / tau) / sum_k exp(v_k.f_i / tau)`. Bank
//! entries are constants here; only `f_i` is differentiated.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, MemoryBank};
use crate::error::{Error, Result};
use crate::model::LinearHead;
use crate::neighbors::NeighborSet;

/// Softmax of bank similarities for one query embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetProbabilities {
    pub probs: Vec<f64>,
    /// `log sum_k exp(v_k.f / tau)`.
    pub log_partition: f64,
    /// `v_k.f / tau` for every entry.
    pub logits: Vec<f64>,
    pub tau: f64,
}

impl TargetProbabilities {
    pub fn log_prob(&self, j: usize) -> f64 {
        self.logits[j] - self.log_partition
    }

    /// `sum_k p_k v_k`.
    pub fn expected_entry(&self, bank: &MemoryBank) -> Vec<f64> {
        let mut out = vec![0.0; bank.dim()];
        for (p, v) in self.probs.iter().zip(bank.rows()) {
            out.iter_mut().zip(v).for_each(|(o, x)| *o += p * x);
        }
        out
    }
}

pub fn target_probs(f: &[f64], bank: &MemoryBank, tau: f64) -> TargetProbabilities {
    let logits: Vec<f64> = bank.rows().map(|v| dot(v, f) / tau).collect();
    let log_partition = log_sum_exp(logits.iter().copied());
    let probs = logits.iter().map(|z| (z - log_partition).exp()).collect();
    TargetProbabilities {
        probs,
        log_partition,
        logits,
        tau,
    }
}

pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// A scalar loss and its gradient with respect to one embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Soft-label weights: 1 for the owner, `1/|Omega_i|` for the others.
pub fn neighbor_weights(omega: &NeighborSet) -> Vec<(usize, f64)> {
    let inv = 1.0 / omega.len() as f64;
    omega
        .members
        .iter()
        .map(|&j| (j, if j == omega.owner { 1.0 } else { inv }))
        .collect()
}

/// Neighbor-recognizing loss `-sum_j w_ij log p_ij` over `j in Omega_i`.
///
/// Gradient: `C/tau (sum_{j in Omega} (p_j - w_j/C) v_j + sum_{k not in Omega} p_k v_k)`
/// with `C = sum_j w_ij`.
pub fn neighbor_loss(
    f: &[f64],
    omega: &NeighborSet,
    bank: &MemoryBank,
    tau: f64,
) -> Result<LossResult> {
    check_dims(f, bank)?;
    if !omega.contains(omega.owner) {
        return Err(Error::Data(format!(
            "neighbor set of {} does not contain its owner",
            omega.owner
        )));
    }
    let probs = target_probs(f, bank, tau);
    Ok(neighbor_loss_with(&probs, omega, bank))
}

pub(crate) fn neighbor_loss_with(
    probs: &TargetProbabilities,
    omega: &NeighborSet,
    bank: &MemoryBank,
) -> LossResult {
    let weights = neighbor_weights(omega);
    let c: f64 = weights.iter().map(|(_, w)| w).sum();
    let value = -weights
        .iter()
        .map(|&(j, w)| w * probs.log_prob(j))
        .sum::<f64>();
    let mut grad = probs.expected_entry(bank);
    grad.iter_mut().for_each(|g| *g *= c);
    for &(j, w) in &weights {
        grad.iter_mut()
            .zip(bank.get(j))
            .for_each(|(g, v)| *g -= w * v);
    }
    grad.iter_mut().for_each(|g| *g /= probs.tau);
    LossResult { value, grad }
}

/// Similarity-aggregating loss `-log sum_{j in G_i, j != i} p_ij`.
///
/// Returns `None` for a singleton group, which contributes nothing.
/// Gradient: `1/tau (sum_{j in G'} (p_j - p_j/S) v_j + sum_{k not in G'} p_k v_k)`
/// with `G' = G_i \ {i}` and `S = sum_{j in G'} p_j`.
pub fn aggre_loss(
    f: &[f64],
    i: usize,
    group: &[usize],
    bank: &MemoryBank,
    tau: f64,
) -> Result<Option<LossResult>> {
    check_dims(f, bank)?;
    if let Some(&bad) = group.iter().find(|&&j| j >= bank.len()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: bank.len(),
        });
    }
    let probs = target_probs(f, bank, tau);
    Ok(aggre_loss_with(&probs, i, group, bank))
}

pub(crate) fn aggre_loss_with(
    probs: &TargetProbabilities,
    i: usize,
    group: &[usize],
    bank: &MemoryBank,
) -> Option<LossResult> {
    let others: Vec<usize> = group.iter().copied().filter(|&j| j != i).collect();
    if others.is_empty() {
        return None;
    }
    let log_mass = log_sum_exp(others.iter().map(|&j| probs.logits[j])) - probs.log_partition;
    let mass = log_mass.exp();
    let mut grad = probs.expected_entry(bank);
    for &j in &others {
        let share = probs.probs[j] / mass;
        grad.iter_mut()
            .zip(bank.get(j))
            .for_each(|(g, v)| *g -= share * v);
    }
    grad.iter_mut().for_each(|g| *g /= probs.tau);
    Some(LossResult {
        value: -log_mass,
        grad,
    })
}

/// Coefficients `p_ij (1 - 1/S)` on the group members `j != i`; all `<= 0`.
pub fn aggre_member_coefficients(
    probs: &TargetProbabilities,
    i: usize,
    group: &[usize],
) -> Vec<f64> {
    let others: Vec<usize> = group.iter().copied().filter(|&j| j != i).collect();
    let mass: f64 = others.iter().map(|&j| probs.probs[j]).sum();
    others
        .iter()
        .map(|&j| probs.probs[j] * (1.0 - 1.0 / mass))
        .collect()
}

/// Batch-hard triplet loss over a labeled batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletResult {
    /// Mean hinge over anchors that have both a positive and a negative.
    pub value: f64,
    /// Hinge per anchor; `None` when the anchor was skipped.
    pub per_anchor: Vec<Option<f64>>,
    /// Gradient of `value` with respect to every batch embedding.
    pub grads: Vec<Vec<f64>>,
}

impl TripletResult {
    pub fn active_anchors(&self) -> usize {
        self.per_anchor.iter().flatten().count()
    }
}

pub fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `[m + max_p d(a,p) - min_n d(a,n)]_+` for every anchor, averaged over
/// anchors. Positions, not sample ids, define the batch: a repeated sample
/// is its own zero-distance positive.
pub fn triplet_batch_hard(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    margin: f64,
) -> Result<TripletResult> {
    let n = embeddings.len();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    let dim = embeddings.first().map_or(0, Vec::len);
    let dist: Vec<Vec<f64>> = (0..n)
        .map(|a| (0..n).map(|b| l2(&embeddings[a], &embeddings[b])).collect())
        .collect();
    let mut per_anchor = vec![None; n];
    let mut grads = vec![vec![0.0; dim]; n];
    let mut skipped = 0usize;
    for a in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for b in (0..n).filter(|&b| b != a) {
            let d = dist[a][b];
            if labels[b] == labels[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((b, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((b, d));
            }
        }
        let (Some((p, d_ap)), Some((q, d_an))) = (pos, neg) else {
            skipped += 1;
            continue;
        };
        let hinge = margin + d_ap - d_an;
        if hinge <= 0.0 {
            per_anchor[a] = Some(0.0);
            continue;
        }
        per_anchor[a] = Some(hinge);
        for k in 0..dim {
            let u_ap = if d_ap > 0.0 {
                (embeddings[a][k] - embeddings[p][k]) / d_ap
            } else {
                0.0
            };
            let u_an = if d_an > 0.0 {
                (embeddings[a][k] - embeddings[q][k]) / d_an
            } else {
                0.0
            };
            grads[a][k] += u_ap - u_an;
            grads[p][k] -= u_ap;
            grads[q][k] += u_an;
        }
    }
    if skipped > 0 {
        warn!("triplet: skipped {skipped} anchor(s) without a positive or a negative");
    }
    let active = per_anchor.iter().flatten().count();
    let value = if active == 0 {
        0.0
    } else {
        let scale = 1.0 / active as f64;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
        per_anchor.iter().flatten().sum::<f64>() * scale
    };
    Ok(TripletResult {
        value,
        per_anchor,
        grads,
    })
}

/// Cross-entropy of the source classifier and its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxResult {
    pub value: f64,
    pub grad_embedding: Vec<f64>,
    /// Gradient for the head parameters, weights then bias.
    pub grad_head: Vec<f64>,
}

pub fn source_softmax(head: &LinearHead, f: &[f64], label: usize) -> Result<SoftmaxResult> {
    if label >= head.classes {
        return Err(Error::LabelOutOfRange {
            label,
            classes: head.classes,
        });
    }
    if f.len() != head.dim {
        return Err(Error::DimensionMismatch {
            expected: head.dim,
            got: f.len(),
        });
    }
    let logits = head.logits(f);
    let lse = log_sum_exp(logits.iter().copied());
    let value = lse - logits[label];
    let mut dz: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    dz[label] -= 1.0;
    let mut grad_embedding = vec![0.0; head.dim];
    let mut grad_head = vec![0.0; head.num_params()];
    for (c, (row, g)) in head.weights.chunks_exact(head.dim).zip(&dz).enumerate() {
        grad_embedding
            .iter_mut()
            .zip(row)
            .for_each(|(e, w)| *e += g * w);
        grad_head[c * head.dim..(c + 1) * head.dim]
            .iter_mut()
            .zip(f)
            .for_each(|(h, x)| *h = g * x);
        grad_head[head.weights.len() + c] = *g;
    }
    Ok(SoftmaxResult {
        value,
        grad_embedding,
        grad_head,
    })
}

fn check_dims(f: &[f64], bank: &MemoryBank) -> Result<()> {
    if f.len() != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            got: f.len(),
        });
    }
    Ok(())
}

/// Per-term switches for one training epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveTerms {
    pub softmax_src: bool,
    pub triplet_src: bool,
    pub gpp: bool,
    pub neighbor: bool,
    pub aggre: bool,
    pub triplet_tgt: bool,
}

impl ActiveTerms {
    /// Staging of the joint objective: source terms and the predictor loss
    /// always; the neighbor loss after `e1` epochs; the group losses after `e2`.
    pub fn for_epoch(epoch: usize, e1: usize, e2: usize) -> Self {
        Self {
            softmax_src: true,
            triplet_src: true,
            gpp: true,
            neighbor: epoch > e1,
            aggre: epoch > e2,
            triplet_tgt: epoch > e2,
        }
    }

    pub fn uses_target(&self) -> bool {
        self.neighbor || self.aggre || self.triplet_tgt
    }
}

/// Multipliers on each term; all 1 for the unweighted objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub softmax_src: f64,
    pub triplet_src: f64,
    pub neighbor: f64,
    pub aggre: f64,
    pub triplet_tgt: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self {
            softmax_src: 1.0,
            triplet_src: 1.0,
            neighbor: 1.0,
            aggre: 1.0,
            triplet_tgt: 1.0,
        }
    }
}

/// Values of the six terms for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub softmax_src: f64,
    pub triplet_src: f64,
    pub gpp: f64,
    pub neighbor: f64,
    pub aggre: f64,
    pub triplet_tgt: f64,
}

impl LossParts {
    pub fn all_finite(&self) -> bool {
        [
            self.softmax_src,
            self.triplet_src,
            self.gpp,
            self.neighbor,
            self.aggre,
            self.triplet_tgt,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Sum of the active terms. `L_gpp` is reported in the sum but trains only
/// the predictor, never the embedding model.
pub fn total_loss(active: ActiveTerms, parts: &LossParts, weights: &TermWeights) -> f64 {
    let mut total = 0.0;
    if active.softmax_src {
        total += weights.softmax_src * parts.softmax_src;
    }
    if active.triplet_src {
        total += weights.triplet_src * parts.triplet_src;
    }
    if active.gpp {
        total += parts.gpp;
    }
    if active.neighbor {
        total += weights.neighbor * parts.neighbor;
    }
    if active.aggre {
        total += weights.aggre * parts.aggre;
    }
    if active.triplet_tgt {
        total += weights.triplet_tgt * parts.triplet_tgt;
    }
    total
}
