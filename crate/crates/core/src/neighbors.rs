//! Reliable-neighbor prediction.
//!
//! For a target sample `i` the `k` most similar bank entries form its
//! candidate set. A candidate `j` is kept as a reliable neighbor when its
//! score reaches the threshold `mu`. The score is either the raw cosine
//! similarity (threshold mode) or the output of [`GppLite`], a logistic
//! classifier over neighborhood features trained with binary cross-entropy on
//! labeled source pairs.

use serde::{Deserialize, Serialize};

use crate::embedding::{dot, MemoryBank};
use crate::error::{Error, Result};
use crate::optim::Adam;

/// Random access to unit embeddings by index.
pub trait EmbeddingLookup {
    fn embedding(&self, i: usize) -> &[f64];
}

impl EmbeddingLookup for MemoryBank {
    fn embedding(&self, i: usize) -> &[f64] {
        self.get(i)
    }
}

impl EmbeddingLookup for [Vec<f64>] {
    fn embedding(&self, i: usize) -> &[f64] {
        &self[i]
    }
}

/// The `k` nearest bank entries of a sample, excluding the sample itself.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub owner: usize,
    pub members: Vec<usize>,
    pub similarities: Vec<f64>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

pub fn candidates(bank: &MemoryBank, i: usize, k: usize) -> Result<CandidateSet> {
    if i >= bank.len() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: bank.len(),
        });
    }
    let scored = bank.knn_scored(bank.get(i), k, Some(i))?;
    let (members, similarities) = scored.into_iter().unzip();
    Ok(CandidateSet {
        owner: i,
        members,
        similarities,
    })
}

/// Predicted reliable neighbors of `owner`, always including `owner` itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub owner: usize,
    /// `owner` first, then admitted candidates in candidate order.
    pub members: Vec<usize>,
    /// Prediction score per member; 1 for the owner.
    pub scores: Vec<f64>,
}

impl NeighborSet {
    pub fn singleton(owner: usize) -> Self {
        Self {
            owner,
            members: vec![owner],
            scores: vec![1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.members.contains(&j)
    }

    pub fn score_of(&self, j: usize) -> Option<f64> {
        self.members
            .iter()
            .position(|&m| m == j)
            .map(|p| self.scores[p])
    }

    fn from_scores(c: &CandidateSet, scores: impl Iterator<Item = f64>, mu: f64) -> Self {
        let mut set = Self::singleton(c.owner);
        for (&j, p) in c.members.iter().zip(scores) {
            if p >= mu {
                set.members.push(j);
                set.scores.push(p);
            }
        }
        set
    }
}

/// Eq. 1 with the cosine similarity as the score.
pub fn predict_threshold(c: &CandidateSet, mu: f64) -> NeighborSet {
    NeighborSet::from_scores(c, c.similarities.iter().copied(), mu)
}

/// Eq. 1 with learned scores.
pub fn predict_learned<L: EmbeddingLookup + ?Sized>(
    model: &GppLite,
    c: &CandidateSet,
    lookup: &L,
    mu: f64,
) -> Result<NeighborSet> {
    let scores = model.predict(c, lookup)?;
    Ok(NeighborSet::from_scores(c, scores.into_iter(), mu))
}

/// Number of per-candidate features seen by [`GppLite`].
pub const GPP_FEATURES: usize = 4;

/// Logistic neighbor classifier.
///
/// Features of candidate `j` at rank `r` among `k` candidates of query `q`:
/// `sim(q, j)`, the mean and max of `sim(j, c)` over the top `context`
/// candidates `c != j`, and the relative rank `r / k`. Similarities are
/// standardized by the mean and standard deviation of the query's `k`
/// candidate similarities, so the classifier sees each neighborhood on its
/// own scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GppLite {
    weights: [f64; GPP_FEATURES],
    bias: f64,
    context: usize,
    optimizer: Adam,
    steps: u64,
}

impl GppLite {
    pub fn new(context: usize, lr: f64) -> Self {
        Self {
            weights: [0.0; GPP_FEATURES],
            bias: 0.0,
            context: context.max(1),
            optimizer: Adam::new(GPP_FEATURES + 1, lr),
            steps: 0,
        }
    }

    pub fn with_params(weights: [f64; GPP_FEATURES], bias: f64, context: usize) -> Self {
        let mut m = Self::new(context, 1e-2);
        m.weights = weights;
        m.bias = bias;
        m
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.weights.to_vec();
        p.push(self.bias);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        self.weights.copy_from_slice(&p[..GPP_FEATURES]);
        self.bias = p[GPP_FEATURES];
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn is_ready(&self) -> bool {
        self.steps > 0
    }

    /// Marks the model as trained without running a step (fixed-weight use).
    pub fn mark_ready(&mut self) {
        self.steps = self.steps.max(1);
    }

    pub fn features<L: EmbeddingLookup + ?Sized>(
        &self,
        c: &CandidateSet,
        lookup: &L,
    ) -> Vec<[f64; GPP_FEATURES]> {
        let k = c.len();
        let ctx = self.context.min(k);
        let (center, scale) = similarity_scale(&c.similarities);
        let z = |s: f64| (s - center) / scale;
        c.members
            .iter()
            .enumerate()
            .map(|(r, &j)| {
                let ej = lookup.embedding(j);
                let (mut sum, mut max, mut n) = (0.0, f64::NEG_INFINITY, 0usize);
                for &m in c.members[..ctx].iter().filter(|&&m| m != j) {
                    let s = dot(ej, lookup.embedding(m));
                    sum += s;
                    max = max.max(s);
                    n += 1;
                }
                let (mean, max) = if n == 0 {
                    (0.0, 0.0)
                } else {
                    (z(sum / n as f64), z(max))
                };
                [z(c.similarities[r]), mean, max, r as f64 / k as f64]
            })
            .collect()
    }

    fn logit(&self, phi: &[f64; GPP_FEATURES]) -> f64 {
        dot(&self.weights, phi) + self.bias
    }

    /// Same-identity probability for every candidate.
    pub fn predict<L: EmbeddingLookup + ?Sized>(
        &self,
        c: &CandidateSet,
        lookup: &L,
    ) -> Result<Vec<f64>> {
        if !self.is_ready() {
            return Err(Error::PredictorNotReady);
        }
        Ok(self
            .features(c, lookup)
            .iter()
            .map(|phi| sigmoid(self.logit(phi)))
            .collect())
    }

    /// Mean binary cross-entropy over all (query, candidate) pairs of a
    /// labeled batch, and its gradient with respect to `[weights.., bias]`.
    ///
    /// Every batch position is a query; its candidates are the other positions
    /// ranked by similarity.
    pub fn loss_and_grad(
        &self,
        embeddings: &[Vec<f64>],
        labels: &[usize],
    ) -> Result<(f64, Vec<f64>)> {
        let queries: Vec<usize> = (0..embeddings.len()).collect();
        let k = embeddings.len().saturating_sub(1);
        self.loss_and_grad_pool(&queries, embeddings, labels, k)
    }

    /// As [`GppLite::loss_and_grad`], but each query draws its `k`
    /// candidates from a whole labeled pool, as at prediction time.
    pub fn loss_and_grad_pool(
        &self,
        queries: &[usize],
        pool: &[Vec<f64>],
        labels: &[usize],
        k: usize,
    ) -> Result<(f64, Vec<f64>)> {
        if pool.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                got: pool.len(),
            });
        }
        if let Some(&bad) = queries.iter().find(|&&q| q >= pool.len()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: pool.len(),
            });
        }
        let first = labels.first().copied();
        if pool.len() < 2 || labels.iter().all(|&l| Some(l) == first) {
            return Err(Error::NoNegativePairs);
        }
        let k = k.clamp(1, pool.len() - 1);
        let mut grad = vec![0.0; GPP_FEATURES + 1];
        let mut loss = 0.0;
        let mut pairs = 0usize;
        for &q in queries {
            let scored: Vec<(usize, f64)> = (0..pool.len())
                .filter(|&j| j != q)
                .map(|j| (j, dot(&pool[q], &pool[j])))
                .collect();
            let (members, similarities) = crate::embedding::top_k(scored, k).into_iter().unzip();
            let c = CandidateSet {
                owner: q,
                members,
                similarities,
            };
            for (phi, &j) in self.features(&c, pool).iter().zip(&c.members) {
                let z = self.logit(phi);
                let y = if labels[j] == labels[q] { 1.0 } else { 0.0 };
                loss += bce_with_logit(z, y);
                let dz = sigmoid(z) - y;
                for (g, x) in grad.iter_mut().zip(phi) {
                    *g += dz * x;
                }
                grad[GPP_FEATURES] += dz;
                pairs += 1;
            }
        }
        if pairs == 0 {
            return Err(Error::NoNegativePairs);
        }
        let scale = 1.0 / pairs as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((loss * scale, grad))
    }

    /// One Adam step on a precomputed gradient.
    pub fn apply_gradient(&mut self, grad: &[f64]) {
        let mut p = self.params();
        self.optimizer.step(&mut p, grad);
        self.set_params(&p);
        self.steps += 1;
    }

    /// One Adam step on the batch BCE; returns the pre-step loss.
    pub fn train_step(&mut self, embeddings: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        let (loss, grad) = self.loss_and_grad(embeddings, labels)?;
        self.apply_gradient(&grad);
        Ok(loss)
    }
}

#[inline]
/// Mean and standard deviation (floored at `1e-6`) of a similarity list.
pub fn similarity_scale(similarities: &[f64]) -> (f64, f64) {
    if similarities.is_empty() {
        return (0.0, 1.0);
    }
    let n = similarities.len() as f64;
    let mean = similarities.iter().sum::<f64>() / n;
    let var = similarities.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt().max(1e-6))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-[y log s(z) + (1-y) log(1-s(z))]`, stable for large |z|.
#[inline]
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Per-sample neighbor sets, one slot for the current epoch and, with
/// voting enabled, one for the previous epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborMemory {
    current: Vec<NeighborSet>,
    previous: Option<Vec<NeighborSet>>,
    keep_previous: bool,
}

impl NeighborMemory {
    pub fn new(n: usize, keep_previous: bool) -> Self {
        Self {
            current: (0..n).map(NeighborSet::singleton).collect(),
            previous: None,
            keep_previous,
        }
    }

    /// Builds a memory directly from sets, one per sample in owner order.
    pub fn from_sets(sets: Vec<NeighborSet>) -> Result<Self> {
        for (i, s) in sets.iter().enumerate() {
            if s.owner != i || !s.contains(i) {
                return Err(Error::Data(format!(
                    "neighbor set {i} must be owned by and contain {i}"
                )));
            }
        }
        Ok(Self {
            current: sets,
            previous: None,
            keep_previous: false,
        })
    }

    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }

    pub fn get(&self, i: usize) -> &NeighborSet {
        &self.current[i]
    }

    pub fn previous(&self, i: usize) -> Option<&NeighborSet> {
        self.previous.as_ref().map(|p| &p[i])
    }

    pub fn sets(&self) -> &[NeighborSet] {
        &self.current
    }

    pub fn record(&mut self, set: NeighborSet) -> Result<()> {
        let len = self.current.len();
        let slot = self
            .current
            .get_mut(set.owner)
            .ok_or(Error::IndexOutOfRange {
                index: set.owner,
                len,
            })?;
        *slot = set;
        Ok(())
    }

    /// Closes an epoch: the current sets become the previous-epoch sets when
    /// voting is enabled. Current sets stay in place until overwritten.
    pub fn advance_epoch(&mut self) {
        if self.keep_previous {
            self.previous = Some(self.current.clone());
        }
    }

    /// Sets after the two-epoch vote: a non-self member survives only if it
    /// is also present in the previous epoch's set. Without a previous epoch
    /// the current sets are returned unchanged.
    pub fn voted(&self) -> Vec<NeighborSet> {
        match &self.previous {
            None => self.current.clone(),
            Some(prev) => self
                .current
                .iter()
                .zip(prev)
                .map(|(cur, old)| {
                    let mut out = NeighborSet::singleton(cur.owner);
                    for (&j, &s) in cur.members.iter().zip(&cur.scores).skip(1) {
                        if old.contains(j) {
                            out.members.push(j);
                            out.scores.push(s);
                        }
                    }
                    out
                })
                .collect(),
        }
    }
}
