//! Retrieval metrics (CMC, mAP) and pairwise pseudo-label quality.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, norm};
use crate::error::{Error, Result};
use crate::groups::GroupPartition;
use crate::neighbors::NeighborSet;

/// CMC ranks reported in [`MetricsReport`].
pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

/// Embeddings with identity labels and sample ids.
#[derive(Clone, Copy, Debug)]
pub struct RetrievalSet<'a> {
    pub embeddings: &'a [Vec<f64>],
    pub labels: &'a [usize],
    pub ids: &'a [usize],
}

impl<'a> RetrievalSet<'a> {
    pub fn new(embeddings: &'a [Vec<f64>], labels: &'a [usize], ids: &'a [usize]) -> Result<Self> {
        if embeddings.len() != labels.len() || labels.len() != ids.len() {
            return Err(Error::Data(format!(
                "retrieval set has {} embeddings, {} labels, {} ids",
                embeddings.len(),
                labels.len(),
                ids.len()
            )));
        }
        Ok(Self {
            embeddings,
            labels,
            ids,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub map: f64,
    /// Rank-k accuracy for `k` in [`CMC_RANKS`].
    pub cmc: [f64; 3],
    pub queries: usize,
    pub skipped_queries: usize,
}

/// Average precision of a ranked relevance list: the mean over positive
/// positions `r` of (positives in the top `r`) / `r`.
pub fn average_precision(relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Relevance of the gallery ranked for one query, or `None` when the query
/// identity is absent from the gallery.
fn ranked_relevance(
    q: usize,
    query: &RetrievalSet<'_>,
    gallery: &RetrievalSet<'_>,
) -> Option<Vec<bool>> {
    let qe = &query.embeddings[q];
    let qn = norm(qe);
    let mut scored: Vec<(usize, f64)> = (0..gallery.embeddings.len())
        .filter(|&g| gallery.ids[g] != query.ids[q])
        .map(|g| {
            let ge = &gallery.embeddings[g];
            (g, dot(qe, ge) / (qn * norm(ge)))
        })
        .collect();
    scored.sort_by(crate::embedding::rank_order);
    let relevant: Vec<bool> = scored
        .iter()
        .map(|&(g, _)| gallery.labels[g] == query.labels[q])
        .collect();
    relevant.contains(&true).then_some(relevant)
}

/// Single-query retrieval by cosine similarity, without re-ranking.
pub fn retrieval_eval(query: &RetrievalSet<'_>, gallery: &RetrievalSet<'_>) -> RetrievalMetrics {
    let per_query: Vec<Option<(f64, usize)>> = (0..query.embeddings.len())
        .into_par_iter()
        .map(|q| {
            ranked_relevance(q, query, gallery).map(|rel| {
                let first = rel.iter().position(|&r| r).expect("has a positive");
                (average_precision(&rel), first)
            })
        })
        .collect();
    let skipped = per_query.iter().filter(|r| r.is_none()).count();
    if skipped > 0 {
        warn!("retrieval: {skipped} query(ies) have no match in the gallery and were excluded");
    }
    let kept: Vec<(f64, usize)> = per_query.into_iter().flatten().collect();
    let n = kept.len();
    if n == 0 {
        return RetrievalMetrics {
            map: 0.0,
            cmc: [0.0; 3],
            queries: 0,
            skipped_queries: skipped,
        };
    }
    let map = kept.iter().map(|(ap, _)| ap).sum::<f64>() / n as f64;
    let mut cmc = [0.0; 3];
    for (slot, &k) in cmc.iter_mut().zip(&CMC_RANKS) {
        *slot = kept.iter().filter(|(_, first)| *first < k).count() as f64 / n as f64;
    }
    RetrievalMetrics {
        map,
        cmc,
        queries: n,
        skipped_queries: skipped,
    }
}

/// Pairwise precision, recall and F1 over unordered sample pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairQuality {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub implied_pairs: usize,
    pub correct_pairs: usize,
    pub true_pairs: usize,
}

impl PairQuality {
    /// Precision is 0 with no implied pairs; recall is 0 with no true pairs.
    fn from_counts(implied: usize, correct: usize, truth: usize) -> Self {
        let precision = if implied == 0 {
            0.0
        } else {
            correct as f64 / implied as f64
        };
        let recall = if truth == 0 {
            0.0
        } else {
            correct as f64 / truth as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            implied_pairs: implied,
            correct_pairs: correct,
            true_pairs: truth,
        }
    }
}

fn pairs_choose2(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

fn true_pair_count(truth: &[usize]) -> usize {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &t in truth {
        *counts.entry(t).or_default() += 1;
    }
    counts.values().map(|&c| pairs_choose2(c)).sum()
}

/// Quality of neighbor pseudo labels: pairs `{i, j}` with `j in Omega_i`, `j != i`.
pub fn neighbor_pair_quality(sets: &[NeighborSet], truth: &[usize]) -> Result<PairQuality> {
    let n = truth.len();
    let mut implied: HashSet<(usize, usize)> = HashSet::new();
    for s in sets {
        for &j in &s.members {
            if j >= n || s.owner >= n {
                return Err(Error::IndexOutOfRange {
                    index: j.max(s.owner),
                    len: n,
                });
            }
            if j != s.owner {
                implied.insert((s.owner.min(j), s.owner.max(j)));
            }
        }
    }
    let correct = implied
        .iter()
        .filter(|&&(a, b)| truth[a] == truth[b])
        .count();
    Ok(PairQuality::from_counts(
        implied.len(),
        correct,
        true_pair_count(truth),
    ))
}

/// Quality of group pseudo labels: all within-group pairs.
pub fn group_pair_quality(partition: &GroupPartition, truth: &[usize]) -> Result<PairQuality> {
    if partition.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: partition.len(),
        });
    }
    let mut implied = 0;
    let mut correct = 0;
    for g in &partition.groups {
        implied += pairs_choose2(g.len());
        let ids: Vec<usize> = g.iter().map(|&i| truth[i]).collect();
        correct += true_pair_count(&ids);
    }
    Ok(PairQuality::from_counts(
        implied,
        correct,
        true_pair_count(truth),
    ))
}

/// Retrieval metrics plus optional pseudo-label quality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub cmc: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub neighbor: Option<PairQuality>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub group: Option<PairQuality>,
}

impl MetricsReport {
    pub fn from_retrieval(r: &RetrievalMetrics) -> Self {
        Self {
            map: r.map,
            cmc: r.cmc,
            neighbor: None,
            group: None,
        }
    }

    pub const CSV_HEADER: &'static str =
        "map,rank1,rank5,rank10,neighbor_precision,neighbor_recall,neighbor_f1,group_precision,group_recall,group_f1";

    pub fn csv_row(&self) -> String {
        let q = |p: Option<PairQuality>| match p {
            Some(p) => format!("{},{},{}", p.precision, p.recall, p.f1),
            None => ",,".to_string(),
        };
        format!(
            "{},{},{},{},{},{}",
            self.map,
            self.cmc[0],
            self.cmc[1],
            self.cmc[2],
            q(self.neighbor),
            q(self.group)
        )
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        writeln!(w, "{}", self.csv_row())?;
        Ok(())
    }
}
