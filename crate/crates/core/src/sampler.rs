//! P x K batch sampling: `P` distinct labels, `K` samples per label.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};

/// Sample indices grouped by label, labels in ascending order.
pub fn members_by_label(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    by_label
}

/// `K` members of one label: without replacement when the label has at
/// least `K` members, otherwise with replacement.
fn draw<R: Rng + ?Sized>(members: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    if members.len() >= k {
        members.choose_multiple(rng, k).copied().collect()
    } else {
        (0..k)
            .map(|_| *members.choose(rng).expect("non-empty label"))
            .collect()
    }
}

/// One batch of `P x K` indices, `K` consecutive entries per label.
pub fn pk_sample<R: Rng + ?Sized>(
    labels: &[usize],
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let by_label = members_by_label(labels);
    if by_label.len() < p {
        return Err(Error::NotEnoughLabels {
            needed: p,
            available: by_label.len(),
        });
    }
    let keys: Vec<usize> = by_label.keys().copied().collect();
    let chosen: Vec<usize> = keys.choose_multiple(rng, p).copied().collect();
    Ok(chosen
        .iter()
        .flat_map(|l| draw(&by_label[l], k, rng))
        .collect())
}

/// All batches of one epoch: every label is drawn once, in random order;
/// the last batch is topped up with other random labels to keep `P` labels.
pub fn pk_epoch<R: Rng + ?Sized>(
    labels: &[usize],
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let by_label = members_by_label(labels);
    if by_label.len() < p {
        return Err(Error::NotEnoughLabels {
            needed: p,
            available: by_label.len(),
        });
    }
    let mut order: Vec<usize> = by_label.keys().copied().collect();
    order.shuffle(rng);
    let mut batches = Vec::with_capacity(order.len().div_ceil(p));
    for chunk in order.chunks(p) {
        let mut chosen = chunk.to_vec();
        if chosen.len() < p {
            let rest: Vec<usize> = by_label
                .keys()
                .copied()
                .filter(|l| !chunk.contains(l))
                .collect();
            chosen.extend(rest.choose_multiple(rng, p - chunk.len()).copied());
        }
        batches.push(
            chosen
                .iter()
                .flat_map(|l| draw(&by_label[l], k, rng))
                .collect(),
        );
    }
    Ok(batches)
}

/// Enough batches to draw `ceil(n / (P x K))` batches for `n` samples,
/// concatenating label-covering passes of [`pk_epoch`] as needed.
pub fn pk_sample_pass<R: Rng + ?Sized>(
    labels: &[usize],
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let wanted = labels.len().div_ceil(p * k).max(1);
    let mut batches = Vec::with_capacity(wanted);
    while batches.len() < wanted {
        batches.extend(pk_epoch(labels, p, k, rng)?);
    }
    batches.truncate(wanted);
    Ok(batches)
}
