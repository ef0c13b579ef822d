//! Unit-norm embeddings and the target memory bank.
//!
//! The bank keeps one running-average embedding per target sample. All
//! similarities in the crate are cosine similarities, so every stored entry
//! is kept at unit L2 norm and similarity reduces to a dot product.

use std::cmp::Ordering;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BANK_MAGIC: &[u8; 4] = b"CMPL";
pub const BANK_VERSION: u32 = 1;

/// A dense feature or embedding vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Data(format!(
                "feature dimension must be at least 2, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

/// Returns `v / ||v||`.
pub fn normalize(v: &FeatureVector) -> Result<FeatureVector> {
    let mut out = v.0.clone();
    normalize_in_place(&mut out)?;
    Ok(FeatureVector(out))
}

pub fn normalize_in_place(v: &mut [f64]) -> Result<f64> {
    let n = norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(n)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Orders `(index, similarity)` by similarity descending, then index ascending.
#[inline]
pub(crate) fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Keeps the `k` best entries of `scored` under [`rank_order`], sorted.
pub(crate) fn top_k(mut scored: Vec<(usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    scored
}

/// Running-average embedding per target sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    entries: Vec<f64>,
    len: usize,
    dim: usize,
    momentum: f64,
}

impl MemoryBank {
    /// Builds a bank from row vectors; each row is normalized on the way in.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::Config(format!(
                "momentum must be in (0,1], got {momentum}"
            )));
        }
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.is_empty() || dim < 2 {
            return Err(Error::Data(
                "memory bank needs at least one row of dimension >= 2".into(),
            ));
        }
        let mut entries = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            let start = entries.len();
            entries.extend_from_slice(row);
            normalize_in_place(&mut entries[start..])?;
        }
        Ok(Self {
            entries,
            len: rows.len(),
            dim,
            momentum,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.chunks_exact(self.dim)
    }

    /// Momentum update `v_i <- normalize((1 - a) v_i + a f)`.
    pub fn update(&mut self, i: usize, f: &[f64]) -> Result<&[f64]> {
        if i >= self.len {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.len,
            });
        }
        if f.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: f.len(),
            });
        }
        let a = self.momentum;
        let dim = self.dim;
        let row = &mut self.entries[i * dim..(i + 1) * dim];
        let mut next: Vec<f64> = row
            .iter()
            .zip(f)
            .map(|(v, x)| (1.0 - a) * v + a * x)
            .collect();
        // Opposite vectors at a = 0.5 cancel exactly; keep the new embedding then.
        if normalize_in_place(&mut next).is_err() {
            next.copy_from_slice(f);
            normalize_in_place(&mut next)?;
        }
        row.copy_from_slice(&next);
        Ok(&self.entries[i * dim..(i + 1) * dim])
    }

    /// Dot product of the query with every entry.
    pub fn similarities(&self, f: &[f64]) -> Vec<f64> {
        self.rows().map(|v| dot(v, f)).collect()
    }

    /// Indices of the `k` entries most similar to `f`, best first.
    pub fn knn(&self, f: &[f64], k: usize) -> Result<Vec<usize>> {
        Ok(self
            .knn_scored(f, k, None)?
            .into_iter()
            .map(|(i, _)| i)
            .collect())
    }

    /// Like [`knn`](Self::knn) but keeps similarities and can skip one index.
    pub fn knn_scored(
        &self,
        f: &[f64],
        k: usize,
        exclude: Option<usize>,
    ) -> Result<Vec<(usize, f64)>> {
        if f.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: f.len(),
            });
        }
        let available = self.len - usize::from(exclude.is_some_and(|e| e < self.len));
        if k == 0 || k > available {
            return Err(Error::InvalidK { k, available });
        }
        let scored: Vec<(usize, f64)> = self
            .rows()
            .enumerate()
            .filter(|(i, _)| Some(*i) != exclude)
            .map(|(i, v)| (i, dot(v, f)))
            .collect();
        Ok(top_k(scored, k))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BANK_MAGIC)?;
        w.write_all(&BANK_VERSION.to_le_bytes())?;
        w.write_all(&(self.len as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&self.momentum.to_le_bytes())?;
        for x in &self.entries {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let (len, dim, momentum) = read_header(&mut r, BANK_MAGIC)?;
        let entries = read_f64s(&mut r, len * dim)?;
        let bank = Self {
            entries,
            len,
            dim,
            momentum,
        };
        for (i, row) in bank.rows().enumerate() {
            if (norm(row) - 1.0).abs() > 1e-6 {
                return Err(Error::Corrupt(format!("bank entry {i} is not unit norm")));
            }
        }
        Ok(bank)
    }
}

/// Reads a `magic, version, n, d, f64` header shared by the binary formats.
pub(crate) fn read_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<(usize, usize, f64)> {
    let mut buf4 = [0u8; 4];
    read_exact(r, &mut buf4, "magic")?;
    if &buf4 != magic {
        return Err(Error::Corrupt(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&buf4)
        )));
    }
    read_exact(r, &mut buf4, "version")?;
    let version = u32::from_le_bytes(buf4);
    if version != BANK_VERSION {
        return Err(Error::Version {
            found: version,
            expected: BANK_VERSION,
        });
    }
    let mut buf8 = [0u8; 8];
    read_exact(r, &mut buf8, "row count")?;
    let len = u64::from_le_bytes(buf8) as usize;
    read_exact(r, &mut buf8, "dimension")?;
    let dim = u64::from_le_bytes(buf8) as usize;
    read_exact(r, &mut buf8, "scalar")?;
    let scalar = f64::from_le_bytes(buf8);
    if len == 0 || dim == 0 || len.checked_mul(dim).is_none_or(|n| n > (1 << 34)) {
        return Err(Error::Corrupt(format!("implausible shape {len} x {dim}")));
    }
    Ok((len, dim, scalar))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    read_exact(r, &mut bytes, "payload")?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corrupt(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bank(rng: &mut ChaCha8Rng, n: usize, d: usize) -> MemoryBank {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        MemoryBank::from_rows(&rows, 0.5).unwrap()
    }

    // Full scan and full sort, no partial selection.
    fn naive_knn(bank: &MemoryBank, f: &[f64], k: usize) -> Vec<usize> {
        let mut all: Vec<(usize, f64)> = (0..bank.len())
            .map(|i| (i, bank.get(i).iter().zip(f).map(|(a, b)| a * b).sum()))
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.into_iter().take(k).map(|(i, _)| i).collect()
    }

    #[test]
    fn normalize_examples() {
        let v = normalize(&FeatureVector::new(vec![3.0, 4.0]).unwrap()).unwrap();
        assert!((v.as_slice()[0] - 0.6).abs() < 1e-12);
        assert!((v.as_slice()[1] - 0.8).abs() < 1e-12);
        let e = normalize(&FeatureVector::new(vec![1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(e.as_slice(), &[1.0, 0.0]);
        assert!(matches!(
            normalize(&FeatureVector::new(vec![0.0, 0.0]).unwrap()),
            Err(Error::DegenerateEmbedding)
        ));
    }

    #[test]
    fn feature_vector_rejects_bad_input() {
        assert!(FeatureVector::new(vec![1.0]).is_err());
        assert!(FeatureVector::new(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn update_examples() {
        let mut bank = MemoryBank::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], 0.5).unwrap();
        let v = bank.update(0, &[0.0, 1.0]).unwrap().to_vec();
        let h = 1.0 / 2f64.sqrt();
        assert!((v[0] - h).abs() < 1e-12 && (v[1] - h).abs() < 1e-12);
        assert_eq!(bank.get(1), &[0.0, 1.0]);

        let mut full = MemoryBank::from_rows(&[vec![1.0, 0.0]], 1.0).unwrap();
        full.update(0, &[0.6, 0.8]).unwrap();
        assert!((full.get(0)[0] - 0.6).abs() < 1e-12);

        assert!(matches!(
            bank.update(2, &[1.0, 0.0]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn knn_examples() {
        let bank = MemoryBank::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], 0.5).unwrap();
        assert_eq!(bank.knn(&[1.0, 0.0], 1).unwrap(), vec![0]);
        let mut all = bank.knn(&[0.3, 0.2], 2).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1]);
        assert!(matches!(
            bank.knn(&[1.0, 0.0], 3),
            Err(Error::InvalidK { .. })
        ));
    }

    #[test]
    fn knn_ties_prefer_smaller_index() {
        let bank =
            MemoryBank::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]], 0.5).unwrap();
        assert_eq!(bank.knn(&[1.0, 0.0], 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn knn_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..1000 {
            let bank = random_bank(&mut rng, 50, 8);
            let mut q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            normalize_in_place(&mut q).unwrap();
            let k = if trial % 2 == 0 {
                10
            } else {
                rng.random_range(1..=50)
            };
            assert_eq!(bank.knn(&q, k).unwrap(), naive_knn(&bank, &q, k));
        }
    }

    #[test]
    fn bank_roundtrip_and_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = random_bank(&mut rng, 5, 3);
        let mut buf = Vec::new();
        bank.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"CMPL");
        assert_eq!(buf.len(), 4 + 4 + 8 + 8 + 8 + 5 * 3 * 8);
        assert_eq!(MemoryBank::read_from(&buf[..]).unwrap(), bank);
        assert!(matches!(
            MemoryBank::read_from(&buf[..buf.len() - 3]),
            Err(Error::Corrupt(_))
        ));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(
            MemoryBank::read_from(&bad[..]),
            Err(Error::Version { .. })
        ));
    }

    proptest! {
        #[test]
        fn update_keeps_unit_norm_and_fixed_point(
            a in prop::collection::vec(-1.0f64..1.0, 6),
            b in prop::collection::vec(-1.0f64..1.0, 6),
            momentum in 0.01f64..=1.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let mut bank = MemoryBank::from_rows(&[a.clone()], momentum).unwrap();
            let current = bank.get(0).to_vec();
            bank.update(0, &current).unwrap();
            for (x, y) in bank.get(0).iter().zip(&current) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let mut f = b.clone();
            normalize_in_place(&mut f).unwrap();
            bank.update(0, &f).unwrap();
            prop_assert!((norm(bank.get(0)) - 1.0).abs() < 1e-6);
        }

        #[test]
        fn knn_invariant_to_query_scale(seed in 0u64..500, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bank = random_bank(&mut rng, 20, 4);
            let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut a = q.clone();
            let mut b: Vec<f64> = q.iter().map(|x| x * scale).collect();
            normalize_in_place(&mut a).unwrap();
            normalize_in_place(&mut b).unwrap();
            prop_assert_eq!(bank.knn(&a, 5).unwrap(), bank.knn(&b, 5).unwrap());
        }
    }
}
