//! Feature and label files.
//!
//! Text features: a header line `n d`, then `n` rows of `d` space-separated
//! decimals. Labels: CSV `sample_id,identity,camera`. The binary feature
//! variant uses the memory-bank layout with magic `CMPF`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::embedding::{read_f64s, read_header, BANK_VERSION};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"CMPF";

/// Per-sample identity and camera.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleLabel {
    pub identity: usize,
    pub camera: usize,
}

/// Features with optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Option<Vec<SampleLabel>>,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Option<Vec<SampleLabel>>) -> Result<Self> {
        let dim = features.first().map_or(0, Vec::len);
        if features.is_empty() || dim < 2 {
            return Err(Error::Data(
                "dataset needs at least one sample of dimension >= 2".into(),
            ));
        }
        if let Some(bad) = features.iter().position(|r| r.len() != dim) {
            return Err(Error::Data(format!(
                "row {bad} has {} values, expected {dim}",
                features[bad].len()
            )));
        }
        if features.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        if let Some(l) = &labels {
            if l.len() != features.len() {
                return Err(Error::Data(format!(
                    "{} labels for {} samples",
                    l.len(),
                    features.len()
                )));
            }
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn identities(&self) -> Option<Vec<usize>> {
        self.labels
            .as_ref()
            .map(|l| l.iter().map(|s| s.identity).collect())
    }

    /// Loads features and, when `labels` is given, the label file.
    pub fn load(features: &Path, labels: Option<&Path>) -> Result<Self> {
        let rows = read_features_path(features)?;
        let labels = labels.map(read_labels_path).transpose()?;
        Self::new(rows, labels)
    }
}

pub fn write_features<W: Write>(rows: &[Vec<f64>], mut w: W) -> Result<()> {
    let d = rows.first().map_or(0, Vec::len);
    writeln!(w, "{} {}", rows.len(), d)?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn read_features<R: BufRead>(r: R) -> Result<Vec<Vec<f64>>> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("empty feature file".into()))??;
    let mut parts = header.split_whitespace().map(str::parse::<usize>);
    let (Some(Ok(n)), Some(Ok(d)), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(Error::Data(format!(
            "bad feature header {header:?}, expected `n d`"
        )));
    };
    let mut rows = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::Data(format!("row {i}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != d {
            return Err(Error::Data(format!(
                "row {i} has {} values, expected {d}",
                row.len()
            )));
        }
        rows.push(row);
    }
    if rows.len() != n {
        return Err(Error::Data(format!(
            "header says {n} rows, found {}",
            rows.len()
        )));
    }
    Ok(rows)
}

pub fn write_features_binary<W: Write>(rows: &[Vec<f64>], mut w: W) -> Result<()> {
    let d = rows.first().map_or(0, Vec::len);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&BANK_VERSION.to_le_bytes())?;
    w.write_all(&(rows.len() as u64).to_le_bytes())?;
    w.write_all(&(d as u64).to_le_bytes())?;
    w.write_all(&0f64.to_le_bytes())?;
    for x in rows.iter().flatten() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features_binary<R: Read>(mut r: R) -> Result<Vec<Vec<f64>>> {
    let (n, d, _) = read_header(&mut r, FEATURE_MAGIC)?;
    let flat = read_f64s(&mut r, n * d)?;
    Ok(flat.chunks_exact(d).map(<[f64]>::to_vec).collect())
}

/// Reads text or binary features, chosen by the file's leading bytes.
pub fn read_features_path(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = BufReader::new(File::open(path)?);
    let is_binary = reader.fill_buf()?.starts_with(FEATURE_MAGIC);
    if is_binary {
        read_features_binary(reader)
    } else {
        read_features(reader)
    }
}

pub fn write_labels<W: Write>(labels: &[SampleLabel], mut w: W) -> Result<()> {
    writeln!(w, "sample_id,identity,camera")?;
    for (i, l) in labels.iter().enumerate() {
        writeln!(w, "{i},{},{}", l.identity, l.camera)?;
    }
    Ok(())
}

pub fn read_labels<R: BufRead>(r: R) -> Result<Vec<SampleLabel>> {
    let mut out = Vec::new();
    for (line_no, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (line_no == 0 && line.starts_with("sample_id")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::Data(format!("label line {}: {e}", line_no + 1)))
        };
        let [id, identity, camera] = fields[..] else {
            return Err(Error::Data(format!(
                "label line {} needs 3 fields",
                line_no + 1
            )));
        };
        if parse(id)? != out.len() {
            return Err(Error::Data(format!(
                "label line {}: sample ids must be 0..n in order",
                line_no + 1
            )));
        }
        out.push(SampleLabel {
            identity: parse(identity)?,
            camera: parse(camera)?,
        });
    }
    Ok(out)
}

pub fn read_labels_path(path: &Path) -> Result<Vec<SampleLabel>> {
    read_labels(BufReader::new(File::open(path)?))
}

pub fn write_features_path(path: &Path, rows: &[Vec<f64>], binary: bool) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    if binary {
        write_features_binary(rows, &mut w)?;
    } else {
        write_features(rows, &mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_labels_path(path: &Path, labels: &[SampleLabel]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_labels(labels, &mut w)?;
    w.flush()?;
    Ok(())
}
