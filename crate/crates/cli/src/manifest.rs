//! Experiment manifests and output-directory staging.

use std::fs;
use std::path::{Path, PathBuf};

use complab::{Error, Result, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Everything needed to repeat a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    /// Short content hash of the resolved config and the input files.
    pub run_id: String,
    pub config_path: Option<PathBuf>,
    pub config: TrainConfig,
    pub source: PathBuf,
    pub source_labels: PathBuf,
    pub target: PathBuf,
    pub target_truth: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
}

fn absolute(path: PathBuf) -> Result<PathBuf> {
    fs::canonicalize(&path).map_err(|_| Error::Data(format!("{} not found", path.display())))
}

impl ExperimentManifest {
    pub fn new(
        config_path: Option<PathBuf>,
        config: TrainConfig,
        source: PathBuf,
        source_labels: PathBuf,
        target: PathBuf,
        target_truth: Option<PathBuf>,
        output_dir: PathBuf,
    ) -> Result<Self> {
        let mut m = Self {
            run_id: String::new(),
            config_path: config_path.map(absolute).transpose()?,
            seed: config.seed,
            config,
            source: absolute(source)?,
            source_labels: absolute(source_labels)?,
            target: absolute(target)?,
            target_truth: target_truth.map(absolute).transpose()?,
            output_dir,
        };
        m.run_id = m.content_id()?;
        Ok(m)
    }

    fn content_id(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.config.to_toml_string());
        let inputs = [
            Some(&self.source),
            Some(&self.source_labels),
            Some(&self.target),
            self.target_truth.as_ref(),
        ];
        for path in inputs {
            match path {
                Some(p) => h.update(fs::read(p)?),
                None => h.update(b"-"),
            }
        }
        Ok(format!("{:x}", h.finalize())[..12].to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        m.config.validate()?;
        Ok(m)
    }

    /// The same experiment written to another directory.
    pub fn rerun(mut self, output_dir: &Path) -> Self {
        self.output_dir = output_dir.to_path_buf();
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Creates `out` with the files written by `fill`, all at once: the files
/// are written into a hidden sibling directory that is then renamed.
pub fn stage_output_dir(out: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if out.exists() {
        if fs::read_dir(out)?.next().is_some() {
            return Err(Error::Config(format!(
                "output directory {} is not empty",
                out.display()
            )));
        }
        fs::remove_dir(out)?;
    }
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    let staging = tempfile::Builder::new()
        .prefix(".complab-stage-")
        .tempdir_in(&parent)?;
    fill(staging.path())?;
    fs::rename(staging.keep(), out)?;
    Ok(())
}
