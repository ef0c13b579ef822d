//! Training configuration, loadable from a flat `key = value` file.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::MergePolicy;
use crate::losses::TermWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorMode {
    /// Cosine similarity against `mu`.
    Threshold,
    /// Logistic neighbor classifier trained on source pairs.
    Learned,
}

impl FromStr for PredictorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threshold" => Ok(Self::Threshold),
            "learned" => Ok(Self::Learned),
            other => Err(Error::Config(format!(
                "unknown predictor {other:?} (threshold|learned)"
            ))),
        }
    }
}

/// Merge policy name as it appears in config files and on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyName {
    Basic,
    MinCommon,
    Vote,
}

impl FromStr for PolicyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Self::Basic),
            "min-common" => Ok(Self::MinCommon),
            "vote" => Ok(Self::Vote),
            other => Err(Error::Config(format!(
                "unknown policy {other:?} (basic|min-common|vote)"
            ))),
        }
    }
}

/// Which target terms are trained. Source terms are always on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Neighbor-recognizing loss only (baseline).
    N,
    /// Neighbor + similarity-aggregating.
    Ns,
    /// Neighbor + target triplet.
    Nt,
    /// Neighbor + similarity-aggregating + target triplet (full method).
    Nst,
    /// Group terms without the neighbor loss.
    St,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::N,
        Ablation::Ns,
        Ablation::Nt,
        Ablation::Nst,
        Ablation::St,
    ];

    /// `(neighbor, aggre, triplet_tgt)`.
    pub fn switches(self) -> (bool, bool, bool) {
        match self {
            Ablation::N => (true, false, false),
            Ablation::Ns => (true, true, false),
            Ablation::Nt => (true, false, true),
            Ablation::Nst => (true, true, true),
            Ablation::St => (false, true, true),
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n" => Ok(Self::N),
            "ns" => Ok(Self::Ns),
            "nt" => Ok(Self::Nt),
            "nst" => Ok(Self::Nst),
            "st" => Ok(Self::St),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?} (n|ns|nt|nst|st)"
            ))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Ablation::N => "n",
            Ablation::Ns => "ns",
            Ablation::Nt => "nt",
            Ablation::Nst => "nst",
            Ablation::St => "st",
        };
        f.write_str(s)
    }
}

/// All training hyperparameters. Defaults follow the reference recipe
/// (`e1 = 5`, `e2 = 10`, 70 epochs, 8 x 4 batches, margin 0.3, `k = 200`,
/// Adam at 1.25e-4 dropped tenfold after epoch 40). [`TrainConfig::desk`]
/// adapts the optimizer and the pseudo-label settings to the shallow model
/// on small synthetic data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub e1: usize,
    pub e2: usize,
    pub epochs: usize,
    pub batch_p: usize,
    pub batch_k: usize,
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub tau: f64,
    /// Neighbor threshold; unset means 0.5 (learned) or 0.6 (threshold).
    pub mu: Option<f64>,
    pub momentum: f64,
    pub margin: f64,
    /// Candidate neighbors per sample.
    pub k: usize,
    pub seed: u64,
    pub predictor: PredictorMode,
    pub policy: PolicyName,
    pub min_common: usize,
    pub dbscan_min_pts: usize,
    pub dbscan_eps_percentile: f64,
    pub dbscan_max_points: usize,
    pub embed_dim: usize,
    pub model_bias: bool,
    pub jitter_sigma: f64,
    pub val_fraction: f64,
    pub target_fraction: f64,
    pub ablation: Ablation,
    pub gpp_lr: f64,
    pub gpp_context: usize,
    pub weight_softmax_src: f64,
    pub weight_triplet_src: f64,
    pub weight_neighbor: f64,
    pub weight_aggre: f64,
    pub weight_triplet_tgt: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            e1: 5,
            e2: 10,
            epochs: 70,
            batch_p: 8,
            batch_k: 4,
            lr: 1.25e-4,
            lr_drop_epoch: 40,
            lr_drop_factor: 0.1,
            tau: 0.05,
            mu: None,
            momentum: 0.5,
            margin: 0.3,
            k: 200,
            seed: 0,
            predictor: PredictorMode::Threshold,
            policy: PolicyName::Basic,
            min_common: 2,
            dbscan_min_pts: 4,
            dbscan_eps_percentile: 1.6,
            dbscan_max_points: 2000,
            embed_dim: 32,
            model_bias: true,
            jitter_sigma: 0.01,
            val_fraction: 0.1,
            target_fraction: 1.0,
            ablation: Ablation::Nst,
            gpp_lr: 1e-2,
            gpp_context: 8,
            weight_softmax_src: 1.0,
            weight_triplet_src: 1.0,
            weight_neighbor: 1.0,
            weight_aggre: 1.0,
            weight_triplet_tgt: 1.0,
        }
    }
}

/// `(key, description)` for every config key, for `--help` output.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    (
        "e1",
        "epochs of source-only training before the neighbor loss starts",
    ),
    ("e2", "epoch after which the group losses start"),
    ("epochs", "total epochs"),
    ("batch_p", "identities (or pseudo labels) per batch"),
    ("batch_k", "samples per identity in a batch"),
    ("lr", "Adam learning rate"),
    (
        "lr_drop_epoch",
        "epoch after which the learning rate is multiplied by lr_drop_factor",
    ),
    (
        "lr_drop_factor",
        "learning-rate multiplier after lr_drop_epoch",
    ),
    ("tau", "softmax temperature over the memory bank"),
    (
        "mu",
        "neighbor threshold (default 0.6 threshold mode, 0.5 learned mode)",
    ),
    ("momentum", "memory bank momentum in (0,1]"),
    ("margin", "triplet margin"),
    ("k", "candidate neighbors per sample"),
    ("seed", "random seed"),
    ("predictor", "threshold | learned"),
    ("policy", "basic | min-common | vote"),
    (
        "min_common",
        "shared neighbors required by the min-common policy",
    ),
    ("dbscan_min_pts", "DBSCAN min points for the group-size cap"),
    (
        "dbscan_eps_percentile",
        "DBSCAN eps as a percentile of pairwise cosine distances",
    ),
    (
        "dbscan_max_points",
        "bank entries sampled for the eps percentile",
    ),
    ("embed_dim", "embedding dimension"),
    ("model_bias", "linear embedding layer has a bias"),
    (
        "jitter_sigma",
        "std of Gaussian feature jitter during training",
    ),
    (
        "val_fraction",
        "fraction of target samples held out for validation",
    ),
    (
        "target_fraction",
        "fraction of the remaining target samples used for adaptation",
    ),
    ("ablation", "n | ns | nt | nst | st"),
    ("gpp_lr", "learning rate of the neighbor classifier"),
    (
        "gpp_context",
        "top candidates used for neighborhood features",
    ),
    ("weight_softmax_src", "loss weight"),
    ("weight_triplet_src", "loss weight"),
    ("weight_neighbor", "loss weight"),
    ("weight_aggre", "loss weight"),
    ("weight_triplet_tgt", "loss weight"),
];

impl TrainConfig {
    /// Settings for the shallow model on desk-scale synthetic data.
    pub fn desk() -> Self {
        Self {
            lr: 1e-2,
            epochs: 70,
            lr_drop_epoch: 40,
            k: 50,
            predictor: PredictorMode::Learned,
            mu: Some(0.97),
            dbscan_min_pts: 8,
            dbscan_eps_percentile: 0.8,
            ..Self::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let config: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn mu(&self) -> f64 {
        self.mu.unwrap_or(match self.predictor {
            PredictorMode::Learned => 0.5,
            PredictorMode::Threshold => 0.6,
        })
    }

    pub fn merge_policy(&self) -> MergePolicy {
        match self.policy {
            PolicyName::Basic => MergePolicy::Basic,
            PolicyName::MinCommon => MergePolicy::MinCommon(self.min_common),
            PolicyName::Vote => MergePolicy::TwoEpochVote,
        }
    }

    pub fn term_weights(&self) -> TermWeights {
        TermWeights {
            softmax_src: self.weight_softmax_src,
            triplet_src: self.weight_triplet_src,
            neighbor: self.weight_neighbor,
            aggre: self.weight_aggre,
            triplet_tgt: self.weight_triplet_tgt,
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.e1 <= self.e2 && self.e2 <= self.epochs) {
            return bad(format!(
                "need e1 <= e2 <= epochs, got {} {} {}",
                self.e1, self.e2, self.epochs
            ));
        }
        if self.batch_p < 2 || self.batch_k < 2 {
            return bad(format!(
                "need batch_p >= 2 and batch_k >= 2, got {} x {}",
                self.batch_p, self.batch_k
            ));
        }
        if !(self.lr > 0.0) || !(self.gpp_lr > 0.0) || !(self.tau > 0.0) {
            return bad("lr, gpp_lr and tau must be positive".into());
        }
        let mu = self.mu();
        if !(mu > 0.0 && mu < 1.0) {
            return bad(format!("mu must be in (0,1), got {mu}"));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return bad(format!("momentum must be in (0,1], got {}", self.momentum));
        }
        if self.k == 0 || self.min_common == 0 || self.dbscan_min_pts < 2 || self.embed_dim < 2 {
            return bad(
                "k, min_common >= 1, dbscan_min_pts >= 2 and embed_dim >= 2 are required".into(),
            );
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!(
                "val_fraction must be in (0,1), got {}",
                self.val_fraction
            ));
        }
        if !(self.target_fraction > 0.0 && self.target_fraction <= 1.0) {
            return bad(format!(
                "target_fraction must be in (0,1], got {}",
                self.target_fraction
            ));
        }
        if !(self.jitter_sigma >= 0.0)
            || !(self.margin >= 0.0)
            || !(self.dbscan_eps_percentile > 0.0)
        {
            return bad("jitter_sigma, margin must be >= 0 and dbscan_eps_percentile > 0".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.e1, c.e2, c.epochs), (5, 10, 70));
        assert_eq!((c.batch_p, c.batch_k), (8, 4));
        assert_eq!(c.margin, 0.3);
        assert_eq!(c.k, 200);
        assert_eq!(c.lr, 1.25e-4);
        assert_eq!(c.lr_drop_epoch, 40);
        assert_eq!(c.mu(), 0.6);
        assert_eq!(
            TrainConfig {
                predictor: PredictorMode::Learned,
                ..c
            }
            .mu(),
            0.5
        );
    }

    #[test]
    fn parses_flat_file() {
        let c = TrainConfig::from_toml_str("e1 = 2\ne2 = 4\nepochs = 6\npredictor = \"learned\"\npolicy = \"min-common\"\nablation = \"ns\"\n").unwrap();
        assert_eq!(c.e1, 2);
        assert_eq!(c.predictor, PredictorMode::Learned);
        assert_eq!(c.merge_policy(), MergePolicy::MinCommon(2));
        assert_eq!(c.ablation, Ablation::Ns);
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_toml_str("e1 = 9\ne2 = 3").is_err());
        assert!(TrainConfig::from_toml_str("unknown_key = 1").is_err());
        assert!(TrainConfig::from_toml_str("mu = 1.5").is_err());
        assert!(TrainConfig::from_toml_str("batch_k = 1").is_err());
    }

    #[test]
    fn every_field_is_documented() {
        let text = TrainConfig {
            mu: Some(0.5),
            ..TrainConfig::default()
        }
        .to_toml_string();
        let keys: Vec<&str> = text.lines().filter_map(|l| l.split(" = ").next()).collect();
        assert_eq!(keys.len(), CONFIG_KEYS.len());
        for k in keys {
            assert!(
                CONFIG_KEYS.iter().any(|(name, _)| *name == k),
                "undocumented key {k}"
            );
        }
    }
}
