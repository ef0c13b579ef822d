//! Staged joint training.
//!
//! Every epoch: rebuild the group pseudo labels from the neighbor memory,
//! then iterate paired source/target P x K batches. Source batches train the
//! classifier head, the source triplet term and the neighbor classifier.
//! After `e1` epochs target batches predict reliable neighbors and add the
//! neighbor loss; after `e2` the group losses join. The bank is refreshed
//! from the post-step embeddings of the target samples in each batch. The
//! model with the best validation mAP is kept.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{PredictorMode, TrainConfig};
use crate::data::Dataset;
use crate::embedding::MemoryBank;
use crate::error::{Error, Result};
use crate::eval::{
    group_pair_quality, neighbor_pair_quality, retrieval_eval, MetricsReport, RetrievalSet,
};
use crate::groups::{dbscan, eps_from_percentile, merge_groups, DbscanParams, GroupPartition};
use crate::losses::{
    aggre_loss_with, neighbor_loss_with, source_softmax, target_probs, total_loss,
    triplet_batch_hard, ActiveTerms, LossParts,
};
use crate::model::{EmbeddingModel, Forward, LinearHead};
use crate::neighbors::{
    candidates, predict_learned, predict_threshold, GppLite, NeighborMemory, NeighborSet,
};
use crate::optim::Adam;
use crate::sampler::pk_sample_pass;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CMPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Deterministic split of the target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSplit {
    /// Held-out validation queries (target dataset indices).
    pub val: Vec<usize>,
    /// All non-validation samples; the evaluation gallery.
    pub pool: Vec<usize>,
    /// Samples used for adaptation; bank entry `b` is sample `train[b]`.
    pub train: Vec<usize>,
}

impl TargetSplit {
    pub fn new(n: usize, val_fraction: f64, target_fraction: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let n_val =
            ((n as f64 * val_fraction).ceil() as usize).clamp(1, n.saturating_sub(2).max(1));
        let mut val = order[..n_val].to_vec();
        let rest = &order[n_val..];
        let n_train = ((rest.len() as f64 * target_fraction).round() as usize).min(rest.len());
        if n_train < 2 {
            return Err(Error::Data(format!(
                "only {n_train} target samples left for adaptation"
            )));
        }
        let mut train = rest[..n_train].to_vec();
        let mut pool = rest.to_vec();
        val.sort_unstable();
        train.sort_unstable();
        pool.sort_unstable();
        Ok(Self { val, pool, train })
    }
}

const SPLIT_SALT: u64 = 0x5eed_5171;

/// One line of the metrics history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub active: ActiveTerms,
    /// Mean of each term over the epoch's steps.
    pub losses: LossParts,
    pub total: f64,
    pub groups: usize,
    pub group_cap: usize,
    pub max_group_size: usize,
    /// Validation retrieval and pseudo-label quality, when ground truth is known.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metrics: Option<MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestModel {
    pub epoch: usize,
    pub map: f64,
    pub model: EmbeddingModel,
}

/// Result of a complete run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub best: Option<BestModel>,
    pub history: Vec<EpochRecord>,
}

impl RunSummary {
    pub fn best_map(&self) -> f64 {
        self.best.as_ref().map_or(0.0, |b| b.map)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Corrupt("bad rng position".into()))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Serialized trainer state, minus the datasets and the bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointBody {
    config: TrainConfig,
    source_dim: usize,
    source_len: usize,
    target_len: usize,
    split: TargetSplit,
    model: EmbeddingModel,
    head: LinearHead,
    optimizer: Adam,
    gpp: GppLite,
    memory: NeighborMemory,
    partition: GroupPartition,
    bank_fresh: bool,
    epoch: usize,
    history: Vec<EpochRecord>,
    best: Option<BestModel>,
    rng: RngState,
}

pub struct Trainer {
    config: TrainConfig,
    source: Vec<Vec<f64>>,
    /// Source identities remapped to `0..M`.
    source_labels: Vec<usize>,
    target: Vec<Vec<f64>>,
    target_truth: Option<Vec<usize>>,
    split: TargetSplit,
    model: EmbeddingModel,
    head: LinearHead,
    optimizer: Adam,
    gpp: GppLite,
    bank: MemoryBank,
    /// Whether the bank has been refreshed from the model for target training.
    bank_fresh: bool,
    memory: NeighborMemory,
    partition: GroupPartition,
    rng: ChaCha8Rng,
    epoch: usize,
    history: Vec<EpochRecord>,
    best: Option<BestModel>,
}

fn remap_labels(raw: &[usize]) -> (Vec<usize>, usize) {
    let mut sorted: Vec<usize> = raw.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let labels = raw
        .iter()
        .map(|l| sorted.binary_search(l).expect("present"))
        .collect();
    (labels, sorted.len())
}

impl Trainer {
    pub fn new(source: &Dataset, target: &Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let source_ids = source
            .identities()
            .ok_or_else(|| Error::Data("source dataset needs identity labels".into()))?;
        if source.dim() != target.dim() {
            return Err(Error::DimensionMismatch {
                expected: source.dim(),
                got: target.dim(),
            });
        }
        let (source_labels, classes) = remap_labels(&source_ids);
        if classes < config.batch_p {
            return Err(Error::NotEnoughLabels {
                needed: config.batch_p,
                available: classes,
            });
        }
        let split = TargetSplit::new(
            target.len(),
            config.val_fraction,
            config.target_fraction,
            config.seed,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model =
            EmbeddingModel::new(source.dim(), config.embed_dim, config.model_bias, &mut rng)?;
        let head = LinearHead::new(classes, config.embed_dim, &mut rng);
        let optimizer = Adam::new(model.num_params() + head.num_params(), config.lr);
        let gpp = GppLite::new(config.gpp_context, config.gpp_lr);
        let rows: Vec<Vec<f64>> = split
            .train
            .iter()
            .map(|&t| model.embed(&target.features[t]))
            .collect::<Result<_>>()?;
        let bank = MemoryBank::from_rows(&rows, config.momentum)?;
        let n_train = split.train.len();
        let keep_previous = matches!(config.policy, crate::config::PolicyName::Vote);
        Ok(Self {
            source: source.features.clone(),
            source_labels,
            target: target.features.clone(),
            target_truth: target.identities(),
            split,
            model,
            head,
            optimizer,
            gpp,
            bank,
            bank_fresh: false,
            memory: NeighborMemory::new(n_train, keep_previous),
            partition: GroupPartition::singletons(n_train),
            rng,
            epoch: 0,
            history: Vec::new(),
            best: None,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn model(&self) -> &EmbeddingModel {
        &self.model
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn memory(&self) -> &NeighborMemory {
        &self.memory
    }

    pub fn partition(&self) -> &GroupPartition {
        &self.partition
    }

    pub fn split(&self) -> &TargetSplit {
        &self.split
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn best(&self) -> Option<&BestModel> {
        self.best.as_ref()
    }

    /// Ground-truth identities of the bank entries, when known.
    pub fn train_truth(&self) -> Option<Vec<usize>> {
        self.target_truth
            .as_ref()
            .map(|t| self.split.train.iter().map(|&i| t[i]).collect())
    }

    pub fn run(mut self) -> Result<RunSummary> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(self.into_summary())
    }

    pub fn into_summary(self) -> RunSummary {
        RunSummary {
            best: self.best,
            history: self.history,
        }
    }

    fn current_lr(&self, epoch: usize) -> f64 {
        if epoch > self.config.lr_drop_epoch {
            self.config.lr * self.config.lr_drop_factor
        } else {
            self.config.lr
        }
    }

    fn active_terms(&self, epoch: usize) -> ActiveTerms {
        let (n, s, t) = self.config.ablation.switches();
        let mut a = ActiveTerms::for_epoch(epoch, self.config.e1, self.config.e2);
        a.neighbor &= n;
        a.aggre &= s;
        a.triplet_tgt &= t;
        a
    }

    fn uses_target(&self, epoch: usize) -> bool {
        epoch > self.config.e1
    }

    fn jittered(&mut self, x: &[f64]) -> Vec<f64> {
        let sigma = self.config.jitter_sigma;
        if sigma == 0.0 {
            return x.to_vec();
        }
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        x.iter().map(|v| v + normal.sample(&mut self.rng)).collect()
    }

    fn refresh_bank(&mut self) -> Result<()> {
        let rows: Vec<Vec<f64>> = self
            .split
            .train
            .iter()
            .map(|&t| self.model.embed(&self.target[t]))
            .collect::<Result<_>>()?;
        self.bank = MemoryBank::from_rows(&rows, self.config.momentum)?;
        Ok(())
    }

    /// Group pseudo labels from the neighbor memory, capped by DBSCAN's
    /// largest cluster on the bank.
    fn rebuild_groups(&mut self) -> Result<()> {
        let eps = eps_from_percentile(
            &self.bank,
            self.config.dbscan_eps_percentile,
            self.config.dbscan_max_points,
        );
        let params = DbscanParams::new(eps, self.config.dbscan_min_pts)?;
        let cap = dbscan(&self.bank, params).max_cluster_size;
        self.partition = merge_groups(&self.memory, cap, self.config.merge_policy())?;
        debug!(
            "epoch {}: eps {eps:.4}, cap {cap}, {} groups",
            self.epoch + 1,
            self.partition.num_groups()
        );
        Ok(())
    }

    fn predict_neighbors(&self, i: usize) -> Result<NeighborSet> {
        let k = self.config.k.min(self.bank.len() - 1);
        if k == 0 {
            return Ok(NeighborSet::singleton(i));
        }
        let c = candidates(&self.bank, i, k)?;
        match self.config.predictor {
            PredictorMode::Threshold => Ok(predict_threshold(&c, self.config.mu())),
            PredictorMode::Learned => predict_learned(&self.gpp, &c, &self.bank, self.config.mu()),
        }
    }

    /// Runs one epoch and appends its record to the history.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let epoch = self.epoch + 1;
        match self.epoch_body(epoch) {
            Err(Error::DegenerateEmbedding) => Err(Error::Divergence {
                epoch,
                what: "an embedding collapsed to zero or non-finite norm".into(),
            }),
            other => other,
        }
    }

    fn epoch_body(&mut self, epoch: usize) -> Result<&EpochRecord> {
        let lr = self.current_lr(epoch);
        self.optimizer.lr = lr;
        let active = self.active_terms(epoch);
        let use_target = self.uses_target(epoch);

        if use_target && !self.bank_fresh {
            self.refresh_bank()?;
            self.bank_fresh = true;
        }
        if use_target {
            self.rebuild_groups()?;
        }
        self.memory.advance_epoch();

        let (p, k) = (self.config.batch_p, self.config.batch_k);
        let source_batches = pk_sample_pass(&self.source_labels, p, k, &mut self.rng)?;
        let target_batches = if use_target {
            pk_sample_pass(
                &self.partition.labels,
                p.min(self.partition.num_groups()),
                k,
                &mut self.rng,
            )?
        } else {
            Vec::new()
        };
        let steps = source_batches.len().max(target_batches.len());
        let mut sums = LossParts::default();
        for step in 0..steps {
            let src = &source_batches[step % source_batches.len()];
            let tgt =
                (!target_batches.is_empty()).then(|| &target_batches[step % target_batches.len()]);
            let parts = self.train_step(active, src, tgt.map(Vec::as_slice))?;
            if !parts.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    what: format!("non-finite loss at step {step}: {parts:?}"),
                });
            }
            sums.softmax_src += parts.softmax_src;
            sums.triplet_src += parts.triplet_src;
            sums.gpp += parts.gpp;
            sums.neighbor += parts.neighbor;
            sums.aggre += parts.aggre;
            sums.triplet_tgt += parts.triplet_tgt;
        }
        if !self.model.is_finite() {
            return Err(Error::Divergence {
                epoch,
                what: "non-finite model parameters".into(),
            });
        }
        let inv = 1.0 / steps as f64;
        let losses = LossParts {
            softmax_src: sums.softmax_src * inv,
            triplet_src: sums.triplet_src * inv,
            gpp: sums.gpp * inv,
            neighbor: sums.neighbor * inv,
            aggre: sums.aggre * inv,
            triplet_tgt: sums.triplet_tgt * inv,
        };
        let metrics = self.evaluate()?;
        self.epoch = epoch;
        if let Some(m) = &metrics {
            if self.best.as_ref().is_none_or(|b| m.map > b.map) {
                self.best = Some(BestModel {
                    epoch,
                    map: m.map,
                    model: self.model.clone(),
                });
            }
        }
        let record = EpochRecord {
            epoch,
            lr,
            steps,
            active,
            total: total_loss(active, &losses, &self.config.term_weights()),
            losses,
            groups: self.partition.num_groups(),
            group_cap: self.partition.cap,
            max_group_size: self.partition.max_group_size(),
            metrics,
        };
        info!(
            "epoch {epoch}: total {:.4}, mAP {}",
            record.total,
            record
                .metrics
                .as_ref()
                .map_or("n/a".to_string(), |m| format!("{:.4}", m.map))
        );
        self.history.push(record);
        Ok(self.history.last().expect("just pushed"))
    }

    fn train_step(
        &mut self,
        active: ActiveTerms,
        src: &[usize],
        tgt: Option<&[usize]>,
    ) -> Result<LossParts> {
        let weights = self.config.term_weights();
        let n_model = self.model.num_params();
        let mut grad = vec![0.0; n_model + self.head.num_params()];
        let mut parts = LossParts::default();

        // Source branch.
        let src_inputs: Vec<Vec<f64>> = src.iter().map(|&i| self.source[i].clone()).collect();
        let src_inputs: Vec<Vec<f64>> = src_inputs.iter().map(|x| self.jittered(x)).collect();
        let src_fwd: Vec<Forward> = src_inputs
            .iter()
            .map(|x| self.model.forward(x))
            .collect::<Result<_>>()?;
        let src_emb: Vec<Vec<f64>> = src_fwd.iter().map(|f| f.embedding.clone()).collect();
        let src_labels: Vec<usize> = src.iter().map(|&i| self.source_labels[i]).collect();
        let mut src_grads = vec![vec![0.0; self.model.d_out]; src.len()];
        let inv = 1.0 / src.len() as f64;
        if active.softmax_src {
            for (pos, (f, &y)) in src_emb.iter().zip(&src_labels).enumerate() {
                let r = source_softmax(&self.head, f, y)?;
                parts.softmax_src += r.value * inv;
                let w = weights.softmax_src * inv;
                src_grads[pos]
                    .iter_mut()
                    .zip(&r.grad_embedding)
                    .for_each(|(g, d)| *g += w * d);
                grad[n_model..]
                    .iter_mut()
                    .zip(&r.grad_head)
                    .for_each(|(g, d)| *g += w * d);
            }
        }
        if active.triplet_src {
            let r = triplet_batch_hard(&src_emb, &src_labels, self.config.margin)?;
            parts.triplet_src = r.value;
            for (g, d) in src_grads.iter_mut().zip(&r.grads) {
                g.iter_mut()
                    .zip(d)
                    .for_each(|(a, b)| *a += weights.triplet_src * b);
            }
        }
        for ((x, fwd), g) in src_inputs.iter().zip(&src_fwd).zip(&src_grads) {
            self.model.backward(x, fwd, g, &mut grad[..n_model]);
        }
        // The neighbor classifier trains on detached source embeddings, with
        // candidates drawn from the whole source set as at prediction time.
        if active.gpp {
            let pool: Vec<Vec<f64>> = self
                .source
                .par_iter()
                .map(|x| self.model.embed(x))
                .collect::<Result<_>>()?;
            let mut queries = src.to_vec();
            queries.sort_unstable();
            queries.dedup();
            let (loss, g) =
                self.gpp
                    .loss_and_grad_pool(&queries, &pool, &self.source_labels, self.config.k)?;
            self.gpp.apply_gradient(&g);
            parts.gpp = loss;
        }

        // Target branch.
        let mut unique: Vec<usize> = Vec::new();
        if let Some(tgt) = tgt {
            unique = tgt.to_vec();
            unique.sort_unstable();
            unique.dedup();
            for &i in &unique {
                let set = self.predict_neighbors(i)?;
                self.memory.record(set)?;
            }
            let tgt_inputs: Vec<Vec<f64>> = tgt
                .iter()
                .map(|&b| self.target[self.split.train[b]].clone())
                .collect::<Vec<_>>()
                .iter()
                .map(|x| self.jittered(x))
                .collect();
            let tgt_fwd: Vec<Forward> = tgt_inputs
                .iter()
                .map(|x| self.model.forward(x))
                .collect::<Result<_>>()?;
            let tgt_emb: Vec<Vec<f64>> = tgt_fwd.iter().map(|f| f.embedding.clone()).collect();
            let mut tgt_grads = vec![vec![0.0; self.model.d_out]; tgt.len()];

            if active.neighbor || active.aggre {
                let bank = &self.bank;
                let memory = &self.memory;
                let partition = &self.partition;
                let tau = self.config.tau;
                let per_pos: Vec<_> = tgt
                    .par_iter()
                    .zip(&tgt_emb)
                    .map(|(&i, f)| {
                        let probs = target_probs(f, bank, tau);
                        let nb = active
                            .neighbor
                            .then(|| neighbor_loss_with(&probs, memory.get(i), bank));
                        let ag = if active.aggre {
                            aggre_loss_with(&probs, i, partition.group_of(i), bank)
                        } else {
                            None
                        };
                        (nb, ag)
                    })
                    .collect();
                let n_pos = tgt.len() as f64;
                let n_aggre = per_pos.iter().filter(|(_, a)| a.is_some()).count();
                for (g, (nb, ag)) in tgt_grads.iter_mut().zip(&per_pos) {
                    if let Some(r) = nb {
                        parts.neighbor += r.value / n_pos;
                        let w = weights.neighbor / n_pos;
                        g.iter_mut().zip(&r.grad).for_each(|(a, b)| *a += w * b);
                    }
                    if let Some(r) = ag {
                        parts.aggre += r.value / n_aggre as f64;
                        let w = weights.aggre / n_aggre as f64;
                        g.iter_mut().zip(&r.grad).for_each(|(a, b)| *a += w * b);
                    }
                }
            }
            if active.triplet_tgt {
                let labels: Vec<usize> = tgt.iter().map(|&i| self.partition.labels[i]).collect();
                let r = triplet_batch_hard(&tgt_emb, &labels, self.config.margin)?;
                parts.triplet_tgt = r.value;
                for (g, d) in tgt_grads.iter_mut().zip(&r.grads) {
                    g.iter_mut()
                        .zip(d)
                        .for_each(|(a, b)| *a += weights.triplet_tgt * b);
                }
            }
            for ((x, fwd), g) in tgt_inputs.iter().zip(&tgt_fwd).zip(&tgt_grads) {
                self.model.backward(x, fwd, g, &mut grad[..n_model]);
            }
        }

        if !parts.all_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Ok(LossParts {
                softmax_src: f64::NAN,
                ..parts
            });
        }
        let mut params = self.model.params();
        params.extend(self.head.params());
        self.optimizer.step(&mut params, &grad);
        self.model.set_params(&params[..n_model]);
        self.head.set_params(&params[n_model..]);

        for &i in &unique {
            let f = self.model.embed(&self.target[self.split.train[i]])?;
            self.bank.update(i, &f)?;
        }
        Ok(parts)
    }

    /// Embeddings of target dataset samples under the current model.
    pub fn embed_target(&self, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
        indices
            .iter()
            .map(|&i| self.model.embed(&self.target[i]))
            .collect()
    }

    /// Validation retrieval (queries: held-out split, gallery: all other
    /// target samples) and pseudo-label quality on the adaptation samples.
    pub fn evaluate(&self) -> Result<Option<MetricsReport>> {
        let Some(truth) = &self.target_truth else {
            return Ok(None);
        };
        let q_emb = self.embed_target(&self.split.val)?;
        let g_emb = self.embed_target(&self.split.pool)?;
        let q_labels: Vec<usize> = self.split.val.iter().map(|&i| truth[i]).collect();
        let g_labels: Vec<usize> = self.split.pool.iter().map(|&i| truth[i]).collect();
        let query = RetrievalSet::new(&q_emb, &q_labels, &self.split.val)?;
        let gallery = RetrievalSet::new(&g_emb, &g_labels, &self.split.pool)?;
        let mut report = MetricsReport::from_retrieval(&retrieval_eval(&query, &gallery));
        let train_truth = self.train_truth().expect("truth present");
        report.neighbor = Some(neighbor_pair_quality(self.memory.sets(), &train_truth)?);
        report.group = Some(group_pair_quality(&self.partition, &train_truth)?);
        Ok(Some(report))
    }

    /// Replaces the group partition from the current memory and bank, e.g.
    /// for inspecting labels after training.
    pub fn regroup(&mut self) -> Result<&GroupPartition> {
        self.rebuild_groups()?;
        Ok(&self.partition)
    }

    /// Fills the neighbor memory for every adaptation sample from the bank.
    pub fn predict_all_neighbors(&mut self) -> Result<()> {
        for i in 0..self.bank.len() {
            let set = self.predict_neighbors(i)?;
            self.memory.record(set)?;
        }
        Ok(())
    }

    /// Marks the neighbor classifier ready without training (threshold-free use).
    pub fn gpp_mut(&mut self) -> &mut GppLite {
        &mut self.gpp
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let body = CheckpointBody {
            config: self.config.clone(),
            source_dim: self.model.d_in,
            source_len: self.source.len(),
            target_len: self.target.len(),
            split: self.split.clone(),
            model: self.model.clone(),
            head: self.head.clone(),
            optimizer: self.optimizer.clone(),
            gpp: self.gpp.clone(),
            memory: self.memory.clone(),
            partition: self.partition.clone(),
            bank_fresh: self.bank_fresh,
            epoch: self.epoch,
            history: self.history.clone(),
            best: self.best.clone(),
            rng: RngState::capture(&self.rng),
        };
        let json = serde_json::to_vec(&body)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        self.bank.write_to(&mut w)?;
        Ok(())
    }

    pub fn load(path: &Path, source: &Dataset, target: &Dataset) -> Result<Self> {
        Self::read_checkpoint(BufReader::new(File::open(path)?), source, target)
    }

    pub fn read_checkpoint<R: Read>(mut r: R, source: &Dataset, target: &Dataset) -> Result<Self> {
        let body = read_body(&mut r)?;
        let bank = MemoryBank::read_from(&mut r)?;
        if source.dim() != body.source_dim || target.dim() != body.source_dim {
            return Err(Error::DimensionMismatch {
                expected: body.source_dim,
                got: source.dim().max(target.dim()),
            });
        }
        if source.len() != body.source_len || target.len() != body.target_len {
            return Err(Error::Data(format!(
                "checkpoint was trained on {} source / {} target samples, got {} / {}",
                body.source_len,
                body.target_len,
                source.len(),
                target.len()
            )));
        }
        if bank.len() != body.split.train.len() || bank.dim() != body.model.d_out {
            return Err(Error::Corrupt(
                "bank shape does not match the checkpoint".into(),
            ));
        }
        let source_ids = source
            .identities()
            .ok_or_else(|| Error::Data("source dataset needs identity labels".into()))?;
        let (source_labels, _) = remap_labels(&source_ids);
        Ok(Self {
            source: source.features.clone(),
            source_labels,
            target: target.features.clone(),
            target_truth: target.identities(),
            split: body.split,
            model: body.model,
            head: body.head,
            optimizer: body.optimizer,
            gpp: body.gpp,
            bank,
            bank_fresh: body.bank_fresh,
            memory: body.memory,
            partition: body.partition,
            rng: body.rng.restore()?,
            epoch: body.epoch,
            history: body.history,
            best: body.best,
            config: body.config,
        })
    }
}

fn read_body<R: Read>(r: &mut R) -> Result<CheckpointBody> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)
        .map_err(|_| Error::Corrupt("truncated checkpoint header".into()))?;
    if &head[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("not a trainer checkpoint".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes"));
    if len > 1 << 32 {
        return Err(Error::Corrupt(format!(
            "implausible checkpoint body of {len} bytes"
        )));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)
        .map_err(|_| Error::Corrupt("truncated checkpoint body".into()))?;
    serde_json::from_slice(&json).map_err(|e| Error::Corrupt(format!("checkpoint body: {e}")))
}

/// Reads only the model stored in a checkpoint: the best model when one was
/// recorded, otherwise the latest.
pub fn load_best_model(path: &Path) -> Result<EmbeddingModel> {
    let mut r = BufReader::new(File::open(path)?);
    let body = read_body(&mut r)?;
    Ok(body.best.map(|b| b.model).unwrap_or(body.model))
}

/// The parts of a checkpoint needed to use it without its training data.
#[derive(Clone, Debug)]
pub struct CheckpointInfo {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Best model when one was recorded, otherwise the latest.
    pub model: EmbeddingModel,
    pub gpp: GppLite,
    pub history: Vec<EpochRecord>,
    pub best: Option<BestModel>,
}

pub fn read_checkpoint_info(path: &Path) -> Result<CheckpointInfo> {
    let mut r = BufReader::new(File::open(path)?);
    let body = read_body(&mut r)?;
    Ok(CheckpointInfo {
        config: body.config,
        epoch: body.epoch,
        model: body.best.as_ref().map_or(body.model, |b| b.model.clone()),
        gpp: body.gpp,
        history: body.history,
        best: body.best,
    })
}

/// Pseudo labels for `features` under a checkpoint: one round of neighbor
/// prediction on the embedded set, then capped group merging. A checkpoint
/// that has not reached the neighbor stage yields singletons.
pub fn pseudo_labels(
    info: &CheckpointInfo,
    features: &[Vec<f64>],
) -> Result<(NeighborMemory, GroupPartition)> {
    let n = features.len();
    let mut memory = NeighborMemory::new(n, false);
    if info.epoch <= info.config.e1 || n < 2 {
        return Ok((memory, GroupPartition::singletons(n)));
    }
    let rows: Vec<Vec<f64>> = features
        .par_iter()
        .map(|x| info.model.embed(x))
        .collect::<Result<_>>()?;
    let bank = MemoryBank::from_rows(&rows, info.config.momentum)?;
    let k = info.config.k.min(n - 1);
    let mu = info.config.mu();
    let sets: Vec<NeighborSet> = (0..n)
        .into_par_iter()
        .map(|i| {
            let c = candidates(&bank, i, k)?;
            match info.config.predictor {
                PredictorMode::Threshold => Ok(predict_threshold(&c, mu)),
                PredictorMode::Learned => predict_learned(&info.gpp, &c, &bank, mu),
            }
        })
        .collect::<Result<_>>()?;
    for set in sets {
        memory.record(set)?;
    }
    let eps = eps_from_percentile(
        &bank,
        info.config.dbscan_eps_percentile,
        info.config.dbscan_max_points,
    );
    let params = DbscanParams::new(eps, info.config.dbscan_min_pts)?;
    let cap = dbscan(&bank, params).max_cluster_size;
    let partition = merge_groups(&memory, cap, info.config.merge_policy())?;
    Ok((memory, partition))
}

/// Convenience: train `config` on a dataset pair to completion.
pub fn train(source: &Dataset, target: &Dataset, config: TrainConfig) -> Result<RunSummary> {
    Trainer::new(source, target, config)?.run()
}
