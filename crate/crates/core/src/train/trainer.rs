use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corelin::{mix64, RngSnapshot, SeededRng};
use crate::data::{sample_pairs_for, InteractionTensor, PairBatch, TargetIndex};
use crate::diag::OpCounters;
use crate::error::{Error, Result};
use crate::graph::{build_adjacency, BehaviorAdjacency, Side};
use crate::model::{forward, Corruption, ForwardState, ModelDims, ModelParams};

use super::objective::{loss_and_grad, LossBreakdown};
use super::optim::{adam_step, sgd_step, AdamState};
use super::{OptimizerKind, TrainConfig};

pub const CHECKPOINT_FORMAT: &str = "mixrec-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Summed over the epoch's batches.
    pub loss: LossBreakdown,
    pub batches: usize,
    pub pairs: usize,
    /// Distinct users and items per batch, summed over the epoch.
    pub batch_users: usize,
    pub batch_items: usize,
    pub counters: OpCounters,
    #[serde(skip)]
    pub wall_secs: f64,
}

/// Fingerprint of a training tensor, stored in checkpoints so a resume
/// against different data is refused.
pub fn tensor_fingerprint(t: &InteractionTensor) -> u64 {
    let mut h = mix64((t.num_users() as u64) << 32 ^ t.num_items() as u64);
    h = mix64(h ^ t.num_behaviors() as u64 ^ (t.target_behavior() as u64) << 16);
    for x in t.triples() {
        h = mix64(h ^ (x.user as u64) << 40 ^ (x.item as u64) << 8 ^ x.behavior as u64);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub config_hash: String,
    pub dims: ModelDims,
    pub data_fingerprint: u64,
    pub epoch: usize,
    pub step: u64,
    pub tables: Vec<crate::corelin::DenseMatrix>,
    pub optimizer: AdamState,
    pub rngs: Vec<RngSnapshot>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let tmp = path.as_ref().with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        Ok(c)
    }
}

/// Owns parameters, optimizer state and random streams for one run.
pub struct Trainer {
    cfg: TrainConfig,
    adj: BehaviorAdjacency,
    index: TargetIndex,
    train_users: Vec<usize>,
    fingerprint: u64,
    params: ModelParams,
    adam: AdamState,
    order_rng: SeededRng,
    pair_rng: SeededRng,
    corruption_rng: SeededRng,
    epoch: usize,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, train: &InteractionTensor) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::EmptyDataset("no training interactions".into()));
        }
        let dims = cfg.dims(
            train.num_users(),
            train.num_items(),
            train.num_behaviors(),
            train.target_behavior(),
        );
        let params = ModelParams::init(&dims, &mut SeededRng::new(cfg.seed, "init"))?;
        Self::assemble(cfg, train, params, None, 0, 0, None)
    }

    fn assemble(
        cfg: TrainConfig,
        train: &InteractionTensor,
        params: ModelParams,
        adam: Option<AdamState>,
        epoch: usize,
        step: u64,
        rngs: Option<&[RngSnapshot]>,
    ) -> Result<Self> {
        let index = TargetIndex::new(train);
        let train_users: Vec<usize> = (0..train.num_users())
            .filter(|&u| !index.items(u).is_empty())
            .collect();
        if train_users.is_empty() {
            return Err(Error::EmptyDataset(
                "no user has a target-behavior interaction".into(),
            ));
        }
        let (order_rng, pair_rng, corruption_rng) = match rngs {
            Some([a, b, c]) => (
                SeededRng::restore(a)?,
                SeededRng::restore(b)?,
                SeededRng::restore(c)?,
            ),
            Some(_) => {
                return Err(Error::Config(
                    "checkpoint must hold three rng streams".into(),
                ))
            }
            None => (
                SeededRng::new(cfg.seed, "epoch-order"),
                SeededRng::new(cfg.seed, "pairs"),
                SeededRng::new(cfg.seed, "corruption"),
            ),
        };
        Ok(Self {
            adam: adam.unwrap_or_else(|| AdamState::new(&params)),
            adj: build_adjacency(train),
            index,
            train_users,
            fingerprint: tensor_fingerprint(train),
            params,
            cfg,
            order_rng,
            pair_rng,
            corruption_rng,
            epoch,
            step,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, train: &InteractionTensor) -> Result<Self> {
        if ckpt.data_fingerprint != tensor_fingerprint(train) {
            return Err(Error::Data(
                "checkpoint was trained on a different dataset".into(),
            ));
        }
        if ckpt.config.hash() != ckpt.config_hash {
            return Err(Error::Config("checkpoint config hash mismatch".into()));
        }
        ckpt.config.validate()?;
        let params = ModelParams::from_tables(&ckpt.dims, ckpt.tables.clone())?;
        Self::assemble(
            ckpt.config.clone(),
            train,
            params,
            Some(ckpt.optimizer.clone()),
            ckpt.epoch,
            ckpt.step,
            Some(&ckpt.rngs),
        )
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            config_hash: self.cfg.hash(),
            dims: self.params.dims().clone(),
            data_fingerprint: self.fingerprint,
            epoch: self.epoch,
            step: self.step,
            tables: self.params.tables().to_vec(),
            optimizer: self.adam.clone(),
            rngs: vec![
                self.order_rng.snapshot(),
                self.pair_rng.snapshot(),
                self.corruption_rng.snapshot(),
            ],
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn adjacency(&self) -> &BehaviorAdjacency {
        &self.adj
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Dropout-free, corruption-free forward pass for scoring.
    pub fn scoring_state(&self) -> Result<ForwardState> {
        let opts = self
            .cfg
            .forward_options(self.params.dims().num_behaviors, false);
        forward(&self.params, &self.adj, &opts, 0, Corruption::Off)
    }

    fn mask_key(&self) -> u64 {
        mix64(mix64(self.cfg.seed ^ 0x6d61_736b) ^ self.step)
    }

    fn contrastive_macs(&self, batch: &PairBatch) -> u64 {
        let dims = self.params.dims();
        if !self.cfg.node_cl_active(dims.num_behaviors) {
            return 0;
        }
        let cc = self.cfg.contrast();
        let mut total = 0u64;
        for side in Side::BOTH {
            if !cc.node_sides.contains(side) {
                continue;
            }
            let rows = match side {
                Side::User => batch.users().len(),
                Side::Item => batch.items().len(),
            } as u64;
            let negs = if cc.full_denominator {
                dims.num_nodes(side) as u64
            } else {
                rows
            };
            total += rows * negs * dims.dim as u64 * dims.layers as u64;
        }
        total
    }

    /// One pass over every user with target interactions, in shuffled
    /// batches. On a non-finite loss or parameter the epoch-start
    /// parameters are restored and `Divergence` is returned.
    pub fn train_epoch(&mut self) -> Result<EpochStats> {
        let started = Instant::now();
        let last_good = (self.params.clone(), self.adam.clone());
        let mut users = self.train_users.clone();
        users.shuffle(&mut self.order_rng);
        let nk = self.params.dims().num_behaviors;
        let fopts = self.cfg.forward_options(nk, true);
        let mut stats = EpochStats {
            epoch: self.epoch + 1,
            loss: LossBreakdown::default(),
            batches: 0,
            pairs: 0,
            batch_users: 0,
            batch_items: 0,
            counters: OpCounters::default(),
            wall_secs: 0.0,
        };
        for chunk in users.chunks(self.cfg.batch_size) {
            let batch = sample_pairs_for(
                &self.index,
                chunk,
                self.cfg.pairs_per_user,
                &mut self.pair_rng,
            )?;
            let key = self.mask_key();
            let outcome = forward(
                &self.params,
                &self.adj,
                &fopts,
                key,
                Corruption::Sample(&mut self.corruption_rng),
            )
            .and_then(|state| {
                let (loss, grads) =
                    loss_and_grad(&state, &self.params, &self.adj, &batch, &self.cfg)?;
                Ok((state.counters, loss, grads))
            });
            let (counters, loss, grads) = match outcome {
                Ok(v) if v.1.is_finite() => v,
                Ok(_) | Err(Error::Overflow(_)) => return Err(self.diverged(last_good)),
                Err(e) => return Err(e),
            };
            match self.cfg.optimizer {
                OptimizerKind::Adam => {
                    adam_step(&mut self.params, &grads, &mut self.adam, self.cfg.lr)?
                }
                OptimizerKind::Sgd => sgd_step(&mut self.params, &grads, self.cfg.lr)?,
            }
            if !self.params.is_finite() {
                return Err(self.diverged(last_good));
            }
            stats.loss.accumulate(&loss);
            stats.batches += 1;
            stats.pairs += batch.len();
            stats.batch_users += batch.users().len();
            stats.batch_items += batch.items().len();
            stats.counters.messages += counters.messages;
            stats.counters.graph_macs += counters.graph_macs;
            stats.counters.hyper_macs += counters.hyper_macs;
            stats.counters.contrastive_macs += self.contrastive_macs(&batch);
            self.step += 1;
        }
        self.epoch += 1;
        stats.wall_secs = started.elapsed().as_secs_f64();
        Ok(stats)
    }

    fn diverged(&mut self, last_good: (ModelParams, AdamState)) -> Error {
        self.params = last_good.0;
        self.adam = last_good.1;
        Error::Divergence {
            epoch: self.epoch + 1,
            step: self.step as usize,
        }
    }
}
