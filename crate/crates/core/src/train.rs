//! Contrastive training loop over synthetic or on-disk studies.

use std::collections::HashSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{build_training_pair, OrganRegistry, Study, TrainingPair};
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::numkernel::Tape;
use crate::objective::{batch_loss, HybridOptimizer, OptimConfig, OptimizerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            seed: 0,
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2 for contrastive training"));
        }
        self.optim.validate()
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u128,
}

pub const LOSS_CSV_HEADER: &str = "step,loss,lr,wall_ms\n";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}\n", self.step, self.loss, self.lr, self.wall_ms)
    }
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    std::iter::once(LOSS_CSV_HEADER.to_string())
        .chain(records.iter().map(LossRecord::csv_row))
        .collect()
}

/// A sampled batch and how many in-batch collisions it contains.
#[derive(Debug, Clone)]
pub struct Batch {
    pub pairs: Vec<TrainingPair>,
    pub study_ids: Vec<String>,
    /// Pairs whose window overlaps another pair from the same study.
    pub overlapping: usize,
    /// Pairs whose text duplicates an earlier pair's text.
    pub duplicate_texts: usize,
}

pub struct Trainer {
    model: DualEncoder,
    optimizer: HybridOptimizer,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    step: usize,
    started: Instant,
}

impl Trainer {
    pub fn new(model: DualEncoder, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            optimizer: HybridOptimizer::new(cfg.optim.clone())?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            cfg,
            step: 0,
            started: Instant::now(),
        })
    }

    pub fn model(&self) -> &DualEncoder {
        &self.model
    }

    pub fn into_model(self) -> DualEncoder {
        self.model
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Draws distinct studies when there are enough, then one window from each.
    /// Overlapping windows and duplicate texts are kept and counted.
    pub fn sample_batch(&mut self, studies: &[Study], registry: &OrganRegistry) -> Result<Batch> {
        if studies.is_empty() {
            return Err(Error::contract("training needs at least one study"));
        }
        let b = self.cfg.batch_size;
        let picks: Vec<usize> = if b <= studies.len() {
            rand::seq::index::sample(&mut self.rng, studies.len(), b).into_vec()
        } else {
            (0..b).map(|_| self.rng.random_range(0..studies.len())).collect()
        };
        let patch_z = self.model.config().patch_z;
        let mut pairs = Vec::with_capacity(b);
        for &i in &picks {
            let s = &studies[i];
            pairs.push(build_training_pair(
                &s.volume,
                &s.mask,
                &s.record,
                registry,
                &mut self.rng,
                patch_z,
            )?);
        }
        let overlapping = (0..b)
            .filter(|&i| (0..b).any(|j| j != i && picks[i] == picks[j] && pairs[i].spec.overlaps(&pairs[j].spec)))
            .count();
        let mut seen = HashSet::new();
        let duplicate_texts = pairs.iter().filter(|p| !seen.insert(p.text.as_str())).count();
        Ok(Batch {
            study_ids: picks.iter().map(|&i| studies[i].id.clone()).collect(),
            pairs,
            overlapping,
            duplicate_texts,
        })
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossRecord> {
        let cfg = self.model.config().clone();
        let texts: Vec<Vec<usize>> = batch
            .pairs
            .iter()
            .map(|p| self.model.tokenizer().encode(&p.text))
            .collect();
        let chunks: Vec<_> = batch.pairs.iter().map(|p| p.chunk.clone()).collect();
        let mut tape = Tape::new();
        let bound = self.model.params().bind(&mut tape, "", true);
        let loss = batch_loss(&mut tape, &bound, &chunks, &texts, &cfg)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "batch_loss" });
        }
        tape.backward(loss)?;
        let grads = bound.grads(&tape);
        self.optimizer.step(self.model.params_mut(), &grads)?;
        self.step += 1;
        Ok(LossRecord {
            step: self.step,
            loss: value,
            lr: self.cfg.optim.lr,
            wall_ms: self.started.elapsed().as_millis(),
        })
    }

    /// Runs the remaining configured steps, reporting each record to `on_step`.
    pub fn run(
        &mut self,
        studies: &[Study],
        registry: &OrganRegistry,
        mut on_step: impl FnMut(&LossRecord, &Batch) -> Result<()>,
    ) -> Result<Vec<LossRecord>> {
        let mut records = Vec::with_capacity(self.cfg.steps.saturating_sub(self.step));
        while self.step < self.cfg.steps {
            let batch = self.sample_batch(studies, registry)?;
            let rec = self.train_step(&batch)?;
            on_step(&rec, &batch)?;
            records.push(rec);
        }
        Ok(records)
    }
}

/// Trains the same initial model with the hybrid rule and with AdamW alone,
/// on identical batches, and returns both loss logs.
pub fn compare_optimizers(
    model: &DualEncoder,
    cfg: &TrainConfig,
    studies: &[Study],
    registry: &OrganRegistry,
) -> Result<Vec<(OptimizerKind, Vec<LossRecord>)>> {
    [OptimizerKind::MuonHybrid, OptimizerKind::AdamwOnly]
        .into_iter()
        .map(|kind| {
            let mut c = cfg.clone();
            c.optim.kind = kind;
            let mut t = Trainer::new(model.clone(), c)?;
            Ok((kind, t.run(studies, registry, |_, _| Ok(()))?))
        })
        .collect()
}
