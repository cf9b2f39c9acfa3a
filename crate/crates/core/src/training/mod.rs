//! Training: the image codec, stage 1 (sketch Multi-AE) and stage 2
//! (condition decoder and denoiser with the sketch encoder frozen).

mod checkpoint;
mod codec;
mod config;
mod stage1;
mod stage2;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Block, Checkpoint, CheckpointKind, CheckpointMeta, EpochMetrics,
    CHECKPOINT_VERSION,
};
pub use codec::train_image_ae;
pub use codec::codec_from_checkpoint;
pub use stage1::multi_ae_from_checkpoint;
pub use config::{ModelConfig, SketchSource, Stage, TrainConfig};
pub use stage1::{stage1_sketches, train_stage1};
pub use stage2::{sample_timesteps, train_stage2, untrained_stage2};

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Side outputs and resume state for a training call.
#[derive(Debug, Default, Clone, Copy)]
pub struct TrainOptions<'a> {
    /// Periodic and final checkpoints are written here when set.
    pub checkpoint_path: Option<&'a Path>,
    /// Per-epoch metrics are appended here as JSON lines.
    pub metrics_log: Option<&'a Path>,
    /// Continue from this checkpoint's parameters, optimizer state and step.
    pub resume: Option<&'a Checkpoint>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Loss of every step run by this call, in order.
    pub losses: Vec<f64>,
}

const ORDER_STREAM: u64 = 1 << 40;

/// Item order for an epoch; depends only on the seed and epoch index.
pub(crate) fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ORDER_STREAM + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Generator for the random draws of one step.
pub(crate) fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

#[derive(Serialize)]
struct LogLine<'a> {
    stage: &'a str,
    epoch: usize,
    step: u64,
    loss: f64,
}

fn append_log(path: &Path, stage: &str, m: &EpochMetrics) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(&LogLine {
        stage,
        epoch: m.epoch,
        step: m.step,
        loss: m.loss,
    })?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Drives the step loop shared by all trainers: batch order, per-step rng,
/// divergence checks, epoch metrics and periodic checkpoints.
pub(crate) struct Loop<'a> {
    pub stage: &'a str,
    pub config: &'a TrainConfig,
    pub n_items: usize,
    pub opts: &'a TrainOptions<'a>,
}

impl Loop<'_> {
    pub fn run(
        &self,
        start_step: u64,
        mut metrics: Vec<EpochMetrics>,
        mut step_fn: impl FnMut(u64, &[usize], &mut ChaCha8Rng) -> Result<f64>,
        mut snapshot: impl FnMut(u64, &[EpochMetrics]) -> Result<Checkpoint>,
    ) -> Result<TrainOutcome> {
        let cfg = self.config;
        if self.n_items == 0 {
            return Err(Error::EmptyDataset(format!("{}: no training items", self.stage)));
        }
        let per_epoch = self.n_items.div_ceil(cfg.batch_size);
        let total = cfg.total_steps(self.n_items) as u64;
        let mut losses = Vec::new();
        let mut order_epoch = usize::MAX;
        let mut order = Vec::new();
        let (mut sum, mut count) = (0.0, 0usize);
        for step in start_step..total {
            let epoch = (step as usize) / per_epoch;
            let within = (step as usize) % per_epoch;
            if epoch != order_epoch {
                order = epoch_order(cfg.seed, epoch, self.n_items);
                order_epoch = epoch;
            }
            let lo = within * cfg.batch_size;
            let batch = &order[lo..(lo + cfg.batch_size).min(self.n_items)];
            let mut rng = step_rng(cfg.seed, step);
            let loss = step_fn(step, batch, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "{}: non-finite loss at step {step} (epoch {epoch}, batch {within})",
                    self.stage
                )));
            }
            losses.push(loss);
            sum += loss;
            count += 1;
            let done = step + 1;
            if within + 1 == per_epoch || done == total {
                let m = EpochMetrics {
                    epoch,
                    step: done,
                    loss: sum / count as f64,
                };
                if let Some(p) = self.opts.metrics_log {
                    append_log(p, self.stage, &m)?;
                }
                metrics.push(m);
                (sum, count) = (0.0, 0);
            }
            if let Some(path) = self.opts.checkpoint_path {
                if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every as u64 == 0 && done < total {
                    save_checkpoint(&snapshot(done, &metrics)?, path)?;
                }
            }
        }
        let done = total.max(start_step);
        let checkpoint = snapshot(done, &metrics)?;
        if let Some(path) = self.opts.checkpoint_path {
            save_checkpoint(&checkpoint, path)?;
        }
        Ok(TrainOutcome { checkpoint, losses })
    }
}

pub(crate) fn check_resume(ckpt: Option<&Checkpoint>, kind: CheckpointKind) -> Result<u64> {
    match ckpt {
        None => Ok(0),
        Some(c) if c.meta.kind == kind => Ok(c.meta.step),
        Some(c) => Err(Error::Checkpoint(format!(
            "cannot resume {kind:?} training from a {:?} checkpoint",
            c.meta.kind
        ))),
    }
}
