//! The optimization loop: discriminator and generator-side steps, Adam,
//! checkpoints and the per-epoch metrics log.

mod checkpoint;
mod config;
mod step;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::dataio::{build_mnist_dataset, build_synthetic_dataset, epoch_rng, load_mnist, make_batches, Dataset, Split, TaskKind};
use crate::error::{Error, Result};
use crate::netdef::{init_model, ModelBundle};
use crate::objective::LossBreakdown;

pub use checkpoint::{decode, encode, load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{default_data_dir, synthetic_arch, TrainConfig};
pub use step::{
    build_losses, evaluate_losses, train_step, train_step_with, AdamState, LossNodes, StepConfig, StepNoise,
    TrainBatch, UpdateMode,
};

const SEQUENCE_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;

/// Column names of the metrics log.
pub const METRICS_HEADER: &str = "epoch\td1_loss\td2_loss\tgen_adv\tenc_adv\tkl_penalty\twall_seconds";

/// Batch-averaged losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    /// One tab-separated log line.
    pub fn to_line(&self) -> String {
        let l = &self.losses;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.3}",
            self.epoch, l.d1_loss, l.d2_loss, l.gen_adv_loss, l.enc_adv_loss, l.kl_penalty, self.wall_seconds
        )
    }
}

/// Drops the `wall_seconds` column, the only field that varies between
/// identical runs.
pub fn strip_wall_clock(log: &str) -> String {
    log.lines()
        .map(|l| l.rsplit_once('\t').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Loads the training split for the configured task.
pub fn load_dataset(config: &TrainConfig) -> Result<Dataset> {
    match config.task.kind {
        TaskKind::Synthetic => build_synthetic_dataset(&config.synthetic, config.train_size, config.seed),
        _ => {
            let mnist = load_mnist(&config.data_dir, Split::Train)?;
            build_mnist_dataset(&config.task, &mnist, config.train_size, config.seed)
        }
    }
}

/// First `count` held-out items: the MNIST test split, or fresh synthetic
/// draws from a seed distinct from the training one.
pub fn load_eval_dataset(config: &TrainConfig, count: usize) -> Result<Dataset> {
    match config.task.kind {
        TaskKind::Synthetic => build_synthetic_dataset(&config.synthetic, count, !config.seed),
        _ => {
            let mnist = load_mnist(&config.data_dir, Split::Test)?;
            build_mnist_dataset(&config.task, &mnist, count, !config.seed)
        }
    }
}

/// Training state that advances one epoch at a time.
pub struct Trainer {
    config: TrainConfig,
    model: ModelBundle<f32>,
    optim: AdamState<f32>,
    epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = init_model(&config.arch, config.seed)?;
        let optim = AdamState::new(&model);
        Ok(Self {
            config,
            model,
            optim,
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Self {
            config: ck.config,
            model: ck.model,
            optim: ck.optimizer,
            epoch: ck.epoch,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &ModelBundle<f32> {
        &self.model
    }

    /// Changes the epoch count [`run`](Self::run) trains up to, e.g. to
    /// continue a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            optimizer: self.optim.clone(),
            epoch: self.epoch,
        }
    }

    /// Runs one epoch over `data`.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        if data.task != self.config.task {
            return Err(Error::config("dataset was built for a different task"));
        }
        let start = Instant::now();
        let epoch = self.epoch as u64;
        let seed = self.config.seed;
        let reps = self.config.sequences_per_example;
        let batches = make_batches(data.len() * reps, self.config.batch_size, seed, epoch)?;
        let mut seq_rng = epoch_rng(seed, epoch, SEQUENCE_STREAM);
        let mut noise_rng = epoch_rng(seed, epoch, NOISE_STREAM);
        let step_cfg = self.config.step_config();
        let latent = self.config.arch.latent_dim;
        let mut sum = [0.0f64; 6];
        for (b, slots) in batches.iter().enumerate() {
            let items: Vec<usize> = slots.iter().map(|s| s % data.len()).collect();
            let sequences = items
                .iter()
                .map(|_| data.task.sample_sequence(&mut seq_rng))
                .collect::<Result<Vec<_>>>()?;
            let batch = TrainBatch::collate(data, &items, sequences)?;
            let noise = StepNoise::draw(items.len(), latent, data.task.seq_len, &mut noise_rng);
            let l = train_step(&mut self.model, &mut self.optim, &batch, &noise, &step_cfg).map_err(|e| match e {
                Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss {
                    epoch: self.epoch,
                    batch: b,
                    detail,
                },
                other => other,
            })?;
            for (s, x) in sum.iter_mut().zip([
                l.d1_loss,
                l.d2_loss,
                l.gen_adv_loss,
                l.enc_adv_loss,
                l.kl_penalty,
                l.total_gen_side,
            ]) {
                *s += x;
            }
        }
        let n = batches.len() as f64;
        let [d1_loss, d2_loss, gen_adv_loss, enc_adv_loss, kl_penalty, total_gen_side] = sum.map(|s| s / n);
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch: self.epoch,
            losses: LossBreakdown {
                d1_loss,
                d2_loss,
                gen_adv_loss,
                enc_adv_loss,
                kl_penalty,
                total_gen_side,
            },
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Trains until `config.epochs` epochs are complete, logging to the
    /// output directory when one is configured.
    pub fn run(&mut self, data: &Dataset) -> Result<Vec<EpochMetrics>> {
        let out = self.config.out_dir.clone();
        if let Some(dir) = &out {
            fs::create_dir_all(dir)?;
        }
        let mut history = Vec::new();
        while self.epoch < self.config.epochs {
            let m = self.run_epoch(data)?;
            if let Some(dir) = &out {
                append_metrics(&metrics_path(dir), &m)?;
                let every = self.config.checkpoint_interval;
                if every > 0 && self.epoch % every == 0 {
                    save_checkpoint(&self.checkpoint(), &dir.join(format!("epoch-{:04}.ckpt", self.epoch)))?;
                }
            }
            history.push(m);
        }
        if let Some(dir) = &out {
            save_checkpoint(&self.checkpoint(), &final_checkpoint_path(dir))?;
        }
        Ok(history)
    }
}

pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.tsv")
}

pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("final.ckpt")
}

fn append_metrics(path: &Path, m: &EpochMetrics) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{METRICS_HEADER}")?;
    }
    writeln!(f, "{}", m.to_line())?;
    Ok(())
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains from initialization on `data`.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone())?;
    let metrics = trainer.run(data)?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        metrics,
    })
}
