use std::path::PathBuf;

use super::step::{StepConfig, UpdateMode};
use crate::dataio::{SyntheticSpec, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::kv;
use crate::netdef::{Activation, ArchConfig, DenseLayer};
use crate::view::ViewShape;

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: TaskSpec,
    /// Directory holding the MNIST IDX files.
    pub data_dir: PathBuf,
    /// Number of training items taken from the head of the split.
    pub train_size: usize,
    pub synthetic: SyntheticSpec,
    pub arch: ArchConfig,
    pub lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub update_mode: UpdateMode,
    /// Epochs between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub sequences_per_example: usize,
    pub out_dir: Option<PathBuf>,
}

/// Dataset root used when no directory is configured.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os("MVBIGAN_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

/// Small dense net without batch norm for the two-dimensional synthetic task.
pub fn synthetic_arch() -> ArchConfig {
    let mut arch = ArchConfig::dense(ViewShape::Flat(2), vec![ViewShape::Flat(1); 2], 2, 64);
    for layers in [
        &mut arch.encoder_layers,
        &mut arch.generator_layers,
        &mut arch.d1_layers,
        &mut arch.d2_layers,
    ] {
        for l in layers.iter_mut() {
            *l = DenseLayer::plain(l.width);
        }
    }
    arch.output_activation = Activation::Linear;
    arch
}

impl TrainConfig {
    /// Defaults for `kind`; MNIST tasks use the published settings.
    pub fn for_task(kind: TaskKind) -> Self {
        let task = TaskSpec::for_kind(kind);
        let mut cfg = Self {
            arch: ArchConfig::mnist_quarters(),
            task,
            data_dir: default_data_dir(),
            train_size: 60_000,
            synthetic: SyntheticSpec::default(),
            lambda: 1e-5,
            lr: 2e-5,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-3,
            batch_size: 128,
            epochs: 300,
            seed: 0,
            update_mode: UpdateMode::Alternating,
            checkpoint_interval: 0,
            sequences_per_example: 1,
            out_dir: None,
        };
        if kind == TaskKind::Synthetic {
            cfg.arch = synthetic_arch();
            cfg.train_size = 4096;
            cfg.lr = 2e-4;
            cfg.eps = 1e-8;
            cfg.epochs = 400;
            cfg.seed = 7;
        }
        cfg.sync_arch();
        cfg
    }

    fn sync_arch(&mut self) {
        self.arch.views = self.task.view_shapes();
        self.arch.output = self.task.output.shape;
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            lambda: self.lambda,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            update_mode: self.update_mode,
        }
    }

    /// Builds a config from ordered pairs; `task.kind` selects the
    /// defaults, later keys override earlier ones.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let kind = match pairs.iter().rev().find(|(k, _)| k == "task.kind") {
            Some((k, v)) => kv::value(k, v)?,
            None => TaskKind::Quarters,
        };
        let mut cfg = Self::for_task(kind);
        for (k, v) in pairs.iter().filter(|(k, _)| k != "task.kind") {
            cfg.apply(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one key. `task.kind` is only accepted through [`from_pairs`](Self::from_pairs).
    pub fn apply(&mut self, key: &str, raw: &str) -> Result<()> {
        if key.starts_with("arch.") {
            return self.arch.apply(key, raw);
        }
        match key {
            "task.steps" => {
                if self.task.kind != TaskKind::Stream {
                    return Err(Error::InvalidValue {
                        key: key.into(),
                        message: "only the stream task has a step count".into(),
                    });
                }
                let stream = self.task.stream;
                self.task = TaskSpec::stream(kv::value(key, raw)?);
                self.task.stream = stream;
                self.sync_arch();
            }
            "task.seq_len" => self.task.seq_len = kv::value(key, raw)?,
            "task.rects_per_step" => self.task.stream.rects_per_step = kv::value(key, raw)?,
            "task.min_side" => self.task.stream.min_side = kv::value(key, raw)?,
            "task.max_side" => self.task.stream.max_side = kv::value(key, raw)?,
            "task.data_dir" => self.data_dir = PathBuf::from(raw),
            "task.train_size" => self.train_size = kv::value(key, raw)?,
            "task.synthetic_stddev" => self.synthetic.stddev = kv::value(key, raw)?,
            "task.synthetic_view_noise" => self.synthetic.view_noise = kv::value(key, raw)?,
            "train.lambda" => self.lambda = kv::value(key, raw)?,
            "train.lr" => self.lr = kv::value(key, raw)?,
            "train.beta1" => self.beta1 = kv::value(key, raw)?,
            "train.beta2" => self.beta2 = kv::value(key, raw)?,
            "train.eps" => self.eps = kv::value(key, raw)?,
            "train.batch_size" => self.batch_size = kv::value(key, raw)?,
            "train.epochs" => self.epochs = kv::value(key, raw)?,
            "train.seed" => self.seed = kv::value(key, raw)?,
            "train.update_mode" => self.update_mode = kv::value(key, raw)?,
            "train.checkpoint_interval" => self.checkpoint_interval = kv::value(key, raw)?,
            "train.sequences_per_example" => self.sequences_per_example = kv::value(key, raw)?,
            "train.out_dir" => self.out_dir = Some(PathBuf::from(raw)),
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let p = |k: &str, v: String| (k.to_string(), v);
        let mut out = vec![p("task.kind", self.task.kind.to_string())];
        if self.task.kind == TaskKind::Stream {
            out.push(p("task.steps", self.task.num_views().to_string()));
        }
        out.extend([
            p("task.seq_len", self.task.seq_len.to_string()),
            p("task.rects_per_step", self.task.stream.rects_per_step.to_string()),
            p("task.min_side", self.task.stream.min_side.to_string()),
            p("task.max_side", self.task.stream.max_side.to_string()),
            p("task.data_dir", self.data_dir.display().to_string()),
            p("task.train_size", self.train_size.to_string()),
            p("task.synthetic_stddev", kv::float(self.synthetic.stddev)),
            p("task.synthetic_view_noise", kv::float(self.synthetic.view_noise)),
            p("train.lambda", kv::float(self.lambda)),
            p("train.lr", kv::float(self.lr)),
            p("train.beta1", kv::float(self.beta1)),
            p("train.beta2", kv::float(self.beta2)),
            p("train.eps", kv::float(self.eps)),
            p("train.batch_size", self.batch_size.to_string()),
            p("train.epochs", self.epochs.to_string()),
            p("train.seed", self.seed.to_string()),
            p("train.update_mode", self.update_mode.to_string()),
            p("train.checkpoint_interval", self.checkpoint_interval.to_string()),
            p("train.sequences_per_example", self.sequences_per_example.to_string()),
        ]);
        if let Some(dir) = &self.out_dir {
            out.push(p("train.out_dir", dir.display().to_string()));
        }
        out.extend(self.arch.to_kv());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Err(Error::InvalidValue { key: key.into(), message });
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("train.lambda", format!("must be non-negative, got {}", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("train.lr", format!("must be positive, got {}", self.lr));
        }
        for (key, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(key, format!("must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad("train.eps", format!("must be positive, got {}", self.eps));
        }
        if self.batch_size == 0 {
            return bad("train.batch_size", "must be at least 1".into());
        }
        if self.sequences_per_example == 0 {
            return bad("train.sequences_per_example", "must be at least 1".into());
        }
        if self.train_size == 0 {
            return bad("task.train_size", "must be at least 1".into());
        }
        self.task.validate()?;
        self.synthetic.validate()?;
        self.arch.validate()?;
        if self.arch.views != self.task.view_shapes() || self.arch.output != self.task.output.shape {
            return Err(Error::config(format!(
                "architecture views {:?} -> {} do not match the {} task",
                self.arch.views, self.arch.output, self.task.kind
            )));
        }
        Ok(())
    }
}
