//! Training loop, checkpoints, challenge evaluation and report artifacts.

mod checkpoint;
mod eval;
mod report;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use eval::{
    evaluate_challenge, evaluate_windows, persistence_baseline, ChallengeReport, EvalProtocol, Persistence, BERLIN_BINS,
    CHALLENGE_INPUT_LEN, ISTANBUL_BINS, MOSCOW_BINS,
};
pub(crate) use checkpoint::write_atomic;
pub use report::{
    loss_plot_svg, read_metrics_tsv, report_tables, table1, table2, write_metrics_tsv, RunSummary, METRICS_HEADER,
};

use crate::error::{Error, Result};
use crate::exogenous::ExoProvider;
use crate::model::{to_nchw, Model, ModelConfig, WarmStart};
use crate::nn::{Adam, Graph};
use crate::objectives::{mse_metric, training_loss, LossWeights, MetricReport};
use crate::sampler::{
    build_epoch_index, enumerate_windows, BatchStream, MovieSource, PipelineOptions, SequenceWindow, Strategy,
    OUTPUT_LEN,
};
use crate::synth_world::mix_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub strategy: Strategy,
    pub batch_size: usize,
    pub epochs: u32,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossWeights,
    pub init_checkpoint: Option<PathBuf>,
    /// Output start bins used by `like_test` sampling.
    pub test_bins: Vec<usize>,
    pub workers: usize,
    pub prefetch_depth: usize,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            strategy: Strategy::NonOverlapping,
            batch_size: 8,
            epochs: 1,
            learning_rate: 1e-3,
            seed: 0,
            loss: LossWeights::default(),
            init_checkpoint: None,
            test_bins: eval::MOSCOW_BINS.to_vec(),
            workers: 0,
            prefetch_depth: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }

    fn pipeline(&self) -> PipelineOptions {
        PipelineOptions { batch_size: self.batch_size, workers: self.workers, prefetch_depth: self.prefetch_depth }
    }
}

/// One row of `metrics.tsv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
    pub heading_acc: Option<f64>,
}

/// Movies, exogenous features and the day split a run trains on.
#[derive(Clone)]
pub struct Dataset {
    pub source: Arc<dyn MovieSource>,
    pub exo: Arc<dyn ExoProvider>,
    pub train_days: Vec<u32>,
    pub val_days: Vec<u32>,
    pub bins_per_day: usize,
}

/// Mutable state of a training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub checkpoint: Checkpoint,
    data: Dataset,
    windows: Vec<SequenceWindow>,
}

impl Trainer {
    /// Starts from fresh weights, or from `config.init_checkpoint` when set.
    pub fn new(config: TrainConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        let mut model = Model::new(config.model.clone(), mix_seed(config.seed, 0x1417))?;
        let mut init_epochs = 0;
        if let Some(path) = &config.init_checkpoint {
            let src = load_checkpoint(path)?;
            let WarmStart { copied, widened, fresh } = model.warm_start(&src.model.params);
            info!(
                "fine-tune from {} ({} epochs of {}): {} copied, {} widened, {} fresh",
                path.display(),
                src.epoch + src.init_epochs,
                src.model.config.variant.label(),
                copied.len(),
                widened.len(),
                fresh.len()
            );
            init_epochs = src.epoch + src.init_epochs;
        }
        let checkpoint = Checkpoint {
            model,
            optimizer: Adam::new(config.learning_rate),
            epoch: 0,
            init_epochs,
            history: Vec::new(),
            train_config: Some(config.clone()),
        };
        Self::with_checkpoint(config, data, checkpoint)
    }

    /// Continues a run from a saved checkpoint.
    pub fn resume(config: TrainConfig, data: Dataset, checkpoint: Checkpoint) -> Result<Self> {
        config.validate()?;
        if checkpoint.model.config != config.model {
            return Err(Error::Config("checkpoint model config differs from the run config".into()));
        }
        Self::with_checkpoint(config, data, checkpoint)
    }

    fn with_checkpoint(config: TrainConfig, data: Dataset, checkpoint: Checkpoint) -> Result<Self> {
        let e = enumerate_windows(&data.train_days, data.bins_per_day, config.model.q, config.strategy, &config.test_bins)?;
        for (day, s) in &e.skipped {
            warn!("skipping window day {day} start {s}: does not fit q={}", config.model.q);
        }
        if e.windows.is_empty() {
            return Err(Error::Data("no training windows".into()));
        }
        Ok(Trainer { config, checkpoint, data, windows: e.windows })
    }

    pub fn windows(&self) -> &[SequenceWindow] {
        &self.windows
    }

    pub fn model(&self) -> &Model {
        &self.checkpoint.model
    }

    /// Runs one epoch and appends its record to the history.
    pub fn train_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.checkpoint.epoch + 1;
        let cfg = &self.config;
        let index = build_epoch_index(&self.windows, epoch as u64, cfg.seed)?;
        let stream = BatchStream::new(&index, cfg.pipeline(), Arc::clone(&self.data.source), Arc::clone(&self.data.exo));
        let ck = &mut self.checkpoint;
        let momentum = ck.model.config.bn_momentum;
        let (mut loss_sum, mut sse, mut count) = (0.0, 0.0, 0usize);
        for (bi, batch) in stream.enumerate() {
            let batch = batch?;
            let mut g = Graph::new(true, mix_seed(cfg.seed, ((epoch as u64) << 32) | bi as u64));
            let out = ck.model.forward(&mut g, &batch, true)?;
            let n = batch.size() * OUTPUT_LEN;
            let target = g.input(to_nchw(&batch.targets, n, batch.height, batch.width, 3));
            let terms = training_loss(&mut g, &out, &batch, target, ck.model.config.variant, &cfg.loss)?;
            let loss = g.value(terms.total).item();
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss {loss} at epoch {epoch} batch {bi} (learning rate {})",
                    ck.optimizer.lr
                )));
            }
            let grads = g.backward(terms.total).params();
            if let Some((name, _)) = grads.iter().find(|(_, t)| t.data.iter().any(|v| !v.is_finite())) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for {name} at epoch {epoch} batch {bi} (learning rate {})",
                    ck.optimizer.lr
                )));
            }
            ck.optimizer.update(&mut ck.model.params, &grads);
            for u in g.take_bn_updates() {
                ck.model.params.apply_bn_update(&u.name, &u.mean, &u.var, momentum);
            }
            let elems = batch.targets.len();
            loss_sum += loss * batch.size() as f64;
            sse += g.value(terms.frame).item() * elems as f64;
            count += elems;
        }
        let (val_mse, heading_acc) = match self.validate_epoch()? {
            Some(r) => (Some(r.mse_total()), Some(r.heading_accuracy())),
            None => (None, None),
        };
        let ck = &mut self.checkpoint;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / self.windows.len() as f64,
            train_mse: sse / count.max(1) as f64,
            val_mse,
            heading_acc,
        };
        ck.epoch = epoch;
        ck.history.push(rec.clone());
        Ok(rec)
    }

    fn validate_epoch(&self) -> Result<Option<MetricReport>> {
        if self.data.val_days.is_empty() {
            return Ok(None);
        }
        let cfg = &self.config;
        let e = enumerate_windows(&self.data.val_days, self.data.bins_per_day, cfg.model.q, cfg.strategy, &cfg.test_bins)?;
        if e.windows.is_empty() {
            return Ok(None);
        }
        let r = evaluate_windows(
            &self.checkpoint.model,
            &e.windows,
            cfg.pipeline(),
            Arc::clone(&self.data.source),
            Arc::clone(&self.data.exo),
        )?;
        Ok(Some(r))
    }

    /// Trains until `config.epochs` epochs are complete. With a run
    /// directory, writes a checkpoint per epoch and keeps `metrics.tsv`
    /// current.
    pub fn run(&mut self, run_dir: Option<&Path>) -> Result<&Checkpoint> {
        if let Some(dir) = run_dir {
            std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        }
        while self.checkpoint.epoch < self.config.epochs {
            let rec = self.train_epoch()?;
            info!(
                "epoch {} train_loss {:.6} train_mse {:.6} val_mse {} heading_acc {}",
                rec.epoch,
                rec.train_loss,
                rec.train_mse,
                fmt_opt(rec.val_mse),
                fmt_opt(rec.heading_acc)
            );
            if let Some(dir) = run_dir {
                save_checkpoint(&self.checkpoint, &checkpoint_path(dir, rec.epoch))?;
                write_metrics_tsv(&dir.join("metrics.tsv"), &self.checkpoint.history)?;
            }
        }
        Ok(&self.checkpoint)
    }

    /// Mean frame MSE of the current model on the training windows,
    /// inference mode.
    pub fn training_mse(&self) -> Result<MetricReport> {
        evaluate_windows(
            &self.checkpoint.model,
            &self.windows,
            self.config.pipeline(),
            Arc::clone(&self.data.source),
            Arc::clone(&self.data.exo),
        )
    }

    /// Persistence-baseline report on the training windows.
    pub fn persistence_mse(&self) -> Result<MetricReport> {
        evaluate_windows(
            &Persistence { q: self.config.model.q },
            &self.windows,
            self.config.pipeline(),
            Arc::clone(&self.data.source),
            Arc::clone(&self.data.exo),
        )
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.6}"))
}

pub fn checkpoint_path(run_dir: &Path, epoch: u32) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch_{epoch:03}.t4ck"))
}

/// Most recent per-epoch checkpoint in a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Option<PathBuf> {
    let dir = run_dir.join("checkpoints");
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "t4ck"))
        .collect();
    found.sort();
    found.pop()
}

/// Scores predictions of `predictor` on `windows` against ground truth.
pub(crate) fn score_batch(pred: &crate::model::PredictionBundle, batch: &crate::sampler::Batch) -> Result<MetricReport> {
    mse_metric(&pred.frames, &batch.targets, batch.size(), batch.height, batch.width)
}
