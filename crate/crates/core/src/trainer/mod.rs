//! Optimization loop, checkpoints and run logs.

mod checkpoint;
mod config;
mod optimizer;
mod runlog;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};

pub use checkpoint::{Checkpoint, Progress, CHECKPOINT_VERSION};
pub use config::{TrainConfig, DATASET_DEFAULTS};
pub use optimizer::{clip_global_norm, Adam};
pub use runlog::{EpochRecord, RunHeader, RunLog, RUNLOG_VERSION};

use crate::autodiff::Graph;
use crate::dataio::{batch_iter, Corpus, TrainingExample};
use crate::error::{MgcotError, Result};
use crate::evaluation::evaluate_model;
use crate::graphs::{CooccurrenceGraph, GlobalItemGraph};
use crate::model::{Mgcot, ModelConfig};
use crate::params::ParamStore;
use crate::seeding;
use crate::sparse::Csr;

pub const CONFIG_FILE: &str = "config.toml";
pub const RUNLOG_FILE: &str = "runlog.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const DIVERGED_CHECKPOINT: &str = "diverged.ckpt";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Mgcot,
    /// Final state, including optimizer moments and the best parameters.
    pub checkpoint: Checkpoint,
}

impl TrainOutcome {
    pub fn log(&self) -> &RunLog {
        &self.checkpoint.log
    }

    pub fn best_params(&self) -> ParamStore {
        self.checkpoint.best_params()
    }
}

/// The co-occurrence graph of `corpus`'s training sessions, reweighted by
/// shortest paths.
pub fn build_global_graph(corpus: &Corpus, config: &TrainConfig) -> GlobalItemGraph {
    let co = CooccurrenceGraph::build(
        corpus.train_sessions.iter().map(|s| s.items.as_slice()),
        corpus.item_count() + 1,
        config.cooccurrence_window,
        config.directed,
    );
    GlobalItemGraph::from_cooccurrence(&co, config.k_sp())
}

struct Session<'a> {
    config: &'a TrainConfig,
    model: Mgcot,
    store: ParamStore,
    adam: Adam,
    progress: Progress,
    log: RunLog,
    best: Option<Vec<ndarray::Array2<f64>>>,
    adjacency: Csr,
    fit: Vec<TrainingExample>,
    validation: Vec<TrainingExample>,
    run_dir: Option<PathBuf>,
}

/// Trains from scratch. With `run_dir`, the config snapshot, run log and
/// checkpoints are written there after every epoch.
pub fn train(corpus: &Corpus, config: &TrainConfig, run_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let items = corpus.item_count();
    if items == 0 || corpus.train.is_empty() {
        return Err(MgcotError::EmptyCorpus("no training examples".into()));
    }
    let mut init = seeding::stream(config.seed, "init", 0, 0);
    let (store, model) = Mgcot::new(config.model_config()?, items, &mut init)?;
    let (fit, validation) = corpus.validation_split(config.validation_fraction);
    let header = RunHeader {
        version: RUNLOG_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.to_toml(),
        ablation: model.config.ablation.tag(),
        items,
        train_examples: fit.len(),
        validation_examples: validation.len(),
        notes: vec![
            "epoch budget and early-stopping patience are implementation defaults".into(),
            format!("validation slice: most recent {} of training sessions", config.validation_fraction),
        ],
    };
    let adam = Adam::new(&store, config.weight_decay);
    let session = Session {
        config,
        model,
        store,
        adam,
        progress: Progress {
            epoch: 0,
            best_metric: None,
            best_epoch: None,
            stale_epochs: 0,
            stopped_early: false,
        },
        log: RunLog::new(header),
        best: None,
        adjacency: build_global_graph(corpus, config).gcn_adjacency(),
        fit,
        validation,
        run_dir: run_dir.map(Path::to_path_buf),
    };
    session.run()
}

/// Continues a run from `checkpoint` up to `config.epochs` total epochs.
/// Architecture settings must match; training settings such as β, the
/// learning rate or the epoch budget may change.
pub fn resume(
    checkpoint: Checkpoint,
    corpus: &Corpus,
    config: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let model_cfg = config.model_config()?;
    if checkpoint.items != corpus.item_count() {
        return Err(MgcotError::Config(format!(
            "checkpoint has {} items, corpus has {}",
            checkpoint.items,
            corpus.item_count()
        )));
    }
    let old = &checkpoint.model;
    let same_shape = old.d == model_cfg.d
        && old.heads == model_cfg.heads
        && old.ggnn_steps == model_cfg.ggnn_steps
        && old.layer_norm == model_cfg.layer_norm
        && old.split_embeddings == model_cfg.split_embeddings
        && old.max_position == model_cfg.max_position;
    if !same_shape {
        return Err(MgcotError::Config(
            "resumed config changes the model architecture".into(),
        ));
    }
    if old.effective_beta() != model_cfg.effective_beta() {
        warn!(
            "beta changes from {} to {} on resume",
            old.effective_beta(),
            model_cfg.effective_beta()
        );
    }
    let model = model_for(model_cfg, &checkpoint.params, checkpoint.items)?;
    let adam = match checkpoint.adam {
        Some(mut a) => {
            a.weight_decay = config.weight_decay;
            a
        }
        None => Adam::new(&checkpoint.params, config.weight_decay),
    };
    let (fit, validation) = corpus.validation_split(config.validation_fraction);
    let mut log = checkpoint.log;
    log.header.config = config.to_toml();
    log.header.ablation = model.config.ablation.tag();
    let session = Session {
        config,
        model,
        store: checkpoint.params,
        adam,
        progress: checkpoint.progress,
        log,
        best: checkpoint.best,
        adjacency: build_global_graph(corpus, config).gcn_adjacency(),
        fit,
        validation,
        run_dir: run_dir.map(Path::to_path_buf),
    };
    session.run()
}

fn model_for(config: ModelConfig, params: &ParamStore, items: usize) -> Result<Mgcot> {
    let mut init = seeding::stream(0, "init", 0, 0);
    let (fresh, model) = Mgcot::new(config, items, &mut init)?;
    let layout_matches = fresh.len() == params.len()
        && fresh
            .iter()
            .zip(params.iter())
            .all(|((_, a), (_, b))| a.name == b.name && a.value.dim() == b.value.dim());
    if !layout_matches {
        return Err(MgcotError::Integrity(
            "checkpoint parameters do not match the model layout".into(),
        ));
    }
    Ok(model)
}

/// The model of a checkpoint with its best parameters.
pub fn restore_model(checkpoint: &Checkpoint) -> Result<(ParamStore, Mgcot)> {
    let model = model_for(checkpoint.model.clone(), &checkpoint.params, checkpoint.items)?;
    Ok((checkpoint.best_params(), model))
}

struct EpochStats {
    main: f64,
    contrastive: f64,
    total: f64,
    grad_norm: f64,
}

impl Session<'_> {
    fn run(mut self) -> Result<TrainOutcome> {
        if let Some(dir) = &self.run_dir {
            fs::create_dir_all(dir).map_err(|e| MgcotError::io(dir, e))?;
            let path = dir.join(CONFIG_FILE);
            fs::write(&path, self.config.to_toml()).map_err(|e| MgcotError::io(&path, e))?;
        }
        if self.progress.stopped_early {
            info!("run already stopped early at epoch {}", self.progress.epoch);
        }
        while self.progress.epoch < self.config.epochs && !self.progress.stopped_early {
            self.epoch()?;
        }
        let checkpoint = self.snapshot();
        if let Some(dir) = &self.run_dir {
            self.write_artifacts(dir, &checkpoint)?;
        }
        Ok(TrainOutcome {
            model: self.model,
            checkpoint,
        })
    }

    fn snapshot(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.config.clone(),
            items: self.model.items,
            train_config: self.config.to_toml(),
            params: self.store.clone(),
            adam: Some(self.adam.clone()),
            progress: self.progress.clone(),
            log: self.log.clone(),
            best: self.best.clone(),
        }
    }

    fn write_artifacts(&self, dir: &Path, checkpoint: &Checkpoint) -> Result<()> {
        checkpoint.save(&dir.join(LAST_CHECKPOINT))?;
        let best = Checkpoint {
            params: checkpoint.best_params(),
            adam: None,
            best: None,
            ..checkpoint.clone()
        };
        best.save(&dir.join(BEST_CHECKPOINT))?;
        let path = dir.join(RUNLOG_FILE);
        fs::write(&path, self.log.to_jsonl()).map_err(|e| MgcotError::io(&path, e))
    }

    fn epoch(&mut self) -> Result<()> {
        let epoch = self.progress.epoch;
        let lr = self.config.learning_rate_at(epoch);
        let started = Instant::now();
        let stats = self.fit_epoch(epoch, lr)?;

        let validation = if self.validation.is_empty() {
            None
        } else {
            Some(
                evaluate_model(
                    &self.model,
                    &self.store,
                    &self.validation,
                    self.config.eval_batch_size,
                    self.config.slice_threshold,
                )?
                .overall,
            )
        };
        // Without a validation slice the latest epoch counts as the best.
        let metric = validation.as_ref().map_or(epoch as f64, |m| m.m20);
        let improved = self.progress.best_metric.is_none_or(|b| metric > b);
        if improved {
            self.progress.best_metric = Some(metric);
            self.progress.best_epoch = Some(epoch);
            self.progress.stale_epochs = 0;
            self.best = Some(self.store.iter().map(|(_, p)| p.value.clone()).collect());
        } else {
            self.progress.stale_epochs += 1;
        }
        self.progress.epoch += 1;
        if self.progress.stale_epochs >= self.config.patience {
            info!("no validation improvement for {} epochs; stopping", self.progress.stale_epochs);
            self.progress.stopped_early = true;
        }
        info!(
            "epoch {epoch}: lr {lr:.1e} loss {:.4} (main {:.4}, contrastive {:.4}){}",
            stats.total,
            stats.main,
            stats.contrastive,
            validation
                .as_ref()
                .map(|m| format!(" val P@20 {:.2} M@20 {:.2}", m.p20, m.m20))
                .unwrap_or_default()
        );
        self.log.push(EpochRecord {
            epoch,
            learning_rate: lr,
            loss_main: stats.main,
            loss_contrastive: stats.contrastive,
            loss_total: stats.total,
            grad_norm: stats.grad_norm,
            validation,
            improved,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        });
        if let Some(dir) = self.run_dir.clone() {
            let checkpoint = self.snapshot();
            self.write_artifacts(&dir, &checkpoint)?;
        }
        Ok(())
    }

    fn fit_epoch(&mut self, epoch: usize, lr: f64) -> Result<EpochStats> {
        let mut sums = [0.0f64; 4];
        let mut seen = 0usize;
        let batches = batch_iter(&self.fit, self.config.batch_size, Some(self.config.seed), epoch as u64);
        for (b, batch) in batches.enumerate() {
            let prefixes = batch.prefixes();
            let mut g = Graph::new();
            let mut dropout = seeding::stream(self.config.seed, "dropout", epoch as u64, b as u64);
            let mut shuffle = seeding::stream(self.config.seed, "derangement", epoch as u64, b as u64);
            let (_, losses) = self.model.loss(
                &mut g,
                &self.store,
                &prefixes,
                &batch.labels,
                Some(&self.adjacency),
                Some(&mut dropout),
                &mut shuffle,
            )?;
            let main = g.scalar(losses.main);
            let contrastive = losses.contrastive.map_or(0.0, |c| g.scalar(c));
            let total = g.scalar(losses.total);
            if !total.is_finite() {
                return Err(self.diverged(epoch, b, main, contrastive, total));
            }
            let mut grads = g.backward(losses.total).into_param_grads();
            let norm = clip_global_norm(&mut grads, self.config.clip_norm);
            if !norm.is_finite() {
                return Err(self.diverged(epoch, b, main, contrastive, norm));
            }
            self.adam.update(&mut self.store, &grads, lr);
            if self.store.iter().any(|(_, p)| p.value.iter().any(|x| !x.is_finite())) {
                return Err(self.diverged(epoch, b, main, contrastive, f64::NAN));
            }
            let n = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip([main, contrastive, total, norm]) {
                *s += n * v;
            }
            seen += batch.len();
        }
        let n = seen.max(1) as f64;
        Ok(EpochStats {
            main: sums[0] / n,
            contrastive: sums[1] / n,
            total: sums[2] / n,
            grad_norm: sums[3] / n,
        })
    }

    /// Writes the pre-step state for inspection and builds the error.
    fn diverged(&self, epoch: usize, batch: usize, main: f64, contrastive: f64, value: f64) -> MgcotError {
        let mut message = format!(
            "non-finite value {value} at epoch {epoch}, batch {batch} (main loss {main}, contrastive {contrastive})"
        );
        if let Some(dir) = &self.run_dir {
            let path = dir.join(DIVERGED_CHECKPOINT);
            match self.snapshot().save(&path) {
                Ok(()) => message.push_str(&format!("; state saved to {}", path.display())),
                Err(e) => warn!("could not save divergence snapshot: {e}"),
            }
        }
        MgcotError::Divergence(message)
    }
}
