//! End-to-end optimisation: loss assembly, learning-rate schedule, batching
//! and the epoch loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{LossParts, Model, ModelConfig, PreparedVideo, Sample, LOSS_NAMES};
use crate::params::{Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables it.
    pub clip_norm: Option<f64>,
    /// Write a checkpoint every this many epochs (and after the last one).
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            base_lr: 1e-4,
            decay_factor: 0.8,
            decay_every: 20,
            batch_size: 16,
            seed: 0,
            clip_norm: Some(10.0),
            checkpoint_every: 20,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "epochs, batch_size, decay_every and checkpoint_every must be positive".into(),
            ));
        }
        if self.decay_every > self.epochs {
            return Err(Error::Config(format!(
                "decay_every = {} exceeds epochs = {}",
                self.decay_every, self.epochs
            )));
        }
        if !(self.base_lr > 0.0) || !(self.decay_factor > 0.0) {
            return Err(Error::Config("base_lr and decay_factor must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive when set".into()));
            }
        }
        self.model.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }
}

/// `base_lr · decay_factor^⌊e / decay_every⌋`.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

/// Unweighted sum of the five components; any non-finite component aborts
/// the step.
pub fn total_loss(parts: &LossParts<f64>) -> Result<f64> {
    let values = parts.to_array();
    for (name, v) in LOSS_NAMES.iter().zip(values) {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                component: name.to_string(),
                value: v,
            });
        }
    }
    Ok(values.iter().sum())
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub cmr: f64,
    pub local: f64,
    pub global: f64,
    pub time: f64,
    pub mse: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    /// Batch means of each component.
    pub losses: LossParts<f64>,
    pub total: f64,
}

/// Prepared videos and their paragraphs. Built from token ids and video
/// features only; ground-truth intervals are never consulted.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub videos: Vec<PreparedVideo>,
    /// `(video index, sentences)` per paragraph.
    pub pairs: Vec<(usize, Vec<Vec<usize>>)>,
}

impl TrainingSet {
    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        let videos = corpus.videos.iter().map(|v| v.prepare()).collect::<Result<Vec<_>>>()?;
        let pairs = corpus
            .paragraphs
            .iter()
            .map(|p| {
                corpus
                    .video_index(&p.video_id)
                    .map(|i| (i, p.sentences.clone()))
                    .ok_or_else(|| Error::invalid(format!("unknown video {}", p.video_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        if pairs.is_empty() {
            return Err(Error::invalid("corpus has no paragraphs"));
        }
        Ok(TrainingSet { videos, pairs })
    }
}

pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.config != config.model {
            return Err(Error::Config("model was built from a different configuration".into()));
        }
        let adam = Adam::new(&model.store, config.adam());
        // the data-order stream is kept apart from parameter initialisation
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
        Ok(Trainer {
            model,
            adam,
            config,
            epoch: 0,
            step: 0,
            rng,
        })
    }

    /// One optimiser step on `batch`; returns the component values.
    pub fn step(&mut self, batch: &[Sample<'_>], lr: f64) -> Result<LossParts<f64>> {
        let mut g = Graph::new();
        let parts = self.model.batch_losses(&mut g, batch, &mut self.rng)?;
        let values = parts.map(|v| g.scalar(v));
        total_loss(&values)?;
        let total = g.add_all(&parts.to_array());
        let grads = g.backward(total);
        self.adam.update(&mut self.model.store, &grads.param_grads(), lr);
        self.step += 1;
        Ok(values)
    }

    pub fn train_epoch(&mut self, set: &TrainingSet, log: &mut dyn FnMut(&StepRecord)) -> Result<EpochSummary> {
        let lr = lr_at_epoch(self.epoch, &self.config);
        let mut order: Vec<usize> = (0..set.pairs.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sums = [0.0; 5];
        let mut batches = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| Sample {
                    video: &set.videos[set.pairs[i].0],
                    sentences: &set.pairs[i].1,
                })
                .collect();
            let parts = self.step(&batch, lr)?;
            let arr = parts.to_array();
            for (s, v) in sums.iter_mut().zip(arr) {
                *s += v;
            }
            batches += 1;
            log(&StepRecord {
                epoch: self.epoch,
                step: self.step,
                cmr: parts.cmr,
                local: parts.local,
                global: parts.global,
                time: parts.time,
                mse: parts.mse,
                total: arr.iter().sum(),
                lr,
            });
        }
        let n = batches as f64;
        let losses = LossParts {
            cmr: sums[0] / n,
            local: sums[1] / n,
            global: sums[2] / n,
            time: sums[3] / n,
            mse: sums[4] / n,
        };
        let summary = EpochSummary {
            epoch: self.epoch,
            lr,
            total: sums.iter().sum::<f64>() / n,
            losses,
        };
        self.epoch += 1;
        Ok(summary)
    }

    pub fn checkpoint(&self, metrics: &[(String, f64)]) -> Result<Checkpoint> {
        Checkpoint::capture(&self.model, &self.adam, &self.config, self.epoch, metrics)
    }
}

/// Outcome of a full run.
pub struct TrainOutcome {
    pub model: Model,
    pub epochs: Vec<EpochSummary>,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains for `cfg.epochs` epochs. With `out_dir`, writes `train_log.jsonl`
/// and `epoch-NNNN.ckpt` files there.
pub fn train(corpus: &Corpus, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let set = TrainingSet::from_corpus(corpus)?;
    let model = Model::new(cfg.model.clone(), corpus.vocab.clone(), corpus.feature_width(), cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.clone())?;

    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.jsonl");
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut log_error = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::new();
    for e in 0..cfg.epochs {
        let summary = trainer.train_epoch(&set, &mut |rec| {
            if let Some((file, path)) = log_file.as_mut() {
                let line = serde_json::to_string(rec).expect("plain record");
                if let Err(err) = writeln!(file, "{line}") {
                    log_error.get_or_insert(Error::io(path.clone(), err));
                }
            }
        })?;
        if let Some(err) = log_error.take() {
            return Err(err);
        }
        let last = e + 1 == cfg.epochs;
        if let Some(dir) = out_dir {
            if last || (e + 1) % cfg.checkpoint_every == 0 {
                let metrics = [("total_loss".to_string(), summary.total)];
                let path = dir.join(format!("epoch-{:04}.ckpt", e + 1));
                save_checkpoint(&path, &trainer.checkpoint(&metrics)?)?;
                checkpoints.push(path);
            }
        }
        epochs.push(summary);
    }
    Ok(TrainOutcome {
        model: trainer.model,
        epochs,
        checkpoints,
    })
}
