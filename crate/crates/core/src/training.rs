//! Optimization loop: batches from [`datagen`](crate::datagen), models, and
//! the InfoNCE losses, with early stopping on validation loss.

use std::fmt;
use std::io::{Read, Write};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamConfig, AutodiffError, Graph, ParamStore, Var};
use crate::contrastive::{self, ContrastiveError, LossVariant, SimilarityKind};
use crate::datagen::{self, Batch, BatchLayout, DatagenError, Dataset, Paradigm};
use crate::models::{self, Encoder, ForwardModel, GruPredictor, ModelConfig, ModelError};
use crate::renderer::Observation;
use crate::worldsim::ActionPush;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error(transparent)]
    Data(#[from] DatagenError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Diverged {
        epoch: usize,
        batch: usize,
        reason: String,
        /// Parameters with the best validation loss seen before divergence.
        last_good: Box<Model>,
    },
    #[error("{0} episode seeds appear in both training and held-out data")]
    Leakage(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossVariant,
    /// Defaults to bilinear for uncontrolled and dot_exp for controlled data.
    pub similarity: Option<SimilarityKind>,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub patience: usize,
    pub validation_fraction: f64,
    pub within_sequence_fraction: f64,
    /// Batches in each fixed evaluation sweep.
    pub eval_batches: usize,
    /// Caps the batches per epoch; `None` uses transitions / batch size.
    pub max_batches_per_epoch: Option<usize>,
    /// Gradient batches draw fresh domains per item rather than each episode's recorded pair.
    pub resample_domains: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossVariant::Cdr,
            similarity: None,
            batch_size: 64,
            epochs: 30,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            patience: 5,
            validation_fraction: 0.1,
            within_sequence_fraction: 0.5,
            eval_batches: 8,
            max_batches_per_epoch: None,
            resample_domains: true,
        }
    }
}

impl TrainConfig {
    pub fn similarity_for(&self, paradigm: Paradigm) -> SimilarityKind {
        self.similarity.unwrap_or(match paradigm {
            Paradigm::Uncontrolled => SimilarityKind::Bilinear,
            Paradigm::Controlled => SimilarityKind::DotExp,
        })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self, paradigm: Paradigm) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 || self.eval_batches == 0 {
            return bad("batch_size, epochs, patience and eval_batches must be positive".into());
        }
        if self.max_batches_per_epoch == Some(0) {
            return bad("max_batches_per_epoch must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.within_sequence_fraction) {
            return bad(format!("within_sequence_fraction {}", self.within_sequence_fraction));
        }
        if self.loss == LossVariant::SameDomain && paradigm == Paradigm::Uncontrolled {
            return bad("same_domain loss is not available for uncontrolled data".into());
        }
        self.adam().validate().map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn layout(&self, paradigm: Paradigm, model: &ModelConfig) -> BatchLayout {
        match paradigm {
            Paradigm::Controlled => BatchLayout::controlled(model.resolution),
            Paradigm::Uncontrolled => BatchLayout {
                paradigm,
                context: model.context_frames,
                horizons: model.horizons,
                within_sequence_fraction: self.within_sequence_fraction,
                resolution: model.resolution,
                resample_domains: false,
            },
        }
    }
}

/// A trained (or freshly initialized) encoder plus its predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub paradigm: Paradigm,
    pub similarity: SimilarityKind,
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(paradigm: Paradigm, similarity: SimilarityKind, config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        Encoder::new(config).init(&mut params, &mut rng)?;
        match paradigm {
            Paradigm::Controlled => ForwardModel::new(config).init(&mut params, &mut rng)?,
            Paradigm::Uncontrolled => GruPredictor::new(config).init(&mut params, &mut rng)?,
        }
        if similarity == SimilarityKind::Bilinear {
            let d = config.latent_dim;
            params.insert_glorot(SimilarityKind::BILINEAR_PARAM, &[d, d], d, d, &mut rng)?;
        }
        Ok(Model {
            paradigm,
            similarity,
            config: config.clone(),
            params,
        })
    }

    pub fn encoder(&self) -> Encoder<'_> {
        Encoder::new(&self.config)
    }

    pub fn encode(&self, obs: &[Observation]) -> Result<Vec<Vec<f64>>> {
        Ok(self.encoder().encode(&self.params, obs)?)
    }

    /// Controlled models only: one-step latent predictions.
    pub fn predict_next(&self, z: &[Vec<f64>], actions: &[ActionPush]) -> Result<Vec<Vec<f64>>> {
        if self.paradigm != Paradigm::Controlled {
            return Err(TrainError::Config("predict_next needs a controlled model".into()));
        }
        Ok(ForwardModel::new(&self.config).predict(&self.params, z, actions)?)
    }

    /// Differentiable batch loss under this model's similarity.
    pub fn batch_loss(&self, g: &mut Graph, batch: &Batch, variant: LossVariant) -> Result<Var> {
        if variant == LossVariant::SameDomain {
            let domains: Vec<_> = batch.input_domains.iter().chain(&batch.label_domains).collect();
            contrastive::check_same_domain(&domains)?;
        }
        let n = batch.items.len();
        let all: Vec<Observation> = batch.inputs.iter().chain(&batch.labels).flatten().cloned().collect();
        let images = g.input(models::stack_observations(&all, self.config.resolution)?)?;
        let z = self.encoder().forward(g, images)?;
        let group = |g: &mut Graph, i: usize| g.slice(z, 0, i * n, n);
        let ctx = batch.inputs.len();
        let loss = match self.paradigm {
            Paradigm::Controlled => {
                let zt = group(g, 0)?;
                let labels = group(g, 1)?;
                let actions = g.input(models::action_tensor(&batch.actions, self.config.action_scale))?;
                let pred = ForwardModel::new(&self.config).forward(g, zt, actions)?;
                let logits = contrastive::graph_logits(g, pred, labels, self.similarity)?;
                contrastive::graph_info_nce(g, logits)?
            }
            Paradigm::Uncontrolled => {
                let seq = (0..ctx).map(|c| group(g, c)).collect::<std::result::Result<Vec<_>, _>>()?;
                let preds = GruPredictor::new(&self.config).forward(g, &seq)?;
                let mut terms = Vec::with_capacity(preds.len());
                for (k, &p) in preds.iter().enumerate() {
                    let labels = group(g, ctx + k)?;
                    let logits = contrastive::graph_logits(g, p, labels, self.similarity)?;
                    let l = contrastive::graph_info_nce(g, logits)?;
                    terms.push(g.reshape(l, &[1, 1])?);
                }
                let stacked = g.concat(&terms, 0)?;
                g.mean(stacked)?
            }
        };
        Ok(loss)
    }

    pub fn manifest(&self, config_hash: &str) -> Vec<(String, String)> {
        vec![
            ("architecture".into(), format!("{}/{}", self.paradigm.name(), self.similarity.name())),
            ("latent_dim".into(), self.config.latent_dim.to_string()),
            ("config_hash".into(), config_hash.to_string()),
        ]
    }

    pub fn save<W: Write>(&self, config_hash: &str, out: W) -> Result<()> {
        Ok(self.params.write_checkpoint(&self.manifest(config_hash), out)?)
    }

    /// Restores a checkpoint; returns the model and the config hash it recorded.
    pub fn load<R: Read>(config: &ModelConfig, input: R) -> Result<(Model, String)> {
        let (params, manifest) = ParamStore::read_checkpoint(input)?;
        let get = |key: &str| {
            manifest
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| TrainError::Checkpoint(format!("manifest lacks `{key}`")))
        };
        let arch = get("architecture")?;
        let (paradigm, similarity) = arch
            .split_once('/')
            .and_then(|(p, s)| Some((p.parse::<Paradigm>().ok()?, s.parse::<SimilarityKind>().ok()?)))
            .ok_or_else(|| TrainError::Checkpoint(format!("unknown architecture `{arch}`")))?;
        let expected = Model::init(paradigm, similarity, config, 0)?;
        for (name, t) in expected.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(TrainError::Checkpoint(format!(
                        "`{name}` has shape {:?}, model config expects {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(TrainError::Checkpoint(format!("missing parameter `{name}`"))),
            }
        }
        if params.len() != expected.params.len() {
            return Err(TrainError::Checkpoint("unexpected extra parameters".into()));
        }
        let model = Model {
            paradigm,
            similarity,
            config: config.clone(),
            params,
        };
        Ok((model, get("config_hash")?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub mi_bound: f64,
    pub wall_ms: u128,
}

impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} split={} loss={} mi_bound={} wall_ms={}",
            self.epoch, self.split, self.loss, self.mi_bound, self.wall_ms
        )
    }
}

impl MetricRecord {
    /// The record without its wall-clock field, for reproducibility checks.
    pub fn deterministic_part(&self) -> String {
        format!(
            "epoch={} split={} loss={} mi_bound={}",
            self.epoch, self.split, self.loss, self.mi_bound
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once `patience` consecutive observations fail to improve on the best.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            StopDecision::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Model,
    pub metrics: Vec<MetricRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

fn batch_size_for(dataset: &Dataset, layout: &BatchLayout, n: usize) -> usize {
    n.min(dataset.episodes.len() * layout.items_per_episode(dataset.frames()))
}

/// Mean loss over a fixed, seeded sweep of `eval_batches` batches.
pub fn evaluate_loss(model: &Model, dataset: &Dataset, cfg: &TrainConfig, variant: LossVariant) -> Result<f64> {
    let layout = cfg.layout(model.paradigm, &model.config);
    let n = batch_size_for(dataset, &layout, cfg.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let mut total = 0.0;
    for _ in 0..cfg.eval_batches {
        let batch = datagen::build_batch(dataset, variant, &layout, &mut rng, n)?;
        let mut g = Graph::new(&model.params);
        let loss = model.batch_loss(&mut g, &batch, variant)?;
        total += g.value(loss).item();
    }
    Ok(total / cfg.eval_batches as f64)
}

/// Batches per epoch: transitions / batch size, optionally capped.
pub fn batches_per_epoch(dataset: &Dataset, cfg: &TrainConfig, layout: &BatchLayout) -> usize {
    let transitions = dataset.episodes.len() * layout.items_per_episode(dataset.frames());
    let n = (transitions / cfg.batch_size).max(1);
    cfg.max_batches_per_epoch.map_or(n, |cap| n.min(cap))
}

/// Trains on `train`, early-stopping on `val`. `on_metric` sees each record as it is produced.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    train: &Dataset,
    val: &Dataset,
    on_metric: &mut dyn FnMut(&MetricRecord),
) -> Result<TrainOutcome> {
    let paradigm = train.paradigm;
    cfg.validate(paradigm)?;
    if val.paradigm != paradigm {
        return Err(TrainError::Config("training and validation paradigms differ".into()));
    }
    let train_seeds: std::collections::BTreeSet<u64> = train.seeds().into_iter().collect();
    let overlap = val.seeds().iter().filter(|s| train_seeds.contains(s)).count();
    if overlap > 0 {
        return Err(TrainError::Leakage(overlap));
    }
    let similarity = cfg.similarity_for(paradigm);
    let mut model = Model::init(paradigm, similarity, model_cfg, cfg.seed)?;
    let mut layout = cfg.layout(paradigm, model_cfg);
    layout.resample_domains = cfg.resample_domains;
    let n = batch_size_for(train, &layout, cfg.batch_size);
    let adam = cfg.adam();
    let start = Instant::now();
    let mut metrics = Vec::new();
    let mut record = |epoch, split, loss: f64, metrics: &mut Vec<MetricRecord>| {
        let r = MetricRecord {
            epoch,
            split,
            loss,
            mi_bound: contrastive::mi_lower_bound(loss, n),
            wall_ms: start.elapsed().as_millis(),
        };
        on_metric(&r);
        metrics.push(r);
    };

    let init_train = evaluate_loss(&model, train, cfg, cfg.loss)?;
    record(0, "train", init_train, &mut metrics);
    let init_val = evaluate_loss(&model, val, cfg, cfg.loss)?;
    record(0, "val", init_val, &mut metrics);
    let mut stopper = EarlyStopping::new(cfg.patience);
    stopper.observe(0, init_val);
    let mut best = model.clone();
    let mut epochs_run = 0;
    let mut stopped_early = false;

    let per_epoch = batches_per_epoch(train, cfg, &layout);
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut sum = 0.0;
        for b in 0..per_epoch {
            let diverged = |reason: String, best: &Model| TrainError::Diverged {
                epoch,
                batch: b,
                reason,
                last_good: Box::new(best.clone()),
            };
            let batch = datagen::build_batch(train, cfg.loss, &layout, &mut rng, n)?;
            let grads = {
                let mut g = Graph::new(&model.params);
                let loss = match model.batch_loss(&mut g, &batch, cfg.loss) {
                    Ok(l) => l,
                    Err(TrainError::Autodiff(e @ AutodiffError::NonFinite { .. })) => {
                        return Err(diverged(e.to_string(), &best))
                    }
                    Err(e) => return Err(e),
                };
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(diverged(format!("loss {value}"), &best));
                }
                sum += value;
                g.backward(loss).map_err(|e| diverged(e.to_string(), &best))?
            };
            model
                .params
                .adam_step(&grads, &adam)
                .map_err(|e| diverged(e.to_string(), &best))?;
        }
        epochs_run = epoch;
        record(epoch, "train", sum / per_epoch as f64, &mut metrics);
        let val_loss = evaluate_loss(&model, val, cfg, cfg.loss)?;
        record(epoch, "val", val_loss, &mut metrics);
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best = model.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_val_loss) = stopper.best();
    Ok(TrainOutcome {
        model: best,
        metrics,
        best_epoch,
        best_val_loss,
        epochs_run,
        stopped_early,
    })
}
