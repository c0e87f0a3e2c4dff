//! Adam, early stopping on validation concordance with plateau halving of
//! the learning rate, and the epoch loop for both model kinds.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{pad_and_batch_with, Cohort};
use crate::diff::{Graph, Mode, Params, Tensor};
use crate::encoders::{Augmentation, Image, Standardizer};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, forecast_model, EvalGrid, ScoreSource};
use crate::losses::{baseline_loss, ltsa_loss, LossConfig};
use crate::model::{Model, ModelKind};
use crate::survival::EventOutcome;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Smallest validation gain that counts as an improvement.
    pub min_delta: f64,
    /// Sequences per LTSA minibatch; the baseline takes this many times `l` images.
    pub batch_size: usize,
    pub seed: u64,
    pub eval_grid: EvalGrid,
    pub loss: LossConfig,
    pub augmentation: Option<Augmentation>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            patience: 10,
            lr: 1e-4,
            plateau_patience: 3,
            plateau_factor: 0.5,
            min_delta: 1e-6,
            batch_size: 32,
            seed: 0,
            eval_grid: EvalGrid::default(),
            loss: LossConfig::default(),
            augmentation: Some(Augmentation::default()),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings tuned for the desk-scale models on the default cohort.
    /// The step-ahead term is off for LTSA here; at this scale it swamps
    /// the survival term and degrades discrimination.
    pub fn desk(kind: ModelKind) -> Self {
        let mut cfg = Self { max_epochs: 25, ..Self::default() };
        match kind {
            ModelKind::Ltsa => {
                cfg.lr = 3e-4;
                cfg.loss.step_ahead_weight = 0.0;
            }
            ModelKind::Baseline => cfg.lr = 1e-3,
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.patience == 0 || self.plateau_patience == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs, patience and batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::Config("plateau_factor must lie in (0, 1]".into()));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::Config("min_delta must be non-negative".into()));
        }
        self.eval_grid.validate()?;
        self.loss.validate()
    }
}

/// First and second moment estimates, one tensor per parameter slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update. Parameters are untouched if any adjoint
/// is non-finite.
pub fn adam_step(params: &mut Params, grads: &[Tensor], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape("adam_step", &[params.len()], &[grads.len()]));
    }
    for (id, g) in grads.iter().enumerate() {
        if g.shape() != params.tensor(id).shape() {
            return Err(Error::shape("adam_step", params.tensor(id).shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::Numerical(format!("non-finite adjoint for tensor {}", params.name(id))));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (id, g) in grads.iter().enumerate() {
        let m = state.m[id].data_mut();
        let v = state.v[id].data_mut();
        let p = params.tensor_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Stagnant { lr_reduced: bool },
    Stop,
}

/// Early stopping and reduce-on-plateau bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub best: Option<f64>,
    /// 1-based epoch holding the best metric; 0 before any improvement.
    pub best_epoch: usize,
    pub since_best: usize,
    pub since_reduction: usize,
    pub lr: f64,
}

impl Schedule {
    pub fn new(lr: f64) -> Self {
        Self {
            best: None,
            best_epoch: 0,
            since_best: 0,
            since_reduction: 0,
            lr,
        }
    }

    /// Record the validation metric of `epoch`. An undefined metric never
    /// improves.
    pub fn observe(&mut self, epoch: usize, metric: Option<f64>, cfg: &TrainConfig) -> Verdict {
        let improved = match (metric, self.best) {
            (Some(m), None) => m.is_finite(),
            (Some(m), Some(b)) => m > b && m - b >= cfg.min_delta,
            (None, _) => false,
        };
        if improved {
            self.best = metric;
            self.best_epoch = epoch;
            self.since_best = 0;
            self.since_reduction = 0;
            return Verdict::Improved;
        }
        self.since_best += 1;
        self.since_reduction += 1;
        if self.since_best >= cfg.patience {
            return Verdict::Stop;
        }
        let lr_reduced = self.since_reduction >= cfg.plateau_patience;
        if lr_reduced {
            self.lr *= cfg.plateau_factor;
            self.since_reduction = 0;
        }
        Verdict::Stagnant { lr_reduced }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: Option<f64>,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

/// Serializable progress of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub schedule: Schedule,
    pub history: Vec<EpochRecord>,
    pub finished: bool,
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub model: Model,
    pub best_params: Params,
    pub adam: AdamState,
    pub state: TrainState,
}

fn mix(seed: u64, epoch: usize, batch: usize) -> u64 {
    let mut x = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (batch as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

impl TrainRun {
    /// Fresh run; the standardizer is fitted on the training images.
    pub fn start(mut model: Model, train: &Cohort, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if train.eyes.is_empty() {
            return Err(Error::Data("training split has no eyes".into()));
        }
        model.standardizer = Standardizer::fit(train.eyes.iter().flat_map(|e| e.images.iter()))?;
        let adam = AdamState::new(&model.params);
        Ok(Self {
            best_params: model.params.clone(),
            adam,
            state: TrainState {
                epochs_done: 0,
                schedule: Schedule::new(config.lr),
                history: Vec::new(),
                finished: false,
            },
            config,
            model,
        })
    }

    /// The model with the best-epoch weights.
    pub fn best_model(&self) -> Model {
        Model {
            params: self.best_params.clone(),
            ..self.model.clone()
        }
    }

    /// Train until early stopping or `max_epochs`, calling `on_epoch` after
    /// each completed epoch. On a numerical failure the run is left at the
    /// end of the last completed epoch and the error is returned.
    pub fn run(&mut self, train: &Cohort, val: &Cohort, mut on_epoch: impl FnMut(&TrainRun) -> Result<()>) -> Result<()> {
        if val.eyes.is_empty() {
            return Err(Error::Data("validation split has no eyes".into()));
        }
        while !self.state.finished {
            let epoch = self.state.epochs_done + 1;
            let snapshot = (self.model.params.clone(), self.adam.clone());
            let lr = self.state.schedule.lr;
            let loss = match self.model.config.kind {
                ModelKind::Ltsa => self.ltsa_epoch(train, epoch, lr),
                ModelKind::Baseline => self.baseline_epoch(train, epoch, lr),
            };
            let loss = match loss {
                Ok(l) => l,
                Err(e) => {
                    (self.model.params, self.adam) = snapshot;
                    return Err(e);
                }
            };
            let metric = self.validation_metric(val)?;
            let verdict = self.state.schedule.observe(epoch, metric, &self.config);
            if verdict == Verdict::Improved {
                self.best_params = self.model.params.clone();
            }
            log::info!(
                "epoch {epoch}: loss {loss:.5} val C {} lr {lr:e}",
                metric.map_or("n/a".into(), |m| format!("{m:.4}"))
            );
            self.state.history.push(EpochRecord {
                epoch,
                train_loss: loss,
                val_metric: metric,
                lr,
            });
            self.state.epochs_done = epoch;
            self.state.finished = verdict == Verdict::Stop || epoch >= self.config.max_epochs;
            on_epoch(self)?;
        }
        Ok(())
    }

    pub fn validation_metric(&self, val: &Cohort) -> Result<Option<f64>> {
        let forecasts = forecast_model(&self.model, val)?;
        let source = ScoreSource::Forecasts { forecasts, negate: false };
        Ok(evaluate("val", val, &source, &self.config.eval_grid, 0, 0)?.mean_concordance())
    }

    fn augment(&self, rng: &mut ChaCha8Rng, img: &Image) -> Image {
        match &self.config.augmentation {
            Some(a) => a.apply(img, rng),
            None => img.clone(),
        }
    }

    fn step(&mut self, g: &mut Graph, loss: crate::diff::Var, lr: f64) -> Result<f64> {
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numerical(format!("training loss became {value}")));
        }
        g.backward(loss)?;
        let grads = g.param_grads(&self.model.params);
        adam_step(&mut self.model.params, &grads, &mut self.adam, lr, &self.config.adam)?;
        Ok(value)
    }

    fn ltsa_epoch(&mut self, train: &Cohort, epoch: usize, lr: f64) -> Result<f64> {
        let seed = self.config.seed;
        let mut order: Vec<usize> = (0..train.eyes.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch as u64));
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let eyes: Vec<_> = chunk.iter().map(|&i| &train.eyes[i]).collect();
            let mut aug_rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch, bi));
            let batch = pad_and_batch_with(&eyes, self.model.config.max_len, |_, _, img| self.augment(&mut aug_rng, img))?;
            let mut g = Graph::new(Mode::Train, mix(seed ^ 0xD1, epoch, bi));
            let vars = self.model.build_ltsa(&mut g, &batch)?;
            let loss = ltsa_loss(&mut g, &vars, &batch, &self.config.loss)?;
            total += self.step(&mut g, loss.total, lr)?;
            batches += 1;
        }
        Ok(total / batches as f64)
    }

    fn baseline_epoch(&mut self, train: &Cohort, epoch: usize, lr: f64) -> Result<f64> {
        let seed = self.config.seed;
        let mut items: Vec<(usize, usize)> = train
            .eyes
            .iter()
            .enumerate()
            .flat_map(|(e, eye)| (0..eye.num_visits()).map(move |k| (e, k)))
            .collect();
        items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch as u64));
        let per_batch = self.config.batch_size * self.model.config.max_len;
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, chunk) in items.chunks(per_batch).enumerate() {
            let mut aug_rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch, bi));
            let images: Vec<Image> = chunk
                .iter()
                .map(|&(e, k)| self.augment(&mut aug_rng, &train.eyes[e].images[k]))
                .collect();
            let outcomes: Vec<EventOutcome> = chunk.iter().map(|&(e, _)| train.eyes[e].outcome).collect();
            let mut g = Graph::new(Mode::Train, mix(seed ^ 0xD1, epoch, bi));
            let hazards = self.model.build_baseline(&mut g, images.iter())?;
            let loss = baseline_loss(&mut g, hazards, &outcomes, &self.config.loss)?;
            total += self.step(&mut g, loss, lr)?;
            batches += 1;
        }
        Ok(total / batches as f64)
    }
}
