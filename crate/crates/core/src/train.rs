//! Mini-batch training of [`HapNet`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::EventCluster;
use crate::datagen::{Dataset, Split, SubjectRecord};
use crate::error::{HapError, Result};
use crate::eval::mape;
use crate::model::{AblationMode, HapNet, ModelConfig};
use crate::numeric::Tape;
use crate::params::{GradBuffer, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = HapError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(HapError::Config(format!(
                "unknown optimizer `{other}` (expected sgd or adam)"
            ))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub ablation: AblationMode,
    /// Epochs without validation improvement before stopping; 0 disables
    /// early stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 64,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            ablation: AblationMode::Full,
            patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(HapError::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(HapError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with the usual moment decay rates, or plain gradient descent.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    m: GradBuffer,
    v: GradBuffer,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            m: GradBuffer::zeros_like(store),
            v: GradBuffer::zeros_like(store),
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &GradBuffer) -> Result<()> {
        if self.lr == 0.0 {
            return Ok(());
        }
        self.step += 1;
        let lr = self.lr;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        for id in store.ids() {
            let g = grads.get(id);
            match self.kind {
                OptimizerKind::Sgd => store.update(id, |k, p| p - lr * g[k])?,
                OptimizerKind::Adam => {
                    let m = self.m.get_mut(id);
                    for (mk, gk) in m.iter_mut().zip(g) {
                        *mk = ADAM_BETA1 * *mk + (1.0 - ADAM_BETA1) * gk;
                    }
                    let v = self.v.get_mut(id);
                    for (vk, gk) in v.iter_mut().zip(g) {
                        *vk = ADAM_BETA2 * *vk + (1.0 - ADAM_BETA2) * gk * gk;
                    }
                    let (m, v) = (self.m.get(id), self.v.get(id));
                    store.update(id, |k, p| {
                        p - lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS)
                    })?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean objective over the training split, accumulated during the epoch.
    pub train_loss: f64,
    /// Mean squared error part of `train_loss`.
    pub train_mse: f64,
    pub valid_mape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Objective over the training split before the first update.
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_valid_mape: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: HapNet,
    pub log: TrainLog,
}

/// Per-cluster batches of record indices in a seeded order.
pub fn cluster_batches(
    records: &[&SubjectRecord],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<EventCluster, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.cluster.canonical()).or_default().push(i);
    }
    let mut batches = Vec::new();
    for mut idx in groups.into_values() {
        shuffle(&mut idx, rng);
        batches.extend(idx.chunks(batch_size).map(<[usize]>::to_vec));
    }
    shuffle(&mut batches, rng);
    batches
}

fn shuffle<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
    for k in (1..v.len()).rev() {
        v.swap(k, rng.random_range(0..=k));
    }
}

/// Initial model for `dataset`: fresh parameters with the head's output bias
/// set to the mean training outcome.
pub fn init_model(dataset: &Dataset, config: &ModelConfig) -> Result<HapNet> {
    check_compatible(dataset, config)?;
    let mut model = HapNet::new(config.clone())?;
    let train: Vec<f64> = dataset.split_records(Split::Train).map(|r| r.y).collect();
    if train.is_empty() {
        return Err(HapError::Contract("dataset has no training records".into()));
    }
    let mean = train.iter().sum::<f64>() / train.len() as f64;
    model.store.update(model.head.b2, |_, _| mean)?;
    Ok(model)
}

pub(crate) fn check_compatible(dataset: &Dataset, config: &ModelConfig) -> Result<()> {
    if dataset.d != config.d || dataset.n_e > config.n_e {
        return Err(HapError::Config(format!(
            "dataset has d={}, n_e={} but the model expects d={}, n_e={}",
            dataset.d, dataset.n_e, config.d, config.n_e
        )));
    }
    Ok(())
}

pub fn train(
    dataset: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let model = init_model(dataset, model_config)?;
    train_from(model, dataset, config)
}

struct PassTotals {
    loss: f64,
    mse: f64,
}

/// Objective over `records` without updating anything.
fn evaluate_objective(
    model: &HapNet,
    records: &[&SubjectRecord],
    mode: AblationMode,
) -> Result<PassTotals> {
    let n = records.len();
    let mut totals = PassTotals {
        loss: 0.0,
        mse: 0.0,
    };
    for r in records {
        let mut tape = Tape::new();
        let (loss, f) =
            model.sample_loss_with(&mut tape, &model.store, &r.x, &r.cluster, r.y, mode, n)?;
        totals.loss += tape.scalar(loss)?;
        totals.mse += (tape.scalar(f.y_hat)? - r.y).powi(2) / n as f64;
    }
    Ok(totals)
}

fn valid_mape(model: &HapNet, records: &[&SubjectRecord], mode: AblationMode) -> Result<f64> {
    let mut y = Vec::with_capacity(records.len());
    let mut y_hat = Vec::with_capacity(records.len());
    for r in records {
        y.push(r.y);
        y_hat.push(model.predict(&r.x, &r.cluster, mode)?.y_hat);
    }
    Ok(mape(&y, &y_hat)?.mean)
}

fn diverged(epoch: usize) -> impl Fn(HapError) -> HapError {
    move |e| match e {
        HapError::NonFinite(detail) => HapError::Divergence { epoch, detail },
        other => other,
    }
}

/// Train an already initialized model. Returns the parameters with the best
/// validation MAPE.
pub fn train_from(
    mut model: HapNet,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_compatible(dataset, &model.config)?;
    let train: Vec<&SubjectRecord> = dataset.split_records(Split::Train).collect();
    let valid: Vec<&SubjectRecord> = dataset.split_records(Split::Valid).collect();
    if train.is_empty() || valid.is_empty() {
        return Err(HapError::Contract(
            "training needs nonempty train and valid splits".into(),
        ));
    }
    let mode = config.ablation;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, &model.store);

    let initial = evaluate_objective(&model, &train, mode).map_err(diverged(0))?;
    let mut log = TrainLog {
        initial_train_loss: initial.loss,
        epochs: Vec::new(),
        best_epoch: None,
        best_valid_mape: valid_mape(&model, &valid, mode).map_err(diverged(0))?,
        stopped_early: false,
    };
    let mut best = model.store.clone();
    let n = train.len() as f64;

    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        let mut mse_sum = 0.0;
        for batch in cluster_batches(&train, config.batch_size, &mut rng) {
            let mut grads = GradBuffer::zeros_like(&model.store);
            for &i in &batch {
                let r = train[i];
                let mut tape = Tape::new();
                let (loss, f) = model
                    .sample_loss_with(
                        &mut tape,
                        &model.store,
                        &r.x,
                        &r.cluster,
                        r.y,
                        mode,
                        batch.len(),
                    )
                    .map_err(diverged(epoch))?;
                let g = tape.backward(loss).map_err(diverged(epoch))?;
                tape.accumulate_param_grads(&g, &mut grads);
                let share = batch.len() as f64 / n;
                loss_sum += tape.scalar(loss)? * share;
                mse_sum += (tape.scalar(f.y_hat)? - r.y).powi(2) / n;
            }
            if !grads.is_finite() {
                return Err(HapError::Divergence {
                    epoch,
                    detail: "non-finite gradient".into(),
                });
            }
            opt.apply(&mut model.store, &grads)
                .map_err(diverged(epoch))?;
        }
        if !loss_sum.is_finite() {
            return Err(HapError::Divergence {
                epoch,
                detail: format!("training loss {loss_sum}"),
            });
        }
        let vm = valid_mape(&model, &valid, mode).map_err(diverged(epoch))?;
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum,
            train_mse: mse_sum,
            valid_mape: vm,
        });
        if vm < log.best_valid_mape {
            log.best_valid_mape = vm;
            log.best_epoch = Some(epoch);
            best = model.store.clone();
        } else if config.patience > 0 && epoch - log.best_epoch.unwrap_or(0) >= config.patience {
            log.stopped_early = true;
            break;
        }
    }
    model.store = best;
    Ok(TrainOutcome { model, log })
}
