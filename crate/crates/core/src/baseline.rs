//! Reference regressors that see raw features and event indicators only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::EventCluster;
use crate::datagen::{Dataset, Split, SubjectRecord};
use crate::error::{HapError, Result};
use crate::eval::{mape, EvalReport};
use crate::numeric::{Shape, Tape, Var};
use crate::params::{GradBuffer, ParamId, ParamStore};
use crate::train::{cluster_batches, Optimizer, TrainConfig};

/// Binary membership vector of length `n_e`.
pub fn event_indicators(cluster: &EventCluster, n_e: usize) -> Vec<f64> {
    (1..=n_e)
        .map(|e| if cluster.contains(e) { 1.0 } else { 0.0 })
        .collect()
}

/// `[x, indicators, x ⊗ indicators]`: the interaction block lets a linear
/// model give every event its own slope.
pub fn linear_features(x: &[f64], cluster: &EventCluster, n_e: usize) -> Vec<f64> {
    let ind = event_indicators(cluster, n_e);
    let mut f = Vec::with_capacity(x.len() * (n_e + 1) + n_e);
    f.extend_from_slice(x);
    f.extend_from_slice(&ind);
    for &i in &ind {
        f.extend(x.iter().map(|v| v * i));
    }
    f
}

/// `[x, indicators]`.
pub fn mlp_features(x: &[f64], cluster: &EventCluster, n_e: usize) -> Vec<f64> {
    let mut f = x.to_vec();
    f.extend(event_indicators(cluster, n_e));
    f
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoConfig {
    /// L1 weight on standardized features.
    pub lambda: f64,
    pub max_sweeps: usize,
    /// Stop when no coefficient moves by more than this in a sweep.
    pub tol: f64,
}

impl Default for LassoConfig {
    fn default() -> Self {
        LassoConfig {
            lambda: 1e-4,
            max_sweeps: 20_000,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LassoModel {
    pub n_e: usize,
    pub intercept: f64,
    /// Coefficients on the raw (unstandardized) features.
    pub weights: Vec<f64>,
}

impl LassoModel {
    pub fn predict(&self, x: &[f64], cluster: &EventCluster) -> f64 {
        let f = linear_features(x, cluster, self.n_e);
        self.intercept + f.iter().zip(&self.weights).map(|(a, w)| a * w).sum::<f64>()
    }
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Minimize `1/(2N) Σ (y - b - w·f)² + λ |w|₁` over standardized features by
/// cyclic coordinate descent on the Gram matrix.
pub fn fit_lasso(
    records: &[&SubjectRecord],
    n_e: usize,
    config: &LassoConfig,
) -> Result<LassoModel> {
    if records.is_empty() {
        return Err(HapError::Contract("lasso needs at least one record".into()));
    }
    let rows: Vec<Vec<f64>> = records
        .iter()
        .map(|r| linear_features(&r.x, &r.cluster, n_e))
        .collect();
    let n = rows.len() as f64;
    let p = rows[0].len();
    let mut mean = vec![0.0; p];
    for row in &rows {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
    }
    let mut scale = vec![0.0; p];
    for row in &rows {
        for j in 0..p {
            scale[j] += (row[j] - mean[j]).powi(2) / n;
        }
    }
    scale.iter_mut().for_each(|s| *s = s.sqrt());
    let y_mean = records.iter().map(|r| r.y).sum::<f64>() / n;

    let mut gram = vec![0.0; p * p];
    let mut corr = vec![0.0; p];
    let mut z = vec![0.0; p];
    for (row, r) in rows.iter().zip(records) {
        for j in 0..p {
            z[j] = if scale[j] > 0.0 {
                (row[j] - mean[j]) / scale[j]
            } else {
                0.0
            };
        }
        let yc = r.y - y_mean;
        for j in 0..p {
            corr[j] += z[j] * yc / n;
            let zj = z[j] / n;
            for k in j..p {
                gram[j * p + k] += zj * z[k];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            gram[j * p + k] = gram[k * p + j];
        }
    }

    let mut w = vec![0.0; p];
    // gw = G w, maintained incrementally.
    let mut gw = vec![0.0; p];
    for _ in 0..config.max_sweeps {
        let mut max_step: f64 = 0.0;
        for j in 0..p {
            let gjj = gram[j * p + j];
            if gjj <= 0.0 {
                continue;
            }
            let rho = corr[j] - gw[j] + gjj * w[j];
            let new = soft_threshold(rho, config.lambda) / gjj;
            let delta = new - w[j];
            if delta != 0.0 {
                for k in 0..p {
                    gw[k] += delta * gram[k * p + j];
                }
                w[j] = new;
                max_step = max_step.max(delta.abs());
            }
        }
        if max_step < config.tol {
            break;
        }
    }

    let weights: Vec<f64> = (0..p)
        .map(|j| if scale[j] > 0.0 { w[j] / scale[j] } else { 0.0 })
        .collect();
    let intercept = y_mean - weights.iter().zip(&mean).map(|(w, m)| w * m).sum::<f64>();
    Ok(LassoModel {
        n_e,
        intercept,
        weights,
    })
}

/// Fully connected ELU network.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub store: ParamStore,
    layers: Vec<(ParamId, ParamId)>,
    pub n_e: usize,
    pub input: usize,
}

/// Hidden widths of the MLP baseline.
pub const MLP_HIDDEN: [usize; 2] = [64, 64];

impl Mlp {
    pub fn new(input: usize, hidden: &[usize], n_e: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut fan_in = input;
        for (k, &width) in hidden.iter().chain(std::iter::once(&1)).enumerate() {
            let bound = (6.0 / (fan_in + width) as f64).sqrt();
            let w = store.insert_uniform(
                &format!("mlp.W{k}"),
                Shape::new(width, fan_in),
                bound,
                &mut rng,
            )?;
            let b = store.insert_zeros(&format!("mlp.b{k}"), Shape::vector(width))?;
            layers.push((w, b));
            fan_in = width;
        }
        Ok(Mlp {
            store,
            layers,
            n_e,
            input,
        })
    }

    pub fn output_bias(&self) -> ParamId {
        self.layers.last().expect("at least one layer").1
    }

    fn forward(&self, tape: &mut Tape, features: &[f64]) -> Result<Var> {
        let mut h = tape.input_vector(features)?;
        let last = self.layers.len() - 1;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (tape.param(&self.store, w), tape.param(&self.store, b));
            let a = tape.matmul(w, h)?;
            h = tape.add(a, b)?;
            if k < last {
                h = tape.elu(h)?;
            }
        }
        Ok(h)
    }

    pub fn predict(&self, x: &[f64], cluster: &EventCluster) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &mlp_features(x, cluster, self.n_e))?;
        tape.scalar(out)
    }
}

/// Train the MLP baseline with the optimizer, batch size, epoch budget and
/// early stopping of `config`.
pub fn fit_mlp(dataset: &Dataset, config: &TrainConfig) -> Result<Mlp> {
    config.validate()?;
    let train: Vec<&SubjectRecord> = dataset.split_records(Split::Train).collect();
    let valid: Vec<&SubjectRecord> = dataset.split_records(Split::Valid).collect();
    if train.is_empty() || valid.is_empty() {
        return Err(HapError::Contract(
            "baseline needs nonempty train and valid splits".into(),
        ));
    }
    let mut mlp = Mlp::new(
        dataset.d + dataset.n_e,
        &MLP_HIDDEN,
        dataset.n_e,
        config.seed,
    )?;
    let y_mean = train.iter().map(|r| r.y).sum::<f64>() / train.len() as f64;
    let out_bias = mlp.output_bias();
    mlp.store.update(out_bias, |_, _| y_mean)?;

    let valid_mape = |m: &Mlp| -> Result<f64> {
        let y: Vec<f64> = valid.iter().map(|r| r.y).collect();
        let p = valid
            .iter()
            .map(|r| m.predict(&r.x, &r.cluster))
            .collect::<Result<Vec<_>>>()?;
        Ok(mape(&y, &p)?.mean)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, &mlp.store);
    let mut best = (valid_mape(&mlp)?, 0usize, mlp.store.clone());
    for epoch in 1..=config.epochs {
        for batch in cluster_batches(&train, config.batch_size, &mut rng) {
            let mut grads = GradBuffer::zeros_like(&mlp.store);
            for &i in &batch {
                let r = train[i];
                let mut tape = Tape::new();
                let out = mlp.forward(&mut tape, &mlp_features(&r.x, &r.cluster, mlp.n_e))?;
                let target = tape.constant(Shape::scalar(), r.y);
                let err = tape.sub(out, target)?;
                let sq = tape.mul(err, err)?;
                let loss = tape.scale(sq, 1.0 / batch.len() as f64)?;
                let g = tape.backward(loss)?;
                tape.accumulate_param_grads(&g, &mut grads);
            }
            opt.apply(&mut mlp.store, &grads)
                .map_err(|e| HapError::Divergence {
                    epoch,
                    detail: e.to_string(),
                })?;
        }
        let vm = valid_mape(&mlp)?;
        if vm < best.0 {
            best = (vm, epoch, mlp.store.clone());
        } else if config.patience > 0 && epoch - best.1 >= config.patience {
            break;
        }
    }
    mlp.store = best.2;
    Ok(mlp)
}

#[derive(Debug, Clone)]
pub struct BaselineReports {
    pub linear: EvalReport,
    pub mlp: EvalReport,
}

pub fn evaluate_lasso(model: &LassoModel, dataset: &Dataset, split: Split) -> Result<EvalReport> {
    let records: Vec<&SubjectRecord> = dataset.split_records(split).collect();
    let y_hat: Vec<f64> = records
        .iter()
        .map(|r| model.predict(&r.x, &r.cluster))
        .collect();
    EvalReport::from_predictions("linear", split, &records, &y_hat)
}

pub fn evaluate_mlp(model: &Mlp, dataset: &Dataset, split: Split) -> Result<EvalReport> {
    let records: Vec<&SubjectRecord> = dataset.split_records(split).collect();
    let y_hat = records
        .iter()
        .map(|r| model.predict(&r.x, &r.cluster))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_predictions("mlp", split, &records, &y_hat)
}

/// Fit both baselines on the training split and report on the test split.
pub fn run_baselines(dataset: &Dataset, config: &TrainConfig) -> Result<BaselineReports> {
    let train: Vec<&SubjectRecord> = dataset.split_records(Split::Train).collect();
    let lasso = fit_lasso(&train, dataset.n_e, &LassoConfig::default())?;
    let mlp = fit_mlp(dataset, config)?;
    Ok(BaselineReports {
        linear: evaluate_lasso(&lasso, dataset, Split::Test)?,
        mlp: evaluate_mlp(&mlp, dataset, Split::Test)?,
    })
}
