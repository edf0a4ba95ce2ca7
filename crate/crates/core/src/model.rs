//! The full hierarchical capsule regressor.
//!
//! Pipeline for one subject: features `x` are disentangled into feature
//! capsules, routed once per member event into event capsules, merged into
//! cluster capsules, routed into outcome capsules, flattened, and mapped to a
//! scalar by a two-layer head. A decoder maps the same flattened outcome
//! representation back to feature space for the reconstruction term.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{build_cluster_capsules, Aggregation, AttentionParams, EventCluster};
use crate::capsule::{
    disentangle_features, event_capsules, outcome_capsules, EventBank, FeatureLayerParams, PoseVar,
    RoutingParams,
};
use crate::error::{HapError, Result};
use crate::numeric::{cosine_similarity, Shape, Tape, Var};
use crate::params::{ParamEntry, ParamId, ParamStore};

/// Bound of the uniform initialization of capsule transforms and feature
/// projections.
pub const CAPSULE_INIT_BOUND: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub n_e: usize,
    pub n_u: usize,
    pub n_s: usize,
    pub n_v: usize,
    pub n_z: usize,
    pub h: usize,
    pub routing_iters: usize,
    pub heads: usize,
    pub beta: f64,
    pub head_hidden: usize,
    pub decoder_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 25,
            n_e: 3,
            n_u: 5,
            n_s: 5,
            n_v: 5,
            n_z: 5,
            h: 8,
            routing_iters: 3,
            heads: 3,
            beta: 0.1,
            head_hidden: 32,
            decoder_hidden: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("n_e", self.n_e),
            ("n_u", self.n_u),
            ("n_s", self.n_s),
            ("n_z", self.n_z),
            ("h", self.h),
            ("routing_iters", self.routing_iters),
            ("heads", self.heads),
            ("head_hidden", self.head_hidden),
            ("decoder_hidden", self.decoder_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(HapError::Config(format!("{name} must be positive")));
        }
        if self.n_v != self.n_s {
            return Err(HapError::Config(format!(
                "n_v ({}) must equal n_s ({})",
                self.n_v, self.n_s
            )));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(HapError::Config(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }

    /// Length of the flattened outcome representation.
    pub fn outcome_len(&self) -> usize {
        self.n_z * self.h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    Full,
    NoPaaa,
    NoRecon,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [
        AblationMode::Full,
        AblationMode::NoRecon,
        AblationMode::NoPaaa,
    ];

    pub fn aggregation(self) -> Aggregation {
        match self {
            AblationMode::NoPaaa => Aggregation::AdditiveOnly,
            _ => Aggregation::Attention,
        }
    }

    /// Reconstruction weight actually applied.
    pub fn effective_beta(self, beta: f64) -> f64 {
        match self {
            AblationMode::NoRecon => 0.0,
            _ => beta,
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationMode::Full => "full",
            AblationMode::NoPaaa => "no-paaa",
            AblationMode::NoRecon => "no-recon",
        })
    }
}

impl FromStr for AblationMode {
    type Err = HapError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('_', "-").as_str() {
            "full" => Ok(AblationMode::Full),
            "no-paaa" => Ok(AblationMode::NoPaaa),
            "no-recon" => Ok(AblationMode::NoRecon),
            other => Err(HapError::Config(format!(
                "unknown ablation `{other}` (expected full, no-paaa or no-recon)"
            ))),
        }
    }
}

/// Affine -> ELU -> affine.
#[derive(Debug, Clone)]
pub struct TwoLayer {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl TwoLayer {
    fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Result<Self> {
        let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        Ok(TwoLayer {
            w1: store.insert_uniform(
                &format!("{prefix}.W1"),
                Shape::new(hidden, input),
                glorot(input, hidden),
                rng,
            )?,
            b1: store.insert_zeros(&format!("{prefix}.b1"), Shape::vector(hidden))?,
            w2: store.insert_uniform(
                &format!("{prefix}.W2"),
                Shape::new(output, hidden),
                glorot(hidden, output),
                rng,
            )?,
            b2: store.insert_zeros(&format!("{prefix}.b2"), Shape::vector(output))?,
            input,
            hidden,
            output,
        })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        if tape.shape(x) != Shape::vector(self.input) {
            return Err(HapError::shape(
                "TwoLayer::apply",
                Shape::vector(self.input),
                tape.shape(x),
            ));
        }
        let (w1, b1) = (tape.param(store, self.w1), tape.param(store, self.b1));
        let (w2, b2) = (tape.param(store, self.w2), tape.param(store, self.b2));
        let hid = tape.matmul(w1, x)?;
        let hid = tape.add(hid, b1)?;
        let hid = tape.elu(hid)?;
        let out = tape.matmul(w2, hid)?;
        tape.add(out, b2)
    }
}

/// Tape handles produced by [`HapNet::forward`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub y_hat: Var,
    /// Flattened outcome capsules.
    pub z_flat: Var,
    pub outcome: PoseVar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub y_hat: f64,
    pub z_flat: Vec<f64>,
}

/// One subject's contribution to the objective.
#[derive(Debug, Clone)]
pub struct LossTerms<'a> {
    pub y_hat: f64,
    pub y: f64,
    pub x_hat: &'a [f64],
    pub x: &'a [f64],
}

/// `mean((ŷ - y)²) - β · mean(cos(x̂, x))`
pub fn loss_total(batch: &[LossTerms<'_>], beta: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(HapError::Contract("loss of an empty batch".into()));
    }
    let n = batch.len() as f64;
    let mse = batch.iter().map(|t| (t.y_hat - t.y).powi(2)).sum::<f64>() / n;
    if beta == 0.0 {
        return Ok(mse);
    }
    let mut sim = 0.0;
    for t in batch {
        sim += cosine_similarity(t.x_hat, t.x)?;
    }
    Ok(mse - beta * sim / n)
}

#[derive(Debug, Clone)]
pub struct HapNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub features: FeatureLayerParams,
    pub events: EventBank,
    pub attention: AttentionParams,
    pub outcome: RoutingParams,
    pub head: TwoLayer,
    pub decoder: TwoLayer,
}

impl HapNet {
    /// Fresh model with parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut store = ParamStore::new();
        let features =
            FeatureLayerParams::init(&mut store, &mut rng, c.d, c.n_u, c.h, CAPSULE_INIT_BOUND)?;
        let events = EventBank::init(
            &mut store,
            &mut rng,
            c.n_e,
            c.n_u,
            c.n_s,
            c.h,
            CAPSULE_INIT_BOUND,
        )?;
        let attention =
            AttentionParams::init(&mut store, &mut rng, c.heads, c.h, CAPSULE_INIT_BOUND)?;
        let outcome = RoutingParams::init(
            &mut store,
            &mut rng,
            "outcome",
            c.n_v,
            c.n_z,
            c.h,
            c.h,
            CAPSULE_INIT_BOUND,
        )?;
        let z = c.outcome_len();
        let head = TwoLayer::init(&mut store, &mut rng, "head", z, c.head_hidden, 1)?;
        let decoder = TwoLayer::init(&mut store, &mut rng, "decoder", z, c.decoder_hidden, c.d)?;
        Ok(HapNet {
            config,
            store,
            features,
            events,
            attention,
            outcome,
            head,
            decoder,
        })
    }

    /// Record the prediction pipeline for one subject on `tape`, reading
    /// parameter values from `store` (normally `self.store`).
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &[f64],
        cluster: &EventCluster,
        mode: AblationMode,
    ) -> Result<ForwardVars> {
        let c = &self.config;
        if x.len() != c.d {
            return Err(HapError::shape("HapNet::forward", c.d, x.len()));
        }
        cluster
            .check_limit(c.n_e)
            .map_err(|e| HapError::Contract(e.to_string()))?;
        let xv = tape.input_vector(x)?;
        let u = disentangle_features(tape, store, &self.features, xv)?;
        let event_sets = cluster
            .ids()
            .iter()
            .map(|&e| event_capsules(tape, store, &self.events, u, e, c.routing_iters))
            .collect::<Result<Vec<_>>>()?;
        let aggregation = mode.aggregation();
        let bound = match aggregation {
            Aggregation::Attention => Some(self.attention.bind(tape, store)?),
            Aggregation::AdditiveOnly => None,
        };
        let v = build_cluster_capsules(tape, bound.as_ref(), &event_sets, aggregation)?;
        let (z, _) = outcome_capsules(tape, store, &self.outcome, v, c.routing_iters)?;
        let z_flat = tape.reshape(z.var, Shape::vector(c.outcome_len()))?;
        let y = self.head.apply(tape, store, z_flat)?;
        Ok(ForwardVars {
            y_hat: y,
            z_flat,
            outcome: z,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &[f64],
        cluster: &EventCluster,
        mode: AblationMode,
    ) -> Result<ForwardVars> {
        self.forward_with(tape, &self.store, x, cluster, mode)
    }

    pub fn predict(
        &self,
        x: &[f64],
        cluster: &EventCluster,
        mode: AblationMode,
    ) -> Result<Prediction> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, x, cluster, mode)?;
        Ok(Prediction {
            y_hat: tape.scalar(f.y_hat)?,
            z_flat: tape.value(f.z_flat).to_vec(),
        })
    }

    /// Decoder output `x̂` for a flattened outcome representation on `tape`.
    pub fn reconstruct_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z_flat: Var,
    ) -> Result<Var> {
        self.decoder.apply(tape, store, z_flat)
    }

    pub fn reconstruct(&self, z_flat: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let z = tape.input_vector(z_flat)?;
        let x_hat = self.reconstruct_with(&mut tape, &self.store, z)?;
        Ok(tape.value(x_hat).to_vec())
    }

    /// This subject's share of the batch objective,
    /// `((ŷ - y)² - β · cos(x̂, x)) / batch_len`. The decoder is only recorded
    /// when the effective β is nonzero.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_loss_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &[f64],
        cluster: &EventCluster,
        y: f64,
        mode: AblationMode,
        batch_len: usize,
    ) -> Result<(Var, ForwardVars)> {
        if batch_len == 0 {
            return Err(HapError::Contract("loss of an empty batch".into()));
        }
        let f = self.forward_with(tape, store, x, cluster, mode)?;
        let target = tape.constant(Shape::scalar(), y);
        let err = tape.sub(f.y_hat, target)?;
        let mut loss = tape.mul(err, err)?;
        let beta = mode.effective_beta(self.config.beta);
        if beta != 0.0 {
            let x_hat = self.reconstruct_with(tape, store, f.z_flat)?;
            let xv = tape.input_vector(x)?;
            let sim = tape.cosine(x_hat, xv)?;
            let weighted = tape.scale(sim, beta)?;
            loss = tape.sub(loss, weighted)?;
        }
        let loss = tape.scale(loss, 1.0 / batch_len as f64)?;
        Ok((loss, f))
    }

    /// Parameters belonging to one event's routing network.
    pub fn event_param_ids(&self, event: usize) -> Result<&[ParamId]> {
        Ok(&self.events.get(event)?.weights)
    }

    pub fn to_checkpoint(&self, mode: AblationMode) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            ablation: mode,
            config: self.config.clone(),
            params: self.store.to_entries(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(HapError::Schema(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.format_version
            )));
        }
        let mut model = HapNet::new(ckpt.config.clone())?;
        model.store.load_entries(&ckpt.params)?;
        Ok(model)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Model configuration plus every named parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub ablation: AblationMode,
    pub config: ModelConfig,
    pub params: BTreeMap<String, ParamEntry>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| HapError::Schema(format!("{}: {e}", path.display())))
    }
}
