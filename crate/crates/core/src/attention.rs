//! Property-aware additive attention over the events of a cluster.
//!
//! Event capsules that sit at the same position `j` in their events describe
//! the same property, so attention is computed only within each position
//! group. The attended capsules of a group are then summed, which yields
//! exactly `n_s` cluster capsules whatever the number of events.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::capsule::{CapsuleLevel, PoseVar};
use crate::error::{HapError, Result};
use crate::numeric::{Shape, Tape, Var, LEAKY_RELU_SLOPE};
use crate::params::{ParamId, ParamStore};

/// Distinct, nonempty set of 1-based event ids, kept in the order given.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct EventCluster(Vec<usize>);

impl EventCluster {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(HapError::Contract("event cluster must not be empty".into()));
        }
        if ids.contains(&0) {
            return Err(HapError::Validation("event ids start at 1".into()));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(HapError::Validation(format!(
                "duplicate event id in {ids:?}"
            )));
        }
        Ok(EventCluster(ids))
    }

    /// Validate against the number of events a model or dataset knows.
    pub fn with_limit(ids: Vec<usize>, n_events: usize) -> Result<Self> {
        let c = Self::new(ids)?;
        c.check_limit(n_events)?;
        Ok(c)
    }

    pub fn check_limit(&self, n_events: usize) -> Result<()> {
        match self.0.iter().find(|&&e| e > n_events) {
            Some(e) => Err(HapError::Validation(format!(
                "event id {e} exceeds the number of events ({n_events})"
            ))),
            None => Ok(()),
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, event: usize) -> bool {
        self.0.contains(&event)
    }

    /// Same events in ascending order.
    pub fn canonical(&self) -> EventCluster {
        let mut ids = self.0.clone();
        ids.sort_unstable();
        EventCluster(ids)
    }
}

impl TryFrom<Vec<usize>> for EventCluster {
    type Error = HapError;

    fn try_from(ids: Vec<usize>) -> Result<Self> {
        EventCluster::new(ids)
    }
}

impl From<EventCluster> for Vec<usize> {
    fn from(c: EventCluster) -> Self {
        c.0
    }
}

impl fmt::Display for EventCluster {
    /// `1+3` style label.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|e| e.to_string()).collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for EventCluster {
    type Err = HapError;

    fn from_str(s: &str) -> Result<Self> {
        let ids = s
            .split('+')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| HapError::Validation(format!("bad event id `{p}` in `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        EventCluster::new(ids)
    }
}

/// How cluster capsules are formed from event capsules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Attention within each position group, then vector addition.
    Attention,
    /// Vector addition only; no attention parameters are used.
    AdditiveOnly,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub weight: ParamId,
    pub score: ParamId,
}

/// Independent `(W, a)` per head; outputs of the heads are averaged.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    pub dim: usize,
    pub slope: f64,
}

impl AttentionParams {
    /// Registers `paaa.head.{k}.W` (`h x h`) and `paaa.head.{k}.a` (`2h`).
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        heads: usize,
        dim: usize,
        bound: f64,
    ) -> Result<Self> {
        if heads == 0 {
            return Err(HapError::Config("attention needs at least one head".into()));
        }
        let heads = (0..heads)
            .map(|k| {
                Ok(HeadParams {
                    weight: store.insert_uniform(
                        &format!("paaa.head.{k}.W"),
                        Shape::new(dim, dim),
                        bound,
                        rng,
                    )?,
                    score: store.insert_uniform(
                        &format!("paaa.head.{k}.a"),
                        Shape::vector(2 * dim),
                        bound,
                        rng,
                    )?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(AttentionParams {
            heads,
            dim,
            slope: LEAKY_RELU_SLOPE,
        })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<BoundAttention> {
        let h = self.dim;
        let heads = self
            .heads
            .iter()
            .map(|hp| {
                let weight = tape.param(store, hp.weight);
                let a = tape.param(store, hp.score);
                Ok(BoundHead {
                    weight,
                    score_self: tape.slice_rows(a, 0, h)?,
                    score_other: tape.slice_rows(a, h, h)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(BoundAttention {
            heads,
            dim: h,
            slope: self.slope,
        })
    }
}

/// Attention parameters as tape leaves, with `a` split into the halves that
/// multiply the attending and the attended capsule.
#[derive(Debug, Clone)]
pub struct BoundHead {
    pub weight: Var,
    pub score_self: Var,
    pub score_other: Var,
}

#[derive(Debug, Clone)]
pub struct BoundAttention {
    pub heads: Vec<BoundHead>,
    pub dim: usize,
    pub slope: f64,
}

/// Event capsules regrouped by position: `groups[j]` holds `s_j^(e)` for
/// every event of the cluster, one per row, in cluster order.
#[derive(Debug, Clone)]
pub struct StackedCluster {
    pub groups: Vec<Var>,
    pub events: usize,
    pub dim: usize,
}

impl StackedCluster {
    pub fn total_capsules(&self) -> usize {
        self.groups.len() * self.events
    }
}

pub fn stack_cluster(tape: &mut Tape, event_sets: &[PoseVar]) -> Result<StackedCluster> {
    let Some(first) = event_sets.first() else {
        return Err(HapError::Contract("cannot stack an empty cluster".into()));
    };
    if let Some(bad) = event_sets
        .iter()
        .find(|p| p.count != first.count || p.dim != first.dim)
    {
        return Err(HapError::shape(
            "stack_cluster",
            Shape::new(first.count, first.dim),
            Shape::new(bad.count, bad.dim),
        ));
    }
    let k = event_sets.len();
    let groups = if k == 1 {
        (0..first.count)
            .map(|j| tape.slice_rows(first.var, j, 1))
            .collect::<Result<_>>()?
    } else {
        (0..first.count)
            .map(|j| {
                let rows = event_sets
                    .iter()
                    .map(|p| tape.slice_rows(p.var, j, 1))
                    .collect::<Result<Vec<_>>>()?;
                tape.concat(&rows, Shape::new(k, first.dim))
            })
            .collect::<Result<_>>()?
    };
    Ok(StackedCluster {
        groups,
        events: k,
        dim: first.dim,
    })
}

/// Row-normalized scores
/// `α_kl = softmax_l(LeakyReLU(aᵀ[W s_k ‖ W s_l]))` for one head, together
/// with the transformed capsules `W s_l` (one per row).
pub fn attention_scores(
    tape: &mut Tape,
    head: &BoundHead,
    slope: f64,
    group: Var,
) -> Result<(Var, Var)> {
    let transformed = tape.matmul_nt(group, head.weight)?;
    let own = tape.matmul(transformed, head.score_self)?;
    let other = tape.matmul(transformed, head.score_other)?;
    let raw = tape.outer_sum(own, other)?;
    let raw = tape.leaky_relu(raw, slope)?;
    let alpha = tape.softmax_rows(raw)?;
    Ok((alpha, transformed))
}

/// `s̄_k = tanh(Σ_l α_kl W s_l)`, averaged over heads.
pub fn attend_position(tape: &mut Tape, attn: &BoundAttention, group: Var) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for head in &attn.heads {
        let (alpha, transformed) = attention_scores(tape, head, attn.slope, group)?;
        let mixed = tape.matmul(alpha, transformed)?;
        let out = tape.tanh(mixed)?;
        acc = Some(match acc {
            None => out,
            Some(prev) => tape.add(prev, out)?,
        });
    }
    let total = acc.ok_or_else(|| HapError::Config("attention has no heads".into()))?;
    if attn.heads.len() == 1 {
        Ok(total)
    } else {
        tape.scale(total, 1.0 / attn.heads.len() as f64)
    }
}

/// `v_j = Σ_l s̄_j^(l)`: sums the rows of an attended group.
pub fn additive_combine(tape: &mut Tape, attended: Var) -> Result<Var> {
    if tape.shape(attended).rows == 0 {
        return Err(HapError::Contract("empty attended group".into()));
    }
    tape.sum_rows(attended)
}

/// Linear transform only, for clusters of a single event:
/// `v_j = tanh(W s_j)`, averaged over heads.
fn transform_single(tape: &mut Tape, attn: &BoundAttention, capsules: Var) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for head in &attn.heads {
        let t = tape.matmul_nt(capsules, head.weight)?;
        let out = tape.tanh(t)?;
        acc = Some(match acc {
            None => out,
            Some(prev) => tape.add(prev, out)?,
        });
    }
    let total = acc.ok_or_else(|| HapError::Config("attention has no heads".into()))?;
    if attn.heads.len() == 1 {
        Ok(total)
    } else {
        tape.scale(total, 1.0 / attn.heads.len() as f64)
    }
}

/// Cluster capsules `V` from the event capsules of every member event.
///
/// `attention` may be `None` only for [`Aggregation::AdditiveOnly`].
pub fn build_cluster_capsules(
    tape: &mut Tape,
    attention: Option<&BoundAttention>,
    event_sets: &[PoseVar],
    mode: Aggregation,
) -> Result<PoseVar> {
    let Some(first) = event_sets.first() else {
        return Err(HapError::Contract(
            "cluster has no computed event capsules".into(),
        ));
    };
    let (count, dim) = (first.count, first.dim);
    let var = match mode {
        Aggregation::AdditiveOnly => {
            let mut acc = first.var;
            for p in &event_sets[1..] {
                if (p.count, p.dim) != (count, dim) {
                    return Err(HapError::shape(
                        "build_cluster_capsules",
                        Shape::new(count, dim),
                        Shape::new(p.count, p.dim),
                    ));
                }
                acc = tape.add(acc, p.var)?;
            }
            acc
        }
        Aggregation::Attention => {
            let attn = attention.ok_or_else(|| {
                HapError::Contract("attention aggregation needs attention parameters".into())
            })?;
            if event_sets.len() == 1 {
                transform_single(tape, attn, first.var)?
            } else {
                let stacked = stack_cluster(tape, event_sets)?;
                let rows = stacked
                    .groups
                    .iter()
                    .map(|&g| {
                        let attended = attend_position(tape, attn, g)?;
                        additive_combine(tape, attended)
                    })
                    .collect::<Result<Vec<_>>>()?;
                tape.concat(&rows, Shape::new(count, dim))?
            }
        }
    };
    Ok(PoseVar {
        var,
        level: CapsuleLevel::Cluster,
        count,
        dim,
    })
}
