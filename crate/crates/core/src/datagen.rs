//! Synthetic multi-event datasets, cluster enumeration, splitting and the
//! JSON Lines dataset format.
//!
//! Events are grouped into consecutive triples `(a, b, c)`. Within a triple,
//! `c` modifies the effect coefficients of `a` and `b` whenever it is present
//! in the same cluster; events in different triples never interact.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::EventCluster;
use crate::error::{HapError, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Outcome shape functions applied to `coefficient · x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauFamily {
    /// `5 + 2 sin t`, `5 + 2 cos t`, `5 + sin t + cos t` by role.
    #[default]
    Trigonometric,
    /// `τ(t) = t` for every role.
    Linear,
}

/// Position of an event inside its triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    A,
    B,
    C,
}

impl Role {
    pub fn of(event: usize) -> Role {
        match (event - 1) % 3 {
            0 => Role::A,
            1 => Role::B,
            _ => Role::C,
        }
    }
}

impl TauFamily {
    pub fn apply(self, role: Role, t: f64) -> f64 {
        match self {
            TauFamily::Linear => t,
            TauFamily::Trigonometric => match role {
                Role::A => 5.0 + 2.0 * t.sin(),
                Role::B => 5.0 + 2.0 * t.cos(),
                Role::C => 5.0 + t.sin() + t.cos(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_e: usize,
    pub d: usize,
    pub subjects_per_cluster: usize,
    pub seed: u64,
    /// Modifier vectors are drawn from `U(-modifier_scale, modifier_scale)^d`.
    pub modifier_scale: f64,
    pub noise_std: f64,
    #[serde(default)]
    pub tau: TauFamily,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig::preset(3)
    }
}

impl SyntheticConfig {
    /// Standard sizes: E3 at 1000 subjects per cluster, E6 at 200, E9 at 100.
    pub fn preset(n_e: usize) -> Self {
        let subjects_per_cluster = match n_e {
            3 => 1000,
            6 => 200,
            _ => 100,
        };
        SyntheticConfig {
            n_e,
            d: 25,
            subjects_per_cluster,
            seed: 0,
            modifier_scale: 0.5,
            noise_std: 1.0,
            tau: TauFamily::Trigonometric,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.n_e, 3 | 6 | 9) {
            return Err(HapError::Config(format!(
                "no interrelation template for {} events (expected 3, 6 or 9)",
                self.n_e
            )));
        }
        if self.d == 0 {
            return Err(HapError::Config("d must be positive".into()));
        }
        if self.subjects_per_cluster == 0 {
            return Err(HapError::Config(
                "subjects_per_cluster must be at least 1".into(),
            ));
        }
        for (name, v) in [
            ("modifier_scale", self.modifier_scale),
            ("noise_std", self.noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(HapError::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Clusters included in the dataset.
    fn cluster_count(&self) -> usize {
        match self.n_e {
            9 => E9_CLUSTERS,
            n => (1 << n) - 1,
        }
    }
}

const E9_CLUSTERS: usize = 120;

/// All nonempty subsets of `1..=n_e`, ordered by size and then
/// lexicographically.
pub fn enumerate_clusters(n_e: usize) -> Result<Vec<EventCluster>> {
    if n_e == 0 {
        return Err(HapError::Contract(
            "cannot enumerate clusters of zero events".into(),
        ));
    }
    if n_e >= usize::BITS as usize - 1 {
        return Err(HapError::Contract(format!(
            "{n_e} events is too many to enumerate"
        )));
    }
    let mut sets: Vec<Vec<usize>> = (1usize..(1 << n_e))
        .map(|mask| {
            (0..n_e)
                .filter(|b| mask & (1 << b) != 0)
                .map(|b| b + 1)
                .collect()
        })
        .collect();
    sets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    sets.into_iter().map(EventCluster::new).collect()
}

/// Coefficients and modifiers behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// `coefficients[e - 1]` belongs to event `e`.
    pub coefficients: Vec<Vec<f64>>,
    /// `(source, target) -> vector`: when `source` is present, `target`'s
    /// coefficient is shifted by `vector`.
    pub modifiers: BTreeMap<(usize, usize), Vec<f64>>,
    pub tau: TauFamily,
}

impl GroundTruth {
    /// Noise-free outcome for one subject.
    pub fn expected_outcome(&self, x: &[f64], cluster: &EventCluster) -> f64 {
        cluster
            .ids()
            .iter()
            .map(|&e| {
                let mut coef = self.coefficients[e - 1].clone();
                for (&(src, tgt), shift) in &self.modifiers {
                    if tgt == e && cluster.contains(src) {
                        coef.iter_mut().zip(shift).for_each(|(c, s)| *c += s);
                    }
                }
                let t: f64 = coef.iter().zip(x).map(|(c, v)| c * v).sum();
                self.tau.apply(Role::of(e), t)
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = HapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(HapError::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectRecord {
    pub x: Vec<f64>,
    #[serde(rename = "events")]
    pub cluster: EventCluster,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_e: usize,
    pub d: usize,
    /// Generator settings when the data is synthetic.
    pub synthetic: Option<SyntheticConfig>,
    pub records: Vec<SubjectRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    n_e: usize,
    d: usize,
    records: usize,
    synthetic: Option<SyntheticConfig>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &SubjectRecord> {
        self.records.iter().filter(move |r| r.split == Some(split))
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split_records(split).count()
    }

    /// Distinct clusters in canonical form, sorted.
    pub fn clusters(&self) -> Vec<EventCluster> {
        let mut out: Vec<EventCluster> =
            self.records.iter().map(|r| r.cluster.canonical()).collect();
        out.sort();
        out.dedup();
        out
    }

    /// Check dimensions, event ids and outcome values of every record.
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.x.len() != self.d {
                return Err(HapError::Validation(format!(
                    "record {i}: x has {} values, expected {}",
                    r.x.len(),
                    self.d
                )));
            }
            r.cluster
                .check_limit(self.n_e)
                .map_err(|e| HapError::Validation(format!("record {i}: {e}")))?;
            if !r.y.is_finite() || r.x.iter().any(|v| !v.is_finite()) {
                return Err(HapError::Validation(format!(
                    "record {i}: non-finite value"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        let header = Header {
            format_version: DATASET_FORMAT_VERSION,
            n_e: self.n_e,
            d: self.d,
            records: self.records.len(),
            synthetic: self.synthetic.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines();
        let schema = |line: usize, msg: String| {
            HapError::Schema(format!("{}:{line}: {msg}", path.display()))
        };
        let header: Header = match lines.next() {
            Some(l) => serde_json::from_str(&l?).map_err(|e| schema(1, e.to_string()))?,
            None => return Err(schema(1, "empty file".into())),
        };
        if header.format_version != DATASET_FORMAT_VERSION {
            return Err(schema(
                1,
                format!("unsupported format version {}", header.format_version),
            ));
        }
        let mut records = Vec::with_capacity(header.records);
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: SubjectRecord =
                serde_json::from_str(&line).map_err(|e| schema(k + 2, e.to_string()))?;
            records.push(r);
        }
        if records.len() != header.records {
            return Err(schema(
                records.len() + 1,
                format!(
                    "header declares {} records, found {}",
                    header.records,
                    records.len()
                ),
            ));
        }
        let ds = Dataset {
            n_e: header.n_e,
            d: header.d,
            synthetic: header.synthetic,
            records,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn uniform_vec(rng: &mut ChaCha8Rng, d: usize, bound: f64) -> Vec<f64> {
    if bound == 0.0 {
        return vec![0.0; d];
    }
    (0..d).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Draw coefficients, modifiers and the included clusters from the seed.
fn draw_truth(config: &SyntheticConfig) -> Result<(GroundTruth, Vec<EventCluster>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let coefficients = (0..config.n_e)
        .map(|_| uniform_vec(&mut rng, config.d, 1.0))
        .collect();
    let mut modifiers = BTreeMap::new();
    for base in (1..=config.n_e).step_by(3) {
        let (a, b, c) = (base, base + 1, base + 2);
        modifiers.insert(
            (c, a),
            uniform_vec(&mut rng, config.d, config.modifier_scale),
        );
        modifiers.insert(
            (c, b),
            uniform_vec(&mut rng, config.d, config.modifier_scale),
        );
    }
    let all = enumerate_clusters(config.n_e)?;
    let clusters = if config.cluster_count() < all.len() {
        sample_small_biased(all, config.cluster_count(), &mut rng)
    } else {
        all
    };
    Ok((
        GroundTruth {
            coefficients,
            modifiers,
            tau: config.tau,
        },
        clusters,
    ))
}

/// Weighted sampling without replacement with weight `2^-(size - 1)`,
/// returned in enumeration order.
fn sample_small_biased(
    all: Vec<EventCluster>,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<EventCluster> {
    // Efraimidis-Spirakis keys in log form: ln(u) / w.
    let mut keyed: Vec<(f64, usize)> = all
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let w = 0.5f64.powi(c.len() as i32 - 1);
            (u.ln() / w, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut chosen: Vec<usize> = keyed.into_iter().take(k).map(|(_, i)| i).collect();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| all[i].clone()).collect()
}

/// Generate an unsplit dataset together with the parameters that produced it.
pub fn generate_with_truth(config: &SyntheticConfig) -> Result<(Dataset, GroundTruth)> {
    config.validate()?;
    let (truth, clusters) = draw_truth(config)?;
    let mut records = Vec::with_capacity(clusters.len() * config.subjects_per_cluster);
    for cluster in &clusters {
        for _ in 0..config.subjects_per_cluster {
            // Each record has its own stream so records are independent of
            // generation order.
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(records.len() as u64 + 1);
            let x: Vec<f64> = (0..config.d).map(|_| rng.sample(StandardNormal)).collect();
            let eps: f64 = rng.sample(StandardNormal);
            let y = truth.expected_outcome(&x, cluster) + config.noise_std * eps;
            records.push(SubjectRecord {
                x,
                cluster: cluster.clone(),
                y,
                split: None,
            });
        }
    }
    let ds = Dataset {
        n_e: config.n_e,
        d: config.d,
        synthetic: Some(config.clone()),
        records,
    };
    ds.validate()?;
    Ok((ds, truth))
}

pub fn generate(config: &SyntheticConfig) -> Result<Dataset> {
    generate_with_truth(config).map(|(ds, _)| ds)
}

pub const TRAIN_FRACTION: f64 = 0.6;
pub const VALID_FRACTION: f64 = 0.2;

/// Distribute `total` over groups proportionally to `counts` by largest
/// remainder, never exceeding `capacity` and giving at least one to every
/// group with capacity when `at_least_one` is set.
fn apportion(counts: &[usize], capacity: &[usize], total: usize, at_least_one: bool) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    let quota: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 * total as f64 / n as f64)
        .collect();
    let mut out: Vec<usize> = quota
        .iter()
        .zip(capacity)
        .map(|(&q, &cap)| {
            let base = q.floor() as usize;
            let base = if at_least_one { base.max(1) } else { base };
            base.min(cap)
        })
        .collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quota[a] - quota[a].floor();
        let fb = quota[b] - quota[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut assigned: usize = out.iter().sum();
    while assigned < total {
        let mut progressed = false;
        for &g in &order {
            if assigned == total {
                break;
            }
            if out[g] < capacity[g] {
                out[g] += 1;
                assigned += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    out
}

/// Tag every record train/valid/test in 60/20/20 proportion, stratified by
/// cluster so every cluster has at least one training record.
pub fn split(dataset: &Dataset, seed: u64) -> Result<Dataset> {
    let n = dataset.records.len();
    if n < 5 {
        return Err(HapError::Contract(format!(
            "cannot split {n} records (need at least 5)"
        )));
    }
    let mut groups: BTreeMap<EventCluster, Vec<usize>> = BTreeMap::new();
    for (i, r) in dataset.records.iter().enumerate() {
        groups.entry(r.cluster.canonical()).or_default().push(i);
    }
    let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
    let n_valid = (n as f64 * VALID_FRACTION).round() as usize;
    let counts: Vec<usize> = groups.values().map(Vec::len).collect();
    let train = apportion(&counts, &counts, n_train, true);
    let rest: Vec<usize> = counts.iter().zip(&train).map(|(c, t)| c - t).collect();
    let valid = apportion(&counts, &rest, n_valid, false);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = dataset.clone();
    for (g, members) in groups.values().enumerate() {
        let mut idx = members.clone();
        for k in (1..idx.len()).rev() {
            idx.swap(k, rng.random_range(0..=k));
        }
        for (pos, &i) in idx.iter().enumerate() {
            out.records[i].split = Some(if pos < train[g] {
                Split::Train
            } else if pos < train[g] + valid[g] {
                Split::Valid
            } else {
                Split::Test
            });
        }
    }
    Ok(out)
}
