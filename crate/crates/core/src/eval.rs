//! MAPE and aggregate evaluation reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::EventCluster;
use crate::datagen::{Dataset, Split, SubjectRecord};
use crate::error::{HapError, Result};
use crate::model::{AblationMode, HapNet};
use crate::train::check_compatible;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapeStats {
    /// Percent.
    pub mean: f64,
    /// Standard error of the per-record percentages.
    pub stderr: f64,
}

/// Mean absolute percentage error `100/N Σ |(y - ŷ) / y|` with its standard
/// error.
pub fn mape(y: &[f64], y_hat: &[f64]) -> Result<MapeStats> {
    if y.len() != y_hat.len() {
        return Err(HapError::shape("mape", y.len(), y_hat.len()));
    }
    if y.is_empty() {
        return Err(HapError::Contract("mape of an empty sample".into()));
    }
    let zeros: Vec<usize> = y
        .iter()
        .enumerate()
        .filter(|(_, v)| **v == 0.0)
        .map(|(i, _)| i)
        .collect();
    if !zeros.is_empty() {
        return Err(HapError::Domain(format!(
            "mape undefined: y = 0 at indices {zeros:?}"
        )));
    }
    let ape: Vec<f64> = y
        .iter()
        .zip(y_hat)
        .map(|(a, p)| 100.0 * ((a - p) / a).abs())
        .collect();
    let n = ape.len() as f64;
    let mean = ape.iter().sum::<f64>() / n;
    let stderr = if ape.len() > 1 {
        let var = ape.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(MapeStats { mean, stderr })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub sum_y: f64,
    pub sum_yhat: f64,
    pub mean_y: f64,
    pub mean_yhat: f64,
    pub mape: f64,
}

#[derive(Default)]
struct Acc {
    y: Vec<f64>,
    y_hat: Vec<f64>,
}

impl Acc {
    fn push(&mut self, y: f64, y_hat: f64) {
        self.y.push(y);
        self.y_hat.push(y_hat);
    }

    fn finish(&self) -> Result<GroupStats> {
        let sum_y: f64 = self.y.iter().sum();
        let sum_yhat: f64 = self.y_hat.iter().sum();
        Ok(stats(
            self.y.len(),
            sum_y,
            sum_yhat,
            mape(&self.y, &self.y_hat)?.mean,
        ))
    }
}

fn stats(count: usize, sum_y: f64, sum_yhat: f64, mape: f64) -> GroupStats {
    GroupStats {
        count,
        sum_y,
        sum_yhat,
        mean_y: sum_y / count as f64,
        mean_yhat: sum_yhat / count as f64,
        mape,
    }
}

/// Test-set summary at three granularities: every record, every record
/// touched by an event, and every cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub split: Split,
    pub mape_mean: f64,
    pub mape_stderr: f64,
    pub per_event: BTreeMap<usize, GroupStats>,
    /// Keyed by canonical cluster, e.g. `"1+3"`.
    pub per_cluster: BTreeMap<String, GroupStats>,
    /// Sums are the sums of the `per_cluster` sums in key order.
    pub total: GroupStats,
}

impl EvalReport {
    /// Build a report from aligned records and predictions.
    pub fn from_predictions(
        model: &str,
        split: Split,
        records: &[&SubjectRecord],
        y_hat: &[f64],
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(HapError::Contract(format!("split `{split}` is empty")));
        }
        if records.len() != y_hat.len() {
            return Err(HapError::shape("EvalReport", records.len(), y_hat.len()));
        }
        let y: Vec<f64> = records.iter().map(|r| r.y).collect();
        let overall = mape(&y, y_hat)?;

        let mut clusters: BTreeMap<String, Acc> = BTreeMap::new();
        let mut events: BTreeMap<usize, Acc> = BTreeMap::new();
        for (r, &p) in records.iter().zip(y_hat) {
            clusters
                .entry(r.cluster.canonical().to_string())
                .or_default()
                .push(r.y, p);
            for &e in r.cluster.ids() {
                events.entry(e).or_default().push(r.y, p);
            }
        }
        let per_cluster = clusters
            .into_iter()
            .map(|(k, a)| Ok((k, a.finish()?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let per_event = events
            .into_iter()
            .map(|(k, a)| Ok((k, a.finish()?)))
            .collect::<Result<BTreeMap<_, _>>>()?;

        let mut count = 0;
        let mut sum_y = 0.0;
        let mut sum_yhat = 0.0;
        for g in per_cluster.values() {
            count += g.count;
            sum_y += g.sum_y;
            sum_yhat += g.sum_yhat;
        }
        Ok(EvalReport {
            model: model.to_string(),
            split,
            mape_mean: overall.mean,
            mape_stderr: overall.stderr,
            per_event,
            per_cluster,
            total: stats(count, sum_y, sum_yhat, overall.mean),
        })
    }

    /// Per-cluster statistics for `cluster` in any event order.
    pub fn cluster(&self, cluster: &EventCluster) -> Option<&GroupStats> {
        self.per_cluster.get(&cluster.canonical().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
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

pub fn predict_split(
    model: &HapNet,
    dataset: &Dataset,
    split: Split,
    mode: AblationMode,
) -> Result<Vec<f64>> {
    dataset
        .split_records(split)
        .map(|r| model.predict(&r.x, &r.cluster, mode).map(|p| p.y_hat))
        .collect()
}

pub fn evaluate(
    model: &HapNet,
    mode: AblationMode,
    dataset: &Dataset,
    split: Split,
) -> Result<EvalReport> {
    check_compatible(dataset, &model.config)?;
    let records: Vec<&SubjectRecord> = dataset.split_records(split).collect();
    let y_hat = predict_split(model, dataset, split, mode)?;
    EvalReport::from_predictions(&format!("hapnet-{mode}"), split, &records, &y_hat)
}
