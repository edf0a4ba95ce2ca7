//! Multi-seed comparison of the full model against its ablations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Split};
use crate::error::{HapError, Result};
use crate::eval::evaluate;
use crate::model::{AblationMode, ModelConfig};
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub mode: AblationMode,
    pub seed: u64,
    pub test_mape: f64,
    /// Per-record standard error within this run.
    pub test_mape_stderr: f64,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: AblationMode,
    pub seeds: usize,
    pub mean_mape: f64,
    /// Sample standard deviation of the per-seed test MAPE.
    pub seed_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub runs: Vec<AblationRun>,
    pub summary: Vec<ModeSummary>,
}

impl AblationTable {
    pub fn summary_for(&self, mode: AblationMode) -> Option<&ModeSummary> {
        self.summary.iter().find(|s| s.mode == mode)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("mode       seeds  mean_mape  seed_sd\n");
        for m in &self.summary {
            let _ = writeln!(
                s,
                "{:<10} {:>5}  {:>9.4}  {:>7.4}",
                m.mode.to_string(),
                m.seeds,
                m.mean_mape,
                m.seed_sd
            );
        }
        s
    }
}

pub fn checkpoint_name(mode: AblationMode, seed: u64) -> String {
    format!("{mode}-seed{seed}.json")
}

/// Train every mode in `modes` once per seed and evaluate on the test split.
/// Both the model and the training seed are set to each seed in turn.
/// Checkpoints go to `out_dir` when given.
pub fn ablation_suite_modes(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    seeds: &[u64],
    modes: &[AblationMode],
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    if seeds.is_empty() || modes.is_empty() {
        return Err(HapError::Config(
            "ablation needs at least one seed and one mode".into(),
        ));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        for &mode in modes {
            let mc = ModelConfig {
                seed,
                ..model_config.clone()
            };
            let tc = TrainConfig {
                seed,
                ablation: mode,
                ..train_config.clone()
            };
            let out = train(dataset, &mc, &tc)?;
            let report = evaluate(&out.model, mode, dataset, Split::Test)?;
            let checkpoint = match out_dir {
                Some(dir) => {
                    let path = dir.join(checkpoint_name(mode, seed));
                    out.model.to_checkpoint(mode).save(&path)?;
                    Some(path)
                }
                None => None,
            };
            runs.push(AblationRun {
                mode,
                seed,
                test_mape: report.mape_mean,
                test_mape_stderr: report.mape_stderr,
                best_epoch: out.log.best_epoch,
                epochs_run: out.log.epochs.len(),
                checkpoint,
            });
        }
    }
    let summary = modes
        .iter()
        .map(|&mode| {
            let v: Vec<f64> = runs
                .iter()
                .filter(|r| r.mode == mode)
                .map(|r| r.test_mape)
                .collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let seed_sd = if v.len() > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            ModeSummary {
                mode,
                seeds: v.len(),
                mean_mape: mean,
                seed_sd,
            }
        })
        .collect();
    let table = AblationTable { runs, summary };
    if let Some(dir) = out_dir {
        fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&table)? + "\n",
        )?;
    }
    Ok(table)
}

/// All three modes for each seed.
pub fn ablation_suite(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    ablation_suite_modes(
        dataset,
        model_config,
        train_config,
        seeds,
        &AblationMode::ALL,
        out_dir,
    )
}
