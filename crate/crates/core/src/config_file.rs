//! Flat `key = value` run configuration covering [`ModelConfig`] and
//! [`TrainConfig`]. `seed` sets both seeds; `#` starts a comment.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{HapError, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Keys present in the parsed text.
    pub explicit: BTreeSet<String>,
}

fn parse_value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| HapError::Config(format!("line {line}: invalid value `{raw}` for `{key}`")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, raw_line) in text.lines().enumerate() {
            let line_no = k + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(HapError::Config(format!(
                    "line {line_no}: expected `key = value`"
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            if !cfg.explicit.insert(key.to_string()) {
                return Err(HapError::Config(format!(
                    "line {line_no}: duplicate key `{key}`"
                )));
            }
            cfg.set(line_no, key, value)?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "d" => m.d = parse_value(line, key, v)?,
            "n_e" => m.n_e = parse_value(line, key, v)?,
            "n_u" => m.n_u = parse_value(line, key, v)?,
            "n_s" => m.n_s = parse_value(line, key, v)?,
            "n_v" => m.n_v = parse_value(line, key, v)?,
            "n_z" => m.n_z = parse_value(line, key, v)?,
            "h" => m.h = parse_value(line, key, v)?,
            "routing_iters" => m.routing_iters = parse_value(line, key, v)?,
            "heads" => m.heads = parse_value(line, key, v)?,
            "beta" => m.beta = parse_value(line, key, v)?,
            "head_hidden" => m.head_hidden = parse_value(line, key, v)?,
            "decoder_hidden" => m.decoder_hidden = parse_value(line, key, v)?,
            "seed" => {
                m.seed = parse_value(line, key, v)?;
                t.seed = m.seed;
            }
            "learning_rate" => t.learning_rate = parse_value(line, key, v)?,
            "epochs" => t.epochs = parse_value(line, key, v)?,
            "batch_size" => t.batch_size = parse_value(line, key, v)?,
            "optimizer" => t.optimizer = v.parse()?,
            "ablation" => t.ablation = v.parse()?,
            "patience" => t.patience = parse_value(line, key, v)?,
            other => {
                return Err(HapError::Config(format!(
                    "line {line}: unknown key `{other}`"
                )))
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            HapError::Config(msg) => HapError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Every key with its current value, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let rows: [(&str, String); 19] = [
            ("d", m.d.to_string()),
            ("n_e", m.n_e.to_string()),
            ("n_u", m.n_u.to_string()),
            ("n_s", m.n_s.to_string()),
            ("n_v", m.n_v.to_string()),
            ("n_z", m.n_z.to_string()),
            ("h", m.h.to_string()),
            ("routing_iters", m.routing_iters.to_string()),
            ("heads", m.heads.to_string()),
            ("beta", m.beta.to_string()),
            ("head_hidden", m.head_hidden.to_string()),
            ("decoder_hidden", m.decoder_hidden.to_string()),
            ("seed", m.seed.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("optimizer", t.optimizer.to_string()),
            ("ablation", t.ablation.to_string()),
            ("patience", t.patience.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
