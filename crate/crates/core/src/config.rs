//! Training configuration and its flat `key = value` text format.
//!
//! ```text
//! # comments run to end of line
//! seed = 7
//! net.preset = down_scaled
//! net.variant = mr-bcnn
//! train.lr = 1e-4
//! ```
//!
//! `net.preset` is applied before any other `net.*` key regardless of line
//! order. Relative paths resolve against the config file's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::loss::{BinomialSpec, HistogramSpec, LossConfig};
use crate::net::{NetworkConfig, RegionLayout, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrPolicy {
    /// Multiply by `factor` after `patience` consecutive evaluations without a
    /// new best validation Recall@1.
    Plateau { patience: usize, factor: f64 },
    /// Multiply by `factor` every `every` iterations.
    FixedStep { every: u64, factor: f64 },
}

impl Default for LrPolicy {
    fn default() -> Self {
        LrPolicy::Plateau {
            patience: 3,
            factor: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub net: NetworkConfig,
    pub seed: u64,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_policy: LrPolicy,
    pub max_iters: u64,
    pub eval_every: u64,
    /// Single-shot trials averaged for each validation Recall@1.
    pub val_trials: usize,
    pub loss: LossConfig,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetworkConfig::default(),
            seed: 0,
            batch: 128,
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_policy: LrPolicy::default(),
            max_iters: 1000,
            eval_every: 100,
            val_trials: 1,
            loss: LossConfig::default(),
            train_manifest: None,
            val_manifest: None,
            out_dir: PathBuf::from("run"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.batch < 2 {
            return Err(contract_err!("batch must be at least 2, got {}", self.batch));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(contract_err!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(contract_err!("momentum {} not in [0, 1)", self.momentum));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(contract_err!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if self.max_iters == 0 || self.eval_every == 0 || self.val_trials == 0 {
            return Err(contract_err!("max_iters, eval_every and val_trials must be positive"));
        }
        let factor = match self.lr_policy {
            LrPolicy::Plateau { patience, factor } => {
                if patience == 0 {
                    return Err(contract_err!("plateau patience must be positive"));
                }
                factor
            }
            LrPolicy::FixedStep { every, factor } => {
                if every == 0 {
                    return Err(contract_err!("fixed-step interval must be positive"));
                }
                factor
            }
        };
        if !(factor > 0.0 && factor < 1.0) {
            return Err(contract_err!("lr factor {factor} not in (0, 1)"));
        }
        match self.loss {
            LossConfig::Histogram(h) => {
                HistogramSpec::new(h.bins)?;
            }
            LossConfig::Binomial(b) => {
                if !(b.alpha > 0.0 && b.neg_cost > 0.0 && b.beta.is_finite()) {
                    return Err(contract_err!("invalid binomial parameters {b:?}"));
                }
            }
        }
        Ok(())
    }

    /// Serializes to the text format; `parse_config_str` inverts it.
    pub fn to_text(&self) -> String {
        let n = &self.net;
        let mut lines = vec![
            format!("seed = {}", self.seed),
            format!("net.variant = {}", n.variant),
            format!("net.input_h = {}", n.input_h),
            format!("net.input_w = {}", n.input_w),
            format!("net.part_height = {}", n.part_height),
            format!("net.part_stride = {}", n.part_stride),
            format!("net.channels1 = {}", n.channels1),
            format!("net.channels2 = {}", n.channels2),
            format!("net.kernel1 = {}", n.kernel1),
            format!("net.kernel2 = {}", n.kernel2),
            match n.regions {
                RegionLayout::Cell { h, w } => format!("net.cell = {h}x{w}"),
                RegionLayout::Count { rows, cols } => format!("net.regions = {rows}x{cols}"),
            },
            format!("net.embedding_dim = {}", n.embedding_dim),
            format!("net.dropout = {}", n.dropout_p),
            format!("net.normalize = {}", n.normalize),
            format!("train.batch = {}", self.batch),
            format!("train.lr = {}", self.lr),
            format!("train.momentum = {}", self.momentum),
            format!("train.weight_decay = {}", self.weight_decay),
        ];
        match self.lr_policy {
            LrPolicy::Plateau { patience, factor } => {
                lines.push("train.lr_policy = plateau".into());
                lines.push(format!("train.patience = {patience}"));
                lines.push(format!("train.factor = {factor}"));
            }
            LrPolicy::FixedStep { every, factor } => {
                lines.push("train.lr_policy = fixed_step".into());
                lines.push(format!("train.step_every = {every}"));
                lines.push(format!("train.factor = {factor}"));
            }
        }
        lines.push(format!("train.max_iters = {}", self.max_iters));
        lines.push(format!("train.eval_every = {}", self.eval_every));
        lines.push(format!("train.val_trials = {}", self.val_trials));
        match self.loss {
            LossConfig::Histogram(h) => {
                lines.push("loss.kind = histogram".into());
                lines.push(format!("loss.bins = {}", h.bins));
            }
            LossConfig::Binomial(b) => {
                lines.push("loss.kind = binomial".into());
                lines.push(format!("loss.alpha = {}", b.alpha));
                lines.push(format!("loss.beta = {}", b.beta));
                lines.push(format!("loss.neg_cost = {}", b.neg_cost));
            }
        }
        if let Some(p) = &self.train_manifest {
            lines.push(format!("data.train_manifest = {}", p.display()));
        }
        if let Some(p) = &self.val_manifest {
            lines.push(format!("data.val_manifest = {}", p.display()));
        }
        lines.push(format!("out.dir = {}", self.out_dir.display()));
        lines.join("\n") + "\n"
    }
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config_str(&text, path, &base)
}

/// Parses config text. `origin` is used in error messages; `base` anchors
/// relative paths.
pub fn parse_config_str(text: &str, origin: &Path, base: &Path) -> Result<TrainConfig> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line: line as u64,
        msg,
    };
    let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(line_no, format!("expected `key = value`, got {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(err(line_no, format!("empty key or value in {line:?}")));
        }
        if let Some((prev, _)) = entries.insert(k.to_string(), (line_no, v.to_string())) {
            return Err(err(line_no, format!("key {k} already set on line {prev}")));
        }
    }

    let mut cfg = TrainConfig::default();
    if let Some((line, v)) = entries.remove("net.preset") {
        cfg.net = match v.as_str() {
            "default" => NetworkConfig::default(),
            "down_scaled" | "down-scaled" => NetworkConfig::down_scaled(),
            other => return Err(err(line, format!("unknown preset {other:?}"))),
        };
    }
    if !entries.contains_key("train.max_iters") {
        return Err(err(0, "train.max_iters is required".into()));
    }

    let mut policy_kind: Option<(usize, String)> = None;
    let (mut patience, mut factor, mut every) = (None, None, None);
    let mut loss_kind: Option<(usize, String)> = None;
    let mut hist = HistogramSpec::default();
    let mut binom = BinomialSpec::default();
    let resolve = |v: &str| {
        let p = PathBuf::from(v);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };

    for (key, (line, v)) in &entries {
        let line = *line;
        let num = |what: &str| -> Result<f64> {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(line, format!("{what}: expected a number, got {v:?}")))
        };
        let int = |what: &str| -> Result<u64> {
            v.parse::<u64>()
                .map_err(|_| err(line, format!("{what}: expected a non-negative integer, got {v:?}")))
        };
        let pair = |what: &str| -> Result<(usize, usize)> {
            v.split_once(['x', 'X', ','])
                .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
                .ok_or_else(|| err(line, format!("{what}: expected AxB, got {v:?}")))
        };
        let n = &mut cfg.net;
        match key.as_str() {
            "seed" => cfg.seed = int(key)?,
            "net.variant" => n.variant = v.parse::<Variant>().map_err(|e| err(line, e.to_string()))?,
            "net.input_h" => n.input_h = int(key)? as usize,
            "net.input_w" => n.input_w = int(key)? as usize,
            "net.part_height" => n.part_height = int(key)? as usize,
            "net.part_stride" => n.part_stride = int(key)? as usize,
            "net.channels1" => n.channels1 = int(key)? as usize,
            "net.channels2" => n.channels2 = int(key)? as usize,
            "net.kernel1" => n.kernel1 = int(key)? as usize,
            "net.kernel2" => n.kernel2 = int(key)? as usize,
            "net.cell" => {
                let (h, w) = pair(key)?;
                n.regions = RegionLayout::Cell { h, w };
            }
            "net.regions" => {
                let (rows, cols) = pair(key)?;
                n.regions = RegionLayout::Count { rows, cols };
            }
            "net.embedding_dim" => n.embedding_dim = int(key)? as usize,
            "net.dropout" => n.dropout_p = num(key)?,
            "net.normalize" => {
                n.normalize = v
                    .parse::<bool>()
                    .map_err(|_| err(line, format!("{key}: expected true or false, got {v:?}")))?
            }
            "train.batch" => cfg.batch = int(key)? as usize,
            "train.lr" => cfg.lr = num(key)?,
            "train.momentum" => cfg.momentum = num(key)?,
            "train.weight_decay" => cfg.weight_decay = num(key)?,
            "train.lr_policy" => policy_kind = Some((line, v.clone())),
            "train.patience" => patience = Some(int(key)? as usize),
            "train.factor" => factor = Some(num(key)?),
            "train.step_every" => every = Some(int(key)?),
            "train.max_iters" => cfg.max_iters = int(key)?,
            "train.eval_every" => cfg.eval_every = int(key)?,
            "train.val_trials" => cfg.val_trials = int(key)? as usize,
            "loss.kind" => loss_kind = Some((line, v.clone())),
            "loss.bins" => hist.bins = int(key)? as usize,
            "loss.alpha" => binom.alpha = num(key)?,
            "loss.beta" => binom.beta = num(key)?,
            "loss.neg_cost" => binom.neg_cost = num(key)?,
            "data.train_manifest" => cfg.train_manifest = Some(resolve(v)),
            "data.val_manifest" => cfg.val_manifest = Some(resolve(v)),
            "out.dir" => cfg.out_dir = resolve(v),
            other => return Err(err(line, format!("unknown key {other}"))),
        }
    }

    let factor = factor.unwrap_or(0.1);
    cfg.lr_policy = match policy_kind.as_ref().map(|(l, s)| (*l, s.as_str())) {
        None | Some((_, "plateau")) => LrPolicy::Plateau {
            patience: patience.unwrap_or(3),
            factor,
        },
        Some((_, "fixed_step")) | Some((_, "fixed-step")) => LrPolicy::FixedStep {
            every: every.unwrap_or(100_000),
            factor,
        },
        Some((l, other)) => return Err(err(l, format!("unknown lr policy {other:?}"))),
    };
    cfg.loss = match loss_kind.as_ref().map(|(l, s)| (*l, s.as_str())) {
        None | Some((_, "histogram")) => LossConfig::Histogram(hist),
        Some((_, "binomial")) => LossConfig::Binomial(binom),
        Some((l, other)) => return Err(err(l, format!("unknown loss {other:?}"))),
    };
    cfg.validate()?;
    Ok(cfg)
}
