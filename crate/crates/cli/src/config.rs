//! Run configuration: a line-oriented `key = value` file with dotted
//! sections. `[section]` headers prefix the keys that follow them.
//!
//! Every key has a default (see [`DEFAULTS`]); unknown keys are rejected.
//! The config hash is the SHA-256 of the resolved `key = value` lines in key
//! order, excluding the output directory, truncated to 16 hex digits.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use spikedistill::archs;
use spikedistill::datasets::{DatasetKind, DatasetSpec};
use spikedistill::distill::{AttentionMode, DistillConfig, LayerPair, StudentActivation};
use spikedistill::encoding::Coding;
use spikedistill::network::{Level, NetworkSpec, Role};
use spikedistill::optim::{OptimizerConfig, OptimizerKind};
use spikedistill::snn::SnnConfig;

/// `(key, default, description)`.
pub const DEFAULTS: &[(&str, &str, &str)] = &[
    ("seed", "42", "global seed; every random stream derives from it"),
    ("out", "runs", "output directory (not part of the hash)"),
    ("dataset.kind", "mnist", "mnist | cifar10"),
    ("dataset.dir", "data/mnist", "directory holding the idx files or CIFAR-10 binary batches"),
    ("dataset.train_subset", "0", "random training subset size, 0 = all"),
    ("dataset.test_subset", "0", "random test subset size, 0 = all"),
    ("dataset.subset_seed", "7", "seed of the subset draw"),
    ("teacher.arch", "vgg9", "vgg9 | resnet"),
    ("teacher.width", "16", "base channel width"),
    ("teacher.dropout", "0.2", ""),
    ("teacher.optimizer", "sgd", "sgd | adam"),
    ("teacher.lr", "0.01", ""),
    ("teacher.momentum", "0.9", ""),
    ("teacher.weight_decay", "0.0005", ""),
    ("teacher.epochs", "30", ""),
    ("teacher.batch_size", "32", ""),
    ("intermediate.arch", "3conv2linear", "3conv2linear | vgg5 | resnet"),
    ("intermediate.widths", "8,16,16", "conv widths (vgg5 uses two, resnet the first)"),
    ("intermediate.hidden", "64", "hidden linear width"),
    ("intermediate.dropout", "0.2", ""),
    ("intermediate.optimizer", "sgd", "sgd | adam"),
    ("intermediate.lr", "0.01", ""),
    ("intermediate.momentum", "0.9", ""),
    ("intermediate.weight_decay", "0.0005", ""),
    ("intermediate.epochs", "30", ""),
    ("intermediate.batch_size", "32", ""),
    ("conversion.time_steps", "500", "calibration length"),
    ("conversion.samples", "512", "calibration images, taken from the start of the training set"),
    ("conversion.percentile", "100", "100 = max preactivation"),
    ("snn.leak", "0.99", "membrane leak, in (0, 1]"),
    ("snn.gamma", "0.3", "surrogate damping"),
    ("snn.time_steps", "100", ""),
    ("snn.coding", "poisson", "poisson | direct"),
    ("snn.reset_grad", "true", "backpropagate through the soft reset"),
    ("snn.temporal_grad", "true", "backpropagate through the membrane recurrence"),
    ("distill.alpha", "0.9", "attention loss weight; 0 = hybrid training"),
    ("distill.mode", "activation", "activation | gradient"),
    ("distill.levels", "low,mid,high", ""),
    ("distill.normalize", "true", "divide maps by their Frobenius norm"),
    ("distill.student_activation", "spikes", "spikes | membrane"),
    ("distill.sam_all_steps", "false", "gradient mode: average the map over all steps"),
    ("distill.pairs", "", "explicit level:teacher_layer:student_layer list, empty = level tags"),
    ("distill.optimizer", "adam", "sgd | adam"),
    ("distill.lr", "0.0001", ""),
    ("distill.momentum", "0.9", "sgd only"),
    ("distill.weight_decay", "0.0005", ""),
    ("distill.epochs", "10", ""),
    ("distill.batch_size", "16", ""),
    ("evaluate.samples", "2000", "test images evaluated, 0 = whole test set"),
];

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => err(format!("unknown config key '{key}'")),
        }
    }

    /// Applies `key=value`.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("override '{kv}' is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut section = String::new();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = || format!("{origin}:{}", n + 1);
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError(format!("{}: bad section header", at())))?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("{}: expected key = value", at())))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            if let Some(prev) = seen.insert(key.clone(), n + 1) {
                return err(format!("{}: '{key}' already set on line {prev}", at()));
            }
            self.set(&key, v).map_err(|e| ConfigError(format!("{}: {e}", at())))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.merge_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("no key {key}"))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.get(key)
            .parse()
            .map_err(|e| ConfigError(format!("{key} = '{}': {e}", self.get(key))))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        let raw = self.get(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| s.trim().parse().map_err(|e| ConfigError(format!("{key} = '{raw}': {e}"))))
            .collect()
    }

    /// Resolved configuration, one `key = value` line per key.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            if k != "out" {
                h.update(format!("{k} = {v}\n").as_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out"))
    }

    pub fn dataset(&self) -> Result<DatasetSpec> {
        let dir = PathBuf::from(self.get("dataset.dir"));
        let (kind, classes, shape, train, test) = match self.get("dataset.kind") {
            "mnist" => (
                DatasetKind::Mnist,
                10,
                [1, 28, 28],
                vec![dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte")],
                vec![dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte")],
            ),
            "cifar10" => (
                DatasetKind::Cifar10,
                10,
                [3, 32, 32],
                (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
                vec![dir.join("test_batch.bin")],
            ),
            other => return err(format!("dataset.kind = '{other}': expected mnist or cifar10")),
        };
        for p in train.iter().chain(&test) {
            if !p.is_file() {
                return err(format!("dataset file not found: {}", p.display()));
            }
        }
        Ok(DatasetSpec {
            name: self.get("dataset.kind").to_string(),
            kind,
            classes,
            image_shape: shape,
            train_paths: train,
            test_paths: test,
            train_subset: self.parse("dataset.train_subset")?,
            test_subset: self.parse("dataset.test_subset")?,
            subset_seed: self.parse("dataset.subset_seed")?,
        })
    }

    pub fn optimizer(&self, stage: &str) -> Result<OptimizerConfig> {
        let kind: OptimizerKind = self.parse(&format!("{stage}.optimizer"))?;
        let lr = self.parse(&format!("{stage}.lr"))?;
        let wd = self.parse(&format!("{stage}.weight_decay"))?;
        Ok(match kind {
            OptimizerKind::Sgd => OptimizerConfig::sgd(lr, self.parse(&format!("{stage}.momentum"))?, wd),
            OptimizerKind::Adam => OptimizerConfig::adam(lr, wd),
        })
    }

    pub fn epochs(&self, stage: &str) -> Result<usize> {
        self.parse(&format!("{stage}.epochs"))
    }

    pub fn batch_size(&self, stage: &str) -> Result<usize> {
        let b: usize = self.parse(&format!("{stage}.batch_size"))?;
        if b == 0 {
            return err(format!("{stage}.batch_size must be positive"));
        }
        Ok(b)
    }

    pub fn teacher_spec(&self, input: &[usize], classes: usize) -> Result<NetworkSpec> {
        let width: usize = self.parse("teacher.width")?;
        if width == 0 {
            return err("teacher.width must be positive");
        }
        match self.get("teacher.arch") {
            "vgg9" => Ok(archs::teacher_vgg9(input, classes, width, self.parse("teacher.dropout")?)),
            "resnet" => Ok(archs::resnet_style(input, classes, width, Role::Teacher)),
            other => err(format!("teacher.arch = '{other}': expected vgg9 or resnet")),
        }
    }

    pub fn intermediate_spec(&self, input: &[usize], classes: usize) -> Result<NetworkSpec> {
        let w: Vec<usize> = self.list("intermediate.widths")?;
        let hidden: usize = self.parse("intermediate.hidden")?;
        let dropout: f32 = self.parse("intermediate.dropout")?;
        if w.contains(&0) || hidden == 0 {
            return err("intermediate widths must be positive");
        }
        let need = |n: usize| -> Result<()> {
            if w.len() < n {
                return err(format!("intermediate.widths needs {n} entries, got {}", w.len()));
            }
            Ok(())
        };
        match self.get("intermediate.arch") {
            "3conv2linear" => {
                need(3)?;
                Ok(archs::student_3conv2linear(input, classes, [w[0], w[1], w[2]], hidden, dropout))
            }
            "vgg5" => {
                need(2)?;
                Ok(archs::student_vgg5(input, classes, [w[0], w[1]], hidden, dropout))
            }
            "resnet" => {
                need(1)?;
                let spec = archs::resnet_style(input, classes, w[0], Role::Intermediate);
                archs::replace_wide_stem(&spec, dropout).map_err(|e| ConfigError(e.to_string()))
            }
            other => err(format!("intermediate.arch = '{other}': expected 3conv2linear, vgg5 or resnet")),
        }
    }

    pub fn coding(&self) -> Result<Coding> {
        self.parse("snn.coding")
    }

    pub fn snn(&self) -> Result<SnnConfig> {
        let cfg = SnnConfig {
            leak: self.parse("snn.leak")?,
            gamma: self.parse("snn.gamma")?,
            time_steps: self.parse("snn.time_steps")?,
            reset_grad: self.parse("snn.reset_grad")?,
            temporal_grad: self.parse("snn.temporal_grad")?,
        };
        cfg.validate().map_err(|e| ConfigError(format!("snn: {e}")))?;
        Ok(cfg)
    }

    pub fn distill(&self) -> Result<DistillConfig> {
        let alpha: f64 = self.parse("distill.alpha")?;
        if !(alpha >= 0.0) {
            return err(format!("distill.alpha = {alpha}: must be >= 0"));
        }
        let levels: Vec<Level> = self.list("distill.levels")?;
        if levels.is_empty() {
            return err("distill.levels is empty");
        }
        let pairs: Vec<String> = self.list("distill.pairs")?;
        let pairs = if pairs.is_empty() {
            None
        } else {
            Some(pairs.iter().map(|p| parse_pair(p)).collect::<Result<Vec<_>>>()?)
        };
        Ok(DistillConfig {
            alpha,
            mode: self.parse::<AttentionMode>("distill.mode")?,
            levels,
            normalize: self.parse("distill.normalize")?,
            student_activation: self.parse::<StudentActivation>("distill.student_activation")?,
            sam_all_steps: self.parse("distill.sam_all_steps")?,
            pairs,
            coding: self.coding()?,
            batch_size: self.batch_size("distill")?,
            seed: self.seed()?,
        })
    }

    pub fn conversion_steps(&self) -> Result<usize> {
        self.parse("conversion.time_steps")
    }

    pub fn calibration_samples(&self) -> Result<usize> {
        self.parse("conversion.samples")
    }

    pub fn percentile(&self) -> Result<f32> {
        self.parse("conversion.percentile")
    }

    pub fn eval_samples(&self) -> Result<usize> {
        self.parse("evaluate.samples")
    }
}

fn parse_pair(s: &str) -> Result<LayerPair> {
    let parts: Vec<&str> = s.split(':').map(str::trim).collect();
    let bad = || ConfigError(format!("distill.pairs entry '{s}': expected level:teacher_layer:student_layer"));
    if parts.len() != 3 {
        return Err(bad());
    }
    Ok(LayerPair {
        level: parts[0].parse().map_err(|_| bad())?,
        teacher_layer: parts[1].parse().map_err(|_| bad())?,
        student_layer: parts[2].parse().map_err(|_| bad())?,
    })
}
