use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{parse_kv, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    AdamW,
    /// SGD with heavy-ball momentum and decoupled weight decay.
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(OptimizerKind::AdamW),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::config(format!("unknown optimizer {other:?} (expected adamw or sgd)"))),
        }
    }
}

/// One training run. Every key has a default; the config file overrides
/// any subset of them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerKind,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    pub data: PathBuf,
    pub val_data: PathBuf,
    pub out_dir: PathBuf,
    pub eval_every: usize,
    pub log_every: usize,
    /// When false, `wall_ms` is written as 0 so that reruns are byte-identical.
    pub record_wall_time: bool,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: OptimizerKind::AdamW,
            base_lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            warmup_steps: 100,
            total_steps: 2000,
            batch_size: 64,
            label_smoothing: 0.0,
            seed: 0,
            data: PathBuf::from("train.mabdata"),
            val_data: PathBuf::from("val.mabdata"),
            out_dir: PathBuf::from("run"),
            eval_every: 500,
            log_every: 50,
            record_wall_time: false,
        }
    }
}

const RUN_KEYS: [&str; 18] = [
    "optimizer",
    "base_lr",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "momentum",
    "warmup_steps",
    "total_steps",
    "batch_size",
    "label_smoothing",
    "seed",
    "data",
    "val_data",
    "out_dir",
    "eval_every",
    "log_every",
    "record_wall_time",
];

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let finite = [
            ("base_lr", self.base_lr),
            ("weight_decay", self.weight_decay),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("eps", self.eps),
            ("momentum", self.momentum),
            ("label_smoothing", self.label_smoothing),
        ];
        for (name, v) in finite {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("momentum", self.momentum), ("label_smoothing", self.label_smoothing)] {
            if v >= 1.0 {
                return Err(Error::config(format!("{name} must be < 1, got {v}")));
            }
        }
        if self.eps <= 0.0 {
            return Err(Error::config("eps must be positive"));
        }
        for (name, v) in [
            ("total_steps", self.total_steps),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("log_every", self.log_every),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("invalid value {v:?} for {key}")))
        }
        if self.model.set(key, value)? {
            return Ok(());
        }
        match key {
            "optimizer" => self.optimizer = value.parse()?,
            "base_lr" => self.base_lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "total_steps" => self.total_steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "label_smoothing" => self.label_smoothing = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "data" => self.data = PathBuf::from(value),
            "val_data" => self.val_data = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "eval_every" => self.eval_every = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            "record_wall_time" => self.record_wall_time = num(key, value)?,
            other => return Err(Error::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` text over the defaults; unknown keys are errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainRunConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_kv(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data, &mut cfg.val_data, &mut cfg.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Canonical text: model keys, then run keys, one per line.
    pub fn to_kv(&self) -> String {
        let mut s = self.model.to_kv();
        let values = [
            self.optimizer.to_string(),
            self.base_lr.to_string(),
            self.weight_decay.to_string(),
            self.beta1.to_string(),
            self.beta2.to_string(),
            self.eps.to_string(),
            self.momentum.to_string(),
            self.warmup_steps.to_string(),
            self.total_steps.to_string(),
            self.batch_size.to_string(),
            self.label_smoothing.to_string(),
            self.seed.to_string(),
            self.data.display().to_string(),
            self.val_data.display().to_string(),
            self.out_dir.display().to_string(),
            self.eval_every.to_string(),
            self.log_every.to_string(),
            self.record_wall_time.to_string(),
        ];
        for (k, v) in RUN_KEYS.iter().zip(values) {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    /// Fingerprint of the full run description.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_kv().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
