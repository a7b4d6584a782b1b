use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use mabvit_tensor::no_grad;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{BlockStructure, Dropout, ForwardCtx, ValueVariant};
use crate::checkpoint::Checkpoint;
use crate::data::{load_dataset, make_batches, ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::harness::config::TrainRunConfig;
use crate::harness::loss::{accuracy, cross_entropy};
use crate::harness::optim::{lr_at, Optimizer};
use crate::model::{build_model, vit_forward, vit_forward_with, ModelConfig, ModelParams};

pub const METRICS_HEADER: &str = "step,split,loss,accuracy,lr,wall_ms";
const EVAL_BATCH: usize = 250;
const RECENT_LOSSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::config(format!("unknown metrics split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.split, self.loss, self.accuracy, self.lr, self.wall_ms
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::config(format!("malformed metrics row {line:?}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        Ok(MetricsRow {
            step: f[0].parse().map_err(|_| bad())?,
            split: f[1].parse()?,
            loss: f[2].parse().map_err(|_| bad())?,
            accuracy: f[3].parse().map_err(|_| bad())?,
            lr: f[4].parse().map_err(|_| bad())?,
            wall_ms: f[5].parse().map_err(|_| bad())?,
        })
    }

    /// Parses a whole metrics file, header included.
    pub fn parse_csv(text: &str) -> Result<Vec<Self>> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(Error::config(format!("expected metrics header {METRICS_HEADER:?}")));
        }
        lines.filter(|l| !l.is_empty()).map(Self::parse).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

/// Mean unsmoothed cross-entropy and top-1 accuracy over an already
/// standardized dataset, in file order, without dropout.
pub fn evaluate_dataset(params: &ModelParams, config: &ModelConfig, data: &Dataset) -> Result<EvalResult> {
    check_compatible(config, data)?;
    no_grad(|| {
        let (mut loss_sum, mut hits) = (0.0, 0);
        for batch in make_batches(data.len(), EVAL_BATCH, 0, false) {
            let (images, labels) = data.batch(&batch)?;
            let logits = vit_forward(&images, params, config)?;
            loss_sum += cross_entropy(&logits, &labels, 0.0)?.item()? * batch.len() as f64;
            hits += accuracy(&logits, &labels);
        }
        let n = data.len();
        Ok(EvalResult {
            loss: loss_sum / n as f64,
            accuracy: hits as f64 / n as f64,
            samples: n,
        })
    })
}

/// Loads a checkpoint and scores it on a dataset file, applying the
/// normalization stored in the checkpoint.
pub fn evaluate(checkpoint: &Path, data: &Path) -> Result<EvalResult> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut ds = load_dataset(data)?;
    if let Some(stats) = &ck.normalization {
        ds.standardize(stats)?;
    }
    evaluate_dataset(&ck.params, &ck.config, &ds)
}

fn check_compatible(config: &ModelConfig, data: &Dataset) -> Result<()> {
    let [h, w, c] = data.image_shape();
    if h != config.image_size || w != config.image_size || c != config.channels {
        return Err(Error::config(format!(
            "dataset images are {h}x{w}x{c}, model expects {s}x{s}x{}",
            config.channels,
            s = config.image_size
        )));
    }
    if data.num_classes() != config.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model has {}",
            data.num_classes(),
            config.num_classes
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub final_val: EvalResult,
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

impl TrainOutcome {
    /// Accuracy of the last train row.
    pub fn final_train_accuracy(&self) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.split == Split::Train).map(|r| r.accuracy)
    }
}

struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
    rows: Vec<MetricsRow>,
}

impl MetricsWriter {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = Self {
            out: BufWriter::new(file),
            path,
            rows: Vec::new(),
        };
        w.line(METRICS_HEADER)?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    fn push(&mut self, row: MetricsRow) -> Result<()> {
        self.line(&row.to_csv())?;
        self.rows.push(row);
        Ok(())
    }
}

/// Trains one model and writes `metrics.csv`, `final.ckpt`, and `best.ckpt`
/// (saved whenever validation accuracy improves) into `cfg.out_dir`.
pub fn train(cfg: &TrainRunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    mabvit_tensor::retain_heap_memory();
    let mut train_set = load_dataset(&cfg.data)?;
    let mut val_set = load_dataset(&cfg.val_data)?;
    check_compatible(&cfg.model, &train_set)?;
    check_compatible(&cfg.model, &val_set)?;
    let stats = ChannelStats::fit(&train_set);
    train_set.standardize(&stats)?;
    val_set.standardize(&stats)?;

    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let mut metrics = MetricsWriter::create(cfg.out_dir.join("metrics.csv"))?;
    let final_path = cfg.out_dir.join("final.ckpt");
    let best_path = cfg.out_dir.join("best.ckpt");
    let save = |params: &ModelParams, path: &Path| {
        Checkpoint {
            config: cfg.model.clone(),
            normalization: Some(stats.clone()),
            params: params.clone(),
        }
        .save(path)
    };

    let mut params = build_model(&cfg.model, cfg.seed)?;
    let mut opt = Optimizer::new(cfg, &params);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(7);
    let fingerprint = cfg.fingerprint();
    let start = Instant::now();
    let wall = || {
        if cfg.record_wall_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        }
    };

    let mut recent: Vec<f64> = Vec::with_capacity(RECENT_LOSSES);
    let (mut window_loss, mut window_hits, mut window_n) = (0.0, 0usize, 0usize);
    let mut best: Option<EvalResult> = None;
    let mut last_val = None;
    let mut step = 0;
    let mut epoch = 0u64;
    'outer: loop {
        let batches = make_batches(train_set.len(), cfg.batch_size, cfg.seed.wrapping_add(epoch.wrapping_mul(0x9e37_79b9)), true);
        epoch += 1;
        for batch in batches {
            if step == cfg.total_steps {
                break 'outer;
            }
            step += 1;
            let lr = lr_at(step, cfg);
            let (images, labels) = train_set.batch(&batch)?;
            let mut ctx = ForwardCtx {
                dropout: (cfg.model.dropout > 0.0).then(|| Dropout {
                    rate: cfg.model.dropout,
                    rng: dropout_rng.clone(),
                }),
                observer: None,
            };
            let logits = vit_forward_with(&images, &params, &cfg.model, &mut ctx)?;
            if let Some(d) = ctx.dropout {
                dropout_rng = d.rng;
            }
            let loss = cross_entropy(&logits, &labels, cfg.label_smoothing)?;
            let value = loss.item()?;
            if recent.len() == RECENT_LOSSES {
                recent.remove(0);
            }
            recent.push(value);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    fingerprint,
                    recent,
                });
            }
            params.zero_grad();
            loss.backward()?;
            opt.step(&mut params, lr)?;

            window_loss += value * batch.len() as f64;
            window_hits += accuracy(&logits, &labels);
            window_n += batch.len();
            if step % cfg.log_every == 0 {
                metrics.push(MetricsRow {
                    step,
                    split: Split::Train,
                    loss: window_loss / window_n as f64,
                    accuracy: window_hits as f64 / window_n as f64,
                    lr,
                    wall_ms: wall(),
                })?;
                (window_loss, window_hits, window_n) = (0.0, 0, 0);
            }
            if step % cfg.eval_every == 0 || step == cfg.total_steps {
                let val = evaluate_dataset(&params, &cfg.model, &val_set)?;
                metrics.push(MetricsRow {
                    step,
                    split: Split::Val,
                    loss: val.loss,
                    accuracy: val.accuracy,
                    lr,
                    wall_ms: wall(),
                })?;
                let improved = best.is_none_or(|b| {
                    val.accuracy > b.accuracy || (val.accuracy == b.accuracy && val.loss < b.loss)
                });
                if improved {
                    best = Some(val);
                    save(&params, &best_path)?;
                }
                last_val = Some(val);
            }
        }
    }
    save(&params, &final_path)?;
    Ok(TrainOutcome {
        rows: metrics.rows,
        final_val: last_val.expect("total_steps > 0 guarantees a final evaluation"),
        metrics_path: metrics.path,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
    })
}

/// One cell of the variant grid, applied on top of a base model config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepVariant {
    Base,
    Parallel,
    Glu,
    GluParallel,
    PrGlu,
    PrGluParallel,
    Gelu,
}

impl SweepVariant {
    pub const ALL: [SweepVariant; 7] = [
        SweepVariant::Base,
        SweepVariant::Parallel,
        SweepVariant::Glu,
        SweepVariant::GluParallel,
        SweepVariant::PrGlu,
        SweepVariant::PrGluParallel,
        SweepVariant::Gelu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepVariant::Base => "base",
            SweepVariant::Parallel => "parallel",
            SweepVariant::Glu => "glu",
            SweepVariant::GluParallel => "glu-par",
            SweepVariant::PrGlu => "pr-glu",
            SweepVariant::PrGluParallel => "pr-glu-par",
            SweepVariant::Gelu => "gelu",
        }
    }

    /// Rewrites the value variant, structure, and (for PR cells) the MLP
    /// width of `base`; PR cells use an MLP of three times the width.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        use SweepVariant::*;
        let mut m = base.clone();
        m.value_variant = match self {
            Base | Parallel => ValueVariant::Standard,
            Glu | GluParallel | PrGlu | PrGluParallel => ValueVariant::Swiglu,
            Gelu => ValueVariant::Gelu,
        };
        if matches!(self, Parallel | GluParallel | PrGluParallel) {
            m.structure = BlockStructure::PreLnParallel;
        } else if base.structure == BlockStructure::PreLnParallel {
            m.structure = BlockStructure::PreLnSequential;
        }
        if matches!(self, PrGlu | PrGluParallel) {
            m.mlp_dim = 3 * base.embed_dim;
        }
        m
    }
}

impl fmt::Display for SweepVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown sweep variant {s:?}")))
    }
}

/// Per-variant run configs: same seed and data, outputs in
/// `out_dir/<variant>/`.
pub fn sweep_variants(cfg: &TrainRunConfig, variants: &[SweepVariant]) -> Vec<(SweepVariant, TrainRunConfig)> {
    variants
        .iter()
        .map(|&v| {
            let run = TrainRunConfig {
                model: v.apply(&cfg.model),
                out_dir: cfg.out_dir.join(v.name()),
                ..cfg.clone()
            };
            (v, run)
        })
        .collect()
}

/// Runs the variant grid sequentially.
pub fn sweep(cfg: &TrainRunConfig, variants: &[SweepVariant]) -> Result<Vec<(SweepVariant, TrainOutcome)>> {
    sweep_variants(cfg, variants)
        .into_iter()
        .map(|(v, run)| Ok((v, train(&run)?)))
        .collect()
}
