//! Residual-stream collapse measurements and the model-level gradient check.

use std::fmt::Write as _;

use mabvit_tensor::{grad_check, no_grad, GradReport, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{transformer_block_with, BlockStructure, ForwardCtx, ResidualObserver, Substep};
use crate::error::{Error, Result};
use crate::model::{build_model, param_count, vit_forward, ModelConfig, ModelParams};

pub const CSV_HEADER: &str = "layer,substep,input_norm,branch_norm,ratio,cosine_io";
pub const DEFAULT_PROBE_SAMPLES: usize = 32;
pub const GRADCHECK_PARAM_LIMIT: usize = 5000;

/// Statistics of one residual addition, averaged over all probed tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapseRecord {
    pub layer: usize,
    pub substep: Substep,
    pub input_norm: f64,
    pub branch_norm: f64,
    pub ratio: f64,
    pub cosine_io: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollapseReport {
    pub records: Vec<CollapseRecord>,
    pub fingerprint: String,
    pub seed: u64,
    pub samples: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Computes one record from the stream before and after a residual addition.
pub fn residual_stats(layer: usize, substep: Substep, input: &Tensor, output: &Tensor) -> CollapseRecord {
    let d = *input.shape().last().unwrap();
    let tokens = input.numel() / d;
    let (mut input_norm, mut branch_norm, mut cosine_io) = (0.0, 0.0, 0.0);
    let mut diff = vec![0.0; d];
    for (x, y) in input.data().chunks(d).zip(output.data().chunks(d)) {
        for ((o, a), b) in diff.iter_mut().zip(x).zip(y) {
            *o = b - a;
        }
        input_norm += norm(x);
        branch_norm += norm(&diff);
        cosine_io += cosine(x, y);
    }
    let n = tokens as f64;
    let (input_norm, branch_norm) = (input_norm / n, branch_norm / n);
    CollapseRecord {
        layer,
        substep,
        input_norm,
        branch_norm,
        ratio: if input_norm > 0.0 { branch_norm / input_norm } else { 0.0 },
        cosine_io: cosine_io / n,
    }
}

#[derive(Default)]
struct Recorder {
    records: Vec<CollapseRecord>,
}

impl ResidualObserver for Recorder {
    fn observe(&mut self, layer: usize, substep: Substep, input: &Tensor, output: &Tensor) {
        self.records.push(residual_stats(layer, substep, input, output));
    }
}

/// Unit-Gaussian `samples x tokens x D` inputs standing in for embedded
/// patches.
pub fn probe_tokens(config: &ModelConfig, samples: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [samples, config.num_tokens(), config.embed_dim];
    let data = (0..shape.iter().product())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Ok(Tensor::new(data, &shape)?)
}

fn run_blocks(
    tokens: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
    recorder: &mut Recorder,
) -> Result<Vec<Tensor>> {
    let kind = config.block_kind();
    let mut ctx = ForwardCtx {
        dropout: None,
        observer: Some(recorder),
    };
    let mut x = tokens.clone();
    let mut outputs = Vec::with_capacity(params.blocks.len());
    for (i, block) in params.blocks.iter().enumerate() {
        x = transformer_block_with(&x, block, kind, i, &mut ctx)?;
        outputs.push(x.clone());
    }
    Ok(outputs)
}

/// Records every residual addition while running `tokens` (`B x n x D`)
/// through the block stack.
pub fn collapse_probe(params: &ModelParams, config: &ModelConfig, tokens: &Tensor, seed: u64) -> Result<CollapseReport> {
    let mut recorder = Recorder::default();
    no_grad(|| run_blocks(tokens, params, config, &mut recorder))?;
    Ok(CollapseReport {
        records: recorder.records,
        fingerprint: config.fingerprint(),
        seed,
        samples: tokens.shape()[0],
    })
}

impl CollapseReport {
    pub fn to_csv(&self) -> String {
        records_to_csv(&self.records)
    }

    /// Records of one substep kind, ordered by layer.
    pub fn substep(&self, substep: Substep) -> Vec<CollapseRecord> {
        self.records.iter().filter(|r| r.substep == substep).copied().collect()
    }
}

pub fn records_to_csv(records: &[CollapseRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.layer, r.substep, r.input_norm, r.branch_norm, r.ratio, r.cosine_io
        );
    }
    s
}

pub fn records_from_csv(text: &str) -> Result<Vec<CollapseRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::config(format!("expected CSV header {CSV_HEADER:?}")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = || Error::config(format!("CSV line {}: malformed record {line:?}", i + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        out.push(CollapseRecord {
            layer: f[0].parse().map_err(|_| bad())?,
            substep: f[1].parse().map_err(|_| bad())?,
            input_norm: num(f[2])?,
            branch_norm: num(f[3])?,
            ratio: num(f[4])?,
            cosine_io: num(f[5])?,
        });
    }
    Ok(out)
}

/// Paired sequential / parallel measurements over shared weights.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureComparison {
    pub sequential: CollapseReport,
    pub parallel: CollapseReport,
    /// Per layer, mean over tokens of `|X_seq - X_par| / |X_seq|` after the block.
    pub divergence: Vec<f64>,
}

/// Builds one Pre-LN model from `(config, seed)` and runs it both as a
/// sequential and as a parallel stack on `tokens`.
pub fn compare_structures(config: &ModelConfig, seed: u64, tokens: &Tensor) -> Result<StructureComparison> {
    let seq_cfg = ModelConfig {
        structure: BlockStructure::PreLnSequential,
        ..config.clone()
    };
    let par_cfg = ModelConfig {
        structure: BlockStructure::PreLnParallel,
        ..config.clone()
    };
    let params = build_model(&seq_cfg, seed)?;
    compare_with_params(&params, &seq_cfg, &par_cfg, seed, tokens)
}

pub fn compare_with_params(
    params: &ModelParams,
    seq_cfg: &ModelConfig,
    par_cfg: &ModelConfig,
    seed: u64,
    tokens: &Tensor,
) -> Result<StructureComparison> {
    let (mut rs, mut rp) = (Recorder::default(), Recorder::default());
    let (seq, par) = no_grad(|| -> Result<_> {
        Ok((
            run_blocks(tokens, params, seq_cfg, &mut rs)?,
            run_blocks(tokens, params, par_cfg, &mut rp)?,
        ))
    })?;
    let d = seq_cfg.embed_dim;
    let divergence = seq
        .iter()
        .zip(&par)
        .map(|(s, p)| {
            let rows = s.data().chunks(d).zip(p.data().chunks(d));
            let n = s.numel() / d;
            rows.map(|(a, b)| {
                let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
                let na = norm(a);
                if na > 0.0 {
                    norm(&diff) / na
                } else {
                    0.0
                }
            })
            .sum::<f64>()
                / n as f64
        })
        .collect();
    let report = |records, cfg: &ModelConfig| CollapseReport {
        records,
        fingerprint: cfg.fingerprint(),
        seed,
        samples: tokens.shape()[0],
    };
    Ok(StructureComparison {
        sequential: report(rs.records, seq_cfg),
        parallel: report(rp.records, par_cfg),
        divergence,
    })
}

pub const DIVERGENCE_HEADER: &str = "depth,seed,layer,divergence";

pub fn divergence_csv_rows(depth: usize, seed: u64, divergence: &[f64]) -> String {
    divergence
        .iter()
        .enumerate()
        .map(|(l, d)| format!("{depth},{seed},{l},{d}\n"))
        .collect()
}

/// Probe and structure comparison repeated over seeds `0..seeds`.
#[derive(Debug, Clone)]
pub struct SeedSweep {
    pub reports: Vec<CollapseReport>,
    /// `divergence[seed][layer]`
    pub divergence: Vec<Vec<f64>>,
}

impl SeedSweep {
    /// Per-record medians across seeds (every report has the same layout).
    pub fn median_records(&self) -> Vec<CollapseRecord> {
        let first = &self.reports[0].records;
        (0..first.len())
            .map(|i| {
                let col = |f: fn(&CollapseRecord) -> f64| {
                    median(&self.reports.iter().map(|r| f(&r.records[i])).collect::<Vec<_>>())
                };
                CollapseRecord {
                    layer: first[i].layer,
                    substep: first[i].substep,
                    input_norm: col(|r| r.input_norm),
                    branch_norm: col(|r| r.branch_norm),
                    ratio: col(|r| r.ratio),
                    cosine_io: col(|r| r.cosine_io),
                }
            })
            .collect()
    }

    /// Median over seeds of the last-layer divergence divided by depth:
    /// the mean divergence added per layer.
    pub fn divergence_per_layer(&self) -> f64 {
        let per_seed: Vec<f64> = self
            .divergence
            .iter()
            .map(|d| d.last().copied().unwrap_or(0.0) / d.len().max(1) as f64)
            .collect();
        median(&per_seed)
    }
}

/// For each seed, builds the model from `(config, seed)`, probes it on
/// `samples` unit-Gaussian token sets, and compares sequential against
/// parallel execution of the same weights.
pub fn sweep_seeds(config: &ModelConfig, seeds: u64, samples: usize) -> Result<SeedSweep> {
    if seeds == 0 {
        return Err(Error::config("at least one seed is required"));
    }
    let mut reports = Vec::new();
    let mut divergence = Vec::new();
    for seed in 0..seeds {
        let params = build_model(config, seed)?;
        let tokens = probe_tokens(config, samples, seed)?;
        reports.push(collapse_probe(&params, config, &tokens, seed)?);
        if config.structure != BlockStructure::PostLnSequential {
            let seq = ModelConfig { structure: BlockStructure::PreLnSequential, ..config.clone() };
            let par = ModelConfig { structure: BlockStructure::PreLnParallel, ..config.clone() };
            divergence.push(compare_with_params(&params, &seq, &par, seed, &tokens)?.divergence);
        }
    }
    Ok(SeedSweep { reports, divergence })
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Finite-difference check of every model parameter under the loss
/// `sum(logits)` on `images` random images.
pub fn gradcheck_model(config: &ModelConfig, seed: u64, images: usize) -> Result<GradReport> {
    let count = param_count(config);
    if count > GRADCHECK_PARAM_LIMIT {
        return Err(Error::TooLarge {
            params: count,
            limit: GRADCHECK_PARAM_LIMIT,
        });
    }
    let params = build_model(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let shape = [images.max(1), config.image_size, config.image_size, config.channels];
    let data = (0..shape.iter().product())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let batch = Tensor::new(data, &shape)?;
    let tensors = params.tensors();
    let report = grad_check(
        |p| {
            let model = params
                .with_tensors(p)
                .map_err(|e| mabvit_tensor::TensorError::InvalidArgument(e.to_string()))?;
            vit_forward(&batch, &model, config)
                .map(|y| y.sum())
                .map_err(|e| match e {
                    Error::Tensor(t) => t,
                    other => mabvit_tensor::TensorError::InvalidArgument(other.to_string()),
                })
        },
        &tensors,
        1e-5,
        1e-4,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{ValueVariant};
    use crate::layers::{LinearParams, MlpParams};
    use crate::model::{ModelVariant, Preset};

    fn small(layers: usize, structure: BlockStructure) -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            layers,
            embed_dim: 8,
            mlp_dim: 16,
            heads: 2,
            structure,
            ..Default::default()
        }
    }

    fn zero_branches(params: &mut ModelParams) {
        for b in &mut params.blocks {
            let d = b.attn.dim();
            b.attn.output = LinearParams::new(Tensor::zeros(&[d, d]).unwrap(), Some(Tensor::zeros(&[d]).unwrap())).unwrap();
            if let MlpParams::Standard { fc2, .. } = &mut b.mlp {
                let m = fc2.in_dim();
                *fc2 = LinearParams::new(Tensor::zeros(&[m, d]).unwrap(), Some(Tensor::zeros(&[d]).unwrap())).unwrap();
            }
        }
    }

    #[test]
    fn record_counts_per_structure() {
        for (s, per_layer) in [
            (BlockStructure::PreLnSequential, 2),
            (BlockStructure::PostLnSequential, 2),
            (BlockStructure::PreLnParallel, 1),
        ] {
            let cfg = small(3, s);
            let params = build_model(&cfg, 1).unwrap();
            let tokens = probe_tokens(&cfg, 4, 2).unwrap();
            let report = collapse_probe(&params, &cfg, &tokens, 2).unwrap();
            assert_eq!(report.records.len(), per_layer * 3);
            assert_eq!(report.samples, 4);
            for r in &report.records {
                assert!((-1.0..=1.0).contains(&r.cosine_io));
                assert!(r.input_norm >= 0.0 && r.branch_norm >= 0.0 && r.ratio >= 0.0);
            }
        }
    }

    #[test]
    fn zero_branch_blocks_have_unit_cosine_and_no_divergence() {
        let cfg = small(2, BlockStructure::PreLnSequential);
        let mut params = build_model(&cfg, 3).unwrap();
        zero_branches(&mut params);
        let tokens = probe_tokens(&cfg, 3, 4).unwrap();
        let report = collapse_probe(&params, &cfg, &tokens, 4).unwrap();
        for r in &report.records {
            assert_eq!(r.cosine_io, 1.0);
            assert_eq!(r.branch_norm, 0.0);
        }
        let par = ModelConfig { structure: BlockStructure::PreLnParallel, ..cfg.clone() };
        let cmp = compare_with_params(&params, &cfg, &par, 4, &tokens).unwrap();
        assert!(cmp.divergence.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn one_layer_structures_differ() {
        let cfg = ModelConfig { init_std: 0.3, ..small(1, BlockStructure::PreLnSequential) };
        let tokens = probe_tokens(&cfg, 2, 5).unwrap();
        let cmp = compare_structures(&cfg, 5, &tokens).unwrap();
        assert_eq!(cmp.divergence.len(), 1);
        assert!(cmp.divergence[0] > 0.0);
    }

    #[test]
    fn probing_does_not_change_logits() {
        let cfg = small(2, BlockStructure::PostLnSequential);
        let params = build_model(&cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let images = crate::testutil::gaussian(&mut rng, &[2, 8, 8, 3], 1.0);
        let plain = vit_forward(&images, &params, &cfg).unwrap();
        let mut rec = Recorder::default();
        let mut ctx = ForwardCtx { dropout: None, observer: Some(&mut rec) };
        let probed = crate::model::vit_forward_with(&images, &params, &cfg, &mut ctx).unwrap();
        assert_eq!(plain.data(), probed.data());
        assert_eq!(rec.records.len(), 4);
    }

    #[test]
    fn csv_round_trip() {
        let cfg = small(2, BlockStructure::PreLnParallel);
        let params = build_model(&cfg, 7).unwrap();
        let report = collapse_probe(&params, &cfg, &probe_tokens(&cfg, 2, 7).unwrap(), 7).unwrap();
        let csv = report.to_csv();
        assert!(csv.starts_with(&format!("{CSV_HEADER}\n")));
        assert_eq!(records_from_csv(&csv).unwrap(), report.records);
        assert!(records_from_csv("layer,substep\n").is_err());
    }

    #[test]
    fn gradcheck_guard_refuses_large_models() {
        let cfg = Preset::Ti16.config(ModelVariant::Base, BlockStructure::PreLnSequential);
        assert!(matches!(gradcheck_model(&cfg, 0, 1), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn tiny_model_gradcheck_passes() {
        let cfg = Preset::Tiny.config(ModelVariant::Base, BlockStructure::PreLnSequential);
        assert_eq!(cfg.value_variant, ValueVariant::Standard);
        let report = gradcheck_model(&cfg, 0, 2).unwrap();
        assert!(report.pass, "{} {}", report.max_rel, report.max_abs);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
