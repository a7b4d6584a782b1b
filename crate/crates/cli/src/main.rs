use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mabvit::attention::{BlockStructure, ValueVariant};
use mabvit::data::{gen_synthetic, PixelFormat, Split, SyntheticSpec};
use mabvit::diagnostics::{
    divergence_csv_rows, gradcheck_model, records_to_csv, sweep_seeds, DEFAULT_PROBE_SAMPLES, DIVERGENCE_HEADER,
};
use mabvit::harness::{evaluate, sweep, train, SweepVariant, TrainRunConfig};
use mabvit::model::{param_count, ModelVariant, Preset};
use mabvit::Error;

#[derive(Parser)]
#[command(name = "mabvit", version, about = "Value-activated Vision Transformers on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StructureArg {
    Seq,
    Par,
    Postln,
}

impl From<StructureArg> for BlockStructure {
    fn from(s: StructureArg) -> Self {
        match s {
            StructureArg::Seq => BlockStructure::PreLnSequential,
            StructureArg::Par => BlockStructure::PreLnParallel,
            StructureArg::Postln => BlockStructure::PostLnSequential,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Ti16,
    S16,
    M16,
    B16,
    Tiny,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Ti16 => Preset::Ti16,
            PresetArg::S16 => Preset::S16,
            PresetArg::M16 => Preset::M16,
            PresetArg::B16 => Preset::B16,
            PresetArg::Tiny => Preset::Tiny,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Base,
    Gelu,
    Glu,
    PrGlu,
}

impl From<VariantArg> for ModelVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Base => ModelVariant::Base,
            VariantArg::Gelu => ModelVariant::Gelu,
            VariantArg::Glu => ModelVariant::Glu,
            VariantArg::PrGlu => ModelVariant::PrGlu,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    U8,
    F32,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic motif dataset.
    GenData {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Train and val files of one seed share their class motifs.
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 8)]
        motif: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, value_enum, default_value = "f32")]
        format: FormatArg,
    },
    /// Train one model from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print the exact parameter count of a preset.
    Params {
        #[arg(long, value_enum)]
        preset: PresetArg,
        #[arg(long, value_enum)]
        variant: VariantArg,
        #[arg(long, value_enum, default_value = "seq")]
        structure: StructureArg,
    },
    /// Measure residual-stream statistics of randomly initialized stacks.
    CollapseProbe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        depth: usize,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        seeds: u64,
        /// Per-record medians over seeds; divergence rows go to
        /// `<out>.divergence.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PROBE_SAMPLES)]
        samples: usize,
    },
    /// Finite-difference check of every parameter of a small model.
    Gradcheck {
        #[arg(long, value_enum)]
        preset: PresetArg,
        #[arg(long, value_enum)]
        variant: VariantArg,
        #[arg(long, value_enum)]
        structure: StructureArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the seven-variant grid from one config file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated subset, e.g. `base,glu`.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
}

fn load_run(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<TrainRunConfig, Error> {
    let mut cfg = TrainRunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    Ok(cfg)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData {
            classes,
            per_class,
            size,
            seed,
            out,
            split,
            channels,
            motif,
            noise,
            format,
        } => {
            let spec = SyntheticSpec {
                classes,
                per_class,
                image_size: size,
                channels,
                motif_size: motif.min(size),
                noise_sigma: noise,
                format: match format {
                    FormatArg::U8 => PixelFormat::U8,
                    FormatArg::F32 => PixelFormat::F32,
                },
            };
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
            };
            let data = gen_synthetic(&spec, seed, split)?;
            data.save(&out)?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::Train { config, seed, out } => {
            let cfg = load_run(&config, seed, out)?;
            let outcome = train(&cfg)?;
            println!(
                "final val accuracy={} loss={}; metrics in {}",
                outcome.final_val.accuracy,
                outcome.final_val.loss,
                outcome.metrics_path.display()
            );
        }
        Command::Eval { checkpoint, data } => {
            let r = evaluate(&checkpoint, &data)?;
            println!("accuracy={} loss={} samples={}", r.accuracy, r.loss, r.samples);
        }
        Command::Params {
            preset,
            variant,
            structure,
        } => {
            let cfg = Preset::from(preset).config(variant.into(), structure.into());
            println!("{}", param_count(&cfg));
        }
        Command::CollapseProbe {
            config,
            depth,
            width,
            seeds,
            out,
            samples,
        } => {
            let mut model = TrainRunConfig::load(&config)?.model;
            model.layers = depth;
            model.mlp_dim = model.mlp_dim * width / model.embed_dim.max(1);
            model.embed_dim = width;
            model.validate()?;
            let result = sweep_seeds(&model, seeds, samples)?;
            write(&out, &records_to_csv(&result.median_records()))?;
            let mut div = format!("{DIVERGENCE_HEADER}\n");
            for (seed, d) in result.divergence.iter().enumerate() {
                div.push_str(&divergence_csv_rows(depth, seed as u64, d));
            }
            let div_path = sibling(&out, "divergence.csv");
            write(&div_path, &div)?;
            println!("wrote {} and {}", out.display(), div_path.display());
        }
        Command::Gradcheck {
            preset,
            variant,
            structure,
            seed,
        } => {
            let variant = ModelVariant::from(variant);
            let cfg = Preset::from(preset).config(variant, structure.into());
            let report = gradcheck_model(&cfg, seed, 2)?;
            println!(
                "{} value={} structure={}: max_rel={:.3e} max_abs={:.3e} tol={:.0e} params={}",
                if report.pass { "PASS" } else { "FAIL" },
                ValueVariant::to_string(&cfg.value_variant),
                cfg.structure,
                report.max_rel,
                report.max_abs,
                report.tolerance,
                param_count(&cfg)
            );
            if !report.pass {
                return Err(Error::Config("gradient check failed".into()));
            }
        }
        Command::Sweep {
            config,
            seed,
            out,
            variants,
        } => {
            let cfg = load_run(&config, seed, out)?;
            let chosen = if variants.is_empty() {
                SweepVariant::ALL.to_vec()
            } else {
                variants.iter().map(|v| v.parse()).collect::<Result<Vec<_>, _>>()?
            };
            for (v, outcome) in sweep(&cfg, &chosen)? {
                println!(
                    "{v}: val accuracy={} loss={} ({})",
                    outcome.final_val.accuracy,
                    outcome.final_val.loss,
                    outcome.metrics_path.display()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
