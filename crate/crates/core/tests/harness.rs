use std::fs;
use std::path::Path;

use mabvit::attention::ValueVariant;
use mabvit::data::{gen_synthetic, Split, SyntheticSpec};
use mabvit::harness::{evaluate, train, MetricsRow, RowSplit, TrainRunConfig};
use mabvit::model::ModelConfig;
use mabvit::Error;

fn write_data(dir: &Path) {
    let spec = SyntheticSpec {
        classes: 4,
        per_class: 10,
        image_size: 8,
        motif_size: 4,
        ..SyntheticSpec::default()
    };
    gen_synthetic(&spec, 1, Split::Train).unwrap().save(&dir.join("train.mabdata")).unwrap();
    let val = SyntheticSpec { per_class: 5, ..spec };
    gen_synthetic(&val, 1, Split::Val).unwrap().save(&dir.join("val.mabdata")).unwrap();
}

fn run_config(dir: &Path) -> TrainRunConfig {
    TrainRunConfig {
        model: ModelConfig {
            image_size: 8,
            patch_size: 4,
            layers: 1,
            embed_dim: 8,
            mlp_dim: 16,
            heads: 2,
            num_classes: 4,
            value_variant: ValueVariant::Gelu,
            ..ModelConfig::default()
        },
        total_steps: 12,
        warmup_steps: 2,
        batch_size: 8,
        log_every: 3,
        eval_every: 5,
        data: dir.join("train.mabdata"),
        val_data: dir.join("val.mabdata"),
        out_dir: dir.join("run"),
        ..TrainRunConfig::default()
    }
}

#[test]
fn metrics_schedule_and_evaluate_agree() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path());
    let cfg = run_config(dir.path());
    let out = train(&cfg).unwrap();

    let rows = MetricsRow::parse_csv(&fs::read_to_string(&out.metrics_path).unwrap()).unwrap();
    assert_eq!(rows, out.rows);
    let train_steps: Vec<usize> = rows.iter().filter(|r| r.split == RowSplit::Train).map(|r| r.step).collect();
    assert_eq!(train_steps, [3, 6, 9, 12]);
    let val_steps: Vec<usize> = rows.iter().filter(|r| r.split == RowSplit::Val).map(|r| r.step).collect();
    assert_eq!(val_steps, [5, 10, 12]);
    assert!(rows.iter().all(|r| r.wall_ms == 0));

    let again = evaluate(&out.final_checkpoint, &cfg.val_data).unwrap();
    assert_eq!(again, out.final_val);
    assert_eq!(again.samples, 20);
    assert!(out.best_checkpoint.exists());
}

#[test]
fn config_file_paths_resolve_relative_to_file() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path());
    let mut cfg = run_config(Path::new(""));
    cfg.out_dir = "nested/run".into();
    let path = dir.path().join("run.cfg");
    fs::write(&path, cfg.to_kv()).unwrap();
    let loaded = TrainRunConfig::load(&path).unwrap();
    assert_eq!(loaded.data, dir.path().join("train.mabdata"));
    assert_eq!(loaded.out_dir, dir.path().join("nested/run"));
    train(&loaded).unwrap();
    assert!(dir.path().join("nested/run/final.ckpt").exists());
}

#[test]
fn bad_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path());
    let mut cfg = run_config(dir.path());
    fs::write(dir.path().join("empty.mabdata"), b"").unwrap();
    cfg.val_data = dir.path().join("empty.mabdata");
    assert!(matches!(train(&cfg), Err(Error::Format { .. })));

    let mut cfg = run_config(dir.path());
    cfg.val_data = dir.path().join("missing.mabdata");
    assert!(matches!(train(&cfg), Err(Error::Io { .. })));

    let mut cfg = run_config(dir.path());
    cfg.model.image_size = 16;
    assert!(train(&cfg).is_err());
}
