use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mabvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mabvit")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn params_prints_exact_counts() {
    let base = stdout(&mabvit(&["params", "--preset", "ti16", "--variant", "base"]));
    let par = stdout(&mabvit(&["params", "--preset", "ti16", "--variant", "base", "--structure", "par"]));
    let glu = stdout(&mabvit(&["params", "--preset", "ti16", "--variant", "glu"]));
    let base: usize = base.trim().parse().unwrap();
    assert_eq!(par.trim().parse::<usize>().unwrap(), base);
    assert_eq!(glu.trim().parse::<usize>().unwrap() - base, 12 * (192 * 192 - 192));
}

#[test]
fn gradcheck_passes_on_tiny() {
    let out = stdout(&mabvit(&["gradcheck", "--preset", "tiny", "--variant", "glu", "--structure", "postln"]));
    assert!(out.starts_with("PASS"), "{out}");
}

fn gen(dir: &Path, name: &str, split: &str) {
    let out = dir.join(name);
    stdout(&mabvit(&[
        "gen-data", "--classes", "3", "--per-class", "6", "--size", "8", "--seed", "2", "--motif", "4",
        "--split", split, "--out", out.to_str().unwrap(),
    ]));
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "train.mabdata", "train");
    gen(dir.path(), "val.mabdata", "val");
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "image_size=8\npatch_size=4\nlayers=1\nembed_dim=8\nmlp_dim=16\nheads=2\nnum_classes=3\n\
         value_variant=swiglu\ntotal_steps=6\nwarmup_steps=1\nbatch_size=6\nlog_every=3\neval_every=3\n\
         data=train.mabdata\nval_data=val.mabdata\nout_dir=run\n",
    )
    .unwrap();
    stdout(&mabvit(&["train", "--config", cfg.to_str().unwrap(), "--seed", "4"]));
    let metrics = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    let ckpt = dir.path().join("run/final.ckpt");
    let val = dir.path().join("val.mabdata");
    let eval = stdout(&mabvit(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", val.to_str().unwrap()]));
    let last = metrics.lines().last().unwrap().split(',').collect::<Vec<_>>();
    assert!(eval.contains(&format!("accuracy={} loss={} samples=18", last[3], last[2])), "{eval} vs {last:?}");

    let probe = dir.path().join("probe.csv");
    stdout(&mabvit(&[
        "collapse-probe", "--config", cfg.to_str().unwrap(), "--depth", "3", "--width", "16", "--seeds", "2",
        "--samples", "4", "--out", probe.to_str().unwrap(),
    ]));
    assert_eq!(fs::read_to_string(&probe).unwrap().lines().count(), 1 + 3 * 2);
    assert!(dir.path().join("probe.divergence.csv").exists());
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.mabdata");
    fs::write(&empty, b"").unwrap();
    let out = mabvit(&["eval", "--checkpoint", empty.to_str().unwrap(), "--data", empty.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert!(!mabvit(&["params", "--preset", "xl", "--variant", "base"]).status.success());
}
