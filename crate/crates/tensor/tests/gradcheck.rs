use mabvit_tensor::{grad_check, Result, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(lo..hi)).collect(), shape).unwrap()
}

/// Checks `op` on random inputs of the given shapes under a random linear
/// read-out, so that ops with constant sums (softmax) still get a signal.
fn check_op(name: &str, shapes: &[&[usize]], range: (f64, f64), op: impl Fn(&[Tensor]) -> Result<Tensor>) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| random(&mut rng, s, range.0, range.1))
            .collect();
        let probe_shape = op(&inputs).unwrap().shape().to_vec();
        let readout = random(&mut rng, &probe_shape, -1.0, 1.0);
        let report = grad_check(|p| Ok(op(p)?.mul(&readout)?.sum()), &inputs, EPS, TOL).unwrap();
        assert!(
            report.pass,
            "{name} seed {seed}: max rel {} max abs {}",
            report.max_rel, report.max_abs
        );
    }
}

const SYM: (f64, f64) = (-2.0, 2.0);

#[test]
fn elementwise_binary_ops() {
    check_op("add", &[&[3, 4], &[3, 4]], SYM, |p| p[0].add(&p[1]));
    check_op("add_broadcast", &[&[2, 3, 4], &[4]], SYM, |p| p[0].add(&p[1]));
    check_op("sub", &[&[3, 4], &[4]], SYM, |p| p[0].sub(&p[1]));
    check_op("mul", &[&[3, 4], &[3, 4]], SYM, |p| p[0].mul(&p[1]));
    check_op("mul_broadcast", &[&[2, 3, 4], &[3, 4]], SYM, |p| p[0].mul(&p[1]));
    check_op("scale", &[&[5]], SYM, |p| Ok(p[0].scale(-1.7)));
    check_op("add_scalar", &[&[5]], SYM, |p| Ok(p[0].add_scalar(0.3)));
}

#[test]
fn matmul_variants() {
    check_op("matmul", &[&[3, 4], &[4, 2]], SYM, |p| p[0].matmul(&p[1]));
    check_op("matmul_batched", &[&[2, 3, 4], &[2, 4, 2]], SYM, |p| p[0].matmul(&p[1]));
    check_op("matmul_shared", &[&[2, 3, 4], &[4, 5]], SYM, |p| p[0].matmul(&p[1]));
}

#[test]
fn layout_ops() {
    check_op("transpose", &[&[2, 3, 4]], SYM, |p| p[0].transpose(0, 2));
    check_op("t", &[&[2, 3, 4]], SYM, |p| p[0].t());
    check_op("reshape", &[&[2, 6]], SYM, |p| p[0].reshape(&[3, 4]));
    check_op("cat", &[&[2, 1, 3], &[2, 2, 3]], SYM, |p| Tensor::cat(&[&p[0], &p[1], &p[0]], 1));
    check_op("narrow", &[&[3, 5]], SYM, |p| p[0].narrow(1, 1, 3));
    check_op("gather_rows", &[&[2, 2, 3]], SYM, |p| p[0].gather_rows(&[3, 0, 3, 2]));
    check_op("split", &[&[4, 3]], SYM, |p| {
        let parts = p[0].split(0, &[1, 3])?;
        parts[1].narrow(0, 0, 1)?.mul(&parts[0])
    });
}

#[test]
fn reductions() {
    check_op("sum", &[&[3, 4]], SYM, |p| Ok(p[0].sum()));
    check_op("mean", &[&[3, 4]], SYM, |p| Ok(p[0].mean()));
    check_op("sum_axis", &[&[2, 3, 4]], SYM, |p| p[0].sum_axis(1));
    check_op("mean_axis", &[&[2, 3, 4]], SYM, |p| p[0].mean_axis(2));
    check_op("var_axis", &[&[2, 3, 4]], SYM, |p| p[0].var_axis(0));
}

#[test]
fn pointwise_functions() {
    check_op("exp", &[&[6]], SYM, |p| Ok(p[0].exp()));
    check_op("log", &[&[6]], (0.2, 3.0), |p| Ok(p[0].log()));
    check_op("erf", &[&[6]], SYM, |p| Ok(p[0].erf()));
    check_op("sigmoid", &[&[6]], (-4.0, 4.0), |p| Ok(p[0].sigmoid()));
    check_op("gelu", &[&[6]], (-4.0, 4.0), |p| Ok(p[0].gelu()));
    check_op("silu", &[&[6]], (-4.0, 4.0), |p| Ok(p[0].silu()));
}

#[test]
fn normalizing_ops() {
    check_op("softmax", &[&[3, 5]], (-3.0, 3.0), |p| p[0].softmax_last());
    check_op("log_softmax", &[&[3, 5]], (-3.0, 3.0), |p| p[0].log_softmax_last());
    check_op("layer_norm", &[&[3, 6], &[6], &[6]], SYM, |p| p[0].layer_norm(&p[1], &p[2], 1e-6));
}

#[test]
fn sum_of_squares_passes_tight_tolerance() {
    let x = Tensor::new(vec![0.5, -1.5, 2.0, 3.0], &[4]).unwrap();
    let report = grad_check(|p| Ok(p[0].mul(&p[0])?.sum()), &[x], EPS, 1e-6).unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn linear_gelu_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[4, 3], -1.0, 1.0);
    let w = random(&mut rng, &[3, 5], -1.0, 1.0);
    let b = random(&mut rng, &[5], -1.0, 1.0);
    let report = grad_check(
        |p| Ok(p[0].matmul(&p[1])?.add(&p[2])?.gelu().sum()),
        &[x, w, b],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.pass);
    assert!(report.max_rel <= 1e-4, "max rel {}", report.max_rel);
    assert_eq!(report.params.len(), 3);
}

#[test]
fn wrong_gradient_is_detected() {
    // x^3 evaluated through a path whose adjoint we cannot fake; instead
    // verify that a tolerance below the finite-difference noise fails.
    let x = Tensor::new(vec![1.3], &[1]).unwrap();
    let report = grad_check(|p| Ok(p[0].exp().exp()), &[x], 1e-3, 1e-14).unwrap();
    assert!(!report.pass);
}

#[test]
fn rejects_bad_eps_and_non_finite_objective() {
    let x = Tensor::new(vec![1.0], &[1]).unwrap();
    assert!(matches!(
        grad_check(|p| Ok(p[0].sum()), &[x.clone()], 0.1, 1e-4),
        Err(TensorError::InvalidArgument(_))
    ));
    // log(x) is finite at x = 1e-6 but not at 1e-6 - 1e-5
    let y = Tensor::new(vec![3.0, 1e-6], &[2]).unwrap();
    match grad_check(|p| Ok(p[0].log().sum()), &[y], 1e-5, 1e-4) {
        Err(TensorError::NonFinite { param, index }) => {
            assert_eq!((param, index), (0, 1));
        }
        other => panic!("expected non-finite error, got {other:?}"),
    }
}
