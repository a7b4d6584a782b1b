//! Linear maps, layer normalization, activations, and the MLP variants.

use std::fmt;
use std::str::FromStr;

use mabvit_tensor::{Tensor, TensorError};

use crate::error::{Error, Result};

/// LayerNorm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Identity,
    Sigmoid,
    /// Exact erf form, `x * Phi(x)`.
    Gelu,
    /// Swish-1 / SiLU, `x * sigmoid(x)`.
    Swish,
    /// The Swish-gated product used by GLU forms. Not a pointwise function;
    /// see [`crate::attention::project_value`] and [`mlp_forward`].
    SwiGluGate,
}

pub fn apply_activation(kind: ActivationKind, x: &Tensor) -> Result<Tensor> {
    Ok(match kind {
        ActivationKind::Identity => x.clone(),
        ActivationKind::Sigmoid => x.sigmoid(),
        ActivationKind::Gelu => x.gelu(),
        ActivationKind::Swish => x.silu(),
        ActivationKind::SwiGluGate => {
            return Err(Error::config(
                "SwiGLU gating pairs two projections and cannot be applied pointwise",
            ))
        }
    })
}

/// `x W + b` with `W` stored as `in_dim x out_dim`.
#[derive(Debug, Clone)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::config(format!(
                "linear weight must be rank 2, got shape {:?}",
                weight.shape()
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[1]] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    lhs: weight.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                }
                .into());
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn numel(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }
}

/// Applies `p` over the last dimension of `x`.
pub fn linear(x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    let last = x.shape().last().copied().unwrap_or(0);
    if last != p.in_dim() {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: p.weight.shape().to_vec(),
        }
        .into());
    }
    let y = if x.rank() == 1 {
        x.reshape(&[1, last])?
            .matmul(&p.weight)?
            .reshape(&[p.out_dim()])?
    } else {
        x.matmul(&p.weight)?
    };
    Ok(match &p.bias {
        Some(b) => y.add(b)?,
        None => y,
    })
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNormParams {
    /// Unit gain, zero shift.
    pub fn identity(dim: usize, trainable: bool) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::ones(&[dim])?.to_leaf(trainable),
            beta: Tensor::zeros(&[dim])?.to_leaf(trainable),
            eps: LN_EPS,
        })
    }

    pub fn dim(&self) -> usize {
        self.gamma.numel()
    }
}

pub fn layer_norm(x: &Tensor, p: &LayerNormParams) -> Result<Tensor> {
    Ok(x.layer_norm(&p.gamma, &p.beta, p.eps)?)
}

/// Gated linear unit, `sigmoid(x W + b) * (x V + c)`.
pub fn glu(x: &Tensor, w: &LinearParams, v: &LinearParams) -> Result<Tensor> {
    if w.weight.shape() != v.weight.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "glu",
            lhs: w.weight.shape().to_vec(),
            rhs: v.weight.shape().to_vec(),
        }
        .into());
    }
    Ok(linear(x, w)?.sigmoid().mul(&linear(x, v)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MlpVariant {
    StandardGelu,
    Geglu,
    Swiglu,
}

impl MlpVariant {
    pub fn is_gated(self) -> bool {
        !matches!(self, MlpVariant::StandardGelu)
    }
}

impl fmt::Display for MlpVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MlpVariant::StandardGelu => "gelu",
            MlpVariant::Geglu => "geglu",
            MlpVariant::Swiglu => "swiglu",
        })
    }
}

impl FromStr for MlpVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(MlpVariant::StandardGelu),
            "geglu" => Ok(MlpVariant::Geglu),
            "swiglu" => Ok(MlpVariant::Swiglu),
            other => Err(Error::config(format!(
                "unknown mlp variant {other:?} (expected gelu, geglu, swiglu)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum MlpParams {
    /// `GELU(x W1 + b1) W2 + b2`.
    Standard { fc1: LinearParams, fc2: LinearParams },
    /// `(act(x W1) * x V) W2 + b2`; `gate` and `up` carry no bias.
    Gated {
        gate: LinearParams,
        up: LinearParams,
        down: LinearParams,
    },
}

impl MlpParams {
    pub fn hidden_dim(&self) -> usize {
        match self {
            MlpParams::Standard { fc1, .. } => fc1.out_dim(),
            MlpParams::Gated { gate, .. } => gate.out_dim(),
        }
    }

    pub fn numel(&self) -> usize {
        match self {
            MlpParams::Standard { fc1, fc2 } => fc1.numel() + fc2.numel(),
            MlpParams::Gated { gate, up, down } => gate.numel() + up.numel() + down.numel(),
        }
    }
}

pub fn mlp_forward(x: &Tensor, params: &MlpParams, variant: MlpVariant) -> Result<Tensor> {
    match (params, variant) {
        (MlpParams::Standard { fc1, fc2 }, MlpVariant::StandardGelu) => {
            linear(&linear(x, fc1)?.gelu(), fc2)
        }
        (MlpParams::Gated { gate, up, down }, MlpVariant::Geglu | MlpVariant::Swiglu) => {
            let g = linear(x, gate)?;
            let g = if variant == MlpVariant::Geglu {
                g.gelu()
            } else {
                g.silu()
            };
            linear(&g.mul(&linear(x, up)?)?, down)
        }
        _ => Err(Error::config(format!(
            "mlp variant {variant} does not match the parameter layout"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{gaussian, max_abs_diff};
    use mabvit_tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_linear(rng: &mut ChaCha8Rng, i: usize, o: usize, bias: bool) -> LinearParams {
        LinearParams::new(
            gaussian(rng, &[i, o], 1.0),
            bias.then(|| gaussian(rng, &[o], 1.0)),
        )
        .unwrap()
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn activation_fixed_points() {
        let zero = Tensor::zeros(&[1]).unwrap();
        let gelu = apply_activation(ActivationKind::Gelu, &zero).unwrap();
        let sig = apply_activation(ActivationKind::Sigmoid, &zero).unwrap();
        assert_eq!(gelu.data(), &[0.0]);
        assert_eq!(sig.data(), &[0.5]);
    }

    #[test]
    fn swish_matches_scalar_formula() {
        let x = Tensor::new(vec![1.0], &[1]).unwrap();
        let y = apply_activation(ActivationKind::Swish, &x).unwrap();
        assert!((y.data()[0] - 1.0 * sigmoid(1.0)).abs() < 1e-15);
    }

    #[test]
    fn identity_is_bitwise_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = gaussian(&mut rng, &[4, 5], 3.0);
        let y = apply_activation(ActivationKind::Identity, &x).unwrap();
        assert_eq!(
            x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn swiglu_gate_is_not_pointwise() {
        let x = Tensor::zeros(&[2]).unwrap();
        assert!(matches!(
            apply_activation(ActivationKind::SwiGluGate, &x),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn linear_zero_weight_returns_bias() {
        let c = Tensor::new(vec![1.5, -2.0, 0.25], &[3]).unwrap();
        let p = LinearParams::new(Tensor::zeros(&[4, 3]).unwrap(), Some(c.clone())).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = linear(&gaussian(&mut rng, &[5, 4], 1.0), &p).unwrap();
        for row in y.data().chunks(3) {
            assert_eq!(row, c.data());
        }
    }

    #[test]
    fn linear_identity_weight() {
        let mut eye = vec![0.0; 16];
        (0..4).for_each(|i| eye[i * 5] = 1.0);
        let p = LinearParams::new(
            Tensor::new(eye, &[4, 4]).unwrap(),
            Some(Tensor::zeros(&[4]).unwrap()),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian(&mut rng, &[2, 3, 4], 1.0);
        assert_eq!(linear(&x, &p).unwrap().data(), x.data());
    }

    #[test]
    fn linear_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_linear(&mut rng, 3, 2, true);
        let x = gaussian(&mut rng, &[4, 3], 1.0);
        let y = linear(&x, &p).unwrap();
        let (w, b) = (p.weight.data(), p.bias.as_ref().unwrap().data());
        for r in 0..4 {
            for c in 0..2 {
                let e: f64 = (0..3).map(|k| x.data()[r * 3 + k] * w[k * 2 + c]).sum::<f64>() + b[c];
                assert!((y.data()[r * 2 + c] - e).abs() <= 1e-12);
            }
        }
        let vec_in = gaussian(&mut rng, &[3], 1.0);
        assert_eq!(linear(&vec_in, &p).unwrap().shape(), &[2]);
        assert!(linear(&gaussian(&mut rng, &[4, 2], 1.0), &p).is_err());
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let p = LayerNormParams::identity(5, false).unwrap();
        let y = layer_norm(&Tensor::full(&[2, 5], 3.25).unwrap(), &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_standardizes_and_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gaussian(&mut rng, &[3, 8], 2.0);
        let unit = LayerNormParams::identity(8, false).unwrap();
        let y = layer_norm(&x, &unit).unwrap();
        let moments = |row: &[f64]| {
            let mu = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / row.len() as f64;
            (mu, var)
        };
        for (input, row) in x.data().chunks(8).zip(y.data().chunks(8)) {
            let (_, v) = moments(input);
            let (mu, var) = moments(row);
            assert!(mu.abs() < 1e-9);
            // eps inside the root makes the variance exactly v / (v + eps)
            assert!((var - v / (v + LN_EPS)).abs() < 1e-9, "var {var}");
            assert!((var - 1.0).abs() <= LN_EPS / v);
        }
        let p = LayerNormParams {
            gamma: gaussian(&mut rng, &[8], 1.0),
            beta: gaussian(&mut rng, &[8], 1.0),
            eps: LN_EPS,
        };
        let y = layer_norm(&x, &p).unwrap();
        for (row, out) in x.data().chunks(8).zip(y.data().chunks(8)) {
            let mu = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 8.0;
            for j in 0..8 {
                let e = p.gamma.data()[j] * (row[j] - mu) / (var + LN_EPS).sqrt() + p.beta.data()[j];
                assert!((out[j] - e).abs() <= 1e-12);
            }
        }
        assert!(layer_norm(&gaussian(&mut rng, &[3, 7], 1.0), &unit).is_err());
    }

    #[test]
    fn layer_norm_ignores_constant_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian(&mut rng, &[4, 6], 1.0);
        let shifted = x.add_scalar(17.5);
        let p = LayerNormParams::identity(6, false).unwrap();
        let d = max_abs_diff(&layer_norm(&x, &p).unwrap(), &layer_norm(&shifted, &p).unwrap());
        assert!(d <= 1e-9, "{d}");
    }

    #[test]
    fn glu_special_cases_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = gaussian(&mut rng, &[3, 4], 1.0);
        let v = random_linear(&mut rng, 4, 5, true);
        let zero_w = LinearParams::new(
            Tensor::zeros(&[4, 5]).unwrap(),
            Some(Tensor::zeros(&[5]).unwrap()),
        )
        .unwrap();
        let half = glu(&x, &zero_w, &v).unwrap();
        let lin = linear(&x, &v).unwrap();
        for (h, l) in half.data().iter().zip(lin.data()) {
            assert_eq!(*h, 0.5 * l);
        }
        let zero_v = zero_w.clone();
        let w = random_linear(&mut rng, 4, 5, true);
        assert!(glu(&x, &w, &zero_v).unwrap().data().iter().all(|&v| v == 0.0));

        let y = glu(&x, &w, &v).unwrap();
        let (wd, bd) = (w.weight.data(), w.bias.as_ref().unwrap().data());
        let (vd, cd) = (v.weight.data(), v.bias.as_ref().unwrap().data());
        for r in 0..3 {
            for c in 0..5 {
                let xw: f64 = (0..4).map(|k| x.data()[r * 4 + k] * wd[k * 5 + c]).sum::<f64>() + bd[c];
                let xv: f64 = (0..4).map(|k| x.data()[r * 4 + k] * vd[k * 5 + c]).sum::<f64>() + cd[c];
                assert!((y.data()[r * 5 + c] - sigmoid(xw) * xv).abs() <= 1e-12);
            }
        }
        let narrow = random_linear(&mut rng, 4, 3, true);
        assert!(glu(&x, &w, &narrow).is_err());
    }

    #[test]
    fn glu_saturated_gate_passes_linear_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = gaussian(&mut rng, &[3, 4], 1.0);
        let v = random_linear(&mut rng, 4, 5, true);
        let w = LinearParams::new(
            Tensor::zeros(&[4, 5]).unwrap(),
            Some(Tensor::full(&[5], 50.0).unwrap()),
        )
        .unwrap();
        let d = max_abs_diff(&glu(&x, &w, &v).unwrap(), &linear(&x, &v).unwrap());
        assert!(d <= 1e-9, "{d}");
    }

    #[test]
    fn mlp_zero_weights_give_zero() {
        let z = |i, o| {
            LinearParams::new(Tensor::zeros(&[i, o]).unwrap(), Some(Tensor::zeros(&[o]).unwrap()))
                .unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = gaussian(&mut rng, &[2, 4], 1.0);
        let standard = MlpParams::Standard { fc1: z(4, 6), fc2: z(6, 4) };
        let gated = MlpParams::Gated { gate: z(4, 6), up: z(4, 6), down: z(6, 4) };
        for (p, v) in [
            (&standard, MlpVariant::StandardGelu),
            (&gated, MlpVariant::Geglu),
            (&gated, MlpVariant::Swiglu),
        ] {
            assert!(mlp_forward(&x, p, v).unwrap().data().iter().all(|&y| y == 0.0));
        }
        assert!(matches!(
            mlp_forward(&x, &standard, MlpVariant::Swiglu),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            mlp_forward(&x, &gated, MlpVariant::StandardGelu),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn swiglu_mlp_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = gaussian(&mut rng, &[3, 4], 1.0);
        let gate = random_linear(&mut rng, 4, 6, false);
        let up = random_linear(&mut rng, 4, 6, false);
        let down = random_linear(&mut rng, 6, 4, true);
        let p = MlpParams::Gated { gate: gate.clone(), up: up.clone(), down: down.clone() };
        let y = mlp_forward(&x, &p, MlpVariant::Swiglu).unwrap();

        let a = linear(&x, &gate).unwrap();
        let b = linear(&x, &up).unwrap();
        let h: Vec<f64> = a.data().iter().zip(b.data()).map(|(a, b)| a * sigmoid(*a) * b).collect();
        let h = Tensor::new(h, &[3, 6]).unwrap();
        let expect = linear(&h, &down).unwrap();
        assert!(max_abs_diff(&y, &expect) <= 1e-12);
    }

    #[test]
    fn layer_primitives_pass_grad_check() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = gaussian(&mut rng, &[3, 4], 1.0);
            let w = gaussian(&mut rng, &[4, 5], 0.7);
            let b = gaussian(&mut rng, &[5], 0.7);
            let v = gaussian(&mut rng, &[4, 5], 0.7);
            let c = gaussian(&mut rng, &[5], 0.7);
            let w2 = gaussian(&mut rng, &[5, 4], 0.7);
            let b2 = gaussian(&mut rng, &[4], 0.7);
            let g = gaussian(&mut rng, &[4], 1.0);
            let beta = gaussian(&mut rng, &[4], 1.0);
            let r = gaussian(&mut rng, &[3, 4], 1.0);
            let lin = |p: &[Tensor], i: usize, bias: Option<usize>| {
                LinearParams::new(p[i].clone(), bias.map(|j| p[j].clone())).unwrap()
            };

            let checks: Vec<(&str, Box<dyn Fn(&[Tensor]) -> mabvit_tensor::Result<Tensor>>)> = vec![
                ("linear", Box::new(|p| Ok(linear(&p[0], &lin(p, 1, Some(2))).unwrap().sum()))),
                ("layer_norm", Box::new(|p| {
                    let ln = LayerNormParams { gamma: p[7].clone(), beta: p[8].clone(), eps: LN_EPS };
                    Ok(layer_norm(&p[0], &ln).unwrap().mul(&r)?.sum())
                })),
                ("glu", Box::new(|p| Ok(glu(&p[0], &lin(p, 1, Some(2)), &lin(p, 3, Some(4))).unwrap().sum()))),
                ("mlp_gelu", Box::new(|p| {
                    let m = MlpParams::Standard { fc1: lin(p, 1, Some(2)), fc2: lin(p, 5, Some(6)) };
                    Ok(mlp_forward(&p[0], &m, MlpVariant::StandardGelu).unwrap().mul(&r)?.sum())
                })),
                ("mlp_geglu", Box::new(|p| {
                    let m = MlpParams::Gated { gate: lin(p, 1, None), up: lin(p, 3, None), down: lin(p, 5, Some(6)) };
                    Ok(mlp_forward(&p[0], &m, MlpVariant::Geglu).unwrap().mul(&r)?.sum())
                })),
                ("mlp_swiglu", Box::new(|p| {
                    let m = MlpParams::Gated { gate: lin(p, 1, None), up: lin(p, 3, None), down: lin(p, 5, Some(6)) };
                    Ok(mlp_forward(&p[0], &m, MlpVariant::Swiglu).unwrap().mul(&r)?.sum())
                })),
            ];
            let params = [x.clone(), w.clone(), b.clone(), v.clone(), c.clone(), w2.clone(), b2.clone(), g.clone(), beta.clone()];
            for (name, f) in &checks {
                let report = grad_check(f, &params, 1e-5, 1e-4).unwrap();
                assert!(report.pass, "{name} seed {seed}: {report:?}");
            }
        }
    }
}
