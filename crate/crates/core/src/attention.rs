//! Scaled dot-product attention with an optional activation on the value
//! tensor, multi-head assembly, and the three transformer block layouts.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use mabvit_tensor::{Tensor, TensorError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{layer_norm, linear, mlp_forward, LayerNormParams, LinearParams, MlpParams, MlpVariant};

/// What happens to `V = x W_V + B_V` before attention mixes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueVariant {
    Standard,
    Gelu,
    /// `Swish(x W_1) * (x W_2)`: the value projection is doubled and gated
    /// back down to the model width.
    Swiglu,
}

impl fmt::Display for ValueVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueVariant::Standard => "standard",
            ValueVariant::Gelu => "gelu",
            ValueVariant::Swiglu => "swiglu",
        })
    }
}

impl FromStr for ValueVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" | "base" => Ok(ValueVariant::Standard),
            "gelu" => Ok(ValueVariant::Gelu),
            "swiglu" | "glu" => Ok(ValueVariant::Swiglu),
            other => Err(Error::config(format!(
                "unknown value variant {other:?} (expected standard, gelu, swiglu)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum ValueProjection {
    /// `x W_V + B_V`, used by the standard and GELU variants.
    Single(LinearParams),
    /// Bias-free pair for the SwiGLU variant.
    Gated { gate: LinearParams, linear: LinearParams },
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: ValueProjection,
    pub output: LinearParams,
    pub heads: usize,
}

impl AttentionParams {
    pub fn dim(&self) -> usize {
        self.query.in_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn numel(&self) -> usize {
        let value = match &self.value {
            ValueProjection::Single(p) => p.numel(),
            ValueProjection::Gated { gate, linear } => gate.numel() + linear.numel(),
        };
        self.query.numel() + self.key.numel() + value + self.output.numel()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockStructure {
    /// `x += MHA(LN(x)); x += MLP(LN(x))`
    PreLnSequential,
    /// `x = LN(x + MHA(x)); x = LN(x + MLP(x))`
    PostLnSequential,
    /// `x += MHA(LN1(x)) + MLP(LN2(x))`
    PreLnParallel,
}

impl BlockStructure {
    pub fn is_parallel(self) -> bool {
        self == BlockStructure::PreLnParallel
    }
}

impl fmt::Display for BlockStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockStructure::PreLnSequential => "seq",
            BlockStructure::PostLnSequential => "postln",
            BlockStructure::PreLnParallel => "par",
        })
    }
}

impl FromStr for BlockStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" | "preln" => Ok(BlockStructure::PreLnSequential),
            "postln" => Ok(BlockStructure::PostLnSequential),
            "par" | "parallel" => Ok(BlockStructure::PreLnParallel),
            other => Err(Error::config(format!(
                "unknown block structure {other:?} (expected seq, par, postln)"
            ))),
        }
    }
}

/// Parameters of one transformer block.
///
/// `ln1`/`ln2` play different roles per structure: pre-norms for the
/// attention and MLP branches (Pre-LN and parallel), or the trailing norms
/// after each residual addition (Post-LN).
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub attn: AttentionParams,
    pub mlp: MlpParams,
}

impl BlockParams {
    pub fn numel(&self) -> usize {
        2 * (self.ln1.dim() + self.ln2.dim()) + self.attn.numel() + self.mlp.numel()
    }
}

/// Layout and variants shared by every block of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockKind {
    pub structure: BlockStructure,
    pub value: ValueVariant,
    pub mlp: MlpVariant,
}

/// Which residual addition a probe observation comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Substep {
    Mha,
    Mlp,
    Parallel,
}

impl fmt::Display for Substep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Substep::Mha => "mha",
            Substep::Mlp => "mlp",
            Substep::Parallel => "parallel",
        })
    }
}

impl FromStr for Substep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mha" => Ok(Substep::Mha),
            "mlp" => Ok(Substep::Mlp),
            "parallel" => Ok(Substep::Parallel),
            other => Err(Error::config(format!("unknown substep {other:?}"))),
        }
    }
}

/// Receives the residual stream before and after every residual addition.
///
/// For Post-LN blocks `output` is taken before the trailing LayerNorm.
pub trait ResidualObserver {
    fn observe(&mut self, layer: usize, substep: Substep, input: &Tensor, output: &Tensor);
}

/// Inverted dropout applied to branch outputs during training.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    fn apply(&mut self, x: &Tensor) -> Result<Tensor> {
        if self.rate <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        Ok(x.mul(&Tensor::new(mask, x.shape())?)?)
    }
}

/// Per-forward-pass state: training-time dropout and an optional probe.
#[derive(Default)]
pub struct ForwardCtx<'a> {
    pub dropout: Option<Dropout>,
    pub observer: Option<&'a mut dyn ResidualObserver>,
}

impl ForwardCtx<'_> {
    fn drop_branch(&mut self, x: Tensor) -> Result<Tensor> {
        match &mut self.dropout {
            Some(d) => d.apply(&x),
            None => Ok(x),
        }
    }

    fn observe(&mut self, layer: usize, substep: Substep, input: &Tensor, output: &Tensor) {
        if let Some(obs) = self.observer.as_deref_mut() {
            obs.observe(layer, substep, input, output);
        }
    }
}

pub fn project_value(x: &Tensor, params: &AttentionParams, variant: ValueVariant) -> Result<Tensor> {
    match (&params.value, variant) {
        (ValueProjection::Single(p), ValueVariant::Standard) => linear(x, p),
        (ValueProjection::Single(p), ValueVariant::Gelu) => Ok(linear(x, p)?.gelu()),
        (ValueProjection::Gated { gate, linear: lin }, ValueVariant::Swiglu) => {
            Ok(linear(x, gate)?.silu().mul(&linear(x, lin)?)?)
        }
        _ => Err(Error::config(format!(
            "value variant {variant} does not match the value projection layout"
        ))),
    }
}

/// Row-stochastic attention weights `softmax(Q K^T / sqrt(d_k))`.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    if q.rank() < 2 || q.rank() != k.rank() {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        }
        .into());
    }
    let d_k = q.shape()[q.rank() - 1];
    if d_k == 0 {
        return Err(Error::config("attention head dimension must be positive"));
    }
    let scores = q.matmul(&k.t()?)?.scale(1.0 / (d_k as f64).sqrt());
    Ok(scores.softmax_last()?)
}

/// Sorts the key/value pairs of every attention instance by their bit
/// patterns; `None` when they are already in order.
fn canonical_pairs(k: &Tensor, v: &Tensor) -> Option<Vec<usize>> {
    let (dk, dv) = (k.shape()[k.rank() - 1], v.shape()[v.rank() - 1]);
    let n = k.shape()[k.rank() - 2];
    let (kd, vd) = (k.data(), v.data());
    let key = |i: usize| kd[i * dk..(i + 1) * dk].iter().chain(&vd[i * dv..(i + 1) * dv]);
    let mut perm: Vec<usize> = (0..k.numel() / dk).collect();
    let mut moved = false;
    for pairs in perm.chunks_mut(n) {
        pairs.sort_by(|&i, &j| {
            key(i)
                .zip(key(j))
                .map(|(a, b)| a.total_cmp(b))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        });
        moved |= pairs.windows(2).any(|w| w[0] > w[1]);
    }
    moved.then_some(perm)
}

/// `softmax(Q K^T / sqrt(d_k)) V` over the trailing two dims.
///
/// Key/value pairs are mixed in a canonical order, so the result is
/// bitwise independent of how they are arranged.
pub fn scaled_dot_product_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if k.rank() < 2 || k.shape()[..k.rank() - 1] != v.shape()[..v.rank().saturating_sub(1)] {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        }
        .into());
    }
    if k.numel() == 0 || v.numel() == 0 {
        return Err(Error::config("attention inputs must be non-empty"));
    }
    match canonical_pairs(k, v) {
        Some(perm) => {
            let k = k.gather_rows(&perm)?.reshape(k.shape())?;
            let v = v.gather_rows(&perm)?.reshape(v.shape())?;
            Ok(attention_weights(q, &k)?.matmul(&v)?)
        }
        None => Ok(attention_weights(q, k)?.matmul(v)?),
    }
}

/// `[B, n, D] -> [B, h, n, D/h]`
fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Ok(x.reshape(&[b, n, heads, d / heads])?.transpose(1, 2)?)
}

/// `[B, h, n, d_k] -> [B, n, h * d_k]`
fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let s = x.shape().to_vec();
    Ok(x.transpose(1, 2)?.reshape(&[s[0], s[2], s[1] * s[3]])?)
}

/// Lifts an `n x D` input to `1 x n x D`, returning whether it did.
fn as_batched(x: &Tensor) -> Result<(Tensor, bool)> {
    match x.rank() {
        2 => Ok((x.reshape(&[1, x.shape()[0], x.shape()[1]])?, true)),
        3 => Ok((x.clone(), false)),
        _ => Err(Error::config(format!(
            "expected tokens as n x D or B x n x D, got shape {:?}",
            x.shape()
        ))),
    }
}

fn unbatch(y: Tensor, lifted: bool) -> Result<Tensor> {
    if lifted {
        let s = y.shape().to_vec();
        Ok(y.reshape(&s[1..])?)
    } else {
        Ok(y)
    }
}

/// Multi-head self-attention over `n x D` or `B x n x D` tokens.
///
/// The value activation is applied to the full-width value tensor before
/// it is split into heads. Permuting the input tokens permutes the output
/// rows bit for bit.
pub fn multi_head_attention(x: &Tensor, params: &AttentionParams, variant: ValueVariant) -> Result<Tensor> {
    let dim = params.dim();
    if params.heads == 0 || dim % params.heads != 0 {
        return Err(Error::config(format!(
            "embedding dim {dim} is not divisible by {} heads",
            params.heads
        )));
    }
    let (x, lifted) = as_batched(x)?;
    let q = split_heads(&linear(&x, &params.query)?, params.heads)?;
    let k = split_heads(&linear(&x, &params.key)?, params.heads)?;
    let v = split_heads(&project_value(&x, params, variant)?, params.heads)?;
    let heads = scaled_dot_product_attention(&q, &k, &v)?;
    let y = linear(&merge_heads(&heads)?, &params.output)?;
    unbatch(y, lifted)
}

pub fn transformer_block(x: &Tensor, params: &BlockParams, kind: BlockKind) -> Result<Tensor> {
    transformer_block_with(x, params, kind, 0, &mut ForwardCtx::default())
}

/// Block forward pass with dropout and probing; `layer` labels observations.
pub fn transformer_block_with(
    x: &Tensor,
    params: &BlockParams,
    kind: BlockKind,
    layer: usize,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Tensor> {
    let dim = params.attn.dim();
    if params.ln1.dim() != dim || params.ln2.dim() != dim {
        return Err(Error::config(format!(
            "block norms ({}, {}) do not match attention width {dim}",
            params.ln1.dim(),
            params.ln2.dim()
        )));
    }
    let mha = |h: &Tensor| multi_head_attention(h, &params.attn, kind.value);
    let mlp = |h: &Tensor| mlp_forward(h, &params.mlp, kind.mlp);
    match kind.structure {
        BlockStructure::PreLnSequential => {
            let a = ctx.drop_branch(mha(&layer_norm(x, &params.ln1)?)?)?;
            let x1 = x.add(&a)?;
            ctx.observe(layer, Substep::Mha, x, &x1);
            let m = ctx.drop_branch(mlp(&layer_norm(&x1, &params.ln2)?)?)?;
            let x2 = x1.add(&m)?;
            ctx.observe(layer, Substep::Mlp, &x1, &x2);
            Ok(x2)
        }
        BlockStructure::PostLnSequential => {
            let a = ctx.drop_branch(mha(x)?)?;
            let s1 = x.add(&a)?;
            ctx.observe(layer, Substep::Mha, x, &s1);
            let x1 = layer_norm(&s1, &params.ln1)?;
            let m = ctx.drop_branch(mlp(&x1)?)?;
            let s2 = x1.add(&m)?;
            ctx.observe(layer, Substep::Mlp, &x1, &s2);
            layer_norm(&s2, &params.ln2)
        }
        BlockStructure::PreLnParallel => {
            let a = ctx.drop_branch(mha(&layer_norm(x, &params.ln1)?)?)?;
            let m = ctx.drop_branch(mlp(&layer_norm(x, &params.ln2)?)?)?;
            let y = x.add(&a)?.add(&m)?;
            ctx.observe(layer, Substep::Parallel, x, &y);
            Ok(y)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{gaussian, max_abs_diff};
    use crate::layers::LN_EPS;
    use rand::SeedableRng;

    fn lin(rng: &mut ChaCha8Rng, i: usize, o: usize, bias: bool) -> LinearParams {
        LinearParams::new(gaussian(rng, &[i, o], 0.5), bias.then(|| gaussian(rng, &[o], 0.5))).unwrap()
    }

    fn attn(rng: &mut ChaCha8Rng, d: usize, heads: usize, variant: ValueVariant) -> AttentionParams {
        let value = match variant {
            ValueVariant::Swiglu => ValueProjection::Gated {
                gate: lin(rng, d, d, false),
                linear: lin(rng, d, d, false),
            },
            _ => ValueProjection::Single(lin(rng, d, d, true)),
        };
        AttentionParams {
            query: lin(rng, d, d, true),
            key: lin(rng, d, d, true),
            value,
            output: lin(rng, d, d, true),
            heads,
        }
    }

    #[test]
    fn standard_value_with_identity_weight_is_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = attn(&mut rng, 4, 2, ValueVariant::Standard);
        let mut eye = vec![0.0; 16];
        (0..4).for_each(|i| eye[i * 5] = 1.0);
        p.value = ValueProjection::Single(
            LinearParams::new(Tensor::new(eye, &[4, 4]).unwrap(), Some(Tensor::zeros(&[4]).unwrap())).unwrap(),
        );
        let x = gaussian(&mut rng, &[3, 4], 1.0);
        assert_eq!(project_value(&x, &p, ValueVariant::Standard).unwrap().data(), x.data());
    }

    #[test]
    fn gelu_value_with_zero_weights_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = attn(&mut rng, 4, 2, ValueVariant::Gelu);
        p.value = ValueProjection::Single(
            LinearParams::new(Tensor::zeros(&[4, 4]).unwrap(), Some(Tensor::zeros(&[4]).unwrap())).unwrap(),
        );
        let x = gaussian(&mut rng, &[3, 4], 1.0);
        let v = project_value(&x, &p, ValueVariant::Gelu).unwrap();
        assert!(v.data().iter().all(|&y| y == 0.0));
    }

    #[test]
    fn value_layout_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian(&mut rng, &[3, 4], 1.0);
        let single = attn(&mut rng, 4, 2, ValueVariant::Standard);
        let gated = attn(&mut rng, 4, 2, ValueVariant::Swiglu);
        assert!(matches!(project_value(&x, &single, ValueVariant::Swiglu), Err(Error::Config(_))));
        assert!(matches!(project_value(&x, &gated, ValueVariant::Gelu), Err(Error::Config(_))));
    }

    #[test]
    fn single_token_attention_returns_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = gaussian(&mut rng, &[1, 3], 1.0);
        let k = gaussian(&mut rng, &[1, 3], 1.0);
        let v = gaussian(&mut rng, &[1, 3], 1.0);
        assert_eq!(scaled_dot_product_attention(&q, &k, &v).unwrap().data(), v.data());
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = gaussian(&mut rng, &[3, 2], 1.0);
        let k = Tensor::new([0.3, -1.2].repeat(4), &[4, 2]).unwrap();
        let v = gaussian(&mut rng, &[4, 2], 1.0);
        let out = scaled_dot_product_attention(&q, &k, &v).unwrap();
        for row in out.data().chunks(2) {
            for c in 0..2 {
                let mean = (0..4).map(|r| v.data()[r * 2 + c]).sum::<f64>() / 4.0;
                assert!((row[c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_attention_inputs_error() {
        let q = Tensor::zeros(&[3, 2]).unwrap();
        let k = Tensor::zeros(&[4, 3]).unwrap();
        let v = Tensor::zeros(&[4, 2]).unwrap();
        assert!(scaled_dot_product_attention(&q, &k, &v).is_err());
        let k = Tensor::zeros(&[4, 2]).unwrap();
        let v = Tensor::zeros(&[5, 2]).unwrap();
        assert!(scaled_dot_product_attention(&q, &k, &v).is_err());
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = attn(&mut rng, 6, 4, ValueVariant::Standard);
        let x = gaussian(&mut rng, &[2, 6], 1.0);
        assert!(matches!(
            multi_head_attention(&x, &p, ValueVariant::Standard),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mha_output_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (n, d, h) in [(1, 4, 1), (3, 4, 2), (5, 6, 3), (2, 8, 8)] {
            for variant in [ValueVariant::Standard, ValueVariant::Gelu, ValueVariant::Swiglu] {
                let p = attn(&mut rng, d, h, variant);
                let x = gaussian(&mut rng, &[n, d], 1.0);
                assert_eq!(multi_head_attention(&x, &p, variant).unwrap().shape(), &[n, d]);
                let xb = gaussian(&mut rng, &[2, n, d], 1.0);
                assert_eq!(multi_head_attention(&xb, &p, variant).unwrap().shape(), &[2, n, d]);
            }
        }
    }

    #[test]
    fn batched_mha_equals_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = attn(&mut rng, 6, 2, ValueVariant::Swiglu);
        let xb = gaussian(&mut rng, &[3, 4, 6], 1.0);
        let yb = multi_head_attention(&xb, &p, ValueVariant::Swiglu).unwrap();
        for b in 0..3 {
            let xs = xb.narrow(0, b, 1).unwrap().reshape(&[4, 6]).unwrap();
            let ys = multi_head_attention(&xs, &p, ValueVariant::Swiglu).unwrap();
            let slice = &yb.data()[b * 24..(b + 1) * 24];
            for (a, e) in slice.iter().zip(ys.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn token_permutation_is_exactly_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let perm = [3, 0, 4, 1, 2];
        for variant in [ValueVariant::Standard, ValueVariant::Gelu, ValueVariant::Swiglu] {
            let p = attn(&mut rng, 8, 2, variant);
            let x = gaussian(&mut rng, &[5, 8], 1.0);
            let y = multi_head_attention(&x, &p, variant).unwrap();
            let yp = multi_head_attention(&x.gather_rows(&perm).unwrap(), &p, variant).unwrap();
            assert_eq!(yp.data(), y.gather_rows(&perm).unwrap().data());
        }
    }

    fn block(rng: &mut ChaCha8Rng, d: usize, variant: ValueVariant) -> BlockParams {
        BlockParams {
            ln1: LayerNormParams { gamma: gaussian(rng, &[d], 1.0), beta: gaussian(rng, &[d], 0.3), eps: 1e-6 },
            ln2: LayerNormParams { gamma: gaussian(rng, &[d], 1.0), beta: gaussian(rng, &[d], 0.3), eps: 1e-6 },
            attn: attn(rng, d, 2, variant),
            mlp: MlpParams::Standard { fc1: lin(rng, d, 2 * d, true), fc2: lin(rng, 2 * d, d, true) },
        }
    }

    fn kind(structure: BlockStructure, value: ValueVariant) -> BlockKind {
        BlockKind { structure, value, mlp: MlpVariant::StandardGelu }
    }

    #[test]
    fn zero_branches_make_pre_ln_block_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut b = block(&mut rng, 4, ValueVariant::Standard);
        b.attn.output = LinearParams::new(Tensor::zeros(&[4, 4]).unwrap(), Some(Tensor::zeros(&[4]).unwrap())).unwrap();
        if let MlpParams::Standard { fc2, .. } = &mut b.mlp {
            *fc2 = LinearParams::new(Tensor::zeros(&[8, 4]).unwrap(), Some(Tensor::zeros(&[4]).unwrap())).unwrap();
        }
        let x = gaussian(&mut rng, &[5, 4], 1.0);
        for s in [BlockStructure::PreLnSequential, BlockStructure::PreLnParallel] {
            let y = transformer_block(&x, &b, kind(s, ValueVariant::Standard)).unwrap();
            assert_eq!(y.data(), x.data());
        }
    }

    #[test]
    fn parallel_differs_from_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = block(&mut rng, 4, ValueVariant::Standard);
        let x = gaussian(&mut rng, &[5, 4], 1.0);
        let seq = transformer_block(&x, &b, kind(BlockStructure::PreLnSequential, ValueVariant::Standard)).unwrap();
        let par = transformer_block(&x, &b, kind(BlockStructure::PreLnParallel, ValueVariant::Standard)).unwrap();
        assert!(max_abs_diff(&seq, &par) > 0.0);
    }

    #[test]
    fn post_ln_output_is_normalized() {
        struct Last(Option<Tensor>);
        impl ResidualObserver for Last {
            fn observe(&mut self, _: usize, _: Substep, _: &Tensor, output: &Tensor) {
                self.0 = Some(output.clone());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut b = block(&mut rng, 6, ValueVariant::Gelu);
        b.ln2 = LayerNormParams::identity(6, false).unwrap();
        let x = gaussian(&mut rng, &[4, 6], 1.0);
        let mut last = Last(None);
        let mut ctx = ForwardCtx { dropout: None, observer: Some(&mut last) };
        let k = kind(BlockStructure::PostLnSequential, ValueVariant::Gelu);
        let y = transformer_block_with(&x, &b, k, 0, &mut ctx).unwrap();
        let pre = last.0.unwrap();
        for (row, pre_row) in y.data().chunks(6).zip(pre.data().chunks(6)) {
            let stats = |r: &[f64]| {
                let mu = r.iter().sum::<f64>() / 6.0;
                (mu, r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 6.0)
            };
            let (mu, var) = stats(row);
            let (_, v) = stats(pre_row);
            assert!(mu.abs() < 1e-9);
            assert!((var - v / (v + LN_EPS)).abs() < 1e-9, "{var}");
            assert!((var - 1.0).abs() <= LN_EPS / v, "{var}");
        }
    }

    #[test]
    fn structure_norm_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut b = block(&mut rng, 4, ValueVariant::Standard);
        b.ln2 = LayerNormParams::identity(5, false).unwrap();
        let x = gaussian(&mut rng, &[3, 4], 1.0);
        assert!(matches!(
            transformer_block(&x, &b, kind(BlockStructure::PreLnSequential, ValueVariant::Standard)),
            Err(Error::Config(_))
        ));
    }
}
