use std::collections::{HashMap, HashSet};

use crate::error::{Result, TensorError};
use crate::kernels::{self, axis_layout, fold_repeats, gemm_batch_new};
use crate::op::Op;
use crate::ops::matmul_dims;
use crate::tensor::Tensor;

/// Nodes reachable from `root` that carry history or require grad, with
/// every node listed after all of its consumers.
fn reverse_topological(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(op) = node.op() {
            for p in op.parents() {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order.reverse();
    order
}

impl Tensor {
    /// Reverse-mode sweep from a one-element loss.
    ///
    /// Gradients are added into the `grad` slot of every reachable leaf that
    /// requires grad; calling twice without [`Tensor::zero_grad`] accumulates.
    /// Interior nodes do not retain gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(TensorError::NoGraph);
        }
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in reverse_topological(self) {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match node.op() {
                None => node.accumulate_grad(&g),
                Some(op) => {
                    for (parent, pg) in adjoint(op, &node, &g) {
                        if !parent.requires_grad() {
                            continue;
                        }
                        match grads.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(parent.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn unary(x: &Tensor, g: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    x.data().iter().zip(g).map(|(&x, &g)| f(x, g)).collect()
}

/// Gradient contributions of one recorded op to each of its inputs.
fn adjoint<'a>(op: &'a Op, out: &Tensor, g: &[f64]) -> Vec<(&'a Tensor, Vec<f64>)> {
    match op {
        Op::Add(a, b) => vec![(a, g.to_vec()), (b, fold_repeats(g, b.numel()))],
        Op::Sub(a, b) => {
            let gb = fold_repeats(g, b.numel()).into_iter().map(|v| -v).collect();
            vec![(a, g.to_vec()), (b, gb)]
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (a.data(), b.data());
            let nb = bd.len();
            let mut ga = Vec::with_capacity(g.len());
            let mut gb = vec![0.0; nb];
            for (r, gc) in g.chunks_exact(nb).enumerate() {
                let ac = &ad[r * nb..(r + 1) * nb];
                for j in 0..nb {
                    ga.push(gc[j] * bd[j]);
                    gb[j] += gc[j] * ac[j];
                }
            }
            vec![(a, ga), (b, gb)]
        }
        Op::Scale(a, s) => vec![(a, g.iter().map(|v| v * s).collect())],
        Op::AddScalar(a) | Op::Reshape(a) => vec![(a, g.to_vec())],
        Op::MatMul(a, b) => matmul_adjoint(a, b, g),
        Op::Transpose(a, lo, hi) => {
            vec![(a, kernels::swap_axes(g, out.shape(), *lo, *hi))]
        }
        Op::Concat(parts, axis) => {
            let (outer, total, inner) = axis_layout(out.shape(), *axis);
            let mut offset = 0;
            parts
                .iter()
                .map(|p| {
                    let len = p.shape()[*axis];
                    let mut gp = Vec::with_capacity(p.numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    (p, gp)
                })
                .collect()
        }
        Op::Narrow { input, axis, start } => {
            let (outer, n, inner) = axis_layout(input.shape(), *axis);
            let len = out.shape()[*axis];
            let mut gi = vec![0.0; input.numel()];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                let src = o * len * inner;
                gi[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![(input, gi)]
        }
        Op::GatherRows(a, rows) => {
            let width = out.shape()[out.rank() - 1];
            let mut ga = vec![0.0; a.numel()];
            for (&r, src) in rows.iter().zip(g.chunks_exact(width)) {
                ga[r * width..(r + 1) * width]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
            vec![(a, ga)]
        }
        Op::Sum(a) => vec![(a, vec![g[0]; a.numel()])],
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let (outer, n, inner) = axis_layout(a.shape(), *axis);
            let scale = if matches!(op, Op::MeanAxis(..)) {
                1.0 / n as f64
            } else {
                1.0
            };
            let mut ga = vec![0.0; a.numel()];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        ga[(o * n + j) * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            vec![(a, ga)]
        }
        Op::VarAxis(a, axis) => {
            let (outer, n, inner) = axis_layout(a.shape(), *axis);
            let d = a.data();
            let mut ga = vec![0.0; a.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let mu = (0..n).map(|j| d[idx(j)]).sum::<f64>() / n as f64;
                    let gi = g[o * inner + i] * 2.0 / n as f64;
                    for j in 0..n {
                        ga[idx(j)] = gi * (d[idx(j)] - mu);
                    }
                }
            }
            vec![(a, ga)]
        }
        Op::Exp(a) => {
            let gy = out.data().iter().zip(g).map(|(y, g)| y * g).collect();
            vec![(a, gy)]
        }
        Op::Log(a) => vec![(a, unary(a, g, |x, g| g / x))],
        Op::Erf(a) => vec![(
            a,
            unary(a, g, |x, g| {
                g * std::f64::consts::FRAC_2_SQRT_PI * (-x * x).exp()
            }),
        )],
        Op::Sigmoid(a) => {
            let gy = out.data().iter().zip(g).map(|(y, g)| g * y * (1.0 - y)).collect();
            vec![(a, gy)]
        }
        Op::Gelu(a) => vec![(
            a,
            unary(a, g, |x, g| g * (kernels::phi_cdf(x) + x * kernels::phi_pdf(x))),
        )],
        Op::Silu(a) => vec![(
            a,
            unary(a, g, |x, g| {
                let s = kernels::sigmoid(x);
                g * s * (1.0 + x * (1.0 - s))
            }),
        )],
        Op::Softmax(a) => {
            let n = *a.shape().last().expect("rank >= 1");
            let mut ga = Vec::with_capacity(g.len());
            for (y, gr) in out.data().chunks_exact(n).zip(g.chunks_exact(n)) {
                let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                ga.extend(y.iter().zip(gr).map(|(y, g)| y * (g - dot)));
            }
            vec![(a, ga)]
        }
        Op::LogSoftmax(a) => {
            let n = *a.shape().last().expect("rank >= 1");
            let mut ga = Vec::with_capacity(g.len());
            for (y, gr) in out.data().chunks_exact(n).zip(g.chunks_exact(n)) {
                let total: f64 = gr.iter().sum();
                ga.extend(y.iter().zip(gr).map(|(y, g)| g - y.exp() * total));
            }
            vec![(a, ga)]
        }
        Op::LayerNorm {
            input,
            gamma,
            beta,
            normalized,
            inv_std,
        } => {
            let n = gamma.numel();
            let gm = gamma.data();
            let mut gx = Vec::with_capacity(input.numel());
            let mut ggamma = vec![0.0; n];
            let mut gbeta = vec![0.0; n];
            for ((xh, gr), r) in normalized
                .chunks_exact(n)
                .zip(g.chunks_exact(n))
                .zip(inv_std)
            {
                let mut mean_gh = 0.0;
                let mut mean_ghx = 0.0;
                for j in 0..n {
                    let gh = gr[j] * gm[j];
                    mean_gh += gh;
                    mean_ghx += gh * xh[j];
                    ggamma[j] += gr[j] * xh[j];
                    gbeta[j] += gr[j];
                }
                mean_gh /= n as f64;
                mean_ghx /= n as f64;
                gx.extend((0..n).map(|j| r * (gr[j] * gm[j] - mean_gh - xh[j] * mean_ghx)));
            }
            vec![(input, gx), (gamma, ggamma), (beta, gbeta)]
        }
    }
}

fn matmul_adjoint<'a>(a: &'a Tensor, b: &'a Tensor, g: &[f64]) -> Vec<(&'a Tensor, Vec<f64>)> {
    let d = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    let (m, k, n) = (d.m, d.k, d.n);
    let mut out = Vec::with_capacity(2);
    if d.shared_rhs {
        let rows = d.batch * m;
        if a.requires_grad() {
            // dA = G B^T
            out.push((a, gemm_batch_new(1, rows, n, k, g, (n, 1), 0, b.data(), (1, n), 0)));
        }
        if b.requires_grad() {
            // dB = A^T G, folding the batch into the contraction
            out.push((b, gemm_batch_new(1, k, rows, n, a.data(), (1, k), 0, g, (n, 1), 0)));
        }
    } else {
        let (sa, sb, sc) = (m * k, k * n, m * n);
        if a.requires_grad() {
            out.push((a, gemm_batch_new(d.batch, m, n, k, g, (n, 1), sc, b.data(), (1, n), sb)));
        }
        if b.requires_grad() {
            out.push((b, gemm_batch_new(d.batch, k, m, n, a.data(), (1, k), sa, g, (n, 1), sc)));
        }
    }
    out
}
