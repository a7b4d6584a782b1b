use crate::error::{Result, TensorError};
use crate::kernels::{self, axis_layout, gemm_batch_new};
use crate::op::Op;
use crate::tensor::{numel, Tensor};

fn invalid(op: &'static str, shape: &[usize], msg: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: shape.to_vec(),
        msg: msg.into(),
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(invalid(op, shape, format!("axis {axis} out of range")));
    }
    Ok(())
}

/// Whether `rhs` can be repeated to cover `lhs` (its shape is a suffix of `lhs`).
fn suffix_broadcastable(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

/// Leading batch size and matrix dims of a `... x m x k` / `... x k x n` product.
pub(crate) struct MatMulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Right operand is a single rank-2 matrix shared across the batch.
    pub shared_rhs: bool,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let lead_a = &a[..a.len() - 2];
    let lead_b = &b[..b.len() - 2];
    let shared_rhs = lead_b.is_empty();
    if !shared_rhs && lead_a != lead_b {
        return Err(mismatch());
    }
    Ok(MatMulDims {
        batch: lead_a.iter().product(),
        m,
        k,
        n,
        shared_rhs,
    })
}

impl Tensor {
    fn map(&self, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(data, self.shape().to_vec(), op)
    }

    fn zip_broadcast(
        &self,
        rhs: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>> {
        if !suffix_broadcastable(self.shape(), rhs.shape()) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let b = rhs.data();
        let mut out = Vec::with_capacity(self.numel());
        for chunk in self.data().chunks_exact(b.len()) {
            out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
        Ok(out)
    }

    /// Elementwise sum; `rhs` may have a suffix of `self`'s shape and is then repeated.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let data = self.zip_broadcast(rhs, "add", |x, y| x + y)?;
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::Add(self.clone(), rhs.clone()),
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let data = self.zip_broadcast(rhs, "sub", |x, y| x - y)?;
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::Sub(self.clone(), rhs.clone()),
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let data = self.zip_broadcast(rhs, "mul", |x, y| x * y)?;
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::Mul(self.clone(), rhs.clone()),
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s, Op::Scale(self.clone(), s))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map(|x| x + c, Op::AddScalar(self.clone()))
    }

    /// Batched matrix product over the trailing two dims.
    ///
    /// Leading dims must match, or `rhs` must be rank 2 and is then shared
    /// by every matrix in `self`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let d = matmul_dims(self.shape(), rhs.shape())?;
        let out = if d.shared_rhs {
            gemm_batch_new(1, d.batch * d.m, d.k, d.n, self.data(), (d.k, 1), 0, rhs.data(), (d.n, 1), 0)
        } else {
            gemm_batch_new(
                d.batch,
                d.m,
                d.k,
                d.n,
                self.data(),
                (d.k, 1),
                d.m * d.k,
                rhs.data(),
                (d.n, 1),
                d.k * d.n,
            )
        };
        let mut shape = self.shape()[..self.rank() - 1].to_vec();
        shape.push(d.n);
        Ok(Tensor::from_op(
            out,
            shape,
            Op::MatMul(self.clone(), rhs.clone()),
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&self, d0: usize, d1: usize) -> Result<Tensor> {
        check_axis("transpose", self.shape(), d0)?;
        check_axis("transpose", self.shape(), d1)?;
        if d0 == d1 {
            return self.reshape(&self.shape().to_vec());
        }
        let (lo, hi) = (d0.min(d1), d0.max(d1));
        let data = kernels::swap_axes(self.data(), self.shape(), lo, hi);
        let mut shape = self.shape().to_vec();
        shape.swap(lo, hi);
        Ok(Tensor::from_op(
            data,
            shape,
            Op::Transpose(self.clone(), lo, hi),
        ))
    }

    /// Transpose of the trailing two dims.
    pub fn t(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(invalid("t", self.shape(), "rank must be at least 2"));
        }
        self.transpose(r - 2, r - 1)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) || numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Joins tensors along `axis`; all other dims must agree.
    pub fn cat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("cat: no tensors given".into()))?;
        check_axis("cat", first.shape(), axis)?;
        for p in &parts[1..] {
            let same_rank = p.rank() == first.rank();
            let same_other = same_rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same_other {
                return Err(TensorError::ShapeMismatch {
                    op: "cat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = axis_layout(first.shape(), axis);
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            data,
            shape,
            Op::Concat(parts.iter().map(|p| (*p).clone()).collect(), axis),
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis("narrow", self.shape(), axis)?;
        if len == 0 || start + len > self.shape()[axis] {
            return Err(invalid(
                "narrow",
                self.shape(),
                format!("range {start}..{} out of bounds on axis {axis}", start + len),
            ));
        }
        let (outer, n, inner) = axis_layout(self.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            data,
            shape,
            Op::Narrow {
                input: self.clone(),
                axis,
                start,
            },
        ))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        check_axis("split", self.shape(), axis)?;
        if sizes.iter().sum::<usize>() != self.shape()[axis] {
            return Err(invalid(
                "split",
                self.shape(),
                format!("sizes {sizes:?} do not cover axis {axis}"),
            ));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let piece = self.narrow(axis, start, len);
                start += len;
                piece
            })
            .collect()
    }

    /// Views `self` as rows of its last dim and returns rows `rows[0]`,
    /// `rows[1]`, ... as a `rows.len() x last_dim` tensor.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let width = self.last_dim("gather_rows")?;
        let count = self.numel() / width;
        if rows.is_empty() {
            return Err(invalid("gather_rows", self.shape(), "no rows requested"));
        }
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= count {
                return Err(invalid("gather_rows", self.shape(), format!("row {r} out of range for {count} rows")));
            }
            data.extend_from_slice(&self.data()[r * width..(r + 1) * width]);
        }
        Ok(Tensor::from_op(
            data,
            vec![rows.len(), width],
            Op::GatherRows(self.clone(), rows.to_vec()),
        ))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().sum();
        Tensor::from_op(vec![total], vec![1], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    fn reduce_axis(
        &self,
        name: &'static str,
        axis: usize,
        f: impl Fn(&mut dyn Iterator<Item = f64>, usize) -> f64,
        op: Op,
    ) -> Result<Tensor> {
        check_axis(name, self.shape(), axis)?;
        let (outer, n, inner) = axis_layout(self.shape(), axis);
        let d = self.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut it = (0..n).map(|j| d[(o * n + j) * inner + i]);
                out.push(f(&mut it, n));
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_op(out, shape, op))
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis("sum_axis", axis, |it, _| it.sum(), Op::SumAxis(self.clone(), axis))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(
            "mean_axis",
            axis,
            |it, n| it.sum::<f64>() / n as f64,
            Op::MeanAxis(self.clone(), axis),
        )
    }

    /// Population variance along `axis` (divides by the axis length).
    pub fn var_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(
            "var_axis",
            axis,
            |it, n| {
                let xs: Vec<f64> = it.collect();
                let mu = xs.iter().sum::<f64>() / n as f64;
                xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64
            },
            Op::VarAxis(self.clone(), axis),
        )
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp, Op::Exp(self.clone()))
    }

    pub fn log(&self) -> Tensor {
        self.map(f64::ln, Op::Log(self.clone()))
    }

    pub fn erf(&self) -> Tensor {
        self.map(kernels::erf, Op::Erf(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(kernels::sigmoid, Op::Sigmoid(self.clone()))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&self) -> Tensor {
        self.map(|x| x * kernels::phi_cdf(x), Op::Gelu(self.clone()))
    }

    /// Swish with unit slope (SiLU), `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor {
        self.map(|x| x * kernels::sigmoid(x), Op::Silu(self.clone()))
    }

    fn last_dim(&self, name: &'static str) -> Result<usize> {
        match self.shape().last() {
            Some(&n) if n > 0 && self.numel() > 0 => Ok(n),
            _ => Err(invalid(name, self.shape(), "empty last dimension")),
        }
    }

    /// Softmax over the last dim, with max subtraction.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let n = self.last_dim("softmax_last")?;
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data().chunks_exact(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(row.iter().map(|&x| (x - max).exp()));
            let z: f64 = out[start..].iter().sum();
            out[start..].iter_mut().for_each(|v| *v /= z);
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Softmax(self.clone()),
        ))
    }

    pub fn log_softmax_last(&self) -> Result<Tensor> {
        let n = self.last_dim("log_softmax_last")?;
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data().chunks_exact(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|&x| x - lse));
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LogSoftmax(self.clone()),
        ))
    }

    /// Layer normalization over the last dim: population variance, `eps`
    /// inside the square root, then `gamma * x_hat + beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let n = self.last_dim("layer_norm")?;
        for p in [gamma, beta] {
            if p.shape() != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        if !(eps > 0.0) {
            return Err(TensorError::InvalidArgument(format!(
                "layer_norm: eps must be positive, got {eps}"
            )));
        }
        let rows = self.numel() / n;
        let mut normalized = Vec::with_capacity(self.numel());
        let mut inv_std = Vec::with_capacity(rows);
        for row in self.data().chunks_exact(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std.push(r);
            normalized.extend(row.iter().map(|x| (x - mu) * r));
        }
        let (g, b) = (gamma.data(), beta.data());
        let out = normalized
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((x, g), b)| g * x + b))
            .collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm {
                input: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                normalized,
                inv_std,
            },
        ))
    }
}
