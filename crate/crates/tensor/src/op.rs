use crate::tensor::Tensor;

/// Recorded history of a tensor: the operation and the inputs it consumed.
pub(crate) enum Op {
    /// Elementwise; the right operand's shape is a suffix of the left's.
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    MatMul(Tensor, Tensor),
    Transpose(Tensor, usize, usize),
    Reshape(Tensor),
    Concat(Vec<Tensor>, usize),
    Narrow {
        input: Tensor,
        axis: usize,
        start: usize,
    },
    /// Rows of the input viewed as `rows x last_dim`, picked by index.
    GatherRows(Tensor, Vec<usize>),
    Sum(Tensor),
    SumAxis(Tensor, usize),
    MeanAxis(Tensor, usize),
    VarAxis(Tensor, usize),
    Exp(Tensor),
    Log(Tensor),
    Erf(Tensor),
    Sigmoid(Tensor),
    Gelu(Tensor),
    Silu(Tensor),
    Softmax(Tensor),
    LogSoftmax(Tensor),
    LayerNorm {
        input: Tensor,
        gamma: Tensor,
        beta: Tensor,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a, _, _)
            | Op::Reshape(a)
            | Op::GatherRows(a, _)
            | Op::Sum(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::VarAxis(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Erf(a)
            | Op::Sigmoid(a)
            | Op::Gelu(a)
            | Op::Silu(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a) => vec![a],
            Op::Narrow { input, .. } => vec![input],
            Op::Concat(parts, _) => parts.iter().collect(),
            Op::LayerNorm {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
        }
    }
}
