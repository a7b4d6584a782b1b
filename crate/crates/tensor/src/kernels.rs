//! Raw slice kernels shared by forward and backward passes.

/// Row/column strides of a matrix operand, in elements.
pub(crate) type Strides = (usize, usize);

/// `batch` independent products written to a fresh `batch x m x n` buffer.
/// Operand `i` starts at `i * step` in its slice; a step of 0 shares it.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_batch_new(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    a_step: usize,
    b: &[f64],
    sb: Strides,
    b_step: usize,
) -> Vec<f64> {
    let len = batch * m * n;
    let mut out: Vec<f64> = Vec::with_capacity(len);
    for i in 0..batch {
        let (ao, bo) = (i * a_step, i * b_step);
        assert!(ao <= a.len() && bo <= b.len());
        // SAFETY: block `i` lies within the reserved capacity, and with
        // beta = 0 the kernel writes every element of it without reading.
        unsafe {
            gemm_raw(m, k, n, &a[ao..], sa, &b[bo..], sb, 0.0, out.as_mut_ptr().add(i * m * n));
        }
    }
    // SAFETY: every block `0..batch` has been written above.
    unsafe { out.set_len(len) };
    out
}

/// # Safety
///
/// `c` must be valid for writes of `m * n` elements, and for reads as well
/// unless `beta` is zero.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): Strides,
    b: &[f64],
    (rsb, csb): Strides,
    beta: f64,
    c: *mut f64,
) {
    assert!(m > 0 && k > 0 && n > 0);
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the assertions above bound every index read from `a` and `b`;
    // the caller guarantees `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c,
            n as isize,
            1,
        );
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner).
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Swaps axes `d0 < d1`, returning the permuted data.
pub(crate) fn swap_axes(data: &[f64], shape: &[usize], d0: usize, d1: usize) -> Vec<f64> {
    debug_assert!(d0 < d1);
    let a: usize = shape[..d0].iter().product();
    let n0 = shape[d0];
    let b: usize = shape[d0 + 1..d1].iter().product();
    let n1 = shape[d1];
    let c: usize = shape[d1 + 1..].iter().product();
    let mut out = Vec::with_capacity(data.len());
    for ia in 0..a {
        for i1 in 0..n1 {
            for ib in 0..b {
                for i0 in 0..n0 {
                    let src = ((((ia * n0 + i0) * b + ib) * n1) + i1) * c;
                    out.extend_from_slice(&data[src..src + c]);
                }
            }
        }
    }
    out
}

/// Sums `g` (length `reps * len`) down to length `len` by folding repeats.
pub(crate) fn fold_repeats(g: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for chunk in g.chunks_exact(len) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

pub(crate) fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub(crate) fn phi_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn phi_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}
