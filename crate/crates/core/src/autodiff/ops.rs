//! Tape-free numerical kernels shared by the recorded ops and the
//! incremental decoder.

use super::tensor::{gemm, Scalar, Tensor, Trans};
use crate::error::{Error, Result};

/// Strided `c (+)= a @ b` on sub-views of larger row-major buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    (rsa, csa): (usize, usize),
    b: &[F],
    (rsb, csb): (usize, usize),
    c: &mut [F],
    (rsc, csc): (usize, usize),
    accumulate: bool,
) {
    if m == 0 || n == 0 || k == 0 {
        if !accumulate && k == 0 {
            for i in 0..m {
                for j in 0..n {
                    c[i * rsc + j * csc] = F::zero();
                }
            }
        }
        return;
    }
    let last = |r: usize, c: usize, rs: usize, cs: usize| (r - 1) * rs + (c - 1) * cs;
    assert!(last(m, k, rsa, csa) < a.len(), "gemm_strided: lhs view out of bounds");
    assert!(last(k, n, rsb, csb) < b.len(), "gemm_strided: rhs view out of bounds");
    assert!(last(m, n, rsc, csc) < c.len(), "gemm_strided: out view out of bounds");
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: the largest offset of every view was checked against its slice.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Matrix product of two rank-2 tensors.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (p, q) = a.dims2()?;
    let (q2, r) = b.dims2()?;
    if q != q2 {
        return Err(Error::Shape(format!("matmul {p}x{q} by {q2}x{r}")));
    }
    let mut out = vec![F::zero(); p * r];
    gemm(p, q, r, a.data(), Trans::No, b.data(), Trans::No, &mut out, false);
    Tensor::new(vec![p, r], out)
}

/// In-place max-subtracted softmax. The slice must be non-empty and finite.
pub(crate) fn softmax_in_place<F: Scalar>(v: &mut [F]) {
    let max = v.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = sum.recip();
    v.iter_mut().for_each(|x| *x *= inv);
}

pub fn softmax<F: Scalar>(v: &[F]) -> Result<Vec<F>> {
    if v.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    if v.iter().any(|x| x.is_infinite()) {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// `log(sum(exp(v)))`, stabilised.
pub(crate) fn log_sum_exp<F: Scalar>(v: &[F]) -> F {
    let max = v.iter().copied().fold(F::neg_infinity(), F::max);
    let s: F = v.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// Normalises one row into `out`, returning `(mean, 1/std)`.
pub(crate) fn layer_norm_row<F: Scalar>(
    x: &[F],
    gamma: &[F],
    beta: &[F],
    eps: F,
    out: &mut [F],
) -> (F, F) {
    let d = F::lit(x.len() as f64);
    let mean = x.iter().copied().sum::<F>() / d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / d;
    let rstd = (var + eps).sqrt().recip();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gamma[i] + beta[i];
    }
    (mean, rstd)
}

pub fn layer_norm<F: Scalar>(v: &[F], gamma: &[F], beta: &[F], eps: F) -> Result<Vec<F>> {
    if v.is_empty() || gamma.len() != v.len() || beta.len() != v.len() {
        return Err(Error::Shape(format!(
            "layer_norm over {} values with gamma {} / beta {}",
            v.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if eps < F::zero() {
        return Err(Error::Contract("layer_norm eps must be non-negative".into()));
    }
    let mut out = vec![F::zero(); v.len()];
    let (_, rstd) = layer_norm_row(v, gamma, beta, eps, &mut out);
    if !rstd.is_finite() {
        return Err(Error::Numeric("layer_norm of a constant vector with eps = 0".into()));
    }
    Ok(out)
}

pub fn cross_entropy<F: Scalar>(logits: &[F], target: usize) -> Result<F> {
    if target >= logits.len() {
        return Err(Error::Index(format!(
            "target {target} for {} classes",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[target])
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let c = F::lit(GELU_C);
    let k = F::lit(0.044715);
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::lit(GELU_C);
    let k = F::lit(0.044715);
    let half = F::lit(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let dinner = c * (F::one() + F::lit(3.0) * k * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<F: Scalar>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
