//! Forward kernels shared by the tape and by tape-free inference paths.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::Tensor;
use crate::error::{Error, Result};

/// Target id excluded from every loss.
pub const IGNORE_TARGET: usize = 65535;

/// `c = alpha * op(a) * op(b) + beta * c` on raw row-major buffers.
/// `ta`/`tb` read the operand as transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements of the three slices, whose lengths were checked.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Standard matrix product of `a[m×k]` and `b[k×p]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    linear(a, b)
}

/// Treats every leading axis of `x` as a row: `x[..., k] · w[k×p] -> [..., p]`.
pub fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let k = x.last_dim();
    if w.rank() != 2 || w.shape()[0] != k || x.rank() == 0 {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", x.shape(), w.shape()),
        ));
    }
    let p = w.shape()[1];
    let m = x.len() / k.max(1);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = p;
    let mut out = Tensor::zeros(shape);
    gemm(m, k, p, x.data(), false, w.data(), false, out.data_mut(), 0.0);
    Ok(out)
}

fn conv_dims(x: &Tensor, kernel: &Tensor, dilation: usize) -> Result<(usize, usize, usize, usize)> {
    if dilation == 0 {
        return Err(Error::Config("dilation must be at least 1".into()));
    }
    if x.rank() != 3 || kernel.rank() != 2 || kernel.shape()[1] != x.shape()[2] {
        return Err(Error::shape(
            "causal_conv1d",
            format!("input {:?}, kernel {:?}", x.shape(), kernel.shape()),
        ));
    }
    let taps = kernel.shape()[0];
    if taps == 0 {
        return Err(Error::Config("kernel needs at least one tap".into()));
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2], taps))
}

/// Depthwise causal convolution: `out[t] = Σ_j kernel[j] ⊙ x[t − j·dilation]`,
/// with implicit zero left-padding.
pub fn causal_conv1d(x: &Tensor, kernel: &Tensor, dilation: usize) -> Result<Tensor> {
    let (batch, len, d, taps) = conv_dims(x, kernel, dilation)?;
    let mut out = Tensor::zeros(x.shape().to_vec());
    let xs = x.data();
    let ks = kernel.data();
    let os = out.data_mut();
    for b in 0..batch {
        let base = b * len * d;
        for t in 0..len {
            let orow = &mut os[base + t * d..base + (t + 1) * d];
            for j in 0..taps {
                let Some(src) = t.checked_sub(j * dilation) else {
                    break;
                };
                let xrow = &xs[base + src * d..base + (src + 1) * d];
                let krow = &ks[j * d..(j + 1) * d];
                for ((o, &xv), &kv) in orow.iter_mut().zip(xrow).zip(krow) {
                    *o += kv * xv;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`causal_conv1d`] w.r.t. input and kernel.
pub(crate) fn causal_conv1d_backward(
    x: &Tensor,
    kernel: &Tensor,
    dilation: usize,
    grad_out: &Tensor,
) -> (Tensor, Tensor) {
    let (batch, len, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let taps = kernel.shape()[0];
    let mut gx = x.zeros_like();
    let mut gk = kernel.zeros_like();
    let xs = x.data();
    let ks = kernel.data();
    let gs = grad_out.data();
    {
        let gxs = gx.data_mut();
        for b in 0..batch {
            let base = b * len * d;
            for t in 0..len {
                let grow = &gs[base + t * d..base + (t + 1) * d];
                for j in 0..taps {
                    let Some(src) = t.checked_sub(j * dilation) else {
                        break;
                    };
                    let krow = &ks[j * d..(j + 1) * d];
                    let gxrow = &mut gxs[base + src * d..base + (src + 1) * d];
                    for ((gxv, &kv), &gv) in gxrow.iter_mut().zip(krow).zip(grow) {
                        *gxv += kv * gv;
                    }
                }
            }
        }
    }
    {
        let gks = gk.data_mut();
        for b in 0..batch {
            let base = b * len * d;
            for t in 0..len {
                let grow = &gs[base + t * d..base + (t + 1) * d];
                for j in 0..taps {
                    let Some(src) = t.checked_sub(j * dilation) else {
                        break;
                    };
                    let xrow = &xs[base + src * d..base + (src + 1) * d];
                    let gkrow = &mut gks[j * d..(j + 1) * d];
                    for ((gkv, &xv), &gv) in gkrow.iter_mut().zip(xrow).zip(grow) {
                        *gkv += xv * gv;
                    }
                }
            }
        }
    }
    (gx, gk)
}

/// Mean over the token axis: `[B×c×d] -> [B×d]`.
pub fn mean_pool_tokens(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::shape("mean_pool_tokens", format!("{:?}", x.shape())));
    }
    let (batch, len, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if len == 0 {
        return Err(Error::EmptyChunk);
    }
    let mut out = Tensor::zeros([batch, d]);
    let inv = 1.0 / len as f64;
    let xs = x.data();
    let os = out.data_mut();
    for b in 0..batch {
        let orow = &mut os[b * d..(b + 1) * d];
        for t in 0..len {
            let start = (b * len + t) * d;
            for (o, &v) in orow.iter_mut().zip(&xs[start..start + d]) {
                *o += v;
            }
        }
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    Ok(out)
}

/// In-place max-subtracted softmax of one slice.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Softmax over the last axis.
pub fn softmax(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let v = out.last_dim();
    if v > 0 {
        for row in out.data_mut().chunks_mut(v) {
            softmax_in_place(row);
        }
    }
    out
}

/// `log Σ exp(row)` with max subtraction.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_ce_inputs(logits: &Tensor, targets: &[usize]) -> Result<(usize, usize)> {
    if logits.rank() < 1 {
        return Err(Error::shape("cross_entropy", "scalar logits"));
    }
    let v = logits.last_dim();
    let n = logits.len() / v.max(1);
    if n != targets.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{n} rows vs {} targets", targets.len()),
        ));
    }
    for &t in targets {
        if t >= v && t != IGNORE_TARGET {
            return Err(Error::Index(format!("target {t} outside vocabulary of {v}")));
        }
    }
    Ok((n, v))
}

/// Mean negative log-likelihood over rows whose target is not
/// [`IGNORE_TARGET`]. Returns 0 when every row is ignored.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (_, v) = check_ce_inputs(logits, targets)?;
    let valid = targets.iter().filter(|&&t| t != IGNORE_TARGET).count();
    if valid == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (row, &t) in logits.data().chunks(v).zip(targets) {
        if t != IGNORE_TARGET {
            total += log_sum_exp(row) - row[t];
        }
    }
    Ok(total / valid as f64)
}

/// `Σ_i weights[i] · (−log softmax(logits_i)[targets_i])`, ignored targets skipped.
/// Also returns `d loss / d logits`.
pub(crate) fn weighted_cross_entropy(
    logits: &Tensor,
    targets: &[usize],
    weights: &[f64],
) -> Result<(f64, Tensor)> {
    let (n, v) = check_ce_inputs(logits, targets)?;
    if weights.len() != n {
        return Err(Error::shape("cross_entropy", "weights length"));
    }
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    let mut total = 0.0;
    let gd = grad.data_mut();
    for (i, row) in logits.data().chunks(v).enumerate() {
        let t = targets[i];
        let w = weights[i];
        if t == IGNORE_TARGET || w == 0.0 {
            continue;
        }
        let lse = log_sum_exp(row);
        total += w * (lse - row[t]);
        let grow = &mut gd[i * v..(i + 1) * v];
        for (g, &x) in grow.iter_mut().zip(row) {
            *g = w * (x - lse).exp();
        }
        grow[t] -= w;
    }
    Ok((total, grad))
}

/// Pointwise nonlinearities available on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    /// Exact-erf GELU: `x·Φ(x)`.
    Gelu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Gelu => "gelu",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2)),
        }
    }

    /// Derivative at input `x`, given the forward output `y`.
    pub(crate) fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
                cdf + x * pdf
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pointwise application of `act`.
pub fn elementwise(act: Activation, x: &Tensor) -> Tensor {
    x.map(|v| act.apply(v))
}
