//! Dense forward kernels.
//!
//! Every kernel computes each output row independently with a fixed loop
//! order, so a row's result does not depend on which other rows share the
//! call. The prefix cache in the language model relies on this.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn check_rank2(op: &'static str, t: &Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::shape(op, format!("expected rank 2, got {:?}", t.shape())));
    }
    Ok(())
}

/// `A·B`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_rank2("matmul", a)?;
    check_rank2("matmul", b)?;
    if a.cols() != b.rows() {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = ad[i * k + p];
            if aik == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

/// `A·Bᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_rank2("matmul_nt", a)?;
    check_rank2("matmul_nt", b)?;
    if a.cols() != b.cols() {
        return Err(Error::shape("matmul_nt", format!("{:?} x {:?}ᵀ", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            out[i * n + j] = dot(arow, b.row(j));
        }
    }
    let _ = k;
    Ok(Tensor::matrix(m, n, out))
}

/// `Aᵀ·B`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_rank2("matmul_tn", a)?;
    check_rank2("matmul_tn", b)?;
    if a.rows() != b.rows() {
        return Err(Error::shape("matmul_tn", format!("{:?}ᵀ x {:?}", a.shape(), b.shape())));
    }
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    for p in 0..k {
        let brow = b.row(p);
        for i in 0..m {
            let api = ad[p * m + i];
            if api == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators, combined in a fixed order.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Row-wise softmax with max subtraction. Where `mask` is given, entries with
/// `false` get probability exactly zero; a fully masked row is all zeros.
pub fn softmax_rows_masked(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    check_rank2("softmax_rows", x)?;
    if let Some(m) = mask {
        if m.len() != x.numel() {
            return Err(Error::shape("softmax_rows", "mask size"));
        }
    }
    let c = x.cols();
    let mut out = vec![0.0; x.numel()];
    for i in 0..x.rows() {
        let row = x.row(i);
        let allowed = |j: usize| mask.is_none_or(|m| m[i * c + j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let orow = &mut out[i * c..(i + 1) * c];
        let mut total = 0.0;
        for j in 0..c {
            if allowed(j) {
                let e = (row[j] - max).exp();
                orow[j] = e;
                total += e;
            }
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    Ok(Tensor::matrix(x.rows(), c, out))
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(Error::NonFiniteInput("softmax_rows"));
    }
    softmax_rows_masked(x, None)
}

/// Normalized rows `x̂` and per-row `1/σ`.
pub(crate) fn normalize_rows(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let c = x.cols();
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        for (o, v) in xhat[i * c..(i + 1) * c].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    (Tensor::matrix(x.rows(), c, xhat), inv_std)
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    check_rank2("layer_norm", x)?;
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let c = x.cols();
    if gain.numel() != c || bias.numel() != c {
        return Err(Error::shape("layer_norm", "gain/bias width"));
    }
    if !x.is_finite() {
        return Err(Error::NonFiniteInput("layer_norm"));
    }
    let (mut y, _) = normalize_rows(x, eps);
    for i in 0..y.rows() {
        for ((o, g), b) in y.row_mut(i).iter_mut().zip(gain.data()).zip(bias.data()) {
            *o = *o * g + b;
        }
    }
    Ok(y)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn add_bias(x: &mut Tensor, b: &Tensor) -> Result<()> {
    if b.numel() != x.cols() {
        return Err(Error::shape("ffn", "bias width"));
    }
    for i in 0..x.rows() {
        for (o, bv) in x.row_mut(i).iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Ok(())
}

/// `gelu(X·W1 + b1)·W2 + b2`.
pub fn ffn(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<Tensor> {
    let mut h = matmul(x, w1)?;
    add_bias(&mut h, b1)?;
    for v in h.data_mut() {
        *v = gelu(*v);
    }
    let mut out = matmul(&h, w2)?;
    add_bias(&mut out, b2)?;
    Ok(out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{:?} + {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let cols = parts.first().map_or(0, |t| t.cols());
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        check_rank2("concat_rows", p)?;
        if p.cols() != cols {
            return Err(Error::shape("concat_rows", "column count"));
        }
        rows += p.rows();
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::matrix(rows, cols, data))
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let rows = parts.first().map_or(0, |t| t.rows());
    for p in parts {
        check_rank2("concat_cols", p)?;
        if p.rows() != rows {
            return Err(Error::shape("concat_cols", "row count"));
        }
    }
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Ok(Tensor::matrix(rows, cols, data))
}

pub fn slice_rows(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    check_rank2("slice_rows", a)?;
    if start + len > a.rows() {
        return Err(Error::shape("slice_rows", format!("{start}+{len} > {}", a.rows())));
    }
    let c = a.cols();
    Ok(Tensor::matrix(len, c, a.data()[start * c..(start + len) * c].to_vec()))
}

pub fn slice_cols(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    check_rank2("slice_cols", a)?;
    if start + len > a.cols() {
        return Err(Error::shape("slice_cols", format!("{start}+{len} > {}", a.cols())));
    }
    let mut data = Vec::with_capacity(a.rows() * len);
    for i in 0..a.rows() {
        data.extend_from_slice(&a.row(i)[start..start + len]);
    }
    Ok(Tensor::matrix(a.rows(), len, data))
}
