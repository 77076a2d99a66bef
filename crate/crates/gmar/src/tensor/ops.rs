//! Pure forward tensor operations.
//!
//! Every function here is a plain value computation; the tape wrappers in
//! [`super::Tape`] call into these and record what the backward pass needs.
//! Broadcasting is deliberately absent beyond equal leading batch
//! dimensions in [`matmul`]; callers reshape explicitly.

use super::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]`.
///
/// Leading batch dimensions must be equal. The inner accumulation runs in
/// ascending `k` order, so results are bit-reproducible.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() < 2 || bsh.len() < 2 || ash.len() != bsh.len() {
        return Err(Error::dim(format!(
            "matmul requires equal-rank inputs of rank >= 2, got {ash:?} x {bsh:?}"
        )));
    }
    let nb = ash.len() - 2;
    if ash[..nb] != bsh[..nb] {
        return Err(Error::dim(format!(
            "matmul batch dimensions differ: {ash:?} x {bsh:?}"
        )));
    }
    let (m, k) = (ash[nb], ash[nb + 1]);
    let (k2, n) = (bsh[nb], bsh[nb + 1]);
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {ash:?} x {bsh:?}"
        )));
    }
    let batch: usize = ash[..nb].iter().product();
    let mut out_shape = ash[..nb].to_vec();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let ab = &a.data()[bi * m * k..(bi + 1) * m * k];
        let bb = &b.data()[bi * k * n..(bi + 1) * k * n];
        let ob = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let arow = &ab[i * k..(i + 1) * k];
            let orow = &mut ob[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &bb[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Softmax along the last dimension, computed with max-subtraction.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(Error::dim("softmax_lastdim requires rank >= 1".to_string()));
    }
    let cols = x.shape()[x.rank() - 1];
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Layer normalization over the last dimension followed by an affine map.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layernorm_parts(x, gamma, beta, eps).map(|p| p.0)
}

/// Layernorm plus the per-row intermediates the backward rule needs:
/// normalized values `xhat` and `1/sqrt(var + eps)` per row.
pub(crate) fn layernorm_parts(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    if eps <= 0.0 {
        return Err(Error::param(format!("layernorm eps must be > 0, got {eps}")));
    }
    if x.rank() == 0 {
        return Err(Error::dim("layernorm requires rank >= 1".to_string()));
    }
    let cols = x.shape()[x.rank() - 1];
    if gamma.shape() != [cols] || beta.shape() != [cols] {
        return Err(Error::dim(format!(
            "layernorm affine shapes {:?}/{:?} do not match last dimension {cols}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let rows = x.numel() / cols;
    let mut xhat = vec![0.0; x.numel()];
    let mut out = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        for c in 0..cols {
            let h = (row[c] - mean) * inv;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gamma.data()[c] + beta.data()[c];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        Tensor::from_parts(x.shape().to_vec(), xhat),
        inv_std,
    ))
}

/// Exact-erf GELU, elementwise: `x * Phi(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v * std_normal_cdf(v)).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn check_same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op} requires equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// Elementwise product of equal-shaped tensors.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn mul_scalar(a: &Tensor, k: f64) -> Tensor {
    let data = a.data().iter().map(|x| x * k).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Adds a length-`C` vector to every row of an `[..., C]` tensor.
pub fn add_row(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 || b.rank() != 1 || b.shape()[0] != x.shape()[x.rank() - 1] {
        return Err(Error::dim(format!(
            "add_row requires x [..., C] and b [C], got {:?} and {:?}",
            x.shape(),
            b.shape()
        )));
    }
    let cols = b.numel();
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(cols) {
        for (v, &bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Swaps the last two axes of an `[..., m, n]` tensor.
pub fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::dim(format!(
            "transpose_last2 requires rank >= 2, got {:?}",
            x.shape()
        )));
    }
    let nb = x.rank() - 2;
    let (m, n) = (x.shape()[nb], x.shape()[nb + 1]);
    let batch: usize = x.shape()[..nb].iter().product();
    let mut shape = x.shape().to_vec();
    shape[nb] = n;
    shape[nb + 1] = m;
    let mut out = vec![0.0; x.numel()];
    for bi in 0..batch {
        let src = &x.data()[bi * m * n..(bi + 1) * m * n];
        let dst = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Reinterprets the data with a new shape of the same element count.
pub fn reshape(x: &Tensor, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
    let shape = shape.into();
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::dim(format!("reshape to zero-sized {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if numel != x.numel() {
        return Err(Error::dim(format!(
            "reshape {:?} -> {shape:?} changes element count",
            x.shape()
        )));
    }
    Ok(Tensor::from_parts(shape, x.data().to_vec()))
}

/// Takes `[start, end)` along `axis`, keeping all other axes.
pub fn slice_axis(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::dim(format!(
            "slice axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    if start >= end || end > x.shape()[axis] {
        return Err(Error::dim(format!(
            "slice range {start}..{end} invalid for axis {axis} of {:?}",
            x.shape()
        )));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let take = end - start;
    let mut shape = x.shape().to_vec();
    shape[axis] = take;
    let mut out = Vec::with_capacity(outer * take * inner);
    for o in 0..outer {
        let base = (o * len + start) * inner;
        out.extend_from_slice(&x.data()[base..base + take * inner]);
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Concatenates tensors along `axis`; all other dimensions must match.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat of zero tensors".to_string()))?;
    if axis >= first.rank() {
        return Err(Error::dim(format!(
            "concat axis {axis} out of range for shape {:?}",
            first.shape()
        )));
    }
    let mut total = 0;
    for p in parts {
        if p.rank() != first.rank() {
            return Err(Error::dim(format!(
                "concat rank mismatch: {:?} vs {:?}",
                first.shape(),
                p.shape()
            )));
        }
        for d in 0..first.rank() {
            if d != axis && p.shape()[d] != first.shape()[d] {
                return Err(Error::dim(format!(
                    "concat shape mismatch on axis {d}: {:?} vs {:?}",
                    first.shape(),
                    p.shape()
                )));
            }
        }
        total += p.shape()[axis];
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis];
            let base = o * len * inner;
            out.extend_from_slice(&p.data()[base..base + len * inner]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Sums out `axis`, dropping it from the shape.
pub fn sum_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    reduce_axis(x, axis, false)
}

/// Averages out `axis`, dropping it from the shape.
pub fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    reduce_axis(x, axis, true)
}

fn reduce_axis(x: &Tensor, axis: usize, mean: bool) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::dim(format!(
            "reduce axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..len {
            let base = (o * len + i) * inner;
            for n in 0..inner {
                out[o * inner + n] += x.data()[base + n];
            }
        }
    }
    if mean {
        for v in out.iter_mut() {
            *v /= len as f64;
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Elementwise absolute value.
pub fn abs(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.abs()).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Elementwise square.
pub fn square(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v * v).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Square root of a one-element tensor.
pub fn sqrt_scalar(x: &Tensor) -> Result<Tensor> {
    if x.numel() != 1 {
        return Err(Error::dim(format!(
            "sqrt_scalar requires a one-element tensor, got {:?}",
            x.shape()
        )));
    }
    let v = x.data()[0];
    if v < 0.0 {
        return Err(Error::param(format!("sqrt_scalar of negative value {v}")));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), vec![v.sqrt()]))
}

/// Row-normalized copy: each row of the last dimension divided by its sum.
/// Rows summing to zero are left untouched.
pub fn row_normalize(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(Error::dim("row_normalize requires rank >= 1".to_string()));
    }
    let cols = x.shape()[x.rank() - 1];
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(cols) {
        let sum: f64 = row.iter().sum();
        if sum != 0.0 {
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}
