//! Forward kernels shared by the tape, plus tape-free convenience wrappers.

use super::{lit, Mode, Prng, Scalar, Tape, Tensor};
use crate::error::{Error, Result};

/// `out[n,m] += a[n,k] * b[k,m]`
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[n,m] += a[n,k] * b[m,k]^T`
pub(crate) fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * m + j] += s;
        }
    }
}

/// `out[n,m] += a[k,n]^T * b[k,m]`
pub(crate) fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], k: usize, n: usize, m: usize) {
    for p in 0..k {
        let b_row = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let api = a[p * n + i];
            if api == T::zero() {
                continue;
            }
            let out_row = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

/// Row-wise softmax over `cols` columns; masked-out columns get probability 0.
pub(crate) fn softmax_rows<T: Scalar>(
    x: &[T],
    cols: usize,
    mask: Option<&[bool]>,
) -> Result<Vec<T>> {
    if cols == 0 {
        return Err(Error::invalid("softmax over an empty axis"));
    }
    if let Some(m) = mask {
        if m.len() != cols {
            return Err(Error::shape("softmax mask", &[cols], &[m.len()]));
        }
        if !m.iter().any(|&a| a) {
            return Err(Error::invalid("softmax row has no attendable entries"));
        }
    }
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let mut out = vec![T::zero(); x.len()];
    for (row, out_row) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = (0..cols)
            .filter(|&j| keep(j))
            .map(|j| row[j])
            .fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for j in 0..cols {
            if keep(j) {
                let e = (row[j] - max).exp();
                out_row[j] = e;
                sum += e;
            }
        }
        for o in out_row.iter_mut() {
            *o = *o / sum;
        }
    }
    Ok(out)
}

/// Softmax along an arbitrary axis of an n-dimensional tensor.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::invalid(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    let len = shape[axis];
    if len == 0 {
        return Err(Error::invalid("softmax over an empty axis"));
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| src[idx(k)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for k in 0..len {
                let e = (src[idx(k)] - max).exp();
                out[idx(k)] = e;
                sum += e;
            }
            for k in 0..len {
                out[idx(k)] = out[idx(k)] / sum;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Standard normal CDF via `erf`.
#[inline]
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let xf = x.as_f64();
    lit(xf * normal_cdf(xf))
}

#[inline]
pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let xf = x.as_f64();
    let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
    lit(normal_cdf(xf) + xf * pdf)
}

/// Per-row normalization; returns `(normalized, inverse std)`.
pub(crate) fn normalize_rows<T: Scalar>(x: &[T], cols: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let n = lit::<T>(cols as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(x.len() / cols.max(1));
    for (row, out) in x.chunks(cols).zip(xhat.chunks_mut(cols)) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv_std = T::one() / (var + eps).sqrt();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mean) * inv_std;
        }
        inv.push(inv_std);
    }
    (xhat, inv)
}

pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (x, w, b) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
    let y = tape.linear(x, w, Some(b))?;
    Ok(tape.value(y).clone())
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (x, g, b) = (tape.leaf(x.clone()), tape.leaf(gain.clone()), tape.leaf(bias.clone()));
    let y = tape.layer_norm(x, g, b, eps)?;
    Ok(tape.value(y).clone())
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Inverted dropout: survivors are scaled by `1 / (1 - p)`.
pub fn dropout<T: Scalar>(x: &Tensor<T>, p: f64, mode: Mode, rng: &mut Prng) -> Result<Tensor<T>> {
    let mask = dropout_mask::<T>(x.numel(), p, mode, rng)?;
    Ok(match mask {
        None => x.clone(),
        Some(mask) => {
            let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            Tensor::new(x.shape().to_vec(), data)?
        }
    })
}

/// `None` when dropout is the identity.
pub(crate) fn dropout_mask<T: Scalar>(
    n: usize,
    p: f64,
    mode: Mode,
    rng: &mut Prng,
) -> Result<Option<Vec<T>>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
    }
    if mode == Mode::Infer || p == 0.0 {
        return Ok(None);
    }
    let scale = lit::<T>(1.0 / (1.0 - p));
    Ok(Some(
        (0..n)
            .map(|_| if rng.bernoulli(p) { T::zero() } else { scale })
            .collect(),
    ))
}

/// Batch-summed cross entropy of `logits[n, C]` against class indices.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = tape.cross_entropy(l, labels)?;
    Ok(tape.value(loss).data()[0])
}
