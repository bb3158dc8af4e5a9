//! Forward kernels over plain tensors. Shape validation happens in the tape
//! before any of these run.

use super::tensor::Tensor;

pub(crate) fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape(), data)
}

pub(crate) fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = a.data().iter().map(|&x| f(x)).collect();
    Tensor::from_parts(a.shape(), data)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Dimensions of `op(a)` where `op` optionally transposes a rank-2 tensor.
pub(crate) fn op_dims(t: &Tensor, transposed: bool) -> (usize, usize) {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    if transposed {
        (c, r)
    } else {
        (r, c)
    }
}

fn transpose_data(t: &Tensor) -> Vec<f64> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let src = t.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

/// `op(a) · op(b)` for rank-2 operands.
pub(crate) fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (m, k) = op_dims(a, ta);
    let (_, n) = op_dims(b, tb);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    match (ta, tb) {
        (_, true) => {
            let a_rows: std::borrow::Cow<[f64]> = if ta { transpose_data(a).into() } else { ad.into() };
            for (a_row, out_row) in a_rows.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
                for (o, b_row) in out_row.iter_mut().zip(bd.chunks_exact(k)) {
                    *o = dot(a_row, b_row);
                }
            }
        }
        (false, false) => {
            for (a_row, out_row) in ad.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
                for (&aip, b_row) in a_row.iter().zip(bd.chunks_exact(n)) {
                    if aip != 0.0 {
                        axpy(out_row, aip, b_row);
                    }
                }
            }
        }
        (true, false) => {
            for (a_col, b_row) in ad.chunks_exact(m).zip(bd.chunks_exact(n)) {
                for (&api, out_row) in a_col.iter().zip(out.chunks_exact_mut(n)) {
                    if api != 0.0 {
                        axpy(out_row, api, b_row);
                    }
                }
            }
        }
    }
    Tensor::from_parts(&[m, n], out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let (a4, b4) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = a4.remainder().iter().zip(b4.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in a4.zip(b4) {
        for l in 0..4 {
            lanes[l] += x[l] * y[l];
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Repeats `x` along new leading axes until it has shape `target`.
pub(crate) fn broadcast(x: &Tensor, target: &[usize]) -> Tensor {
    let n: usize = target.iter().product();
    let src = x.data();
    let data = (0..n).map(|i| src[i % src.len()]).collect();
    Tensor::from_parts(target, data)
}

/// Sums over leading axes so the result has shape `target` (a suffix of `x`'s shape).
pub(crate) fn sum_leading(x: &Tensor, target: &[usize]) -> Tensor {
    let n: usize = target.iter().product();
    let mut out = vec![0.0; n];
    for chunk in x.data().chunks(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::from_parts(target, out)
}

pub(crate) fn row_sum(x: &Tensor) -> Tensor {
    let (_, cols) = x.rows_cols();
    let data = x.data().chunks(cols).map(|r| r.iter().sum()).collect();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = 1;
    Tensor::from_parts(&shape, data)
}

pub(crate) fn col_expand(x: &Tensor, cols: usize) -> Tensor {
    let data = x
        .data()
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v, cols))
        .collect();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cols;
    Tensor::from_parts(&shape, data)
}

pub(crate) fn softmax(x: &Tensor) -> Tensor {
    let (_, cols) = x.rows_cols();
    let mut data = Vec::with_capacity(x.numel());
    for row in x.data().chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            data.push(e);
        }
        for v in &mut data[start..] {
            *v /= total;
        }
    }
    Tensor::from_parts(x.shape(), data)
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let (outer, _, inner) = axis_extents(&shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    Tensor::from_parts(&shape, data)
}

pub(crate) fn slice(x: &Tensor, axis: usize, start: usize, end: usize) -> Tensor {
    let (outer, len, inner) = axis_extents(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = end - start;
    let mut data = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        let base = o * len * inner;
        data.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
    }
    Tensor::from_parts(&shape, data)
}

pub(crate) fn pad(x: &Tensor, axis: usize, before: usize, after: usize) -> Tensor {
    let (outer, len, inner) = axis_extents(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = before + len + after;
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        data.extend(std::iter::repeat_n(0.0, before * inner));
        data.extend_from_slice(&x.data()[o * len * inner..(o + 1) * len * inner]);
        data.extend(std::iter::repeat_n(0.0, after * inner));
    }
    Tensor::from_parts(&shape, data)
}
