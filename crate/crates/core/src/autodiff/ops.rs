//! Elementwise, shape, reduction, matmul and softmax primitives.

use super::graph::{zip_map, Graph, Op, Var};
use super::kernels::gemm;
use super::Tensor;
use crate::error::{config, Result};

impl Graph {
    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return config(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let data = zip_map(self.value(a).data(), self.value(b).data(), f);
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(value, &[a, b], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let value = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect());
        self.push(value, &[a], Op::Scale(a, c))
    }

    /// `max(0, x)`; the subgradient at zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value =
            Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v.max(0.0)).collect());
        self.push(value, &[a], Op::Relu(a))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.push(Tensor::scalar(m), &[a], Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        Ok(self.push(value, &[a], Op::Reshape(a)))
    }

    /// Reorders axes so that output axis `d` is input axis `axes[d]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&d| d >= rank || std::mem::replace(&mut seen[d], true)) {
            return config(format!("permute: {axes:?} is not a permutation of {rank} axes"));
        }
        let value = permute_forward(x, axes);
        Ok(self.push(value, &[a], Op::Permute { input: a, axes: axes.to_vec() }))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let mut axes: Vec<usize> = (0..self.value(a).rank()).collect();
        if d0 >= axes.len() || d1 >= axes.len() {
            return config(format!("transpose: axes ({d0}, {d1}) out of range"));
        }
        axes.swap(d0, d1);
        self.permute(a, &axes)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return config("concat: no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return config(format!("concat: axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return config(format!("concat: shape {s:?} incompatible with {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let x = self.value(v);
                let chunk = x.shape()[axis] * inner;
                data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, inputs, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = vec![0.0; plan.batch_index.len() * m * n];
        for (t, &(ia, ib)) in plan.batch_index.iter().enumerate() {
            gemm(
                m,
                k,
                n,
                &xa[ia * m * k..],
                false,
                &xb[ib * k * n..],
                false,
                0.0,
                &mut out[t * m * n..],
            );
        }
        let value = Tensor::from_parts(plan.out_shape.clone(), out);
        Ok(self.push(value, &[a, b], Op::MatMul { a, b, plan }))
    }

    /// Softmax along the trailing axis, with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = *x.shape().last().unwrap_or(&1);
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(value, &[a], Op::Softmax(a))
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Visits every output position of a permutation, yielding
/// `(output flat index, input flat index)`.
fn for_each_permuted(in_shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&d| in_shape[d]).collect();
    let step: Vec<usize> = axes.iter().map(|&d| in_strides[d]).collect();
    let numel: usize = in_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in 0..numel {
        f(o, src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn permute_forward(x: &Tensor, axes: &[usize]) -> Tensor {
    let src = x.data();
    let mut data = vec![0.0; x.numel()];
    for_each_permuted(x.shape(), axes, |o, i| data[o] = src[i]);
    let shape = axes.iter().map(|&d| x.shape()[d]).collect();
    Tensor::from_parts(shape, data)
}

pub(crate) fn permute_backward(grad: &Tensor, axes: &[usize]) -> Vec<f64> {
    let mut in_shape = vec![0; axes.len()];
    for (d, &a) in axes.iter().enumerate() {
        in_shape[a] = grad.shape()[d];
    }
    let g = grad.data();
    let mut d = vec![0.0; grad.numel()];
    for_each_permuted(&in_shape, axes, |o, i| d[i] = g[o]);
    d
}

pub(crate) fn concat_backward(grad: &Tensor, shapes: &[Vec<usize>], axis: usize) -> Vec<Vec<f64>> {
    let base = &shapes[0];
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let mut out: Vec<Vec<f64>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    let g = grad.data();
    let mut pos = 0;
    for _ in 0..outer {
        for (s, d) in shapes.iter().zip(out.iter_mut()) {
            let chunk = s[axis] * inner;
            d.extend_from_slice(&g[pos..pos + chunk]);
            pos += chunk;
        }
    }
    out
}

/// Shape bookkeeping for a broadcast batched matmul.
pub(crate) struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    a_batches: usize,
    b_batches: usize,
    out_shape: Vec<usize>,
    /// Per output batch, the batch index read from `a` and from `b`.
    batch_index: Vec<(usize, usize)>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return config(format!("matmul: operands need rank >= 2, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return config(format!("matmul: inner dimensions differ ({sa:?} x {sb:?})"));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let rank = ba.len().max(bb.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return config(format!("matmul: batch dims {ba:?} and {bb:?} do not broadcast"));
            }
            batch.push(x.max(y));
        }
        let (stride_a, stride_b) = (strides(&pa), strides(&pb));
        let total: usize = batch.iter().product();
        let mut batch_index = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            let mut ia = 0;
            let mut ib = 0;
            for d in 0..rank {
                if pa[d] != 1 {
                    ia += idx[d] * stride_a[d];
                }
                if pb[d] != 1 {
                    ib += idx[d] * stride_b[d];
                }
            }
            batch_index.push((ia, ib));
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < batch[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let mut out_shape = batch;
        out_shape.extend([m, n]);
        Ok(Self {
            m,
            k,
            n,
            a_batches: pa.iter().product(),
            b_batches: pb.iter().product(),
            out_shape,
            batch_index,
        })
    }
}

pub(crate) fn matmul_backward(
    plan: &MatmulPlan,
    a: &[f64],
    b: &[f64],
    g: &[f64],
    want_a: bool,
    want_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut da = want_a.then(|| vec![0.0; plan.a_batches * m * k]);
    let mut db = want_b.then(|| vec![0.0; plan.b_batches * k * n]);
    for (t, &(ia, ib)) in plan.batch_index.iter().enumerate() {
        let gt = &g[t * m * n..(t + 1) * m * n];
        if let Some(da) = da.as_mut() {
            gemm(m, n, k, gt, false, &b[ib * k * n..], true, 1.0, &mut da[ia * m * k..]);
        }
        if let Some(db) = db.as_mut() {
            gemm(k, m, n, &a[ia * m * k..], true, gt, false, 1.0, &mut db[ib * k * n..]);
        }
    }
    (da, db)
}

pub(crate) fn softmax_backward(out: &Tensor, g: &[f64]) -> Vec<f64> {
    let cols = *out.shape().last().unwrap_or(&1);
    let mut d = Vec::with_capacity(g.len());
    for (y, gy) in out.data().chunks(cols).zip(g.chunks(cols)) {
        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
        d.extend(y.iter().zip(gy).map(|(yi, gi)| yi * (gi - dot)));
    }
    d
}
