//! Registered primitives. Each forward lives on [`Var`]; each backward rule
//! is a match arm of [`Op::backward`].

use super::kernels::{self, ConvGeom};
use super::shape::{broadcast_shape, drop_shape, expand_to, keep_shape, numel, reduce_to, split_axis, strides};
use super::tape::{Node, Var};
use super::Tensor;
use crate::error::{Error, Result};
use std::sync::Arc;

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Permute { x: usize, axes: Vec<usize> },
    Reshape(usize),
    BroadcastTo(usize),
    Slice { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Gather { x: usize, index: Arc<Vec<usize>> },
    Sum { x: usize, axes: Vec<usize> },
    Mean { x: usize, axes: Vec<usize> },
    Variance { x: usize, axes: Vec<usize>, mean: Tensor },
    Sqrt(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    Gelu(usize),
    GeluGrad(usize),
    Relu(usize),
    LayerNorm { x: usize, axis: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    Max { x: usize, argmax: Vec<usize> },
    L2Norm(usize),
    SumSquares(usize),
}

impl Op {
    pub fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            MatMul { a, b, .. } => vec![*a, *b],
            Conv2d { x, w, .. } => vec![*x, *w],
            Concat { xs, .. } => xs.clone(),
            Neg(x) | Scale(x, _) | AddScalar(x) | Reshape(x) | BroadcastTo(x) | Sqrt(x) | Exp(x)
            | Log(x) | Square(x) | Gelu(x) | GeluGrad(x) | Relu(x) | L2Norm(x)
            | SumSquares(x) => vec![*x],
            Permute { x, .. }
            | Slice { x, .. }
            | Gather { x, .. }
            | Sum { x, .. }
            | Mean { x, .. }
            | Variance { x, .. }
            | Softmax { x, .. }
            | LogSoftmax { x, .. }
            | LayerNorm { x, .. }
            | Max { x, .. } => vec![*x],
        }
    }

    /// Vector-Jacobian products for each input, given the output value and
    /// its incoming gradient.
    pub fn backward(&self, nodes: &[Node], out: &Tensor, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        use Op::*;
        let val = |i: usize| -> &Tensor { &nodes[i].value };
        let like = |i: usize, data: Vec<f64>| Tensor { shape: val(i).shape.clone(), data };
        Ok(match self {
            Leaf => vec![],
            Add(a, b) => vec![
                (*a, like(*a, reduce_to(&g.data, &g.shape, &val(*a).shape))),
                (*b, like(*b, reduce_to(&g.data, &g.shape, &val(*b).shape))),
            ],
            Sub(a, b) => {
                let gb: Vec<f64> = reduce_to(&g.data, &g.shape, &val(*b).shape).into_iter().map(|v| -v).collect();
                vec![(*a, like(*a, reduce_to(&g.data, &g.shape, &val(*a).shape))), (*b, like(*b, gb))]
            }
            Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ae = expand_to(&av.data, &av.shape, &g.shape);
                let be = expand_to(&bv.data, &bv.shape, &g.shape);
                let ga: Vec<f64> = g.data.iter().zip(&be).map(|(g, b)| g * b).collect();
                let gb: Vec<f64> = g.data.iter().zip(&ae).map(|(g, a)| g * a).collect();
                vec![
                    (*a, like(*a, reduce_to(&ga, &g.shape, &av.shape))),
                    (*b, like(*b, reduce_to(&gb, &g.shape, &bv.shape))),
                ]
            }
            Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ae = expand_to(&av.data, &av.shape, &g.shape);
                let be = expand_to(&bv.data, &bv.shape, &g.shape);
                let ga: Vec<f64> = g.data.iter().zip(&be).map(|(g, d)| g / d).collect();
                let gb: Vec<f64> = (0..g.len()).map(|i| -g.data[i] * ae[i] / (be[i] * be[i])).collect();
                vec![
                    (*a, like(*a, reduce_to(&ga, &g.shape, &av.shape))),
                    (*b, like(*b, reduce_to(&gb, &g.shape, &bv.shape))),
                ]
            }
            Neg(x) => vec![(*x, g.map(|v| -v))],
            Scale(x, s) => vec![(*x, g.map(|v| v * s))],
            AddScalar(x) => vec![(*x, g.clone())],
            MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                let (batches, m, k, n) = mm_dims(&av.shape, *ta, &bv.shape, *tb);
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                let (sa, sb, sg) = (av.len() / batches, if bv.ndim() == 2 { 0 } else { k * n }, m * n);
                for bi in 0..batches {
                    let gs = &g.data[bi * sg..(bi + 1) * sg];
                    let asl = &av.data[bi * sa..(bi + 1) * sa];
                    let bsl = &bv.data[bi * sb..bi * sb + k * n];
                    let gas = &mut ga[bi * sa..(bi + 1) * sa];
                    if *ta {
                        kernels::gemm(bsl, *tb, gs, true, gas, k, n, m);
                    } else {
                        kernels::gemm(gs, false, bsl, !*tb, gas, m, n, k);
                    }
                    let gbs = &mut gb[bi * sb..bi * sb + k * n];
                    if *tb {
                        kernels::gemm(gs, true, asl, *ta, gbs, n, m, k);
                    } else {
                        kernels::gemm(asl, !*ta, gs, false, gbs, k, m, n);
                    }
                }
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                vec![(*x, permute_tensor(g, &inv))]
            }
            Reshape(x) => vec![(*x, like(*x, g.data.clone()))],
            BroadcastTo(x) => vec![(*x, like(*x, reduce_to(&g.data, &g.shape, &val(*x).shape)))],
            Slice { x, axis, start } => {
                let xs = &val(*x).shape;
                let (outer, len, inner) = split_axis(xs, *axis);
                let glen = g.shape[*axis];
                let mut gx = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    let src = o * glen * inner;
                    gx[dst..dst + glen * inner].copy_from_slice(&g.data[src..src + glen * inner]);
                }
                vec![(*x, like(*x, gx))]
            }
            Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(&g.shape, *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(xs.len());
                for &x in xs {
                    let len = val(x).shape[*axis];
                    let mut gx = Vec::with_capacity(val(x).len());
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        gx.extend_from_slice(&g.data[s..s + len * inner]);
                    }
                    offset += len;
                    res.push((x, like(x, gx)));
                }
                res
            }
            Gather { x, index } => {
                let mut gx = vec![0.0; val(*x).len()];
                for (i, &src) in index.iter().enumerate() {
                    gx[src] += g.data[i];
                }
                vec![(*x, like(*x, gx))]
            }
            Sum { x, axes } | Mean { x, axes } => {
                let xs = &val(*x).shape;
                let ks = keep_shape(xs, axes);
                let mut gx = expand_to(&g.data, &ks, xs);
                if let Mean { .. } = self {
                    let scale = 1.0 / (numel(xs) / numel(&ks)) as f64;
                    gx.iter_mut().for_each(|v| *v *= scale);
                }
                vec![(*x, like(*x, gx))]
            }
            Variance { x, axes, mean } => {
                let xv = val(*x);
                let ks = keep_shape(&xv.shape, axes);
                let count = (xv.len() / numel(&ks)) as f64;
                let ge = expand_to(&g.data, &ks, &xv.shape);
                let me = expand_to(&mean.data, &ks, &xv.shape);
                let gx = (0..xv.len()).map(|i| ge[i] * 2.0 * (xv.data[i] - me[i]) / count).collect();
                vec![(*x, like(*x, gx))]
            }
            Sqrt(x) => vec![(*x, zip(g, out, |g, y| if y == 0.0 { 0.0 } else { 0.5 * g / y }))],
            Exp(x) => vec![(*x, zip(g, out, |g, y| g * y))],
            Log(x) => vec![(*x, zip(g, val(*x), |g, v| g / v))],
            Square(x) => vec![(*x, zip(g, val(*x), |g, v| 2.0 * g * v))],
            Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(&out.shape, *axis);
                let mut gx = vec![0.0; out.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let dot: f64 = (0..len).map(|i| g.data[at(i)] * out.data[at(i)]).sum();
                        for i in 0..len {
                            gx[at(i)] = out.data[at(i)] * (g.data[at(i)] - dot);
                        }
                    }
                }
                vec![(*x, like(*x, gx))]
            }
            LogSoftmax { x, axis } => {
                let (outer, len, inner) = split_axis(&out.shape, *axis);
                let mut gx = vec![0.0; out.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let gs: f64 = (0..len).map(|i| g.data[at(i)]).sum();
                        for i in 0..len {
                            gx[at(i)] = g.data[at(i)] - out.data[at(i)].exp() * gs;
                        }
                    }
                }
                vec![(*x, like(*x, gx))]
            }
            Gelu(x) => vec![(*x, zip(g, val(*x), |g, v| g * kernels::gelu_d1(v)))],
            GeluGrad(x) => vec![(*x, zip(g, val(*x), |g, v| g * kernels::gelu_d2(v)))],
            Relu(x) => vec![(*x, zip(g, val(*x), |g, v| if v > 0.0 { g } else { 0.0 }))],
            LayerNorm { x, axis, xhat, rstd } => {
                let (outer, len, inner) = split_axis(&out.shape, *axis);
                let mut gx = vec![0.0; out.len()];
                let n = len as f64;
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let r = rstd[o * inner + j];
                        let mg: f64 = (0..len).map(|i| g.data[at(i)]).sum::<f64>() / n;
                        let mgx: f64 = (0..len).map(|i| g.data[at(i)] * xhat[at(i)]).sum::<f64>() / n;
                        for i in 0..len {
                            gx[at(i)] = r * (g.data[at(i)] - mg - xhat[at(i)] * mgx);
                        }
                    }
                }
                vec![(*x, like(*x, gx))]
            }
            Conv2d { x, w, geom } => {
                let (gi, gw) = kernels::conv2d_backward(geom, &val(*x).data, &val(*w).data, &g.data);
                vec![(*x, like(*x, gi)), (*w, like(*w, gw))]
            }
            Max { x, argmax } => {
                let mut gx = vec![0.0; val(*x).len()];
                for (i, &src) in argmax.iter().enumerate() {
                    gx[src] += g.data[i];
                }
                vec![(*x, like(*x, gx))]
            }
            SumSquares(x) => vec![(*x, val(*x).map(|v| 2.0 * g.data[0] * v))],
            L2Norm(x) => {
                let nrm = out.data[0];
                let gx = if nrm == 0.0 {
                    vec![0.0; val(*x).len()]
                } else {
                    val(*x).data.iter().map(|v| g.data[0] * v / nrm).collect()
                };
                vec![(*x, like(*x, gx))]
            }
        })
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor { shape: b.shape.clone(), data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() }
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let shape: Vec<usize> = axes.iter().map(|&a| t.shape[a]).collect();
    let src_strides = strides(&t.shape);
    let eff: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let total = t.len();
    let mut data = Vec::with_capacity(total);
    if let Some(&last) = axes.last() {
        if last == axes.len() - 1 && shape[last] > 1 {
            // innermost axis stays put: copy contiguous rows
            let inner = shape[last];
            let outer = &shape[..last];
            let mut idx = vec![0usize; outer.len()];
            let mut pos = 0usize;
            for _ in 0..total / inner {
                data.extend_from_slice(&t.data[pos..pos + inner]);
                for d in (0..outer.len()).rev() {
                    idx[d] += 1;
                    pos += eff[d];
                    if idx[d] < outer[d] {
                        break;
                    }
                    pos -= eff[d] * outer[d];
                    idx[d] = 0;
                }
            }
            return Tensor { shape, data };
        }
    }
    let mut idx = vec![0usize; shape.len()];
    let mut pos = 0usize;
    for _ in 0..total {
        data.push(t.data[pos]);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            pos += eff[d];
            if idx[d] < shape[d] {
                break;
            }
            pos -= eff[d] * shape[d];
            idx[d] = 0;
        }
    }
    Tensor { shape, data }
}

/// `(batches, m, k, n)` of a product whose left operand is `m x k` and right
/// operand `k x n` after the optional transposes. A rank-2 right operand with
/// an untransposed left one folds the leading axes into `m`.
fn mm_dims(a: &[usize], ta: bool, b: &[usize], tb: bool) -> (usize, usize, usize, usize) {
    let (ra, rb) = (a.len(), b.len());
    let (r, c) = (a[ra - 2], a[ra - 1]);
    let (m, k) = if ta { (c, r) } else { (r, c) };
    let n = if tb { b[rb - 2] } else { b[rb - 1] };
    if rb == 2 && !ta {
        (1, numel(a) / k, k, n)
    } else {
        (numel(&a[..ra - 2]), m, k, n)
    }
}

fn check_axes(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut axes = axes.to_vec();
    axes.sort_unstable();
    axes.dedup();
    if let Some(&a) = axes.iter().find(|&&a| a >= shape.len()) {
        return Err(Error::contract(format!("axis {a} out of range for shape {shape:?}")));
    }
    Ok(axes)
}

fn check_axis(shape: &[usize], axis: usize, name: &str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::contract(format!("{name}: axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

impl<'t> Var<'t> {
    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("operands live on different tapes"))
        }
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(&a.shape, &b.shape)
            .map_err(|e| Error::contract(format!("{name}: {e}")))?;
        let zip = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(&x, &y)| f(x, y)).collect::<Vec<f64>>();
        let data = match (a.shape == shape, b.shape == shape) {
            (true, true) => zip(&a.data, &b.data),
            (true, false) => zip(&a.data, &expand_to(&b.data, &b.shape, &shape)),
            (false, true) => zip(&expand_to(&a.data, &a.shape, &shape), &b.data),
            (false, false) => zip(&expand_to(&a.data, &a.shape, &shape), &expand_to(&b.data, &b.shape, &shape)),
        };
        self.tape.record(name, Tensor { shape, data }, op(self.id, other.id))
    }

    fn unary(self, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let v = self.value().map(f);
        self.tape.record(name, v, op)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div, |a, b| a / b)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary("neg", Op::Neg(self.id), |v| -v)
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.unary("scale", Op::Scale(self.id, s), |v| v * s)
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", Op::AddScalar(self.id), |v| v + s)
    }

    /// Matrix product over the last two axes. `other` is either a plain
    /// matrix shared by every leading index of `self`, or has the same
    /// leading (batch) axes as `self`.
    /// Batched matrix product over the last two axes. A rank-2 right-hand
    /// side is shared by every batch of the left-hand side.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_t(other, false, false)
    }

    /// [`Var::matmul`] with either operand's last two axes read transposed.
    /// A transposed left-hand side must have the same rank as the right.
    pub fn matmul_t(self, other: Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let (ra, rb) = (a.ndim(), b.ndim());
        if ra < 2 || rb < 2 {
            return Err(Error::contract(format!("matmul needs rank >= 2, got {:?} and {:?}", a.shape, b.shape)));
        }
        let ka = a.shape[ra - if ta { 2 } else { 1 }];
        let kb = b.shape[rb - if tb { 1 } else { 2 }];
        if ka != kb {
            return Err(Error::contract(format!("matmul inner mismatch {:?} x {:?}", a.shape, b.shape)));
        }
        if rb != 2 && a.shape[..ra - 2] != b.shape[..rb - 2] {
            return Err(Error::contract(format!("matmul batch mismatch {:?} x {:?}", a.shape, b.shape)));
        }
        if ta && ra != rb {
            return Err(Error::contract("a transposed left operand needs a right operand of equal rank"));
        }
        let (batches, m, k, n) = mm_dims(&a.shape, ta, &b.shape, tb);
        let mut shape = a.shape[..ra - 2].to_vec();
        shape.extend([a.shape[ra - if ta { 1 } else { 2 }], n]);
        let mut data = vec![0.0; numel(&shape)];
        let sb = if rb == 2 { 0 } else { k * n };
        for bi in 0..batches {
            kernels::gemm(
                &a.data[bi * m * k..(bi + 1) * m * k],
                ta,
                &b.data[bi * sb..bi * sb + k * n],
                tb,
                &mut data[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.tape.record("matmul", Tensor { shape, data }, Op::MatMul { a: self.id, b: other.id, ta, tb })
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..v.ndim()).collect::<Vec<_>>() {
            return Err(Error::contract(format!("permute axes {axes:?} invalid for shape {:?}", v.shape)));
        }
        let out = permute_tensor(&v, axes);
        self.tape.record("permute", out, Op::Permute { x: self.id, axes: axes.to_vec() })
    }

    /// Swap two axes.
    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t>> {
        let nd = self.value().ndim();
        if a >= nd || b >= nd {
            return Err(Error::contract(format!("transpose axes ({a},{b}) out of range for rank {nd}")));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if numel(shape) != v.len() {
            return Err(Error::contract(format!("cannot reshape {:?} to {shape:?}", v.shape)));
        }
        let out = Tensor { shape: shape.to_vec(), data: v.data.clone() };
        self.tape.record("reshape", out, Op::Reshape(self.id))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if broadcast_shape(&v.shape, shape)? != shape {
            return Err(Error::contract(format!("cannot broadcast {:?} to {shape:?}", v.shape)));
        }
        let data = expand_to(&v.data, &v.shape, shape);
        self.tape.record("broadcast_to", Tensor { shape: shape.to_vec(), data }, Op::BroadcastTo(self.id))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        check_axis(&v.shape, axis, "slice")?;
        if len == 0 || start + len > v.shape[axis] {
            return Err(Error::contract(format!(
                "slice [{start}, {}) out of range on axis {axis} of {:?}",
                start + len,
                v.shape
            )));
        }
        let (outer, full, inner) = split_axis(&v.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            data.extend_from_slice(&v.data[s..s + len * inner]);
        }
        let mut shape = v.shape.clone();
        shape[axis] = len;
        self.tape.record("slice", Tensor { shape, data }, Op::Slice { x: self.id, axis, start })
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = &vals[0].shape;
        check_axis(base, axis, "concat")?;
        for (p, v) in parts.iter().zip(&vals) {
            first.same_tape(p)?;
            let ok = v.ndim() == base.len()
                && v.shape.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::contract(format!("concat shape mismatch {:?} vs {base:?}", v.shape)));
            }
        }
        let total: usize = vals.iter().map(|v| v.shape[axis]).sum();
        let (outer, _, inner) = split_axis(base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let len = v.shape[axis];
                data.extend_from_slice(&v.data[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        first.tape.record(
            "concat",
            Tensor { shape, data },
            Op::Concat { xs: parts.iter().map(|p| p.id).collect(), axis },
        )
    }

    /// `out.flat[i] = self.flat[index[i]]`, reshaped to `shape`. Covers
    /// patch extraction and nearest-neighbour resampling.
    pub fn gather(self, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if numel(shape) != index.len() {
            return Err(Error::contract(format!("gather: {} indices for shape {shape:?}", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= v.len()) {
            return Err(Error::contract(format!("gather index {bad} out of range ({})", v.len())));
        }
        let data = index.iter().map(|&i| v.data[i]).collect();
        self.tape.record("gather", Tensor { shape: shape.to_vec(), data }, Op::Gather { x: self.id, index })
    }

    fn reduce(self, axes: &[usize], keepdim: bool, mean: bool) -> Result<Var<'t>> {
        let v = self.value();
        let axes = check_axes(&v.shape, axes)?;
        let ks = keep_shape(&v.shape, &axes);
        let mut acc = reduce_to(&v.data, &v.shape, &ks);
        if mean {
            let c = (v.len() / acc.len()) as f64;
            acc.iter_mut().for_each(|a| *a /= c);
        }
        let shape = if keepdim { ks } else { drop_shape(&v.shape, &axes) };
        let (name, op) = if mean {
            ("mean", Op::Mean { x: self.id, axes })
        } else {
            ("sum", Op::Sum { x: self.id, axes })
        };
        self.tape.record(name, Tensor { shape, data: acc }, op)
    }

    pub fn sum(self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        self.reduce(axes, keepdim, false)
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let nd = self.value().ndim();
        self.reduce(&(0..nd).collect::<Vec<_>>(), false, false)
    }

    pub fn mean(self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        self.reduce(axes, keepdim, true)
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let nd = self.value().ndim();
        self.reduce(&(0..nd).collect::<Vec<_>>(), false, true)
    }

    /// Biased (population) variance over `axes`.
    pub fn variance(self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        let v = self.value();
        let axes = check_axes(&v.shape, &axes)?;
        let ks = keep_shape(&v.shape, &axes);
        let c = (v.len() / numel(&ks)) as f64;
        let mut mean = reduce_to(&v.data, &v.shape, &ks);
        mean.iter_mut().for_each(|m| *m /= c);
        let sq: Vec<f64> =
            v.data.iter().zip(expand_to(&mean, &ks, &v.shape)).map(|(x, m)| (x - m) * (x - m)).collect();
        let mut var = reduce_to(&sq, &v.shape, &ks);
        var.iter_mut().for_each(|s| *s /= c);
        let shape = if keepdim { ks.clone() } else { drop_shape(&v.shape, &axes) };
        let mean = Tensor { shape: ks, data: mean };
        self.tape.record("variance", Tensor { shape, data: var }, Op::Variance { x: self.id, axes, mean })
    }

    /// Per-channel batch mean and biased variance of an NHWC tensor.
    pub fn batch_stats(self) -> Result<(Var<'t>, Var<'t>)> {
        if self.value().ndim() != 4 {
            return Err(Error::contract("batch_stats expects an NHWC tensor"));
        }
        Ok((self.mean(&[0, 1, 2], false)?, self.variance(&[0, 1, 2], false)?))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        if self.value().data.iter().any(|&v| v < 0.0) {
            return Err(Error::numeric("sqrt", "negative input"));
        }
        self.unary("sqrt", Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary("log", Op::Log(self.id), f64::ln)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary("square", Op::Square(self.id), |v| v * v)
    }

    fn axis_map(
        self,
        axis: usize,
        name: &'static str,
        op: Op,
        f: impl Fn(&[f64], &mut [f64]),
    ) -> Result<Var<'t>> {
        let v = self.value();
        check_axis(&v.shape, axis, name)?;
        let (outer, len, inner) = split_axis(&v.shape, axis);
        let mut data = vec![0.0; v.len()];
        let mut row = vec![0.0; len];
        let mut res = vec![0.0; len];
        for o in 0..outer {
            for j in 0..inner {
                for i in 0..len {
                    row[i] = v.data[(o * len + i) * inner + j];
                }
                f(&row, &mut res);
                for i in 0..len {
                    data[(o * len + i) * inner + j] = res[i];
                }
            }
        }
        self.tape.record(name, Tensor { shape: v.shape.clone(), data }, op)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.axis_map(axis, "softmax", Op::Softmax { x: self.id, axis }, |row, out| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, &r) in out.iter_mut().zip(row) {
                *o = (r - m).exp();
                s += *o;
            }
            out.iter_mut().for_each(|o| *o /= s);
        })
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        self.axis_map(axis, "log_softmax", Op::LogSoftmax { x: self.id, axis }, |row, out| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|r| (r - m).exp()).sum::<f64>().ln();
            for (o, &r) in out.iter_mut().zip(row) {
                *o = r - lse;
            }
        })
    }

    pub fn gelu(self) -> Result<Var<'t>> {
        self.unary("gelu", Op::Gelu(self.id), kernels::gelu)
    }

    /// Derivative of [`Var::gelu`], itself differentiable.
    pub fn gelu_grad(self) -> Result<Var<'t>> {
        self.unary("gelu_grad", Op::GeluGrad(self.id), kernels::gelu_d1)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", Op::Relu(self.id), |v| v.max(0.0))
    }

    /// Normalise to zero mean and unit (biased) variance along `axis`.
    pub fn layer_norm(self, axis: usize, eps: f64) -> Result<Var<'t>> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let v = self.value();
        check_axis(&v.shape, axis, "layer_norm")?;
        let (outer, len, inner) = split_axis(&v.shape, axis);
        let n = len as f64;
        let mut xhat = vec![0.0; v.len()];
        let mut rstd = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let mu = (0..len).map(|i| v.data[at(i)]).sum::<f64>() / n;
                let var = (0..len).map(|i| (v.data[at(i)] - mu).powi(2)).sum::<f64>() / n;
                let r = 1.0 / (var + eps).sqrt();
                rstd[o * inner + j] = r;
                for i in 0..len {
                    xhat[at(i)] = (v.data[at(i)] - mu) * r;
                }
            }
        }
        let out = Tensor { shape: v.shape.clone(), data: xhat.clone() };
        self.tape.record("layer_norm", out, Op::LayerNorm { x: self.id, axis, xhat, rstd })
    }

    /// 2-D convolution. `self` is NHWC, `weight` is `[kh, kw, c_in, c_out]`.
    pub fn conv2d(self, weight: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        self.same_tape(&weight)?;
        let (x, w) = (self.value(), weight.value());
        let (&[n, h, wd, ci], &[kh, kw, wci, co]) = (&x.shape[..], &w.shape[..]) else {
            return Err(Error::contract(format!("conv2d expects NHWC x HWIO, got {:?} and {:?}", x.shape, w.shape)));
        };
        if ci != wci || stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::contract(format!("conv2d geometry invalid: {:?} with {:?}", x.shape, w.shape)));
        }
        let geom = ConvGeom {
            n,
            h,
            w: wd,
            ci,
            kh,
            kw,
            co,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (wd + 2 * padding - kw) / stride + 1,
        };
        let data = kernels::conv2d_forward(&geom, &x.data, &w.data);
        let out = Tensor { shape: vec![n, geom.ho, geom.wo, co], data };
        self.tape.record("conv2d", out, Op::Conv2d { x: self.id, w: weight.id, geom })
    }

    /// Maximum along `axis` (axis removed). Gradient flows to the first
    /// maximal element.
    pub fn max(self, axis: usize) -> Result<Var<'t>> {
        let v = self.value();
        check_axis(&v.shape, axis, "max")?;
        let (outer, len, inner) = split_axis(&v.shape, axis);
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let mut best = (o * len) * inner + j;
                for i in 1..len {
                    let at = (o * len + i) * inner + j;
                    if v.data[at] > v.data[best] {
                        best = at;
                    }
                }
                data.push(v.data[best]);
                argmax.push(best);
            }
        }
        let shape = drop_shape(&v.shape, &[axis]);
        self.tape.record("max", Tensor { shape, data }, Op::Max { x: self.id, argmax })
    }

    /// Euclidean norm of all elements. The subgradient at zero is zero.
    /// Sum of squared entries.
    pub fn sum_squares(self) -> Result<Var<'t>> {
        let s = self.value().sq_norm();
        self.tape.record("sum_squares", Tensor::scalar(s), Op::SumSquares(self.id))
    }

    pub fn l2_norm(self) -> Result<Var<'t>> {
        let n = self.value().norm();
        self.tape.record("l2_norm", Tensor::scalar(n), Op::L2Norm(self.id))
    }
}
