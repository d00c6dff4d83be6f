//! Dynamic reverse-mode tape over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and enough
//! bookkeeping to replay the chain rule. [`Graph::backward`] walks the tape
//! in reverse creation order; [`Graph::backward_dfs`] uses a depth-first
//! topological order instead and must agree with it.

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{gemm_acc, inverse_permutation, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddLast(Var, Var),
    MulLast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Matmul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    Sigmoid(Var),
    Silu(Var),
    Square(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Conv2d { x: Var, kernel: Var },
    Warp { src: Var, flow: Var },
    MeanPoolTemporal { x: Var, groups: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Expand { x: Var, axis: usize, times: usize },
    Rope { x: Var, angles: Vec<f64> },
    SumAll(Var),
    MeanAll(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param(_) => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddLast(a, b) | MulLast(a, b) | ScaleBy(a, b) | Matmul(a, b) => {
                vec![*a, *b]
            }
            Bmm { a, b, .. } => vec![*a, *b],
            Conv2d { x, kernel } => vec![*x, *kernel],
            Warp { src, flow } => vec![*src, *flow],
            Scale(x, _)
            | AddScalar(x)
            | Softmax(x)
            | Sigmoid(x)
            | Silu(x)
            | Square(x)
            | Reshape(x)
            | SumAll(x)
            | MeanAll(x) => vec![*x],
            LayerNorm { x, .. }
            | MeanPoolTemporal { x, .. }
            | Permute { x, .. }
            | Slice { x, .. }
            | Expand { x, .. }
            | Rope { x, .. } => vec![*x],
            Concat { parts, .. } => parts.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_last(op: &'static str, x: &Tensor, v: &Tensor) -> Result<()> {
    let c = *x.shape().last().unwrap_or(&0);
    if v.rank() != 1 || v.numel() != c {
        return Err(Error::shape(op, x.shape(), v.shape()));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf that receives a gradient (used for gradient checks on inputs).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push(p.tensor.clone(), Op::Param(id));
        self.nodes[v.0].needs_grad = p.trainable;
        v
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Returns an error naming `layer` if `v` holds a NaN or infinity.
    pub fn check_finite(&self, v: Var, layer: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(layer.to_string()))
        }
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x + v` with `v` broadcast along every axis but the last.
    pub fn add_last(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xt, vt) = (self.value(x), self.value(v));
        check_last("add_last", xt, vt)?;
        let c = vt.numel();
        let vd = vt.data();
        let mut out = xt.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(vd) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddLast(x, v)))
    }

    /// `x * v` with `v` broadcast along every axis but the last.
    pub fn mul_last(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xt, vt) = (self.value(x), self.value(v));
        check_last("mul_last", xt, vt)?;
        let c = vt.numel();
        let vd = vt.data();
        let mut out = xt.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(vd) {
                *o *= b;
            }
        }
        Ok(self.push(out, Op::MulLast(x, v)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.push(out, Op::AddScalar(x))
    }

    /// `x * s` where `s` is a one-element tensor.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let st = self.value(s);
        if st.numel() != 1 {
            return Err(Error::shape("scale_by", self.shape(x), st.shape()));
        }
        let k = st.data()[0];
        let out = self.value(x).map(|v| v * k);
        Ok(self.push(out, Op::ScaleBy(x, s)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        self.push(Tensor::scalar(s), Op::MeanAll(x))
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean_all(sq))
    }

    // ---- linear algebra ----------------------------------------------

    /// `a[..., k] · b[k, p] -> [..., p]`; rank-2 `a` is the plain matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rank() < 2 || bt.rank() != 2 || at.shape()[at.rank() - 1] != bt.shape()[0] {
            return Err(Error::shape("matmul", at.shape(), bt.shape()));
        }
        let k = bt.shape()[0];
        let p = bt.shape()[1];
        let m = at.numel() / k;
        let mut out = vec![0.0; m * p];
        gemm_acc(m, k, p, at.data(), k as isize, 1, bt.data(), p as isize, 1, &mut out);
        let mut shape = at.shape().to_vec();
        *shape.last_mut().unwrap() = p;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    /// Batched product `a[B, m, k] · b[B, k, p]`, or `· b[B, p, k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let bad = || Error::shape("bmm", at.shape(), bt.shape());
        if at.rank() != 3 || bt.rank() != 3 || at.shape()[0] != bt.shape()[0] {
            return Err(bad());
        }
        let (nb, m, k) = (at.shape()[0], at.shape()[1], at.shape()[2]);
        let (bk, p) = if trans_b {
            (bt.shape()[2], bt.shape()[1])
        } else {
            (bt.shape()[1], bt.shape()[2])
        };
        if bk != k {
            return Err(bad());
        }
        let mut out = vec![0.0; nb * m * p];
        let (b_rs, b_cs) = if trans_b { (1, k as isize) } else { (p as isize, 1) };
        for i in 0..nb {
            gemm_acc(
                m,
                k,
                p,
                &at.data()[i * m * k..(i + 1) * m * k],
                k as isize,
                1,
                &bt.data()[i * k * p..(i + 1) * k * p],
                b_rs,
                b_cs,
                &mut out[i * m * p..(i + 1) * m * p],
            );
        }
        let out = Tensor::new(vec![nb, m, p], out)?;
        Ok(self.push(out, Op::Bmm { a, b, trans_b }))
    }

    /// Softmax along the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let k = *xt.shape().last().unwrap();
        let mut out = xt.clone();
        for row in out.data_mut().chunks_mut(k) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(out, Op::Softmax(x))
    }

    /// Normalises each last-axis vector to zero mean, unit variance. No affine.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xt = self.value(x);
        let c = *xt.shape().last().unwrap();
        let mut out = xt.clone();
        let mut rstd = Vec::with_capacity(xt.numel() / c);
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        self.push(out, Op::LayerNorm { x, rstd })
    }

    /// Same-padded per-frame cross-correlation of `x[n,h,w,cin]` with
    /// `kernel[kh,kw,cin,cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xt, kt) = (self.value(x), self.value(kernel));
        if xt.rank() != 4 || kt.rank() != 4 || xt.shape()[3] != kt.shape()[2] {
            return Err(Error::shape("conv2d", xt.shape(), kt.shape()));
        }
        let (kh, kw) = (kt.shape()[0], kt.shape()[1]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d kernel must have odd size, got {kh}x{kw}"
            )));
        }
        let out = conv2d_forward(xt, kt);
        Ok(self.push(out, Op::Conv2d { x, kernel }))
    }

    /// Bilinear resampling of `src[n,h,w,c]` at `(x + flow_x, y + flow_y)`
    /// with clamp-to-edge borders.
    pub fn bilinear_warp(&mut self, src: Var, flow: Var) -> Result<Var> {
        let (st, ft) = (self.value(src), self.value(flow));
        if st.rank() != 4 || ft.rank() != 4 || ft.shape()[3] != 2 || st.shape()[..3] != ft.shape()[..3] {
            return Err(Error::shape("bilinear_warp", st.shape(), ft.shape()));
        }
        let out = warp_forward(st, ft);
        Ok(self.push(out, Op::Warp { src, flow }))
    }

    /// Averages contiguous groups of axis-0 slices; the last group takes the remainder.
    pub fn mean_pool_temporal(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xt = self.value(x);
        let n = xt.shape()[0];
        if groups == 0 || groups > n {
            return Err(Error::Config(format!("cannot pool {n} frames into {groups} groups")));
        }
        let fl = xt.frame_len();
        let mut shape = xt.shape().to_vec();
        shape[0] = groups;
        let mut out = vec![0.0; groups * fl];
        for (g, (lo, hi)) in pool_ranges(n, groups).into_iter().enumerate() {
            let dst = &mut out[g * fl..(g + 1) * fl];
            for f in lo..hi {
                for (d, s) in dst.iter_mut().zip(xt.frame_slice(f)) {
                    *d += s;
                }
            }
            let inv = 1.0 / (hi - lo) as f64;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::MeanPoolTemporal { x, groups }))
    }

    // ---- layout ------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(perm)?;
        Ok(self.push(out, Op::Permute { x, perm: perm.to_vec() }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(k, &d)| k != axis && d != first[k]) {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        if axis >= xt.rank() || start + len > xt.shape()[axis] {
            return Err(Error::Index {
                what: "slice",
                index: start + len,
                len: xt.shape().get(axis).copied().unwrap_or(0),
            });
        }
        let (outer, d, inner) = split_at_axis(xt.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d + start) * inner;
            data.extend_from_slice(&xt.data()[base..base + len * inner]);
        }
        let mut shape = xt.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Slice { x, axis, start }))
    }

    /// Inserts a new axis of size `times` at `axis`, replicating the data.
    pub fn expand(&mut self, x: Var, axis: usize, times: usize) -> Result<Var> {
        let xt = self.value(x);
        if axis > xt.rank() {
            return Err(Error::shape("expand", xt.shape(), &[axis]));
        }
        let outer: usize = xt.shape()[..axis].iter().product();
        let inner: usize = xt.shape()[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * times * inner);
        for o in 0..outer {
            let src = &xt.data()[o * inner..(o + 1) * inner];
            for _ in 0..times {
                data.extend_from_slice(src);
            }
        }
        let mut shape = xt.shape().to_vec();
        shape.insert(axis, times);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Expand { x, axis, times }))
    }

    /// Rotary position embedding on the last axis. Row `r` of the flattened
    /// `[rows, dim]` view is rotated by `positions[r]`.
    pub fn rope(&mut self, x: Var, positions: &[f64]) -> Result<Var> {
        let xt = self.value(x);
        let dim = *xt.shape().last().unwrap();
        if dim % 2 != 0 || xt.numel() / dim != positions.len() {
            return Err(Error::shape("rope", xt.shape(), &[positions.len()]));
        }
        let half = dim / 2;
        let freqs: Vec<f64> = (0..half)
            .map(|m| 10000f64.powf(-((2 * m) as f64) / dim as f64))
            .collect();
        let angles: Vec<f64> = positions
            .iter()
            .flat_map(|&p| freqs.iter().map(move |f| p * f))
            .collect();
        let mut out = xt.clone();
        rotate_pairs(out.data_mut(), &angles, dim, 1.0);
        Ok(self.push(out, Op::Rope { x, angles }))
    }

    // ---- reverse pass ------------------------------------------------

    /// Reverse pass in reverse creation order from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let order: Vec<usize> = (0..=loss.0).rev().collect();
        self.backward_in_order(loss, &order)
    }

    /// Reverse pass in a depth-first reverse topological order.
    pub fn backward_dfs(&self, loss: Var) -> Result<Gradients> {
        let mut visited = vec![false; loss.0 + 1];
        let mut post = Vec::new();
        let mut stack = vec![(loss.0, false)];
        while let Some((n, expanded)) = stack.pop() {
            if expanded {
                post.push(n);
                continue;
            }
            if visited[n] {
                continue;
            }
            visited[n] = true;
            stack.push((n, true));
            for v in self.nodes[n].op.inputs() {
                if !visited[v.0] {
                    stack.push((v.0, false));
                }
            }
        }
        post.reverse();
        self.backward_in_order(loss, &post)
    }

    fn backward_in_order(&self, loss: Var, order: &[usize]) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for &i in order {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (v, dv) in self.vjp(i, &g) {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&dv).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(dv),
                }
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.needs_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((Var(i), id)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn vjp(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                vec![
                    (*a, g.iter().zip(bd).map(|(g, b)| g * b).collect()),
                    (*b, g.iter().zip(ad).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::AddLast(x, v) => {
                let c = val(*v).numel();
                let mut dv = vec![0.0; c];
                for row in g.chunks(c) {
                    dv.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                }
                vec![(*x, g.to_vec()), (*v, dv)]
            }
            Op::MulLast(x, v) => {
                let vd = val(*v).data();
                let c = vd.len();
                let mut dv = vec![0.0; c];
                let mut dx = g.to_vec();
                for (row, (xrow, dxrow)) in g.chunks(c).zip(val(*x).data().chunks(c).zip(dx.chunks_mut(c))) {
                    for j in 0..c {
                        dv[j] += row[j] * xrow[j];
                        dxrow[j] *= vd[j];
                    }
                }
                vec![(*x, dx), (*v, dv)]
            }
            Op::Scale(x, s) => vec![(*x, g.iter().map(|v| v * s).collect())],
            Op::AddScalar(x) => vec![(*x, g.to_vec())],
            Op::ScaleBy(x, s) => {
                let k = val(*s).data()[0];
                let ds: f64 = g.iter().zip(val(*x).data()).map(|(g, x)| g * x).sum();
                vec![(*x, g.iter().map(|v| v * k).collect()), (*s, vec![ds])]
            }
            Op::Matmul(a, b) => {
                let (at, bt) = (val(*a), val(*b));
                let (k, p) = (bt.shape()[0], bt.shape()[1]);
                let m = at.numel() / k;
                let mut da = vec![0.0; m * k];
                // dA = dC · Bᵀ
                gemm_acc(m, p, k, g, p as isize, 1, bt.data(), 1, p as isize, &mut da);
                let mut db = vec![0.0; k * p];
                // dB = Aᵀ · dC
                gemm_acc(k, m, p, at.data(), 1, k as isize, g, p as isize, 1, &mut db);
                vec![(*a, da), (*b, db)]
            }
            Op::Bmm { a, b, trans_b } => {
                let (at, bt) = (val(*a), val(*b));
                let (nb, m, k) = (at.shape()[0], at.shape()[1], at.shape()[2]);
                let p = node.value.shape()[2];
                let mut da = vec![0.0; nb * m * k];
                let mut db = vec![0.0; nb * k * p];
                for i in 0..nb {
                    let ga = &g[i * m * p..(i + 1) * m * p];
                    let ai = &at.data()[i * m * k..(i + 1) * m * k];
                    let bi = &bt.data()[i * k * p..(i + 1) * k * p];
                    let dai = &mut da[i * m * k..(i + 1) * m * k];
                    let dbi = &mut db[i * k * p..(i + 1) * k * p];
                    if *trans_b {
                        // B stored as [p, k]; dA = dC · B, dB = dCᵀ · A
                        gemm_acc(m, p, k, ga, p as isize, 1, bi, k as isize, 1, dai);
                        gemm_acc(p, m, k, ga, 1, p as isize, ai, k as isize, 1, dbi);
                    } else {
                        gemm_acc(m, p, k, ga, p as isize, 1, bi, 1, p as isize, dai);
                        gemm_acc(k, m, p, ai, 1, k as isize, ga, p as isize, 1, dbi);
                    }
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Softmax(x) => {
                let s = node.value.data();
                let k = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; s.len()];
                for ((srow, grow), drow) in s.chunks(k).zip(g.chunks(k)).zip(dx.chunks_mut(k)) {
                    let dot: f64 = srow.iter().zip(grow).map(|(s, g)| s * g).sum();
                    for j in 0..k {
                        drow[j] = srow[j] * (grow[j] - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::Sigmoid(x) => {
                let s = node.value.data();
                vec![(*x, g.iter().zip(s).map(|(g, s)| g * s * (1.0 - s)).collect())]
            }
            Op::Silu(x) => {
                let xd = val(*x).data();
                vec![(
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * (s + x * s * (1.0 - s))
                        })
                        .collect(),
                )]
            }
            Op::Square(x) => {
                let xd = val(*x).data();
                vec![(*x, g.iter().zip(xd).map(|(g, x)| 2.0 * g * x).collect())]
            }
            Op::LayerNorm { x, rstd } => {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for (r, ((yrow, grow), drow)) in y.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)).enumerate() {
                    let mg = grow.iter().sum::<f64>() / c as f64;
                    let mgy = grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / c as f64;
                    for j in 0..c {
                        drow[j] = rstd[r] * (grow[j] - mg - yrow[j] * mgy);
                    }
                }
                vec![(*x, dx)]
            }
            Op::Conv2d { x, kernel } => {
                let (dx, dk) = conv2d_backward(val(*x), val(*kernel), g);
                vec![(*x, dx), (*kernel, dk)]
            }
            Op::Warp { src, flow } => {
                let (ds, df) = warp_backward(val(*src), val(*flow), g);
                vec![(*src, ds), (*flow, df)]
            }
            Op::MeanPoolTemporal { x, groups } => {
                let xt = val(*x);
                let n = xt.shape()[0];
                let fl = xt.frame_len();
                let mut dx = vec![0.0; xt.numel()];
                for (gi, (lo, hi)) in pool_ranges(n, *groups).into_iter().enumerate() {
                    let inv = 1.0 / (hi - lo) as f64;
                    let src = &g[gi * fl..(gi + 1) * fl];
                    for f in lo..hi {
                        for (d, s) in dx[f * fl..(f + 1) * fl].iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Permute { x, perm } => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("grad");
                let back = gt.permute(&inverse_permutation(perm)).expect("inverse permute");
                vec![(*x, back.into_data())]
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_at_axis(shape, *axis);
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let d = val(p).shape()[*axis];
                    let mut dp = Vec::with_capacity(outer * d * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        dp.extend_from_slice(&g[base..base + d * inner]);
                    }
                    offset += d;
                    out.push((p, dp));
                }
                out
            }
            Op::Slice { x, axis, start } => {
                let xt = val(*x);
                let (outer, d, inner) = split_at_axis(xt.shape(), *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; xt.numel()];
                for o in 0..outer {
                    let base = (o * d + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, dx)]
            }
            Op::Expand { x, axis, times } => {
                let xt = val(*x);
                let outer: usize = xt.shape()[..*axis].iter().product();
                let inner: usize = xt.shape()[*axis..].iter().product();
                let mut dx = vec![0.0; xt.numel()];
                for o in 0..outer {
                    let dst = &mut dx[o * inner..(o + 1) * inner];
                    for t in 0..*times {
                        let base = (o * times + t) * inner;
                        dst.iter_mut().zip(&g[base..base + inner]).for_each(|(d, s)| *d += s);
                    }
                }
                vec![(*x, dx)]
            }
            Op::Rope { x, angles } => {
                let dim = *node.value.shape().last().unwrap();
                let mut dx = g.to_vec();
                rotate_pairs(&mut dx, angles, dim, -1.0);
                vec![(*x, dx)]
            }
            Op::SumAll(x) => vec![(*x, vec![g[0]; val(*x).numel()])],
            Op::MeanAll(x) => {
                let n = val(*x).numel();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
        }
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(Var, ParamId)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds every parameter-leaf gradient into the matching store entry.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(v, id) in &self.params {
            let Some(g) = self.wrt(v) else { continue };
            let p = store.get_mut(id);
            match &mut p.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g.clone()),
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

/// Frame ranges for temporal mean pooling.
pub fn pool_ranges(n: usize, groups: usize) -> Vec<(usize, usize)> {
    let base = n / groups;
    (0..groups)
        .map(|g| {
            let lo = g * base;
            let hi = if g + 1 == groups { n } else { lo + base };
            (lo, hi)
        })
        .collect()
}

fn rotate_pairs(data: &mut [f64], angles: &[f64], dim: usize, sign: f64) {
    let half = dim / 2;
    for (r, row) in data.chunks_mut(dim).enumerate() {
        for m in 0..half {
            let a = angles[r * half + m] * sign;
            let (s, c) = a.sin_cos();
            let (x0, x1) = (row[2 * m], row[2 * m + 1]);
            row[2 * m] = x0 * c - x1 * s;
            row[2 * m + 1] = x0 * s + x1 * c;
        }
    }
}

fn im2col(frame: &[f64], h: usize, w: usize, cin: usize, kh: usize, kw: usize, col: &mut [f64]) {
    let (ph, pw) = (kh / 2, kw / 2);
    let row_len = kh * kw * cin;
    for y in 0..h {
        for x in 0..w {
            let dst = &mut col[(y * w + x) * row_len..(y * w + x + 1) * row_len];
            for dy in 0..kh {
                let sy = y as isize + dy as isize - ph as isize;
                for dx in 0..kw {
                    let sx = x as isize + dx as isize - pw as isize;
                    let d = &mut dst[(dy * kw + dx) * cin..(dy * kw + dx + 1) * cin];
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        d.fill(0.0);
                    } else {
                        let s = (sy as usize * w + sx as usize) * cin;
                        d.copy_from_slice(&frame[s..s + cin]);
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, k: &Tensor) -> Tensor {
    let (n, h, w, cin) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (kh, kw, cout) = (k.dim(0), k.dim(1), k.dim(3));
    let row_len = kh * kw * cin;
    let mut col = vec![0.0; h * w * row_len];
    let mut out = vec![0.0; n * h * w * cout];
    for b in 0..n {
        im2col(x.frame_slice(b), h, w, cin, kh, kw, &mut col);
        gemm_acc(
            h * w,
            row_len,
            cout,
            &col,
            row_len as isize,
            1,
            k.data(),
            cout as isize,
            1,
            &mut out[b * h * w * cout..(b + 1) * h * w * cout],
        );
    }
    Tensor::new(vec![n, h, w, cout], out).expect("conv2d shape")
}

fn conv2d_backward(x: &Tensor, k: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (n, h, w, cin) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (kh, kw, cout) = (k.dim(0), k.dim(1), k.dim(3));
    let (ph, pw) = (kh / 2, kw / 2);
    let row_len = kh * kw * cin;
    let mut col = vec![0.0; h * w * row_len];
    let mut dcol = vec![0.0; h * w * row_len];
    let mut dk = vec![0.0; k.numel()];
    let mut dx = vec![0.0; x.numel()];
    for b in 0..n {
        let gb = &g[b * h * w * cout..(b + 1) * h * w * cout];
        im2col(x.frame_slice(b), h, w, cin, kh, kw, &mut col);
        gemm_acc(
            row_len,
            h * w,
            cout,
            &col,
            1,
            row_len as isize,
            gb,
            cout as isize,
            1,
            &mut dk,
        );
        dcol.fill(0.0);
        gemm_acc(
            h * w,
            cout,
            row_len,
            gb,
            cout as isize,
            1,
            k.data(),
            1,
            cout as isize,
            &mut dcol,
        );
        let dxb = &mut dx[b * h * w * cin..(b + 1) * h * w * cin];
        for y in 0..h {
            for xx in 0..w {
                let src = &dcol[(y * w + xx) * row_len..(y * w + xx + 1) * row_len];
                for dy in 0..kh {
                    let sy = y as isize + dy as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for ddx in 0..kw {
                        let sx = xx as isize + ddx as isize - pw as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let o = (sy as usize * w + sx as usize) * cin;
                        let s = &src[(dy * kw + ddx) * cin..(dy * kw + ddx + 1) * cin];
                        dxb[o..o + cin].iter_mut().zip(s).for_each(|(d, v)| *d += v);
                    }
                }
            }
        }
    }
    (dx, dk)
}

struct Tap {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    fx: f64,
    fy: f64,
}

fn tap(h: usize, w: usize, y: usize, x: usize, fx_flow: f64, fy_flow: f64) -> Tap {
    let sx = x as f64 + fx_flow;
    let sy = y as f64 + fy_flow;
    let x0 = sx.floor();
    let y0 = sy.floor();
    let cx = |v: f64| v.clamp(0.0, (w - 1) as f64) as usize;
    let cy = |v: f64| v.clamp(0.0, (h - 1) as f64) as usize;
    let (xa, xb) = (cx(x0), cx(x0 + 1.0));
    let (ya, yb) = (cy(y0), cy(y0 + 1.0));
    Tap {
        i00: ya * w + xa,
        i01: ya * w + xb,
        i10: yb * w + xa,
        i11: yb * w + xb,
        fx: sx - x0,
        fy: sy - y0,
    }
}

/// Graph-free bilinear warp with the same sampling rule as [`Graph::bilinear_warp`].
pub fn warp(src: &Tensor, flow: &Tensor) -> Result<Tensor> {
    if src.rank() != 4 || flow.rank() != 4 || flow.dim(3) != 2 || src.shape()[..3] != flow.shape()[..3] {
        return Err(Error::shape("warp", src.shape(), flow.shape()));
    }
    Ok(warp_forward(src, flow))
}

fn warp_forward(src: &Tensor, flow: &Tensor) -> Tensor {
    let (n, h, w, c) = (src.dim(0), src.dim(1), src.dim(2), src.dim(3));
    let mut out = vec![0.0; src.numel()];
    for b in 0..n {
        let s = src.frame_slice(b);
        let f = flow.frame_slice(b);
        let o = &mut out[b * h * w * c..(b + 1) * h * w * c];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let t = tap(h, w, y, x, f[2 * p], f[2 * p + 1]);
                for ch in 0..c {
                    let v00 = s[t.i00 * c + ch];
                    let v01 = s[t.i01 * c + ch];
                    let v10 = s[t.i10 * c + ch];
                    let v11 = s[t.i11 * c + ch];
                    let top = (1.0 - t.fx) * v00 + t.fx * v01;
                    let bot = (1.0 - t.fx) * v10 + t.fx * v11;
                    o[p * c + ch] = (1.0 - t.fy) * top + t.fy * bot;
                }
            }
        }
    }
    Tensor::new(src.shape().to_vec(), out).expect("warp shape")
}

fn warp_backward(src: &Tensor, flow: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (n, h, w, c) = (src.dim(0), src.dim(1), src.dim(2), src.dim(3));
    let mut ds = vec![0.0; src.numel()];
    let mut df = vec![0.0; flow.numel()];
    for b in 0..n {
        let s = src.frame_slice(b);
        let f = flow.frame_slice(b);
        let gb = &g[b * h * w * c..(b + 1) * h * w * c];
        let dsb = &mut ds[b * h * w * c..(b + 1) * h * w * c];
        let dfb = &mut df[b * h * w * 2..(b + 1) * h * w * 2];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let t = tap(h, w, y, x, f[2 * p], f[2 * p + 1]);
                let (w00, w01) = ((1.0 - t.fx) * (1.0 - t.fy), t.fx * (1.0 - t.fy));
                let (w10, w11) = ((1.0 - t.fx) * t.fy, t.fx * t.fy);
                // A clamped pair of taps collapses onto one texel: no slope.
                let x_live = t.i00 != t.i01;
                let y_live = t.i00 != t.i10;
                let (mut gx, mut gy) = (0.0, 0.0);
                for ch in 0..c {
                    let go = gb[p * c + ch];
                    if go == 0.0 {
                        continue;
                    }
                    dsb[t.i00 * c + ch] += w00 * go;
                    dsb[t.i01 * c + ch] += w01 * go;
                    dsb[t.i10 * c + ch] += w10 * go;
                    dsb[t.i11 * c + ch] += w11 * go;
                    let v00 = s[t.i00 * c + ch];
                    let v01 = s[t.i01 * c + ch];
                    let v10 = s[t.i10 * c + ch];
                    let v11 = s[t.i11 * c + ch];
                    if x_live {
                        gx += go * ((1.0 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
                    }
                    if y_live {
                        gy += go * ((1.0 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
                    }
                }
                dfb[2 * p] = gx;
                dfb[2 * p + 1] = gy;
            }
        }
    }
    (ds, df)
}
