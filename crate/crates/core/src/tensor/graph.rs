use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeom, MatLayout};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Variance floor shared by layer and batch normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization flavor for [`Graph::normalize`].
#[derive(Clone, Copy, Debug)]
pub enum Norm<'a, T: Scalar> {
    /// Per-token statistics over the channel axis.
    Layer,
    /// Per-channel statistics over batch and spatial axes.
    BatchTrain,
    /// Per-channel affine map from stored running statistics.
    BatchEval { mean: &'a Tensor<T>, var: &'a Tensor<T> },
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Act {
    Gelu,
    Swish,
}

enum Op<T: Scalar> {
    Leaf,
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
    },
    AddScalar(Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        a_stride: usize,
        b_stride: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Gather {
        a: Var,
        index: Arc<Vec<usize>>,
    },
    Reshape(Var),
    SumAll(Var),
    SumAxis {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Softmax {
        a: Var,
        cols: usize,
    },
    AvgPool {
        a: Var,
        p: usize,
        q: usize,
    },
    Unfold {
        a: Var,
        dims: [usize; 4],
    },
    Fold {
        a: Var,
        dims: [usize; 4],
    },
    Conv {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        groups: usize,
        cout: usize,
    },
    Norm {
        x: Var,
        gain: Var,
        bias: Var,
        per_channel: bool,
        trained_stats: bool,
        dims: [usize; 3],
        xhat: Vec<T>,
        rstd: Vec<T>,
        batch_stats: Option<(Tensor<T>, Tensor<T>)>,
    },
    Activation(Var, Act),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records values and the operations that produced them, then replays the
/// record in reverse to produce gradients.
///
/// A graph is single-writer; build one per forward pass.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
    macs: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("broadcast needs equal ranks, got {a:?} and {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::dim(format!("shapes {a:?} and {b:?} do not broadcast"))),
        })
        .collect()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), param_order: Vec::new(), macs: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by matmul, convolution and pooling so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Named trainable leaf. Registering the same name twice returns the
    /// original handle.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push_leaf(value.clone(), true);
        self.params.insert(name.to_string(), v);
        self.param_order.push(name.to_string());
        v
    }

    /// Names of registered parameters in registration order.
    pub fn param_names(&self) -> &[String] {
        &self.param_order
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Batch mean and unbiased variance captured by a training-mode batch norm.
    pub fn batch_stats(&self, v: Var) -> Option<(&Tensor<T>, &Tensor<T>)> {
        match &self.nodes[v.0].op {
            Op::Norm { batch_stats: Some((m, var)), .. } => Some((m, var)),
            _ => None,
        }
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)?;
        let ia = kernels::broadcast_index(&sa, &out_shape);
        let ib = kernels::broadcast_index(&sb, &out_shape);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = ia
            .iter()
            .zip(&ib)
            .map(|(&i, &j)| {
                let (x, y) = (da[i], db[j]);
                match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                }
            })
            .collect();
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        self.push(name, Tensor::from_parts(out_shape, data), Op::Binary { kind, a, b }, &[a, b])
    }

    /// Elementwise sum with size-1 broadcasting (equal ranks).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).map(|v| v + c);
        self.push("add_scalar", value, Op::AddScalar(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).map(|v| v * c);
        self.push("scale", value, Op::Scale(a, c), &[a])
    }

    fn activation(&mut self, a: Var, act: Act) -> Result<Var> {
        let value = self.value(a).map(|x| match act {
            Act::Gelu => gelu(x),
            Act::Swish => x * sigmoid(x),
        });
        let name = match act {
            Act::Gelu => "gelu",
            Act::Swish => "swish",
        };
        self.push(name, value, Op::Activation(a, act), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Act::Gelu)
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Act::Swish)
    }

    // ---- linear algebra ------------------------------------------------

    /// Batched matrix product `[.., m, k] · [.., k, n]`. Batch extents must
    /// match, or one operand may be a plain matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim(format!("matmul needs rank ≥ 2, got {sa:?} · {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::dim(format!("matmul inner extents differ: {sa:?} · {sb:?} ({k} vs {k2})")));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch_shape = if ba == bb || bb.is_empty() {
            ba.to_vec()
        } else if ba.is_empty() {
            bb.to_vec()
        } else {
            return Err(Error::dim(format!("matmul batch extents incompatible: {sa:?} · {sb:?}")));
        };
        let batch: usize = batch_shape.iter().product();
        let a_stride = if ba.is_empty() { 0 } else { m * k };
        let b_stride = if bb.is_empty() { 0 } else { k * n };
        let mut out = vec![T::zero(); batch * m * n];
        kernels::batched_matmul(
            batch,
            self.value(a).data(),
            MatLayout::plain(m, k),
            a_stride,
            self.value(b).data(),
            MatLayout::plain(k, n),
            b_stride,
            &mut out,
            false,
        );
        self.macs += (batch * m * k * n) as u64;
        let mut shape = batch_shape;
        shape.extend([m, n]);
        self.push(
            "matmul",
            Tensor::from_parts(shape, out),
            Op::MatMul { a, b, batch, a_stride, b_stride, m, k, n },
            &[a, b],
        )
    }

    // ---- layout --------------------------------------------------------

    /// `out[j] = a[index[j]]`, reshaped to `shape`. Indices may repeat.
    pub fn gather(&mut self, a: Var, shape: &[usize], index: Arc<Vec<usize>>) -> Result<Var> {
        let src = self.value(a);
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::dim(format!("gather shape {shape:?} does not match {} indices", index.len())));
        }
        if index.iter().any(|&i| i >= src.len()) {
            return Err(Error::dim("gather index out of range"));
        }
        let data = index.iter().map(|&i| src.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        self.push("gather", value, Op::Gather { a, index }, &[a])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::dim(format!("{perm:?} is not a permutation of {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let index = kernels::permute_index(&shape, perm);
        self.gather(a, &out_shape, Arc::new(index))
    }

    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        if d0 >= rank || d1 >= rank {
            return Err(Error::dim(format!("transpose axes {d0},{d1} out of range for rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::cst(n as f64))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..][..inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push("sum_axis", Tensor::from_parts(out_shape, out), Op::SumAxis { a, outer, len, inner }, &[a])
    }

    /// Max-stabilized softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_masked(a, None)
    }

    /// Softmax over the last axis where entries with `keep[i] == false`
    /// receive exactly zero weight. Every row must keep at least one entry.
    pub fn softmax_masked(&mut self, a: Var, keep: Option<&[bool]>) -> Result<Var> {
        let src = self.value(a);
        let cols = *src.shape().last().unwrap_or(&0);
        if cols == 0 {
            return Err(Error::dim(format!("softmax over an empty last axis {:?}", src.shape())));
        }
        if let Some(k) = keep {
            if k.len() != src.len() {
                return Err(Error::dim("softmax mask length differs from input"));
            }
        }
        let mut out = vec![T::zero(); src.len()];
        for (r, (row, dst)) in src.data().chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let kept = |j: usize| keep.is_none_or(|k| k[r * cols + j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if kept(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::dim("softmax row has every entry masked"));
            }
            let mut total = T::zero();
            for (j, (&v, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
                if kept(j) {
                    *d = (v - max).exp();
                    total += *d;
                }
            }
            dst.iter_mut().for_each(|d| *d = *d / total);
        }
        let value = Tensor::from_parts(src.shape().to_vec(), out);
        self.push("softmax", value, Op::Softmax { a, cols }, &[a])
    }

    // ---- spatial -------------------------------------------------------

    fn dims4(&self, a: Var, op: &str) -> Result<[usize; 4]> {
        match *self.shape(a) {
            [b, c, h, w] => Ok([b, c, h, w]),
            ref s => Err(Error::dim(format!("{op} expects [b, c, h, w], got {s:?}"))),
        }
    }

    /// Block-mean pooling to `(p, q)`; extents must divide evenly.
    pub fn adaptive_avg_pool(&mut self, a: Var, p: usize, q: usize) -> Result<Var> {
        let [b, c, h, w] = self.dims4(a, "adaptive_avg_pool")?;
        if p == 0 || q == 0 || h % p != 0 || w % q != 0 {
            return Err(Error::config(format!("cannot pool {h}×{w} to {p}×{q}: extents must divide evenly")));
        }
        let (bh, bw) = (h / p, w / q);
        let inv = T::one() / T::cst((bh * bw) as f64);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); b * c * p * q];
        for plane in 0..b * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * p * q..(plane + 1) * p * q];
            for y in 0..h {
                for x in 0..w {
                    d[(y / bh) * q + x / bw] += s[y * w + x];
                }
            }
            d.iter_mut().for_each(|v| *v *= inv);
        }
        self.macs += (b * c * h * w) as u64;
        self.push("adaptive_avg_pool", Tensor::from_parts(vec![b, c, p, q], out), Op::AvgPool { a, p, q }, &[a])
    }

    /// 3×3 sliding windows with zero padding 1: `[b, c, p, q] → [b, c·9, p·q]`.
    pub fn unfold3x3(&mut self, a: Var) -> Result<Var> {
        let [b, c, p, q] = self.dims4(a, "unfold3x3")?;
        if p == 0 || q == 0 {
            return Err(Error::dim("unfold3x3 needs a non-empty grid"));
        }
        let out = kernels::unfold3x3(self.value(a).data(), b, c, p, q);
        self.push(
            "unfold3x3",
            Tensor::from_parts(vec![b, c * 9, p * q], out),
            Op::Unfold { a, dims: [b, c, p, q] },
            &[a],
        )
    }

    /// Overlap-adding inverse layout of [`Graph::unfold3x3`]:
    /// `[b, c·9, p·q] → [b, c, p, q]`.
    pub fn fold3x3(&mut self, a: Var, p: usize, q: usize) -> Result<Var> {
        let (b, rows, cols) = match *self.shape(a) {
            [b, r, l] => (b, r, l),
            ref s => return Err(Error::dim(format!("fold3x3 expects [b, c·9, p·q], got {s:?}"))),
        };
        if rows % 9 != 0 || cols != p * q || p == 0 || q == 0 {
            return Err(Error::dim(format!("fold3x3 cannot place [{b}, {rows}, {cols}] onto a {p}×{q} grid")));
        }
        let c = rows / 9;
        let out = kernels::fold3x3(self.value(a).data(), b, c, p, q);
        self.push("fold3x3", Tensor::from_parts(vec![b, c, p, q], out), Op::Fold { a, dims: [b, c, p, q] }, &[a])
    }

    /// Grouped cross-correlation. `w` is `[cout, cin / groups, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let [b, cin, h, wd] = self.dims4(x, "conv2d")?;
        let [cout, cin_g, kh, kw] = match *self.shape(w) {
            [a, b, c, d] => [a, b, c, d],
            ref s => return Err(Error::dim(format!("conv2d kernel must be rank 4, got {s:?}"))),
        };
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::dim(format!(
                "conv2d kernel {:?} incompatible with {cin} input channels in {groups} groups",
                self.shape(w)
            )));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(Error::dim(format!(
                    "conv2d bias {:?} does not match {cout} output channels",
                    self.shape(bv)
                )));
            }
        }
        let (Some(oh), Some(ow)) =
            (ConvGeom::out_extent(h, kh, stride, pad), ConvGeom::out_extent(wd, kw, stride, pad))
        else {
            return Err(Error::dim(format!(
                "conv2d geometry invalid: input {h}×{wd}, kernel {kh}×{kw}, stride {stride}, pad {pad}"
            )));
        };
        let geom = ConvGeom { cin, h, w: wd, kh, kw, stride, pad, oh, ow };
        let cout_g = cout / groups;
        let krows = cin_g * kh * kw;
        let ohw = oh * ow;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![T::zero(); b * cout * ohw];
        let mut col = vec![T::zero(); krows * ohw];
        for bi in 0..b {
            let img = &xs[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            for gi in 0..groups {
                kernels::im2col(img, &geom, gi * cin_g, cin_g, &mut col);
                let wg = &ws[gi * cout_g * krows..(gi + 1) * cout_g * krows];
                let dst = &mut out[(bi * cout + gi * cout_g) * ohw..][..cout_g * ohw];
                kernels::batched_matmul(
                    1,
                    wg,
                    MatLayout::plain(cout_g, krows),
                    0,
                    &col,
                    MatLayout::plain(krows, ohw),
                    0,
                    dst,
                    false,
                );
            }
        }
        if let Some(bv) = bias {
            let bs = self.value(bv).data();
            for bi in 0..b {
                for (co, &bval) in bs.iter().enumerate() {
                    out[(bi * cout + co) * ohw..][..ohw].iter_mut().for_each(|v| *v += bval);
                }
            }
        }
        self.macs += (b * cout * ohw * krows) as u64;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(
            "conv2d",
            Tensor::from_parts(vec![b, cout, oh, ow], out),
            Op::Conv { x, w, bias, geom, groups, cout },
            &inputs,
        )
    }

    /// 3×3 per-channel convolution, stride 1, padding 1. `kernel` is `[c, 1, 3, 3]`.
    pub fn depthwise_conv3x3(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let [_, c, _, _] = self.dims4(x, "depthwise_conv3x3")?;
        if self.shape(kernel) != [c, 1, 3, 3] {
            return Err(Error::dim(format!(
                "depthwise kernel {:?} does not match {c} input channels",
                self.shape(kernel)
            )));
        }
        self.conv2d(x, kernel, bias, 1, 1, c)
    }

    // ---- normalization -------------------------------------------------

    /// Layer norm over axis 1 of `[b, c, ..]`, or batch norm per channel over
    /// every other axis. Gain and bias are `[c]`.
    pub fn normalize(&mut self, x: Var, kind: Norm<'_, T>, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(format!("normalize expects [b, c, ..], got {shape:?}")));
        }
        let (outer, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if outer * c * inner == 0 {
            return Err(Error::dim(format!("normalize over an empty axis {shape:?}")));
        }
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::dim(format!(
                "normalization gain {:?} / bias {:?} do not match {c} channels",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let eps = T::cst(NORM_EPS);
        let xs = self.value(x).data();
        let at = |o: usize, ch: usize, i: usize| (o * c + ch) * inner + i;
        let mut xhat = vec![T::zero(); xs.len()];
        let (rstd, per_channel, trained_stats, batch_stats) = match kind {
            Norm::Layer => {
                let mut rstd = vec![T::zero(); outer * inner];
                let inv_c = T::one() / T::cst(c as f64);
                for o in 0..outer {
                    for i in 0..inner {
                        let mean = (0..c).map(|ch| xs[at(o, ch, i)]).sum::<T>() * inv_c;
                        let var = (0..c).map(|ch| (xs[at(o, ch, i)] - mean).powi(2)).sum::<T>() * inv_c;
                        let r = T::one() / (var + eps).sqrt();
                        for ch in 0..c {
                            xhat[at(o, ch, i)] = (xs[at(o, ch, i)] - mean) * r;
                        }
                        rstd[o * inner + i] = r;
                    }
                }
                (rstd, false, true, None)
            }
            Norm::BatchTrain => {
                let count = outer * inner;
                let inv_n = T::one() / T::cst(count as f64);
                let mut rstd = vec![T::zero(); c];
                let mut means = vec![T::zero(); c];
                let mut unbiased = vec![T::zero(); c];
                for ch in 0..c {
                    let vals = (0..outer).flat_map(|o| (0..inner).map(move |i| (o, i)));
                    let mean = vals.clone().map(|(o, i)| xs[at(o, ch, i)]).sum::<T>() * inv_n;
                    let ss = vals.clone().map(|(o, i)| (xs[at(o, ch, i)] - mean).powi(2)).sum::<T>();
                    let var = ss * inv_n;
                    let r = T::one() / (var + eps).sqrt();
                    for (o, i) in vals {
                        xhat[at(o, ch, i)] = (xs[at(o, ch, i)] - mean) * r;
                    }
                    rstd[ch] = r;
                    means[ch] = mean;
                    unbiased[ch] = if count > 1 { ss / T::cst((count - 1) as f64) } else { var };
                }
                let stats = (Tensor::from_parts(vec![c], means), Tensor::from_parts(vec![c], unbiased));
                (rstd, true, true, Some(stats))
            }
            Norm::BatchEval { mean, var } => {
                if mean.shape() != [c] || var.shape() != [c] {
                    return Err(Error::dim(format!(
                        "running statistics {:?}/{:?} do not match {c} channels",
                        mean.shape(),
                        var.shape()
                    )));
                }
                let rstd: Vec<T> = var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                for o in 0..outer {
                    for ch in 0..c {
                        for i in 0..inner {
                            xhat[at(o, ch, i)] = (xs[at(o, ch, i)] - mean.data()[ch]) * rstd[ch];
                        }
                    }
                }
                (rstd, true, false, None)
            }
        };
        let gs = self.value(gain).data();
        let bs = self.value(bias).data();
        let mut out = vec![T::zero(); xs.len()];
        for o in 0..outer {
            for ch in 0..c {
                for i in 0..inner {
                    let j = at(o, ch, i);
                    out[j] = xhat[j] * gs[ch] + bs[ch];
                }
            }
        }
        self.push(
            "normalize",
            Tensor::from_parts(shape, out),
            Op::Norm { x, gain, bias, per_channel, trained_stats, dims: [outer, c, inner], xhat, rstd, batch_stats },
            &[x, gain, bias],
        )
    }

    // ---- loss ----------------------------------------------------------

    /// Mean softmax cross-entropy of `[b, k]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = match *self.shape(logits) {
            [b, k] => (b, k),
            ref s => return Err(Error::dim(format!("cross_entropy expects [b, k] logits, got {s:?}"))),
        };
        if labels.len() != b || b == 0 {
            return Err(Error::dim(format!("{} labels for a batch of {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::data(0, format!("label {bad} out of range for {k} classes")));
        }
        let xs = self.value(logits).data();
        let mut probs = vec![T::zero(); b * k];
        let mut loss = T::zero();
        for (r, (row, pr)) in xs.chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - row[labels[r]];
            for (p, &v) in pr.iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let loss = loss / T::cst(b as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        )
    }

    // ---- reverse pass --------------------------------------------------

    /// Reverse-mode gradients of a scalar `loss` with respect to every
    /// gradient-carrying value it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let by_index = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|data| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), data)))
            .collect();
        Ok(Gradients { grads: by_index, params: self.params.clone() })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, delta: Vec<T>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += *d),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let out_shape = node.value.shape();
                let va = self.value(*a);
                let vb = self.value(*b);
                let ia = kernels::broadcast_index(va.shape(), out_shape);
                let ib = kernels::broadcast_index(vb.shape(), out_shape);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); va.len()];
                    for ((&i, &j), &gv) in ia.iter().zip(&ib).zip(g) {
                        da[i] += match kind {
                            BinKind::Add | BinKind::Sub => gv,
                            BinKind::Mul => gv * vb.data()[j],
                            BinKind::Div => gv / vb.data()[j],
                        };
                    }
                    acc(*a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); vb.len()];
                    for ((&i, &j), &gv) in ia.iter().zip(&ib).zip(g) {
                        db[j] += match kind {
                            BinKind::Add => gv,
                            BinKind::Sub => -gv,
                            BinKind::Mul => gv * va.data()[i],
                            BinKind::Div => {
                                let y = vb.data()[j];
                                -gv * va.data()[i] / (y * y)
                            }
                        };
                    }
                    acc(*b, db);
                }
            }
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::Scale(a, c) => acc(*a, g.iter().map(|&v| v * *c).collect()),
            Op::Activation(a, act) => {
                let xs = self.value(*a).data();
                let d = xs
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| {
                        gv * match act {
                            Act::Gelu => gelu_grad(x),
                            Act::Swish => {
                                let s = sigmoid(x);
                                s + x * s * (T::one() - s)
                            }
                        }
                    })
                    .collect();
                acc(*a, d);
            }
            &Op::MatMul { a, b, batch, a_stride, b_stride, m, k, n } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.needs(a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![T::zero(); va.len()];
                    for i in 0..batch {
                        let dst = if a_stride == 0 { 0 } else { i * m * k };
                        kernels::batched_matmul(
                            1,
                            &g[i * m * n..(i + 1) * m * n],
                            MatLayout::plain(m, n),
                            0,
                            &vb[i * b_stride..i * b_stride + k * n],
                            MatLayout::t(n, k),
                            0,
                            &mut da[dst..dst + m * k],
                            true,
                        );
                    }
                    acc(a, da);
                }
                if self.needs(b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![T::zero(); vb.len()];
                    for i in 0..batch {
                        let dst = if b_stride == 0 { 0 } else { i * k * n };
                        kernels::batched_matmul(
                            1,
                            &va[i * a_stride..i * a_stride + m * k],
                            MatLayout::t(k, m),
                            0,
                            &g[i * m * n..(i + 1) * m * n],
                            MatLayout::plain(m, n),
                            0,
                            &mut db[dst..dst + k * n],
                            true,
                        );
                    }
                    acc(b, db);
                }
            }
            Op::Gather { a, index } => {
                let mut da = vec![T::zero(); self.value(*a).len()];
                for (&i, &gv) in index.iter().zip(g) {
                    da[i] += gv;
                }
                acc(*a, da);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::SumAll(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
            &Op::SumAxis { a, outer, len, inner } => {
                let mut da = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        da[(o * len + l) * inner..][..inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                acc(a, da);
            }
            &Op::Softmax { a, cols } => {
                let y = node.value.data();
                let mut da = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(da.chunks_mut(cols)) {
                    let dot: T = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                acc(a, da);
            }
            &Op::AvgPool { a, p, q } => {
                let shape = self.shape(a);
                let (h, w) = (shape[2], shape[3]);
                let planes = shape[0] * shape[1];
                let (bh, bw) = (h / p, w / q);
                let inv = T::one() / T::cst((bh * bw) as f64);
                let mut da = vec![T::zero(); planes * h * w];
                for plane in 0..planes {
                    for y in 0..h {
                        for x in 0..w {
                            da[plane * h * w + y * w + x] = g[plane * p * q + (y / bh) * q + x / bw] * inv;
                        }
                    }
                }
                acc(a, da);
            }
            &Op::Unfold { a, dims: [b, c, p, q] } => acc(a, kernels::fold3x3(g, b, c, p, q)),
            &Op::Fold { a, dims: [b, c, p, q] } => acc(a, kernels::unfold3x3(g, b, c, p, q)),
            &Op::Conv { x, w, bias, geom, groups, cout } => {
                let b = node.value.shape()[0];
                let cin_g = geom.cin / groups;
                let cout_g = cout / groups;
                let krows = cin_g * geom.kh * geom.kw;
                let ohw = geom.oh * geom.ow;
                let img_len = geom.cin * geom.h * geom.w;
                let xs = self.value(x).data();
                let ws = self.value(w).data();
                let mut col = vec![T::zero(); krows * ohw];
                let mut dcol = vec![T::zero(); krows * ohw];
                let mut dx = self.needs(x).then(|| vec![T::zero(); xs.len()]);
                let mut dw = self.needs(w).then(|| vec![T::zero(); ws.len()]);
                for bi in 0..b {
                    for gi in 0..groups {
                        let gout = &g[(bi * cout + gi * cout_g) * ohw..][..cout_g * ohw];
                        if let Some(dw) = dw.as_mut() {
                            kernels::im2col(&xs[bi * img_len..(bi + 1) * img_len], &geom, gi * cin_g, cin_g, &mut col);
                            kernels::batched_matmul(
                                1,
                                gout,
                                MatLayout::plain(cout_g, ohw),
                                0,
                                &col,
                                MatLayout::t(ohw, krows),
                                0,
                                &mut dw[gi * cout_g * krows..(gi + 1) * cout_g * krows],
                                true,
                            );
                        }
                        if let Some(dx) = dx.as_mut() {
                            kernels::batched_matmul(
                                1,
                                &ws[gi * cout_g * krows..(gi + 1) * cout_g * krows],
                                MatLayout::t(krows, cout_g),
                                0,
                                gout,
                                MatLayout::plain(cout_g, ohw),
                                0,
                                &mut dcol,
                                false,
                            );
                            kernels::col2im(&dcol, &geom, gi * cin_g, cin_g, &mut dx[bi * img_len..(bi + 1) * img_len]);
                        }
                    }
                }
                if let Some(dx) = dx {
                    acc(x, dx);
                }
                if let Some(dw) = dw {
                    acc(w, dw);
                }
                if let Some(bv) = bias.filter(|&bv| self.needs(bv)) {
                    let mut db = vec![T::zero(); cout];
                    for bi in 0..b {
                        for (co, d) in db.iter_mut().enumerate() {
                            *d += g[(bi * cout + co) * ohw..][..ohw].iter().copied().sum::<T>();
                        }
                    }
                    acc(bv, db);
                }
            }
            Op::Norm { x, gain, bias, per_channel, trained_stats, dims: [outer, c, inner], xhat, rstd, .. } => {
                let (outer, c, inner) = (*outer, *c, *inner);
                let at = |o: usize, ch: usize, i: usize| (o * c + ch) * inner + i;
                let gs = self.value(*gain).data();
                if self.needs(*gain) || self.needs(*bias) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for o in 0..outer {
                        for ch in 0..c {
                            for i in 0..inner {
                                let j = at(o, ch, i);
                                dg[ch] += g[j] * xhat[j];
                                db[ch] += g[j];
                            }
                        }
                    }
                    if self.needs(*gain) {
                        acc(*gain, dg);
                    }
                    if self.needs(*bias) {
                        acc(*bias, db);
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    if !*trained_stats {
                        for o in 0..outer {
                            for ch in 0..c {
                                for i in 0..inner {
                                    let j = at(o, ch, i);
                                    dx[j] = g[j] * gs[ch] * rstd[ch];
                                }
                            }
                        }
                    } else if *per_channel {
                        let n = T::cst((outer * inner) as f64);
                        for ch in 0..c {
                            let idx = || (0..outer).flat_map(move |o| (0..inner).map(move |i| at(o, ch, i)));
                            let mean_d = idx().map(|j| g[j] * gs[ch]).sum::<T>() / n;
                            let mean_dx = idx().map(|j| g[j] * gs[ch] * xhat[j]).sum::<T>() / n;
                            for j in idx() {
                                dx[j] = rstd[ch] * (g[j] * gs[ch] - mean_d - xhat[j] * mean_dx);
                            }
                        }
                    } else {
                        let n = T::cst(c as f64);
                        for o in 0..outer {
                            for i in 0..inner {
                                let mean_d = (0..c).map(|ch| g[at(o, ch, i)] * gs[ch]).sum::<T>() / n;
                                let mean_dx =
                                    (0..c).map(|ch| g[at(o, ch, i)] * gs[ch] * xhat[at(o, ch, i)]).sum::<T>() / n;
                                let r = rstd[o * inner + i];
                                for ch in 0..c {
                                    let j = at(o, ch, i);
                                    dx[j] = r * (g[j] * gs[ch] - mean_d - xhat[j] * mean_dx);
                                }
                            }
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / T::cst(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] -= scale;
                }
                acc(*logits, d);
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_C: f64 = 0.044_715;

/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::cst(0.5);
    let u = T::cst(GELU_K) * (x + T::cst(GELU_C) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::cst(0.5);
    let k = T::cst(GELU_K);
    let c = T::cst(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::cst(3.0) * c * x * x)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a named parameter registered with [`Graph::param`].
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|&v| self.get(v))
    }
}
