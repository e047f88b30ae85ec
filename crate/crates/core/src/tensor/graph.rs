//! Tape-based reverse-mode autodiff.
//!
//! Every op appends a node holding its output value and the ids of its inputs. Node ids are
//! therefore a topological order, and `backward` is a single reverse sweep. A graph lives for
//! one forward/backward pass; parameters are copied in as leaves and their gradients are
//! folded back into the [`ParamStore`] with [`Graph::accumulate_into`].

use std::rc::Rc;

use super::conv::{col2im, conv_out_dim, gemm, im2col, ConvGeom, Trans};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    MatMulNT {
        a: NodeId,
        b: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: NodeId,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    Sigmoid(NodeId),
    Gather {
        x: NodeId,
        map: Rc<[usize]>,
    },
    ConcatCols(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    Upsample2x(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    WeightedSum {
        x: NodeId,
        weights: Rc<[f64]>,
    },
    MeanAbsDiff(NodeId, NodeId),
    BceWithLogits {
        x: NodeId,
        targets: Rc<[f64]>,
        weights: Rc<[f64]>,
    },
    SmoothL1 {
        x: NodeId,
        targets: Rc<[f64]>,
        weights: Rc<[f64]>,
        beta: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]) {
    match &mut grads[id.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

fn acc_owned(grads: &mut [Option<Vec<f64>>], id: NodeId, delta: Vec<f64>) {
    match &mut grads[id.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        value.debug_assert_finite("graph op");
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Copies a parameter in as a leaf whose gradient flows back to the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let node = self.push(store.value(id).clone(), Op::Leaf);
        self.nodes[node.0].param = Some(id);
        node
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (n, c, h, wd) = self.value(x).dims4("conv2d")?;
        let (o, ci, kh, kw) = self.value(w).dims4("conv2d")?;
        if ci != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, weight expects {ci}"),
            ));
        }
        let geom = conv_geom("conv2d", c, h, wd, kh, kw, stride, pad)?;
        check_bias("conv2d", self, b, o)?;
        let out_hw = geom.col_cols();
        let mut out = vec![0.0; n * o * out_hw];
        let mut cols = vec![0.0; geom.col_rows() * out_hw];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for img in 0..n {
            im2col(
                &xv[img * c * h * wd..(img + 1) * c * h * wd],
                &geom,
                &mut cols,
            );
            let dst = &mut out[img * o * out_hw..(img + 1) * o * out_hw];
            gemm(
                o,
                geom.col_rows(),
                out_hw,
                1.0,
                wv,
                Trans::N,
                &cols,
                Trans::N,
                0.0,
                dst,
            );
            if let Some(b) = b {
                add_channel_bias(dst, self.value(b).data(), out_hw);
            }
        }
        let value = Tensor::new(vec![n, o, geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    /// Transposed convolution. `w` has the layout of the conv2d it transposes:
    /// `(in_channels, out_channels, kh, kw)`; output dims are `(H-1)*stride - 2*pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (n, ci, h, wd) = self.value(x).dims4("conv_transpose2d")?;
        let (wi, co, kh, kw) = self.value(w).dims4("conv_transpose2d")?;
        if wi != ci {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input has {ci} channels, weight expects {wi}"),
            ));
        }
        let geom = transpose_geom(co, h, wd, kh, kw, stride, pad)?;
        check_bias("conv_transpose2d", self, b, co)?;
        let (oh, ow) = (geom.height, geom.width);
        let mut out = vec![0.0; n * co * oh * ow];
        let mut cols = vec![0.0; geom.col_rows() * geom.col_cols()];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for img in 0..n {
            let xs = &xv[img * ci * h * wd..(img + 1) * ci * h * wd];
            gemm(
                geom.col_rows(),
                ci,
                h * wd,
                1.0,
                wv,
                Trans::T,
                xs,
                Trans::N,
                0.0,
                &mut cols,
            );
            let dst = &mut out[img * co * oh * ow..(img + 1) * co * oh * ow];
            col2im(&cols, &geom, dst);
            if let Some(b) = b {
                add_channel_bias(dst, self.value(b).data(), oh * ow);
            }
        }
        let value = Tensor::new(vec![n, co, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    /// `y[t] = W x[t] + b` with `x: (T, D_in)`, `W: (D_out, D_in)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (t, din) = self.value(x).dims2("linear")?;
        let (dout, wdin) = self.value(w).dims2("linear")?;
        if din != wdin {
            return Err(Error::shape(
                "linear",
                format!("input dim {din} does not match weight dim {wdin}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [dout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias shape {:?}, expected [{dout}]", self.value(b).shape()),
                ));
            }
        }
        let mut out = vec![0.0; t * dout];
        gemm(
            t,
            din,
            dout,
            1.0,
            self.value(x).data(),
            Trans::N,
            self.value(w).data(),
            Trans::T,
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (v, bb) in row.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
        }
        let value = Tensor::new(vec![t, dout], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// `a (M,K) · b (K,N)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            Trans::N,
            self.value(b).data(),
            Trans::N,
            0.0,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    /// `a (M,K) · bᵀ` for `b (N,K)`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2("matmul_nt")?;
        let (n, k2) = self.value(b).dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            Trans::N,
            self.value(b).data(),
            Trans::T,
            0.0,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMulNT { a, b }))
    }

    /// Normalizes each row of `x: (T, D)` to zero mean and unit (population) variance,
    /// then applies `gamma * xhat + beta`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (t, d) = self.value(x).dims2("layer_norm")?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).shape() != [d] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} shape {:?}, expected [{d}]", self.value(p).shape()),
                ));
            }
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; t * d];
        let mut inv_std = vec![0.0; t];
        let mut out = vec![0.0; t * d];
        for r in 0..t {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                xhat[r * d + j] = xh;
                out[r * d + j] = gv[j] * xh + bv[j];
            }
        }
        let value = Tensor::new(vec![t, d], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Softmax along `axis`, stabilized by subtracting the max.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len)
                    .map(|k| xv[at(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (xv[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.same_shape(op_name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    /// `out[i] = x[map[i]]`. Gradients scatter-add back through the map.
    pub fn gather(&mut self, x: NodeId, map: Rc<[usize]>, shape: Vec<usize>) -> Result<NodeId> {
        let n = self.value(x).numel();
        if let Some(&bad) = map.iter().find(|&&i| i >= n) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range {n}"),
            ));
        }
        let value = self.value(x).gather(&map, shape)?;
        Ok(self.push(value, Op::Gather { x, map }))
    }

    /// Concatenates rank-2 tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (rows, _) = self.value(*first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts {rows} vs {r}"),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows `start..start+len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(x).dims2("slice_rows")?;
        if len == 0 || start + len > rows {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} out of {rows}", start + len),
            ));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(vec![len, cols], data)?;
        Ok(self.push(value, Op::SliceRows { x, start }))
    }

    /// Nearest-neighbour 2x spatial upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4("upsample2x")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * 4 * h * w];
        for plane in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(plane * 2 * h + y) * 2 * w + xx] = xv[(plane * h + y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2x(x)))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / v.numel() as f64);
        self.push(value, Op::Mean(x))
    }

    /// `Σ weights ⊙ x`.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Rc<[f64]>) -> Result<NodeId> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::shape(
                "weighted_sum",
                format!(
                    "{} weights for {} values",
                    weights.len(),
                    self.value(x).numel()
                ),
            ));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.iter())
            .map(|(a, b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }))
    }

    /// Mean absolute difference; the gradient of `|0|` is taken as 0.
    pub fn mean_abs_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mean_abs_diff", a, b)?;
        let n = self.value(a).numel() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::MeanAbsDiff(a, b)))
    }

    /// `Σ w · bce(sigmoid(x), t)` evaluated in the overflow-safe logit form.
    pub fn bce_with_logits(
        &mut self,
        x: NodeId,
        targets: Rc<[f64]>,
        weights: Rc<[f64]>,
    ) -> Result<NodeId> {
        let n = self.value(x).numel();
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape(
                "bce_with_logits",
                "targets/weights length mismatch",
            ));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(targets.iter().zip(weights.iter()))
            .map(|(&l, (&t, &w))| if w == 0.0 { 0.0 } else { w * bce_logit(l, t) })
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::BceWithLogits {
                x,
                targets,
                weights,
            },
        ))
    }

    /// `Σ w · smooth_l1(x - t; beta)`.
    pub fn smooth_l1(
        &mut self,
        x: NodeId,
        targets: Rc<[f64]>,
        weights: Rc<[f64]>,
        beta: f64,
    ) -> Result<NodeId> {
        let n = self.value(x).numel();
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape("smooth_l1", "targets/weights length mismatch"));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(targets.iter().zip(weights.iter()))
            .map(|(&v, (&t, &w))| {
                if w == 0.0 {
                    0.0
                } else {
                    w * smooth_l1(v - t, beta)
                }
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::SmoothL1 {
                x,
                targets,
                weights,
                beta,
            },
        ))
    }

    /// Reverse sweep from a scalar node. Leaf gradients stay available through
    /// [`Graph::grad`] and [`Graph::accumulate_into`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads)?;
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter leaf's gradient into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Some(pid), Some(g)) = (node.param, grad) {
                store.accumulate_grad(pid, g);
            }
        }
    }

    fn backward_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (n, c, h, wd) = self.value(x).dims4("conv2d")?;
                let (o, _, kh, kw) = self.value(w).dims4("conv2d")?;
                let geom = conv_geom("conv2d", c, h, wd, kh, kw, stride, pad)?;
                let out_hw = geom.col_cols();
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let mut dw = vec![0.0; wv.len()];
                let mut dx = vec![0.0; xv.len()];
                let mut cols = vec![0.0; geom.col_rows() * out_hw];
                for img in 0..n {
                    let gslice = &gy[img * o * out_hw..(img + 1) * o * out_hw];
                    im2col(
                        &xv[img * c * h * wd..(img + 1) * c * h * wd],
                        &geom,
                        &mut cols,
                    );
                    gemm(
                        o,
                        out_hw,
                        geom.col_rows(),
                        1.0,
                        gslice,
                        Trans::N,
                        &cols,
                        Trans::T,
                        1.0,
                        &mut dw,
                    );
                    gemm(
                        geom.col_rows(),
                        o,
                        out_hw,
                        1.0,
                        wv,
                        Trans::T,
                        gslice,
                        Trans::N,
                        0.0,
                        &mut cols,
                    );
                    col2im(
                        &cols,
                        &geom,
                        &mut dx[img * c * h * wd..(img + 1) * c * h * wd],
                    );
                }
                if let Some(b) = b {
                    acc_owned(grads, b, channel_sums(gy, n, o, out_hw));
                }
                acc_owned(grads, w, dw);
                acc_owned(grads, x, dx);
            }
            &Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (n, ci, h, wd) = self.value(x).dims4("conv_transpose2d")?;
                let (_, co, kh, kw) = self.value(w).dims4("conv_transpose2d")?;
                let geom = transpose_geom(co, h, wd, kh, kw, stride, pad)?;
                let out_plane = co * geom.height * geom.width;
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let mut dw = vec![0.0; wv.len()];
                let mut dx = vec![0.0; xv.len()];
                let mut cols = vec![0.0; geom.col_rows() * geom.col_cols()];
                for img in 0..n {
                    im2col(
                        &gy[img * out_plane..(img + 1) * out_plane],
                        &geom,
                        &mut cols,
                    );
                    let xs = &xv[img * ci * h * wd..(img + 1) * ci * h * wd];
                    gemm(
                        ci,
                        geom.col_rows(),
                        h * wd,
                        1.0,
                        wv,
                        Trans::N,
                        &cols,
                        Trans::N,
                        0.0,
                        &mut dx[img * ci * h * wd..(img + 1) * ci * h * wd],
                    );
                    gemm(
                        ci,
                        h * wd,
                        geom.col_rows(),
                        1.0,
                        xs,
                        Trans::N,
                        &cols,
                        Trans::T,
                        1.0,
                        &mut dw,
                    );
                }
                if let Some(b) = b {
                    acc_owned(grads, b, channel_sums(gy, n, co, geom.height * geom.width));
                }
                acc_owned(grads, w, dw);
                acc_owned(grads, x, dx);
            }
            &Op::Linear { x, w, b } => {
                let (t, din) = self.value(x).dims2("linear")?;
                let (dout, _) = self.value(w).dims2("linear")?;
                let mut dx = vec![0.0; t * din];
                gemm(
                    t,
                    dout,
                    din,
                    1.0,
                    gy,
                    Trans::N,
                    self.value(w).data(),
                    Trans::N,
                    0.0,
                    &mut dx,
                );
                let mut dw = vec![0.0; dout * din];
                gemm(
                    dout,
                    t,
                    din,
                    1.0,
                    gy,
                    Trans::T,
                    self.value(x).data(),
                    Trans::N,
                    0.0,
                    &mut dw,
                );
                if let Some(b) = b {
                    let mut db = vec![0.0; dout];
                    for row in gy.chunks(dout) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    acc_owned(grads, b, db);
                }
                acc_owned(grads, w, dw);
                acc_owned(grads, x, dx);
            }
            &Op::MatMul { a, b } => {
                let (m, k) = self.value(a).dims2("matmul")?;
                let (_, n) = self.value(b).dims2("matmul")?;
                let mut da = vec![0.0; m * k];
                gemm(
                    m,
                    n,
                    k,
                    1.0,
                    gy,
                    Trans::N,
                    self.value(b).data(),
                    Trans::T,
                    0.0,
                    &mut da,
                );
                let mut db = vec![0.0; k * n];
                gemm(
                    k,
                    m,
                    n,
                    1.0,
                    self.value(a).data(),
                    Trans::T,
                    gy,
                    Trans::N,
                    0.0,
                    &mut db,
                );
                acc_owned(grads, a, da);
                acc_owned(grads, b, db);
            }
            &Op::MatMulNT { a, b } => {
                let (m, k) = self.value(a).dims2("matmul_nt")?;
                let (n, _) = self.value(b).dims2("matmul_nt")?;
                let mut da = vec![0.0; m * k];
                gemm(
                    m,
                    n,
                    k,
                    1.0,
                    gy,
                    Trans::N,
                    self.value(b).data(),
                    Trans::N,
                    0.0,
                    &mut da,
                );
                let mut db = vec![0.0; n * k];
                gemm(
                    n,
                    m,
                    k,
                    1.0,
                    gy,
                    Trans::T,
                    self.value(a).data(),
                    Trans::N,
                    0.0,
                    &mut db,
                );
                acc_owned(grads, a, da);
                acc_owned(grads, b, db);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (t, d) = self.value(*x).dims2("layer_norm")?;
                let gv = self.value(*gamma).data();
                let mut dx = vec![0.0; t * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..t {
                    let gr = &gy[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut sum = 0.0;
                    let mut sum_x = 0.0;
                    for j in 0..d {
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gv[j];
                        sum += dxhat[j];
                        sum_x += dxhat[j] * xr[j];
                    }
                    let k = inv_std[r] / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = k * (d as f64 * dxhat[j] - sum - xr[j] * sum_x);
                    }
                }
                acc_owned(grads, *x, dx);
                acc_owned(grads, *gamma, dgamma);
                acc_owned(grads, *beta, dbeta);
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| gy[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = y[at(k)] * (gy[at(k)] - dot);
                        }
                    }
                }
                acc_owned(grads, x, dx);
            }
            &Op::Add(a, b) => {
                acc(grads, a, gy);
                acc(grads, b, gy);
            }
            &Op::Sub(a, b) => {
                acc(grads, a, gy);
                acc_owned(grads, b, gy.iter().map(|g| -g).collect());
            }
            &Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                acc_owned(grads, a, gy.iter().zip(bv).map(|(g, v)| g * v).collect());
                acc_owned(grads, b, gy.iter().zip(av).map(|(g, v)| g * v).collect());
            }
            &Op::Scale(x, f) => acc_owned(grads, x, gy.iter().map(|g| g * f).collect()),
            &Op::LeakyRelu { x, slope } => {
                let xv = self.value(x).data();
                let dx = gy
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| if v > 0.0 { *g } else { g * slope })
                    .collect();
                acc_owned(grads, x, dx);
            }
            &Op::Sigmoid(x) => {
                acc_owned(
                    grads,
                    x,
                    gy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect(),
                );
            }
            Op::Gather { x, map } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (g, &src) in gy.iter().zip(map.iter()) {
                    dx[src] += g;
                }
                acc_owned(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2("concat_cols")?;
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2("concat_cols")?;
                    let mut dp = vec![0.0; rows * w];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&gy[r * total + offset..r * total + offset + w]);
                    }
                    acc_owned(grads, p, dp);
                    offset += w;
                }
            }
            &Op::SliceRows { x, start } => {
                let (_, cols) = self.value(x).dims2("slice_rows")?;
                let mut dx = vec![0.0; self.value(x).numel()];
                dx[start * cols..start * cols + gy.len()].copy_from_slice(gy);
                acc_owned(grads, x, dx);
            }
            &Op::Upsample2x(x) => {
                let (n, c, h, w) = self.value(x).dims4("upsample2x")?;
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(plane * h + yy / 2) * w + xx / 2] +=
                                gy[(plane * 2 * h + yy) * 2 * w + xx];
                        }
                    }
                }
                acc_owned(grads, x, dx);
            }
            &Op::Sum(x) => acc_owned(grads, x, vec![gy[0]; self.value(x).numel()]),
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                acc_owned(grads, x, vec![gy[0] / n as f64; n]);
            }
            Op::WeightedSum { x, weights } => {
                acc_owned(grads, *x, weights.iter().map(|w| w * gy[0]).collect());
            }
            &Op::MeanAbsDiff(a, b) => {
                let n = self.value(a).numel() as f64;
                let da: Vec<f64> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(x, y)| gy[0] * sign(x - y) / n)
                    .collect();
                let db = da.iter().map(|v| -v).collect();
                acc_owned(grads, a, da);
                acc_owned(grads, b, db);
            }
            Op::BceWithLogits {
                x,
                targets,
                weights,
            } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(targets.iter().zip(weights.iter()))
                    .map(|(&l, (&t, &w))| gy[0] * w * (sigmoid(l) - t))
                    .collect();
                acc_owned(grads, *x, dx);
            }
            Op::SmoothL1 {
                x,
                targets,
                weights,
                beta,
            } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(targets.iter().zip(weights.iter()))
                    .map(|(&v, (&t, &w))| {
                        let d = v - t;
                        let g = if d.abs() < *beta { d / beta } else { sign(d) };
                        gy[0] * w * g
                    })
                    .collect();
                acc_owned(grads, *x, dx);
            }
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn bce_logit(l: f64, t: f64) -> f64 {
    l.max(0.0) - l * t + (-l.abs()).exp().ln_1p()
}

fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_geom(
    op: &'static str,
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let out = conv_out_dim(height, kh, stride, pad).zip(conv_out_dim(width, kw, stride, pad));
    let Some((out_h, out_w)) = out else {
        return Err(Error::shape(
            op,
            format!(
                "kernel {kh}x{kw} (stride {stride}, pad {pad}) does not fit input {height}x{width}"
            ),
        ));
    };
    Ok(ConvGeom {
        channels,
        height,
        width,
        kh,
        kw,
        stride,
        pad,
        out_h,
        out_w,
    })
}

/// Geometry of the conv2d whose input-gradient a transposed conv computes: the conv's input is
/// the transposed conv's output.
fn transpose_geom(
    out_channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    if stride == 0 {
        return Err(Error::shape("conv_transpose2d", "stride must be >= 1"));
    }
    let oh = ((h - 1) * stride + kh).checked_sub(2 * pad);
    let ow = ((w - 1) * stride + kw).checked_sub(2 * pad);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => {
            let g = conv_geom(
                "conv_transpose2d",
                out_channels,
                oh,
                ow,
                kh,
                kw,
                stride,
                pad,
            )?;
            debug_assert_eq!((g.out_h, g.out_w), (h, w));
            Ok(g)
        }
        _ => Err(Error::shape(
            "conv_transpose2d",
            format!("padding {pad} too large for input {h}x{w} with kernel {kh}x{kw}"),
        )),
    }
}

fn check_bias(op: &'static str, g: &Graph, b: Option<NodeId>, channels: usize) -> Result<()> {
    if let Some(b) = b {
        if g.value(b).shape() != [channels] {
            return Err(Error::shape(
                op,
                format!("bias shape {:?}, expected [{channels}]", g.value(b).shape()),
            ));
        }
    }
    Ok(())
}

fn add_channel_bias(dst: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, b) in dst.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

fn channel_sums(gy: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for img in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let start = (img * c + ch) * plane;
            *o += gy[start..start + plane].iter().sum::<f64>();
        }
    }
    out
}
