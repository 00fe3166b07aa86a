//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every forward call records one node (value + recipe). `backward` walks the
//! tape in reverse, accumulating gradients into per-node buffers in a fixed
//! serial order, so replaying an identical tape gives bit-identical gradients.
//! Tensors are immutable once recorded; a tape is owned by a single
//! training/evaluation step and dropped afterwards.
//!
//! Matrix products (including the im2col-lowered convolutions) run on
//! `matrixmultiply::dgemm`, whose blocking is fixed for fixed dimensions, so
//! determinism is preserved.

use std::collections::HashMap;
use std::sync::Once;

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tensor};

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Index of a recorded tensor on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId, alpha: f64 },
    Transpose { x: TensorId },
    Softmax { x: TensorId, axis: usize },
    Conv2d { x: TensorId, w: TensorId, bias: Option<TensorId>, stride: usize, pad: usize, groups: usize },
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, factor: f64 },
    AddRowBias { x: TensorId, bias: TensorId },
    Silu { x: TensorId },
    GroupNorm { x: TensorId, groups: usize },
    Concat { parts: Vec<TensorId>, axis: usize },
    Narrow { x: TensorId, axis: usize, start: usize, len: usize },
    Reshape { x: TensorId },
    UpsampleNearest2x { x: TensorId },
    AvgPool2x { x: TensorId },
    Sum { x: TensorId },
    Mse { a: TensorId, b: TensorId },
    AffineChannels { x: TensorId, scale: TensorId, shift: TensorId },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound_params: HashMap<String, TensorId>,
    param_order: Vec<(String, TensorId)>,
}

fn row_major_matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::Dimension(format!(
            "matmul expects [m,k] x [k,n], got {a:?} x {b:?}"
        )));
    }
    Ok((a[0], a[1], b[1]))
}

/// C[m,n] = alpha * A @ B + beta * C with explicit strides for A and B; C is
/// always row-major [m, n].
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Decompose `shape` around `axis` into (outer, axis_len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::Dimension(format!(
            "conv kernel {kernel} exceeds padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

static ALLOC_TUNE: Once = Once::new();

/// Large score matrices churn through allocations every step; keeping them
/// on the heap instead of per-call mmap regions saves page-fault traffic.
fn tune_allocator() {
    ALLOC_TUNE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 256 * 1024 * 1024);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 256 * 1024 * 1024);
        }
    });
}

impl Tape {
    pub fn new() -> Self {
        tune_allocator();
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn tensor(&self, id: TensorId) -> Tensor {
        Tensor::from_vec(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
    }

    /// Gradient of the last `backward` w.r.t. this node; zeros if the node
    /// is not reachable from the loss.
    pub fn grad(&self, id: TensorId) -> Vec<f64> {
        match self.grads.get(id.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[id.0].data.len()],
        }
    }

    /// Record a leaf holding a constant (no gradient tracked).
    pub fn constant(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    /// Record a leaf whose gradient will be available after `backward`.
    pub fn input(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true)
    }

    /// Bind a named parameter. Repeated binds of the same name return the
    /// same node so gradient contributions from every use accumulate.
    pub fn param(&mut self, p: &Parameter) -> TensorId {
        if let Some(&id) = self.bound_params.get(&p.name) {
            return id;
        }
        let id = self.push(p.tensor.shape.clone(), p.tensor.data.clone(), Op::Leaf, true);
        self.bound_params.insert(p.name.clone(), id);
        self.param_order.push((p.name.clone(), id));
        id
    }

    /// Gradients of all bound parameters after `backward`, in bind order.
    /// Parameters that never reached the loss report zeros.
    pub fn param_grads(&self) -> Vec<(String, Vec<f64>)> {
        self.param_order
            .iter()
            .map(|(name, id)| (name.clone(), self.grad(*id)))
            .collect()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Forward operations ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.matmul_scaled(a, b, 1.0)
    }

    /// `alpha * (A @ B)` in one pass; attention folds its 1/sqrt(d) here.
    pub fn matmul_scaled(&mut self, a: TensorId, b: TensorId, alpha: f64) -> Result<TensorId> {
        let (m, k, n) = row_major_matmul_dims(self.shape(a), self.shape(b))?;
        // dgemm with beta = 0 overwrites every output cell, so the buffer
        // can start uninitialized.
        let mut out = Vec::with_capacity(m * n);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                self.value(a).as_ptr(),
                k as isize,
                1,
                self.value(b).as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
            out.set_len(m * n);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b, alpha }, needs))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x);
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "transpose expects a 2-d tensor, got {shape:?}"
            )));
        }
        let (m, n) = (shape[0], shape[1]);
        let src = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![n, m], out, Op::Transpose { x }, needs))
    }

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        if len == 0 {
            return Err(Error::Dimension("softmax along an empty axis".into()));
        }
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..len {
                    max = max.max(src[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (src[base + l * inner] - max).exp();
                    out[base + l * inner] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                for l in 0..len {
                    out[base + l * inner] *= inv;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "mul shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(shape, out, Op::Scale { x, factor }, needs)
    }

    /// `x[m,n] + bias[n]`, broadcast over rows.
    pub fn add_row_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || bs != [xs[1]] {
            return Err(Error::Dimension(format!(
                "add_row_bias expects [m,n] + [n], got {xs:?} + {bs:?}"
            )));
        }
        let (m, n) = (xs[0], xs[1]);
        let bv = self.value(bias).to_vec();
        let mut out = self.value(x).to_vec();
        for r in 0..m {
            for c in 0..n {
                out[r * n + c] += bv[c];
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(xs, out, Op::AddRowBias { x, bias }, needs))
    }

    pub fn silu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(shape, out, Op::Silu { x }, needs)
    }

    /// Group normalization over `[b, c, h, w]` without a learned affine.
    pub fn group_norm(&mut self, x: TensorId, groups: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "group_norm expects [b,c,h,w], got {shape:?}"
            )));
        }
        let (b, c) = (shape[0], shape[1]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm groups {groups} must divide channels {c}"
            )));
        }
        let group_len = (c / groups) * shape[2] * shape[3];
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for g in 0..groups {
                let base = bi * c * shape[2] * shape[3] + g * group_len;
                let slice = &src[base..base + group_len];
                let mean = slice.iter().sum::<f64>() / group_len as f64;
                let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / group_len as f64;
                let inv_std = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                for (o, &v) in out[base..base + group_len].iter_mut().zip(slice) {
                    *o = (v - mean) * inv_std;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(shape, out, Op::GroupNorm { x, groups }, needs))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Dimension(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::Dimension(format!(
                    "concat shapes incompatible: {first:?} vs {s:?} along axis {axis}"
                )));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &p in parts {
            let len = self.shape(p)[axis];
            let src = self.value(p);
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * len * inner;
                out[dst_base..dst_base + len * inner]
                    .copy_from_slice(&src[src_base..src_base + len * inner]);
            }
            offset += len;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Dimension(format!(
                "narrow [{start}, {start}+{len}) along axis {axis} invalid for {shape:?}"
            )));
        }
        let (outer, axis_len, inner) = axis_split(&shape, axis);
        let src = self.value(x);
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_base = (o * axis_len + start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let needs = self.needs(x);
        Ok(self.push(new_shape, out, Op::Narrow { x, axis, start, len }, needs))
    }

    /// Split along `axis` into consecutive chunks of the given sizes.
    pub fn split(&mut self, x: TensorId, axis: usize, sizes: &[usize]) -> Result<Vec<TensorId>> {
        let total: usize = sizes.iter().sum();
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || total != shape[axis] {
            return Err(Error::Dimension(format!(
                "split sizes {sizes:?} do not cover axis {axis} of {shape:?}"
            )));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            out.push(self.narrow(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: TensorId, new_shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.value(x).len() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {new_shape:?} changes element count",
                self.shape(x)
            )));
        }
        let data = self.value(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(new_shape, data, Op::Reshape { x }, needs))
    }

    /// Nearest-neighbour 2x upsample of `[b, c, h, w]`.
    pub fn upsample_nearest_2x(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "upsample expects [b,c,h,w], got {shape:?}"
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let src = self.value(x);
        let mut out = vec![0.0; b * c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for plane in 0..b * c {
            let sbase = plane * h * w;
            let dbase = plane * oh * ow;
            for r in 0..oh {
                let srow = sbase + (r / 2) * w;
                let drow = dbase + r * ow;
                for col in 0..ow {
                    out[drow + col] = src[srow + col / 2];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![b, c, oh, ow], out, Op::UpsampleNearest2x { x }, needs))
    }

    /// 2x2 average pooling of `[b, c, h, w]`; spatial dims must be even.
    pub fn avg_pool_2x(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || shape[2] % 2 != 0 || shape[3] % 2 != 0 {
            return Err(Error::Dimension(format!(
                "avg_pool_2x expects even [b,c,h,w], got {shape:?}"
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x);
        let mut out = vec![0.0; b * c * oh * ow];
        for plane in 0..b * c {
            let sbase = plane * h * w;
            let dbase = plane * oh * ow;
            for r in 0..oh {
                for col in 0..ow {
                    let s = sbase + 2 * r * w + 2 * col;
                    out[dbase + r * ow + col] =
                        0.25 * (src[s] + src[s + 1] + src[s + w] + src[s + w + 1]);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![b, c, oh, ow], out, Op::AvgPool2x { x }, needs))
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let total: f64 = self.value(x).iter().sum();
        let needs = self.needs(x);
        self.push(vec![1], vec![total], Op::Sum { x }, needs)
    }

    /// Mean squared error over all elements; returns a scalar.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "mse shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let n = self.value(a).len() as f64;
        let total: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![1], vec![total / n], Op::Mse { a, b }, needs))
    }

    /// Per-channel modulation of `x[b,c,h,w]` by `scale[b,c]` and `shift[b,c]`.
    pub fn affine_channels(
        &mut self,
        x: TensorId,
        scale: TensorId,
        shift: TensorId,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Dimension(format!(
                "affine_channels expects [b,c,h,w], got {xs:?}"
            )));
        }
        let expect = vec![xs[0], xs[1]];
        if self.shape(scale) != expect.as_slice() || self.shape(shift) != expect.as_slice() {
            return Err(Error::Dimension(format!(
                "affine_channels scale/shift must be {expect:?}, got {:?}/{:?}",
                self.shape(scale),
                self.shape(shift)
            )));
        }
        let hw = xs[2] * xs[3];
        let sv = self.value(scale).to_vec();
        let tv = self.value(shift).to_vec();
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        for bc in 0..xs[0] * xs[1] {
            let (s, t) = (sv[bc], tv[bc]);
            let base = bc * hw;
            for i in 0..hw {
                out[base + i] = src[base + i] * s + t;
            }
        }
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        Ok(self.push(xs, out, Op::AffineChannels { x, scale, shift }, needs))
    }

    /// Grouped 2-d cross-correlation: `x[b,cin,h,w]`, `w[cout,cin/groups,kh,kw]`.
    /// Lowered to im2col + one matrix product per (batch, group).
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects 4-d input/weight, got {xs:?}/{ws:?}"
            )));
        }
        let (b, cin, h, width) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Config(format!(
                "conv2d groups {groups} must divide cin {cin} and cout {cout}"
            )));
        }
        if wcin != cin / groups {
            return Err(Error::Dimension(format!(
                "conv2d weight expects cin/groups = {} input channels, got {wcin}",
                cin / groups
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        if let Some(bid) = bias {
            if self.shape(bid) != [cout] {
                return Err(Error::Dimension(format!(
                    "conv2d bias must be [{cout}], got {:?}",
                    self.shape(bid)
                )));
            }
        }
        let oh = conv_out_size(h, kh, stride, pad)?;
        let ow = conv_out_size(width, kw, stride, pad)?;
        let geom = ConvGeometry {
            cin_g: cin / groups,
            cout_g: cout / groups,
            h,
            w: width,
            kh,
            kw,
            oh,
            ow,
            stride,
            pad,
        };

        let mut out = vec![0.0; b * cout * oh * ow];
        if let Some(bid) = bias {
            let bv = self.value(bid).to_vec();
            for bi in 0..b {
                for co in 0..cout {
                    let base = (bi * cout + co) * oh * ow;
                    out[base..base + oh * ow].fill(bv[co]);
                }
            }
        }
        let src = self.value(x);
        let wv = self.value(w);
        let mut col = vec![0.0; geom.kdim() * oh * ow];
        for bi in 0..b {
            for g in 0..groups {
                im2col(&mut col, geom.x_slice(src, bi, g, cin), &geom);
                // out[cout_g, oh*ow] (+)= W_g[cout_g, kdim] @ col[kdim, oh*ow]
                dgemm(
                    geom.cout_g,
                    geom.kdim(),
                    oh * ow,
                    1.0,
                    geom.w_slice(wv, g),
                    geom.kdim() as isize,
                    1,
                    &col,
                    (oh * ow) as isize,
                    1,
                    1.0,
                    geom.out_slice_mut(&mut out, bi, g, cout),
                );
            }
        }
        let needs =
            self.needs(x) || self.needs(w) || bias.map(|bd| self.needs(bd)).unwrap_or(false);
        Ok(self.push(
            vec![b, cout, oh, ow],
            out,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
                groups,
            },
            needs,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Populate gradient buffers for every grad-tracked node reachable from
    /// `loss`, which must be scalar.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(grad) = self.grads[idx].take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            propagate(&self.nodes, &mut self.grads, idx, &op, &grad);
            self.grads[idx] = Some(grad);
        }
        Ok(())
    }
}

fn needs(nodes: &[Node], id: TensorId) -> bool {
    nodes[id.0].needs_grad
}

fn grad_buf<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: TensorId,
) -> &'a mut Vec<f64> {
    let slot = &mut grads[id.0];
    if slot.is_none() {
        *slot = Some(vec![0.0; nodes[id.0].data.len()]);
    }
    slot.as_mut().unwrap()
}

/// Gradient pointer plus the dgemm beta that preserves accumulation: a
/// fresh buffer is returned uninitialized with beta 0 (full overwrite),
/// an existing one with beta 1 (accumulate).
fn grad_target(grads: &mut [Option<Vec<f64>>], id: TensorId, len: usize) -> (*mut f64, f64) {
    let slot = &mut grads[id.0];
    match slot {
        Some(buf) => (buf.as_mut_ptr(), 1.0),
        None => {
            let mut buf = Vec::with_capacity(len);
            // dgemm with beta = 0 writes every element before it is read.
            unsafe { buf.set_len(len) };
            *slot = Some(buf);
            (slot.as_mut().unwrap().as_mut_ptr(), 0.0)
        }
    }
}

/// Push the output gradient `g` of node `out_idx` into its inputs.
/// `nodes` and `grads` are borrowed separately so saved forward values are
/// read in place.
fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], out_idx: usize, op: &Op, g: &[f64]) {
    match *op {
        Op::Leaf => {}
        Op::Matmul { a, b, alpha } => {
            let (m, k, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1], nodes[b.0].shape[1]);
            if needs(nodes, a) {
                // dA += alpha * G @ B^T; a fresh buffer takes the product
                // directly (beta = 0) instead of zero-fill-then-accumulate.
                let bv = &nodes[b.0].data;
                let (da, beta) = grad_target(grads, a, m * k);
                unsafe {
                    matrixmultiply::dgemm(
                        m,
                        n,
                        k,
                        alpha,
                        g.as_ptr(),
                        n as isize,
                        1,
                        bv.as_ptr(),
                        1,
                        n as isize,
                        beta,
                        da,
                        k as isize,
                        1,
                    );
                }
            }
            if needs(nodes, b) {
                // dB += alpha * A^T @ G
                let av = &nodes[a.0].data;
                let (db, beta) = grad_target(grads, b, k * n);
                unsafe {
                    matrixmultiply::dgemm(
                        k,
                        m,
                        n,
                        alpha,
                        av.as_ptr(),
                        1,
                        k as isize,
                        g.as_ptr(),
                        n as isize,
                        1,
                        beta,
                        db,
                        n as isize,
                        1,
                    );
                }
            }
        }
        Op::Transpose { x } => {
            if needs(nodes, x) {
                let (n, m) = (nodes[out_idx].shape[0], nodes[out_idx].shape[1]);
                let dx = grad_buf(grads, nodes, x);
                for i in 0..n {
                    for j in 0..m {
                        dx[j * n + i] += g[i * m + j];
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            if needs(nodes, x) {
                let shape = &nodes[out_idx].shape;
                let s = &nodes[out_idx].data;
                let (outer, len, inner) = axis_split(shape, axis);
                let dx = grad_buf(grads, nodes, x);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for l in 0..len {
                            let idx = base + l * inner;
                            dot += g[idx] * s[idx];
                        }
                        for l in 0..len {
                            let idx = base + l * inner;
                            dx[idx] += s[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
        }
        Op::Add { a, b } => {
            if needs(nodes, a) {
                for (d, &gv) in grad_buf(grads, nodes, a).iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if needs(nodes, b) {
                for (d, &gv) in grad_buf(grads, nodes, b).iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::Mul { a, b } => {
            if needs(nodes, a) {
                let bv = &nodes[b.0].data;
                let da = grad_buf(grads, nodes, a);
                for ((d, &gv), &ov) in da.iter_mut().zip(g).zip(bv) {
                    *d += gv * ov;
                }
            }
            if needs(nodes, b) {
                let av = &nodes[a.0].data;
                let db = grad_buf(grads, nodes, b);
                for ((d, &gv), &ov) in db.iter_mut().zip(g).zip(av) {
                    *d += gv * ov;
                }
            }
        }
        Op::Scale { x, factor } => {
            if needs(nodes, x) {
                for (d, &gv) in grad_buf(grads, nodes, x).iter_mut().zip(g) {
                    *d += gv * factor;
                }
            }
        }
        Op::AddRowBias { x, bias } => {
            let n = nodes[out_idx].shape[1];
            if needs(nodes, x) {
                for (d, &gv) in grad_buf(grads, nodes, x).iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if needs(nodes, bias) {
                let db = grad_buf(grads, nodes, bias);
                for (i, &gv) in g.iter().enumerate() {
                    db[i % n] += gv;
                }
            }
        }
        Op::Silu { x } => {
            if needs(nodes, x) {
                let xv = &nodes[x.0].data;
                let dx = grad_buf(grads, nodes, x);
                for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                    let s = sigmoid(v);
                    *d += gv * (s + v * s * (1.0 - s));
                }
            }
        }
        Op::GroupNorm { x, groups } => {
            if needs(nodes, x) {
                let shape = &nodes[out_idx].shape;
                let y = &nodes[out_idx].data;
                let xv = &nodes[x.0].data;
                let (b, c) = (shape[0], shape[1]);
                let group_len = (c / groups) * shape[2] * shape[3];
                let dx = grad_buf(grads, nodes, x);
                for bi in 0..b {
                    for gr in 0..groups {
                        let base = bi * c * shape[2] * shape[3] + gr * group_len;
                        let n = group_len as f64;
                        let xs = &xv[base..base + group_len];
                        let mean = xs.iter().sum::<f64>() / n;
                        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv_std = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                        let gs = &g[base..base + group_len];
                        let ys = &y[base..base + group_len];
                        let g_mean = gs.iter().sum::<f64>() / n;
                        let gy_mean = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((d, &gv), &yv) in
                            dx[base..base + group_len].iter_mut().zip(gs).zip(ys)
                        {
                            *d += inv_std * (gv - g_mean - yv * gy_mean);
                        }
                    }
                }
            }
        }
        Op::Concat { ref parts, axis } => {
            let shape = &nodes[out_idx].shape;
            let (outer, axis_total, inner) = axis_split(shape, axis);
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].shape[axis];
                if needs(nodes, p) {
                    let dp = grad_buf(grads, nodes, p);
                    for o in 0..outer {
                        let src_base = (o * axis_total + offset) * inner;
                        let dst_base = o * len * inner;
                        for i in 0..len * inner {
                            dp[dst_base + i] += g[src_base + i];
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start, len } => {
            if needs(nodes, x) {
                let xshape = nodes[x.0].shape.clone();
                let (outer, axis_len, inner) = axis_split(&xshape, axis);
                let dx = grad_buf(grads, nodes, x);
                for o in 0..outer {
                    let dst_base = (o * axis_len + start) * inner;
                    let src_base = o * len * inner;
                    for i in 0..len * inner {
                        dx[dst_base + i] += g[src_base + i];
                    }
                }
            }
        }
        Op::Reshape { x } => {
            if needs(nodes, x) {
                for (d, &gv) in grad_buf(grads, nodes, x).iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::UpsampleNearest2x { x } => {
            if needs(nodes, x) {
                let xshape = nodes[x.0].shape.clone();
                let (h, w) = (xshape[2], xshape[3]);
                let (oh, ow) = (2 * h, 2 * w);
                let dx = grad_buf(grads, nodes, x);
                for plane in 0..xshape[0] * xshape[1] {
                    let sbase = plane * oh * ow;
                    let dbase = plane * h * w;
                    for r in 0..oh {
                        let drow = dbase + (r / 2) * w;
                        let srow = sbase + r * ow;
                        for col in 0..ow {
                            dx[drow + col / 2] += g[srow + col];
                        }
                    }
                }
            }
        }
        Op::AvgPool2x { x } => {
            if needs(nodes, x) {
                let xshape = nodes[x.0].shape.clone();
                let (h, w) = (xshape[2], xshape[3]);
                let (oh, ow) = (h / 2, w / 2);
                let dx = grad_buf(grads, nodes, x);
                for plane in 0..xshape[0] * xshape[1] {
                    let sbase = plane * oh * ow;
                    let dbase = plane * h * w;
                    for r in 0..oh {
                        for col in 0..ow {
                            let gv = 0.25 * g[sbase + r * ow + col];
                            let d = dbase + 2 * r * w + 2 * col;
                            dx[d] += gv;
                            dx[d + 1] += gv;
                            dx[d + w] += gv;
                            dx[d + w + 1] += gv;
                        }
                    }
                }
            }
        }
        Op::Sum { x } => {
            if needs(nodes, x) {
                let gv = g[0];
                for d in grad_buf(grads, nodes, x).iter_mut() {
                    *d += gv;
                }
            }
        }
        Op::Mse { a, b } => {
            let scale = 2.0 * g[0] / nodes[a.0].data.len() as f64;
            if needs(nodes, a) {
                let av = &nodes[a.0].data;
                let bv = &nodes[b.0].data;
                let da = grad_buf(grads, nodes, a);
                for ((d, &x), &y) in da.iter_mut().zip(av).zip(bv) {
                    *d += scale * (x - y);
                }
            }
            if needs(nodes, b) {
                let av = &nodes[a.0].data;
                let bv = &nodes[b.0].data;
                let db = grad_buf(grads, nodes, b);
                for ((d, &x), &y) in db.iter_mut().zip(av).zip(bv) {
                    *d -= scale * (x - y);
                }
            }
        }
        Op::AffineChannels { x, scale, shift } => {
            let shape = &nodes[out_idx].shape;
            let hw = shape[2] * shape[3];
            let planes = shape[0] * shape[1];
            if needs(nodes, x) {
                let sv = &nodes[scale.0].data;
                let dx = grad_buf(grads, nodes, x);
                for bc in 0..planes {
                    let s = sv[bc];
                    let base = bc * hw;
                    for i in 0..hw {
                        dx[base + i] += g[base + i] * s;
                    }
                }
            }
            if needs(nodes, scale) {
                let xv = &nodes[x.0].data;
                let ds = grad_buf(grads, nodes, scale);
                for bc in 0..planes {
                    let base = bc * hw;
                    let mut acc = 0.0;
                    for i in 0..hw {
                        acc += g[base + i] * xv[base + i];
                    }
                    ds[bc] += acc;
                }
            }
            if needs(nodes, shift) {
                let dt = grad_buf(grads, nodes, shift);
                for bc in 0..planes {
                    let base = bc * hw;
                    dt[bc] += g[base..base + hw].iter().sum::<f64>();
                }
            }
        }
        Op::Conv2d {
            x,
            w,
            bias,
            stride,
            pad,
            groups,
        } => {
            let oshape = nodes[out_idx].shape.clone();
            let xshape = nodes[x.0].shape.clone();
            let wshape = nodes[w.0].shape.clone();
            let (b, cout, oh, ow) = (oshape[0], oshape[1], oshape[2], oshape[3]);
            let (cin, h, width) = (xshape[1], xshape[2], xshape[3]);
            let geom = ConvGeometry {
                cin_g: cin / groups,
                cout_g: cout / groups,
                h,
                w: width,
                kh: wshape[2],
                kw: wshape[3],
                oh,
                ow,
                stride,
                pad,
            };
            let ohw = oh * ow;

            if let Some(bid) = bias {
                if needs(nodes, bid) {
                    let db = grad_buf(grads, nodes, bid);
                    for bi in 0..b {
                        for co in 0..cout {
                            let base = (bi * cout + co) * ohw;
                            db[co] += g[base..base + ohw].iter().sum::<f64>();
                        }
                    }
                }
            }
            let need_w = needs(nodes, w);
            let need_x = needs(nodes, x);
            if !(need_w || need_x) {
                return;
            }
            let mut col = vec![0.0; geom.kdim() * ohw];
            let mut dcol = vec![0.0; geom.kdim() * ohw];
            for bi in 0..b {
                for gi in 0..groups {
                    let g_slice = &g[(bi * cout + gi * geom.cout_g) * ohw
                        ..(bi * cout + (gi + 1) * geom.cout_g) * ohw];
                    if need_w {
                        let xv = &nodes[x.0].data;
                        im2col(&mut col, geom.x_slice(xv, bi, gi, cin), &geom);
                        // dW_g += G[cout_g, ohw] @ col^T[ohw, kdim]
                        let dw = grad_buf(grads, nodes, w);
                        dgemm(
                            geom.cout_g,
                            ohw,
                            geom.kdim(),
                            1.0,
                            g_slice,
                            ohw as isize,
                            1,
                            &col,
                            1,
                            ohw as isize,
                            1.0,
                            &mut dw[gi * geom.cout_g * geom.kdim()
                                ..(gi + 1) * geom.cout_g * geom.kdim()],
                        );
                    }
                    if need_x {
                        // dcol = W_g^T[kdim, cout_g] @ G[cout_g, ohw]
                        let wv = &nodes[w.0].data;
                        dgemm(
                            geom.kdim(),
                            geom.cout_g,
                            ohw,
                            1.0,
                            &wv[gi * geom.cout_g * geom.kdim()
                                ..(gi + 1) * geom.cout_g * geom.kdim()],
                            1,
                            geom.kdim() as isize,
                            g_slice,
                            ohw as isize,
                            1,
                            0.0,
                            &mut dcol,
                        );
                        let dx = grad_buf(grads, nodes, x);
                        let base = (bi * cin + gi * geom.cin_g) * h * width;
                        col2im_add(
                            &mut dx[base..base + geom.cin_g * h * width],
                            &dcol,
                            &geom,
                        );
                    }
                }
            }
        }
    }
}

// ── Convolution lowering ────────────────────────────────────────────────

#[derive(Clone, Copy)]
struct ConvGeometry {
    cin_g: usize,
    cout_g: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn kdim(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn x_slice<'a>(&self, x: &'a [f64], bi: usize, g: usize, cin: usize) -> &'a [f64] {
        let base = (bi * cin + g * self.cin_g) * self.h * self.w;
        &x[base..base + self.cin_g * self.h * self.w]
    }

    fn w_slice<'a>(&self, w: &'a [f64], g: usize) -> &'a [f64] {
        &w[g * self.cout_g * self.kdim()..(g + 1) * self.cout_g * self.kdim()]
    }

    fn out_slice_mut<'a>(
        &self,
        out: &'a mut [f64],
        bi: usize,
        g: usize,
        cout: usize,
    ) -> &'a mut [f64] {
        let base = (bi * cout + g * self.cout_g) * self.oh * self.ow;
        &mut out[base..base + self.cout_g * self.oh * self.ow]
    }
}

/// Valid output-column range for kernel column `kc`:
/// `icol = ocol*stride + kc - pad` must land in `[0, w)`.
fn out_col_range(w: usize, ow: usize, kc: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kc).div_ceil(stride);
    let max_icol = w - 1 + pad;
    if max_icol < kc {
        return (1, 0);
    }
    let hi = ((max_icol - kc) / stride).min(ow.saturating_sub(1));
    (lo, hi)
}

/// Unfold one (batch, group) input block `[cin_g, h, w]` into the patch
/// matrix `[cin_g*kh*kw, oh*ow]`, zero-padded.
fn im2col(col: &mut [f64], x: &[f64], geom: &ConvGeometry) {
    col.fill(0.0);
    let ohw = geom.oh * geom.ow;
    for ci in 0..geom.cin_g {
        for kr in 0..geom.kh {
            for kc in 0..geom.kw {
                let row_base = ((ci * geom.kh + kr) * geom.kw + kc) * ohw;
                let (clo, chi) = out_col_range(geom.w, geom.ow, kc, geom.stride, geom.pad);
                if clo > chi {
                    continue;
                }
                for orow in 0..geom.oh {
                    let irow = (orow * geom.stride + kr) as isize - geom.pad as isize;
                    if irow < 0 || irow >= geom.h as isize {
                        continue;
                    }
                    let in_row = &x[(ci * geom.h + irow as usize) * geom.w..][..geom.w];
                    let col_row = &mut col[row_base + orow * geom.ow..][..geom.ow];
                    if geom.stride == 1 {
                        let ioff = clo + kc - geom.pad;
                        col_row[clo..=chi].copy_from_slice(&in_row[ioff..ioff + chi - clo + 1]);
                    } else {
                        for ocol in clo..=chi {
                            col_row[ocol] = in_row[ocol * geom.stride + kc - geom.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Fold the patch-matrix gradient back onto the input block, accumulating.
fn col2im_add(dx: &mut [f64], dcol: &[f64], geom: &ConvGeometry) {
    let ohw = geom.oh * geom.ow;
    for ci in 0..geom.cin_g {
        for kr in 0..geom.kh {
            for kc in 0..geom.kw {
                let row_base = ((ci * geom.kh + kr) * geom.kw + kc) * ohw;
                let (clo, chi) = out_col_range(geom.w, geom.ow, kc, geom.stride, geom.pad);
                if clo > chi {
                    continue;
                }
                for orow in 0..geom.oh {
                    let irow = (orow * geom.stride + kr) as isize - geom.pad as isize;
                    if irow < 0 || irow >= geom.h as isize {
                        continue;
                    }
                    let dx_row = &mut dx[(ci * geom.h + irow as usize) * geom.w..][..geom.w];
                    let dcol_row = &dcol[row_base + orow * geom.ow..][..geom.ow];
                    if geom.stride == 1 {
                        let ioff = clo + kc - geom.pad;
                        for (d, &v) in dx_row[ioff..ioff + chi - clo + 1]
                            .iter_mut()
                            .zip(&dcol_row[clo..=chi])
                        {
                            *d += v;
                        }
                    } else {
                        for ocol in clo..=chi {
                            dx_row[ocol * geom.stride + kc - geom.pad] += dcol_row[ocol];
                        }
                    }
                }
            }
        }
    }
}

/// Central finite differences of a scalar-valued function at `x`:
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` per coordinate.
pub fn finite_difference_grad<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    Tensor::new(x.shape.clone(), grad)
}
