//! Reverse-mode differentiation over a per-forward graph arena.
//!
//! A [`Graph`] owns every node produced during one forward pass. Leaves copy
//! their values in from [`Tensor`]s; ops append nodes that reference earlier
//! ids only, so creation order is a topological order and [`Graph::backward`]
//! is a single reverse sweep. Each backward call propagates through a fresh
//! scratch buffer and then adds the result into the persistent per-node
//! gradient, so repeated calls accumulate until the graph is dropped.
//!
//! Graph construction is single-threaded; parallelism happens one graph per
//! example, never inside a graph.

use crate::error::{Result, TensorError};
use crate::tensor::numel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Batch statistics observed by a training-mode batch-norm node. The caller
/// folds these into running statistics; the graph itself never mutates them.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

const GELU_C0: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_C1: f64 = 0.044715;

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    MulScalar { a: usize, c: f64 },
    AddBiasRows { a: usize, bias: usize, rows: usize, cols: usize },
    AddBiasChannels { a: usize, bias: usize, lead: usize, ch: usize, spatial: usize },
    ScaleChannels { a: usize, scale: usize, lead: usize, ch: usize, spatial: usize },
    Concat { parts: Vec<(usize, usize)>, lead: usize, trail: usize },
    Reshape { a: usize },
    SliceRows { a: usize, start: usize, cols: usize },
    SliceCols { a: usize, start: usize, len: usize, rows: usize, cols: usize },
    TakeIndex { a: usize, index: usize },
    Img2Patches { a: usize, c: usize, h: usize, w: usize, r: usize },
    Sum { a: usize },
    Mean { a: usize },
    GapHw { a: usize, lead: usize, spatial: usize },
    Log { a: usize },
    Exp { a: usize },
    Sqrt { a: usize },
    Tanh { a: usize },
    Sign,
    Clamp { a: usize, lo: f64, hi: f64 },
    Gelu { a: usize },
    LeakyRelu { a: usize, slope: f64 },
    Softmax { a: usize, lead: usize, n: usize, trail: usize },
    LayerNorm {
        a: usize,
        gamma: usize,
        beta: usize,
        lanes: usize,
        n: usize,
        affine_len: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        b: usize,
        cin: usize,
        h: usize,
        w: usize,
        f: usize,
        kh: usize,
        kw: usize,
        dil: usize,
        pad: usize,
        oh: usize,
        ow: usize,
    },
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        b: usize,
        c: usize,
        spatial: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNormRunning {
        x: usize,
        gamma: usize,
        beta: usize,
        b: usize,
        c: usize,
        spatial: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    InstanceNorm {
        x: usize,
        groups: usize,
        spatial: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    ResizePad {
        a: usize,
        c: usize,
        h: usize,
        w: usize,
        rh: usize,
        rw: usize,
        pad_t: usize,
        pad_l: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn req(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Copies a tensor in as a leaf; `requires_grad` follows the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad, Op::Leaf)
    }

    /// Leaf from raw parts with an explicit grad flag.
    pub fn leaf_from(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        if numel(shape) != data.len() {
            return Err(TensorError::BadShape {
                op: "leaf_from",
                shape: shape.to_vec(),
                why: format!("data length {} does not match", data.len()),
            });
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    /// Non-differentiable constant leaf.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<TensorId> {
        let id = self.leaf_from(shape, data, false)?;
        Ok(id)
    }

    pub fn scalar_const(&mut self, v: f64) -> TensorId {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        let n = &self.nodes[id.0];
        assert_eq!(n.value.len(), 1, "scalar_value on shape {:?}", n.shape);
        n.value[0]
    }

    /// Accumulated gradient for a node, if backward has reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::from_vec(n.shape.clone(), n.value.clone()).expect("node shape/value consistent")
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = va[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &vb[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let rg = self.req(a) || self.req(b);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul { a: a.0, b: b.0, m, k, n }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(TensorError::BadShape { op: "transpose", shape: sa, why: "rank 2 required".into() });
        }
        let (rows, cols) = (sa[0], sa[1]);
        let va = &self.nodes[a.0].value;
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = va[i * cols + j];
            }
        }
        let rg = self.req(a);
        Ok(self.push(vec![cols, rows], out, rg, Op::Transpose { a: a.0, rows, cols }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip2("add", a, b, |x, y| x + y, |a0, b0| Op::Add { a: a0, b: b0 })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip2("sub", a, b, |x, y| x - y, |a0, b0| Op::Sub { a: a0, b: b0 })
    }

    fn zip2(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op: name, lhs: sa, rhs: sb });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.req(a) || self.req(b);
        Ok(self.push(sa, out, rg, op(a.0, b.0)))
    }

    /// Element-wise product. One operand may be a single-element tensor, which
    /// broadcasts over the other (scalar-tensor broadcasting only).
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (na, nb) = (numel(&sa), numel(&sb));
        if sa != sb && na != 1 && nb != 1 {
            return Err(TensorError::ShapeMismatch { op: "mul", lhs: sa, rhs: sb });
        }
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (shape, out): (Vec<usize>, Vec<f64>) = if sa == sb {
            (sa, va.iter().zip(vb).map(|(&x, &y)| x * y).collect())
        } else if na == 1 {
            (sb, vb.iter().map(|&y| va[0] * y).collect())
        } else {
            (sa, va.iter().map(|&x| x * vb[0]).collect())
        };
        let rg = self.req(a) || self.req(b);
        Ok(self.push(shape, out, rg, Op::Mul { a: a.0, b: b.0 }))
    }

    /// Multiply by a plain constant.
    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.req(a);
        self.push(shape, out, rg, Op::MulScalar { a: a.0, c })
    }

    /// Broadcast bias add: `[T,D] + [D]` over rows, or `[B,C,H,W] + [C]` /
    /// `[C,H,W] + [C]` over channels.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(bias).to_vec();
        if sb.len() != 1 {
            return Err(TensorError::ShapeMismatch { op: "add_bias", lhs: sa, rhs: sb });
        }
        let rg = self.req(a) || self.req(bias);
        match sa.len() {
            2 if sa[1] == sb[0] => {
                let (rows, cols) = (sa[0], sa[1]);
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
                let mut out = vec![0.0; rows * cols];
                for t in 0..rows {
                    for d in 0..cols {
                        out[t * cols + d] = va[t * cols + d] + vb[d];
                    }
                }
                Ok(self.push(sa, out, rg, Op::AddBiasRows { a: a.0, bias: bias.0, rows, cols }))
            }
            3 | 4 => {
                let (lead, ch, spatial) = if sa.len() == 4 {
                    (sa[0], sa[1], sa[2] * sa[3])
                } else {
                    (1, sa[0], sa[1] * sa[2])
                };
                if ch != sb[0] {
                    return Err(TensorError::ShapeMismatch { op: "add_bias", lhs: sa, rhs: sb });
                }
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
                let mut out = vec![0.0; va.len()];
                for l in 0..lead {
                    for c in 0..ch {
                        let base = (l * ch + c) * spatial;
                        let bv = vb[c];
                        for s in 0..spatial {
                            out[base + s] = va[base + s] + bv;
                        }
                    }
                }
                Ok(self.push(sa, out, rg, Op::AddBiasChannels { a: a.0, bias: bias.0, lead, ch, spatial }))
            }
            _ => Err(TensorError::ShapeMismatch { op: "add_bias", lhs: sa, rhs: sb }),
        }
    }

    /// Multiply each channel of a [c, h, w] or [b, c, h, w] tensor by the
    /// matching entry of a rank-1 scale vector.
    pub fn scale_channels(&mut self, a: TensorId, scale: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let ss = self.shape(scale).to_vec();
        if ss.len() != 1 || !(sa.len() == 3 || sa.len() == 4) {
            return Err(TensorError::ShapeMismatch { op: "scale_channels", lhs: sa, rhs: ss });
        }
        let (lead, ch, spatial) = if sa.len() == 4 {
            (sa[0], sa[1], sa[2] * sa[3])
        } else {
            (1, sa[0], sa[1] * sa[2])
        };
        if ch != ss[0] {
            return Err(TensorError::ShapeMismatch { op: "scale_channels", lhs: sa, rhs: ss });
        }
        let rg = self.req(a) || self.req(scale);
        let (va, vs) = (&self.nodes[a.0].value, &self.nodes[scale.0].value);
        let mut out = vec![0.0; va.len()];
        for l in 0..lead {
            for c in 0..ch {
                let base = (l * ch + c) * spatial;
                let sv = vs[c];
                for s in 0..spatial {
                    out[base + s] = va[base + s] * sv;
                }
            }
        }
        Ok(self.push(sa, out, rg, Op::ScaleChannels { a: a.0, scale: scale.0, lead, ch, spatial }))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat of zero tensors".into()));
        }
        let s0 = self.shape(parts[0]).to_vec();
        if axis >= s0.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape: s0 });
        }
        let mut total_axis = 0usize;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != s0.len()
                || sp.iter().enumerate().any(|(i, &e)| i != axis && e != s0[i])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: s0.clone(),
                    rhs: sp.to_vec(),
                });
            }
            total_axis += sp[axis];
        }
        let lead: usize = s0[..axis].iter().product();
        let trail: usize = s0[axis + 1..].iter().product();
        let mut shape = s0.clone();
        shape[axis] = total_axis;
        let mut out = vec![0.0; lead * total_axis * trail];
        let mut offset = 0usize;
        let mut meta = Vec::with_capacity(parts.len());
        for &p in parts {
            let ext = self.shape(p)[axis];
            meta.push((p.0, ext));
            let vp = &self.nodes[p.0].value;
            for l in 0..lead {
                for j in 0..ext {
                    let src = (l * ext + j) * trail;
                    let dst = (l * total_axis + offset + j) * trail;
                    out[dst..dst + trail].copy_from_slice(&vp[src..src + trail]);
                }
            }
            offset += ext;
        }
        let rg = parts.iter().any(|&p| self.req(p));
        Ok(self.push(shape, out, rg, Op::Concat { parts: meta, lead, trail }))
    }

    pub fn reshape(&mut self, a: TensorId, new_shape: &[usize]) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if numel(new_shape) != numel(&sa) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: sa,
                rhs: new_shape.to_vec(),
            });
        }
        let v = self.nodes[a.0].value.clone();
        let rg = self.req(a);
        Ok(self.push(new_shape.to_vec(), v, rg, Op::Reshape { a: a.0 }))
    }

    /// Rows `[start, start+len)` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(TensorError::BadShape { op: "slice_rows", shape: sa, why: "rank 2 required".into() });
        }
        if start + len > sa[0] {
            return Err(TensorError::IndexOutOfRange { index: start + len, len: sa[0] });
        }
        let cols = sa[1];
        let v = self.nodes[a.0].value[start * cols..(start + len) * cols].to_vec();
        let rg = self.req(a);
        Ok(self.push(vec![len, cols], v, rg, Op::SliceRows { a: a.0, start, cols }))
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(TensorError::BadShape { op: "slice_cols", shape: sa, why: "rank 2 required".into() });
        }
        if start + len > sa[1] {
            return Err(TensorError::IndexOutOfRange { index: start + len, len: sa[1] });
        }
        let (rows, cols) = (sa[0], sa[1]);
        let va = &self.nodes[a.0].value;
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len].copy_from_slice(&va[r * cols + start..r * cols + start + len]);
        }
        let rg = self.req(a);
        Ok(self.push(vec![rows, len], out, rg, Op::SliceCols { a: a.0, start, len, rows, cols }))
    }

    /// Single element by flat index, as a `[1]` tensor.
    pub fn take_index(&mut self, a: TensorId, index: usize) -> Result<TensorId> {
        let va = &self.nodes[a.0].value;
        if index >= va.len() {
            return Err(TensorError::IndexOutOfRange { index, len: va.len() });
        }
        let v = vec![va[index]];
        let rg = self.req(a);
        Ok(self.push(vec![1], v, rg, Op::TakeIndex { a: a.0, index }))
    }

    /// `[C,H,W]` image to `[N, R*R*C]` rows of flattened non-overlapping
    /// patches; patch rows run row-major over the patch grid, and within a
    /// patch values are ordered channel, then patch row, then patch column.
    pub fn img2patches(&mut self, a: TensorId, r: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 {
            return Err(TensorError::BadShape { op: "img2patches", shape: sa, why: "rank 3 required".into() });
        }
        let (c, h, w) = (sa[0], sa[1], sa[2]);
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(TensorError::BadShape {
                op: "img2patches",
                shape: sa,
                why: format!("patch size {r} must divide both spatial extents"),
            });
        }
        let (gy, gx) = (h / r, w / r);
        let n = gy * gx;
        let d = r * r * c;
        let va = &self.nodes[a.0].value;
        let mut out = vec![0.0; n * d];
        for py in 0..gy {
            for px in 0..gx {
                let p = py * gx + px;
                for cc in 0..c {
                    for dy in 0..r {
                        for dx in 0..r {
                            let q = cc * r * r + dy * r + dx;
                            out[p * d + q] = va[cc * h * w + (py * r + dy) * w + (px * r + dx)];
                        }
                    }
                }
            }
        }
        let rg = self.req(a);
        Ok(self.push(vec![n, d], out, rg, Op::Img2Patches { a: a.0, c, h, w, r }))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let rg = self.req(a);
        self.push(vec![1], vec![s], rg, Op::Sum { a: a.0 })
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let v = &self.nodes[a.0].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.req(a);
        self.push(vec![1], vec![m], rg, Op::Mean { a: a.0 })
    }

    /// Global average pool over the trailing two axes: `[C,H,W] -> [C]` or
    /// `[B,C,H,W] -> [B,C]`.
    pub fn gap_hw(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 && sa.len() != 4 {
            return Err(TensorError::BadShape { op: "gap_hw", shape: sa, why: "rank 3 or 4 required".into() });
        }
        let spatial = sa[sa.len() - 2] * sa[sa.len() - 1];
        let lead = numel(&sa) / spatial;
        let va = &self.nodes[a.0].value;
        let mut out = vec![0.0; lead];
        for l in 0..lead {
            out[l] = va[l * spatial..(l + 1) * spatial].iter().sum::<f64>() / spatial as f64;
        }
        let shape = sa[..sa.len() - 2].to_vec();
        let rg = self.req(a);
        Ok(self.push(shape, out, rg, Op::GapHw { a: a.0, lead, spatial }))
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::ln, |a0| Op::Log { a: a0 })
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::exp, |a0| Op::Exp { a: a0 })
    }

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::sqrt, |a0| Op::Sqrt { a: a0 })
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::tanh, |a0| Op::Tanh { a: a0 })
    }

    /// Element-wise sign; gradient is zero everywhere.
    pub fn sign(&mut self, a: TensorId) -> TensorId {
        self.unary(
            a,
            |x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
            |_| Op::Sign,
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes through inside the bounds
    /// (inclusive) and is zero outside.
    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        self.unary(a, |x| x.clamp(lo, hi), |a0| Op::Clamp { a: a0, lo, hi })
    }

    /// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh()),
            |a0| Op::Gelu { a: a0 },
        )
    }

    pub fn leaky_relu(&mut self, a: TensorId, slope: f64) -> TensorId {
        self.unary(
            a,
            |x| if x >= 0.0 { x } else { slope * x },
            |a0| Op::LeakyRelu { a: a0, slope },
        )
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.leaky_relu(a, 0.0)
    }

    fn unary(&mut self, a: TensorId, f: impl Fn(f64) -> f64, op: impl Fn(usize) -> Op) -> TensorId {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.req(a);
        self.push(shape, out, rg, op(a.0))
    }

    /// Softmax along `axis`, max-subtracted per lane. Rejects non-finite
    /// inputs.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape: sa });
        }
        if self.nodes[a.0].value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let n = sa[axis];
        let lead: usize = sa[..axis].iter().product();
        let trail: usize = sa[axis + 1..].iter().product();
        let va = &self.nodes[a.0].value;
        let mut out = vec![0.0; va.len()];
        for l in 0..lead {
            for t in 0..trail {
                let idx = |j: usize| (l * n + j) * trail + t;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    mx = mx.max(va[idx(j)]);
                }
                let mut z = 0.0;
                for j in 0..n {
                    let e = (va[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] /= z;
                }
            }
        }
        let rg = self.req(a);
        Ok(self.push(sa, out, rg, Op::Softmax { a: a.0, lead, n, trail }))
    }

    /// Layer normalization along the last axis. `gamma` and `beta` are either
    /// single-element tensors or vectors matching the normalized extent.
    pub fn layer_norm(
        &mut self,
        a: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() {
            return Err(TensorError::BadShape { op: "layer_norm", shape: sa, why: "rank >= 1 required".into() });
        }
        let n = sa[sa.len() - 1];
        let lanes = numel(&sa) / n;
        let glen = numel(self.shape(gamma));
        let blen = numel(self.shape(beta));
        if glen != blen || (glen != 1 && glen != n) {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(gamma).to_vec(),
                rhs: self.shape(beta).to_vec(),
            });
        }
        let affine_len = glen;
        let mut out = vec![0.0; numel(&sa)];
        let mut means = vec![0.0; lanes];
        let mut rstds = vec![0.0; lanes];
        {
            let va = &self.nodes[a.0].value;
            let vg = &self.nodes[gamma.0].value;
            let vb = &self.nodes[beta.0].value;
            for l in 0..lanes {
                let row = &va[l * n..(l + 1) * n];
                let mu = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + eps).sqrt();
                means[l] = mu;
                rstds[l] = r;
                for j in 0..n {
                    let xh = (row[j] - mu) * r;
                    let (g, b) = if affine_len == 1 { (vg[0], vb[0]) } else { (vg[j], vb[j]) };
                    out[l * n + j] = g * xh + b;
                }
            }
        }
        let rg = self.req(a) || self.req(gamma) || self.req(beta);
        Ok(self.push(
            sa,
            out,
            rg,
            Op::LayerNorm {
                a: a.0,
                gamma: gamma.0,
                beta: beta.0,
                lanes,
                n,
                affine_len,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    /// 2-D convolution: input `[B,C,H,W]`, kernel `[F,C,KH,KW]`, symmetric
    /// zero padding, single dilation factor on both axes, stride 1.
    pub fn conv2d(&mut self, input: TensorId, kernel: TensorId, dilation: usize, padding: usize) -> Result<TensorId> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 4 || sk.len() != 4 {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: si, rhs: sk });
        }
        if si[1] != sk[1] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: si, rhs: sk });
        }
        if dilation == 0 {
            return Err(TensorError::Invalid("conv2d dilation must be positive".into()));
        }
        let (b, cin, h, w) = (si[0], si[1], si[2], si[3]);
        let (f, kh, kw) = (sk[0], sk[2], sk[3]);
        let eff_h = dilation * (kh - 1) + 1;
        let eff_w = dilation * (kw - 1) + 1;
        if h + 2 * padding < eff_h || w + 2 * padding < eff_w {
            return Err(TensorError::BadShape {
                op: "conv2d",
                shape: si,
                why: format!("effective kernel {eff_h}x{eff_w} exceeds padded input"),
            });
        }
        let oh = h + 2 * padding - eff_h + 1;
        let ow = w + 2 * padding - eff_w + 1;
        let vi = &self.nodes[input.0].value;
        let vk = &self.nodes[kernel.0].value;
        let mut out = vec![0.0; b * f * oh * ow];
        for bi in 0..b {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                let iy = oy + ky * dilation;
                                if iy < padding || iy - padding >= h {
                                    continue;
                                }
                                let iy = iy - padding;
                                for kx in 0..kw {
                                    let ix = ox + kx * dilation;
                                    if ix < padding || ix - padding >= w {
                                        continue;
                                    }
                                    let ix = ix - padding;
                                    acc += vi[((bi * cin + ci) * h + iy) * w + ix]
                                        * vk[((fi * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((bi * f + fi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let rg = self.req(input) || self.req(kernel);
        Ok(self.push(
            vec![b, f, oh, ow],
            out,
            rg,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                b,
                cin,
                h,
                w,
                f,
                kh,
                kw,
                dil: dilation,
                pad: padding,
                oh,
                ow,
            },
        ))
    }

    /// Batch normalization with statistics taken from this input (training
    /// mode): per-channel mean/variance over batch and spatial axes of a
    /// `[B,C,H,W]` tensor. Returns the node plus the observed statistics so
    /// the caller can fold them into running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<(TensorId, BnBatchStats)> {
        let (b, c, spatial) = self.bn_dims(x, gamma, beta)?;
        let m = (b * spatial) as f64;
        let vx = &self.nodes[x.0].value;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                let base = (bi * c + ci) * spatial;
                for p in 0..spatial {
                    s += vx[base + p];
                }
            }
            let mu = s / m;
            let mut v = 0.0;
            for bi in 0..b {
                let base = (bi * c + ci) * spatial;
                for p in 0..spatial {
                    let d = vx[base + p] - mu;
                    v += d * d;
                }
            }
            mean[ci] = mu;
            var[ci] = v / m;
        }
        let rstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &rstd, b, c, spatial);
        let rg = self.req(x) || self.req(gamma) || self.req(beta);
        let shape = self.shape(x).to_vec();
        let stats = BnBatchStats { mean: mean.clone(), var };
        let id = self.push(
            shape,
            out,
            rg,
            Op::BatchNormTrain {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                b,
                c,
                spatial,
                mean,
                rstd,
            },
        );
        Ok((id, stats))
    }

    /// Batch normalization against frozen running statistics (inference
    /// mode): a deterministic per-channel affine transform.
    pub fn batch_norm_running(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<TensorId> {
        let (b, c, spatial) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm_running",
                lhs: vec![c],
                rhs: vec![running_mean.len(), running_var.len()],
            });
        }
        let rstd: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mean = running_mean.to_vec();
        let out = self.bn_apply(x, gamma, beta, &mean, &rstd, b, c, spatial);
        let rg = self.req(x) || self.req(gamma) || self.req(beta);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            rg,
            Op::BatchNormRunning {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                b,
                c,
                spatial,
                mean,
                rstd,
            },
        ))
    }

    fn bn_dims(&self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<(usize, usize, usize)> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(TensorError::BadShape { op: "batch_norm", shape: sx, why: "rank 4 required".into() });
        }
        let (b, c, spatial) = (sx[0], sx[1], sx[2] * sx[3]);
        let sg = self.shape(gamma);
        let sb = self.shape(beta);
        if numel(sg) != c || numel(sb) != c {
            return Err(TensorError::ShapeMismatch { op: "batch_norm", lhs: sx, rhs: sg.to_vec() });
        }
        Ok((b, c, spatial))
    }

    fn bn_apply(
        &self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: &[f64],
        rstd: &[f64],
        b: usize,
        c: usize,
        spatial: usize,
    ) -> Vec<f64> {
        let vx = &self.nodes[x.0].value;
        let vg = &self.nodes[gamma.0].value;
        let vb = &self.nodes[beta.0].value;
        let mut out = vec![0.0; vx.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * spatial;
                for p in 0..spatial {
                    out[base + p] = vg[ci] * (vx[base + p] - mean[ci]) * rstd[ci] + vb[ci];
                }
            }
        }
        out
    }

    /// Per-channel normalization over the spatial axes of each sample, no
    /// affine part. Accepts `[B,C,H,W]` or `[C,H,W]`.
    pub fn instance_norm(&mut self, x: TensorId, eps: f64) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 && sx.len() != 4 {
            return Err(TensorError::BadShape { op: "instance_norm", shape: sx, why: "rank 3 or 4 required".into() });
        }
        let spatial = sx[sx.len() - 2] * sx[sx.len() - 1];
        let groups = numel(&sx) / spatial;
        let vx = &self.nodes[x.0].value;
        let mut out = vec![0.0; vx.len()];
        let mut means = vec![0.0; groups];
        let mut rstds = vec![0.0; groups];
        for g in 0..groups {
            let row = &vx[g * spatial..(g + 1) * spatial];
            let mu = row.iter().sum::<f64>() / spatial as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / spatial as f64;
            let r = 1.0 / (var + eps).sqrt();
            means[g] = mu;
            rstds[g] = r;
            for p in 0..spatial {
                out[g * spatial + p] = (row[p] - mu) * r;
            }
        }
        let rg = self.req(x);
        Ok(self.push(
            sx,
            out,
            rg,
            Op::InstanceNorm { x: x.0, groups, spatial, mean: means, rstd: rstds },
        ))
    }

    /// Nearest-neighbor resize of a `[C,H,W]` image to `rh x rw`, placed at
    /// `(pad_t, pad_l)` on a zero canvas of the original size.
    pub fn resize_pad(
        &mut self,
        a: TensorId,
        rh: usize,
        rw: usize,
        pad_t: usize,
        pad_l: usize,
    ) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 {
            return Err(TensorError::BadShape { op: "resize_pad", shape: sa, why: "rank 3 required".into() });
        }
        let (c, h, w) = (sa[0], sa[1], sa[2]);
        if rh == 0 || rw == 0 || pad_t + rh > h || pad_l + rw > w {
            return Err(TensorError::BadShape {
                op: "resize_pad",
                shape: sa,
                why: format!("resize {rh}x{rw} at ({pad_t},{pad_l}) does not fit"),
            });
        }
        let va = &self.nodes[a.0].value;
        let mut out = vec![0.0; va.len()];
        for ci in 0..c {
            for i in 0..rh {
                let sy = i * h / rh;
                for j in 0..rw {
                    let sx = j * w / rw;
                    out[ci * h * w + (pad_t + i) * w + (pad_l + j)] = va[ci * h * w + sy * w + sx];
                }
            }
        }
        let rg = self.req(a);
        Ok(self.push(sa, out, rg, Op::ResizePad { a: a.0, c, h, w, rh, rw, pad_t, pad_l }))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Gradients land in per-node buffers
    /// readable through [`Graph::grad`]; calling backward again adds another
    /// full propagation on top (reset by dropping the graph).
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        let rn = &self.nodes[root.0];
        if rn.value.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: rn.shape.clone() });
        }
        let n = root.0 + 1;
        let mut scratch: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        scratch.resize_with(n, || None);
        if self.nodes[root.0].requires_grad {
            scratch[root.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let g = match scratch[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut scratch);
            match &mut self.nodes[i].grad {
                Some(buf) => {
                    for (b, v) in buf.iter_mut().zip(&g) {
                        *b += v;
                    }
                }
                None => self.nodes[i].grad = Some(g),
            }
        }
        // Requires-grad leaves always end up with a buffer, even when only
        // zero-gradient paths (sign, clamp outside bounds) reach them.
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        // Adds this node's cotangent into each parent that requires grad.
        macro_rules! acc {
            ($pid:expr, $len:expr) => {{
                let pid: usize = $pid;
                if self.nodes[pid].requires_grad {
                    Some(scratch[pid].get_or_insert_with(|| vec![0.0; $len]))
                } else {
                    None
                }
            }};
        }
        match &self.nodes[i].op {
            Op::Leaf | Op::Sign => {}
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[*a].requires_grad {
                    let vb = &self.nodes[*b].value;
                    let da = scratch[*a].get_or_insert_with(|| vec![0.0; m * k]);
                    for i0 in 0..m {
                        for j in 0..k {
                            let mut acc = 0.0;
                            for p in 0..n {
                                acc += g[i0 * n + p] * vb[j * n + p];
                            }
                            da[i0 * k + j] += acc;
                        }
                    }
                }
                if self.nodes[*b].requires_grad {
                    let va = &self.nodes[*a].value;
                    let db = scratch[*b].get_or_insert_with(|| vec![0.0; k * n]);
                    for i0 in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for p in 0..m {
                                acc += va[p * k + i0] * g[p * n + j];
                            }
                            db[i0 * n + j] += acc;
                        }
                    }
                }
            }
            Op::Transpose { a, rows, cols } => {
                if let Some(da) = acc!(*a, rows * cols) {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            da[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = acc!(*a, g.len()) {
                    for (d, v) in da.iter_mut().zip(g) {
                        *d += v;
                    }
                }
                if let Some(db) = acc!(*b, g.len()) {
                    for (d, v) in db.iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(da) = acc!(*a, g.len()) {
                    for (d, v) in da.iter_mut().zip(g) {
                        *d += v;
                    }
                }
                if let Some(db) = acc!(*b, g.len()) {
                    for (d, v) in db.iter_mut().zip(g) {
                        *d -= v;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (na, nb) = (self.nodes[*a].value.len(), self.nodes[*b].value.len());
                if self.nodes[*a].requires_grad {
                    let vb = &self.nodes[*b].value;
                    let da = scratch[*a].get_or_insert_with(|| vec![0.0; na]);
                    if na == nb {
                        for j in 0..na {
                            da[j] += g[j] * vb[j];
                        }
                    } else if na == 1 {
                        let mut s = 0.0;
                        for j in 0..nb {
                            s += g[j] * vb[j];
                        }
                        da[0] += s;
                    } else {
                        for j in 0..na {
                            da[j] += g[j] * vb[0];
                        }
                    }
                }
                if self.nodes[*b].requires_grad {
                    let va = &self.nodes[*a].value;
                    let db = scratch[*b].get_or_insert_with(|| vec![0.0; nb]);
                    if na == nb {
                        for j in 0..nb {
                            db[j] += g[j] * va[j];
                        }
                    } else if nb == 1 {
                        let mut s = 0.0;
                        for j in 0..na {
                            s += g[j] * va[j];
                        }
                        db[0] += s;
                    } else {
                        for j in 0..nb {
                            db[j] += g[j] * va[0];
                        }
                    }
                }
            }
            Op::MulScalar { a, c } => {
                if let Some(da) = acc!(*a, g.len()) {
                    for (d, v) in da.iter_mut().zip(g) {
                        *d += c * v;
                    }
                }
            }
            Op::AddBiasRows { a, bias, rows, cols } => {
                if let Some(da) = acc!(*a, g.len()) {
                    for (d, v) in da.iter_mut().zip(g) {
                        *d += v;
                    }
                }
                if let Some(db) = acc!(*bias, *cols) {
                    for t in 0..*rows {
                        for d in 0..*cols {
                            db[d] += g[t * cols + d];
                        }
                    }
                }
            }
            Op::AddBiasChannels { a, bias, lead, ch, spatial } => {
                if let Some(da) = acc!(*a, g.len()) {
                    for (d, v) in da.iter_mut().zip(g) {
                        *d += v;
                    }
                }
                if let Some(db) = acc!(*bias, *ch) {
                    for l in 0..*lead {
                        for c in 0..*ch {
                            let base = (l * ch + c) * spatial;
                            let mut s = 0.0;
                            for p in 0..*spatial {
                                s += g[base + p];
                            }
                            db[c] += s;
                        }
                    }
                }
            }
            Op::ScaleChannels { a, scale, lead, ch, spatial } => {
                let va = &self.nodes[*a].value;
                let vs = &self.nodes[*scale].value;
                if let Some(da) = acc!(*a, g.len()) {
                    for l in 0..*lead {
                        for c in 0..*ch {
                            let base = (l * ch + c) * spatial;
                            let sv = vs[c];
                            for p in 0..*spatial {
                                da[base + p] += g[base + p] * sv;
                            }
                        }
                    }
                }
                if let Some(ds) = acc!(*scale, *ch) {
                    for l in 0..*lead {
                        for c in 0..*ch {
                            let base = (l * ch + c) * spatial;
                            let mut s = 0.0;
                            for p in 0..*spatial {
                                s += g[base + p] * va[base + p];
                            }
                            ds[c] += s;
                        }
                    }
                }
            }
            Op::Concat { parts, lead, trail } => {
                let total: usize = parts.iter().map(|&(_, e)| e).sum();
                let mut offset = 0usize;
                for &(pid, ext) in parts {
                    if self.nodes[pid].requires_grad {
                        let plen = lead * ext * trail;
                        let dp = scratch[pid].get_or_insert_with(|| vec![0.0; plen]);
                        for l in 0..*lead {
                            for j in 0..ext {
                                let src = (l * total + offset + j) * trail;
                                let dst = (l * ext + j) * trail;
                                for t in 0..*trail {
                                    dp[dst + t] += g[src + t];
                                }
                            }
                        }
                    }
                    offset += ext;
                }
            }
            Op::Reshape { a } => {
                if let Some(da) = acc!(*a, g.len()) {
                    for (d, v) in da.iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            Op::SliceRows { a, start, cols } => {
                let alen = self.nodes[*a].value.len();
                if let Some(da) = acc!(*a, alen) {
                    for (j, v) in g.iter().enumerate() {
                        da[start * cols + j] += v;
                    }
                }
            }
            Op::SliceCols { a, start, len, rows, cols } => {
                if let Some(da) = acc!(*a, rows * cols) {
                    for r in 0..*rows {
                        for j in 0..*len {
                            da[r * cols + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::TakeIndex { a, index } => {
                let alen = self.nodes[*a].value.len();
                if let Some(da) = acc!(*a, alen) {
                    da[*index] += g[0];
                }
            }
            Op::Img2Patches { a, c, h, w, r } => {
                let (c, h, w, r) = (*c, *h, *w, *r);
                if let Some(da) = acc!(*a, c * h * w) {
                    let (gy, gx) = (h / r, w / r);
                    let d = r * r * c;
                    for py in 0..gy {
                        for px in 0..gx {
                            let p = py * gx + px;
                            for cc in 0..c {
                                for dy in 0..r {
                                    for dx in 0..r {
                                        let q = cc * r * r + dy * r + dx;
                                        da[cc * h * w + (py * r + dy) * w + (px * r + dx)] += g[p * d + q];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Sum { a } => {
                let alen = self.nodes[*a].value.len();
                if let Some(da) = acc!(*a, alen) {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean { a } => {
                let alen = self.nodes[*a].value.len();
                if let Some(da) = acc!(*a, alen) {
                    let gv = g[0] / alen as f64;
                    for d in da.iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::GapHw { a, lead, spatial } => {
                if let Some(da) = acc!(*a, lead * spatial) {
                    for l in 0..*lead {
                        let gv = g[l] / *spatial as f64;
                        for p in 0..*spatial {
                            da[l * spatial + p] += gv;
                        }
                    }
                }
            }
            Op::Log { a } => {
                if self.nodes[*a].requires_grad {
                    let va = &self.nodes[*a].value;
                    let da = scratch[*a].get_or_insert_with(|| vec![0.0; va.len()]);
                    for j in 0..va.len() {
                        da[j] += g[j] / va[j];
                    }
                }
            }
            Op::Exp { a } => {
                if self.nodes[*a].requires_grad {
                    let out = &self.nodes[i].value;
                    let da = scratch[*a].get_or_insert_with(|| vec![0.0; out.len()]);
                    for j in 0..out.len() {
                        da[j] += g[j] * out[j];
                    }
                }
            }
            Op::Sqrt { a } => {
                if self.nodes[*a].requires_grad {
                    let out = &self.nodes[i].value;
                    let da = scratch[*a].get_or_insert_with(|| vec![0.0; out.len()]);
                    for j in 0..out.len() {
                        // Subgradient 0 at the origin keeps norm terms usable
                        // from a zero perturbation.
                        if out[j] != 0.0 {
                            da[j] += g[j] * 0.5 / out[j];
                        }
                    }
                }
            }
            Op::Tanh { a } => {
                if self.nodes[*a].requires_grad {
                    let out = &self.nodes[i].value;
                    let da = scratch[*a].get_or_insert_with(|| vec![0.0; out.len()]);
                    for j in 0..out.len() {
                        da[j] += g[j] * (1.0 - out[j] * out[j]);
                    }
                }
            }
            Op::Clamp { a, lo, hi } => {
                if self.nodes[*a].requires_grad {
                    let va = &self.nodes[*a].value;
                    let da = scratch[*a].get_or_insert_with(|| vec![0.0; va.len()]);
                    for j in 0..va.len() {
                        if va[j] >= *lo && va[j] <= *hi {
                            da[j] += g[j];
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                if self.nodes[*a].requires_grad {
                    let va = &self.nodes[*a].value;
                    let da = scratch[*a].get_or_insert_with(|| vec![0.0; va.len()]);
                    for j in 0..va.len() {
                        let x = va[j];
                        let u = GELU_C0 * (x + GELU_C1 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x);
                        da[j] += g[j] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                    }
                }
            }
            Op::LeakyRelu { a, slope } => {
                if self.nodes[*a].requires_grad {
                    let va = &self.nodes[*a].value;
                    let da = scratch[*a].get_or_insert_with(|| vec![0.0; va.len()]);
                    for j in 0..va.len() {
                        da[j] += g[j] * if va[j] >= 0.0 { 1.0 } else { *slope };
                    }
                }
            }
            Op::Softmax { a, lead, n, trail } => {
                if self.nodes[*a].requires_grad {
                    let y = &self.nodes[i].value;
                    let da = scratch[*a].get_or_insert_with(|| vec![0.0; y.len()]);
                    for l in 0..*lead {
                        for t in 0..*trail {
                            let idx = |j: usize| (l * n + j) * trail + t;
                            let mut dot = 0.0;
                            for j in 0..*n {
                                dot += g[idx(j)] * y[idx(j)];
                            }
                            for j in 0..*n {
                                da[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { a, gamma, beta, lanes, n, affine_len, mean, rstd } => {
                let va = &self.nodes[*a].value;
                let vg = &self.nodes[*gamma].value;
                let n_ = *n;
                if self.nodes[*beta].requires_grad {
                    let db = scratch[*beta].get_or_insert_with(|| vec![0.0; *affine_len]);
                    for l in 0..*lanes {
                        for j in 0..n_ {
                            let t = if *affine_len == 1 { 0 } else { j };
                            db[t] += g[l * n_ + j];
                        }
                    }
                }
                if self.nodes[*gamma].requires_grad {
                    let dg = scratch[*gamma].get_or_insert_with(|| vec![0.0; *affine_len]);
                    for l in 0..*lanes {
                        for j in 0..n_ {
                            let xh = (va[l * n_ + j] - mean[l]) * rstd[l];
                            let t = if *affine_len == 1 { 0 } else { j };
                            dg[t] += g[l * n_ + j] * xh;
                        }
                    }
                }
                if self.nodes[*a].requires_grad {
                    let da = scratch[*a].get_or_insert_with(|| vec![0.0; va.len()]);
                    for l in 0..*lanes {
                        let mut mean_h = 0.0;
                        let mut mean_hx = 0.0;
                        for j in 0..n_ {
                            let gm = if *affine_len == 1 { vg[0] } else { vg[j] };
                            let h = g[l * n_ + j] * gm;
                            let xh = (va[l * n_ + j] - mean[l]) * rstd[l];
                            mean_h += h;
                            mean_hx += h * xh;
                        }
                        mean_h /= n_ as f64;
                        mean_hx /= n_ as f64;
                        for j in 0..n_ {
                            let gm = if *affine_len == 1 { vg[0] } else { vg[j] };
                            let h = g[l * n_ + j] * gm;
                            let xh = (va[l * n_ + j] - mean[l]) * rstd[l];
                            da[l * n_ + j] += rstd[l] * (h - mean_h - xh * mean_hx);
                        }
                    }
                }
            }
            Op::Conv2d { input, kernel, b, cin, h, w, f, kh, kw, dil, pad, oh, ow } => {
                let (b, cin, h, w, f, kh, kw, dil, pad, oh, ow) =
                    (*b, *cin, *h, *w, *f, *kh, *kw, *dil, *pad, *oh, *ow);
                let want_in = self.nodes[*input].requires_grad;
                let want_k = self.nodes[*kernel].requires_grad;
                if !want_in && !want_k {
                    return;
                }
                let vi = &self.nodes[*input].value;
                let vk = &self.nodes[*kernel].value;
                let mut din = if want_in { vec![0.0; b * cin * h * w] } else { Vec::new() };
                let mut dk = if want_k { vec![0.0; f * cin * kh * kw] } else { Vec::new() };
                for bi in 0..b {
                    for fi in 0..f {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[((bi * f + fi) * oh + oy) * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        let iy = oy + ky * dil;
                                        if iy < pad || iy - pad >= h {
                                            continue;
                                        }
                                        let iy = iy - pad;
                                        for kx in 0..kw {
                                            let ix = ox + kx * dil;
                                            if ix < pad || ix - pad >= w {
                                                continue;
                                            }
                                            let ix = ix - pad;
                                            let iidx = ((bi * cin + ci) * h + iy) * w + ix;
                                            let kidx = ((fi * cin + ci) * kh + ky) * kw + kx;
                                            if want_in {
                                                din[iidx] += gv * vk[kidx];
                                            }
                                            if want_k {
                                                dk[kidx] += gv * vi[iidx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if want_in {
                    let da = scratch[*input].get_or_insert_with(|| vec![0.0; din.len()]);
                    for (d, v) in da.iter_mut().zip(&din) {
                        *d += v;
                    }
                }
                if want_k {
                    let da = scratch[*kernel].get_or_insert_with(|| vec![0.0; dk.len()]);
                    for (d, v) in da.iter_mut().zip(&dk) {
                        *d += v;
                    }
                }
            }
            Op::BatchNormTrain { x, gamma, beta, b, c, spatial, mean, rstd } => {
                let vx = &self.nodes[*x].value;
                let vg = &self.nodes[*gamma].value;
                let (b, c, spatial) = (*b, *c, *spatial);
                let m = (b * spatial) as f64;
                if self.nodes[*beta].requires_grad {
                    let db = scratch[*beta].get_or_insert_with(|| vec![0.0; c]);
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * spatial;
                            for p in 0..spatial {
                                db[ci] += g[base + p];
                            }
                        }
                    }
                }
                if self.nodes[*gamma].requires_grad {
                    let dg = scratch[*gamma].get_or_insert_with(|| vec![0.0; c]);
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * spatial;
                            for p in 0..spatial {
                                let xh = (vx[base + p] - mean[ci]) * rstd[ci];
                                dg[ci] += g[base + p] * xh;
                            }
                        }
                    }
                }
                if self.nodes[*x].requires_grad {
                    let dx = scratch[*x].get_or_insert_with(|| vec![0.0; vx.len()]);
                    for ci in 0..c {
                        let mut mean_h = 0.0;
                        let mut mean_hx = 0.0;
                        for bi in 0..b {
                            let base = (bi * c + ci) * spatial;
                            for p in 0..spatial {
                                let h = g[base + p] * vg[ci];
                                let xh = (vx[base + p] - mean[ci]) * rstd[ci];
                                mean_h += h;
                                mean_hx += h * xh;
                            }
                        }
                        mean_h /= m;
                        mean_hx /= m;
                        for bi in 0..b {
                            let base = (bi * c + ci) * spatial;
                            for p in 0..spatial {
                                let h = g[base + p] * vg[ci];
                                let xh = (vx[base + p] - mean[ci]) * rstd[ci];
                                dx[base + p] += rstd[ci] * (h - mean_h - xh * mean_hx);
                            }
                        }
                    }
                }
            }
            Op::BatchNormRunning { x, gamma, beta, b, c, spatial, mean, rstd } => {
                let vx = &self.nodes[*x].value;
                let vg = &self.nodes[*gamma].value;
                let (b, c, spatial) = (*b, *c, *spatial);
                if self.nodes[*beta].requires_grad {
                    let db = scratch[*beta].get_or_insert_with(|| vec![0.0; c]);
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * spatial;
                            for p in 0..spatial {
                                db[ci] += g[base + p];
                            }
                        }
                    }
                }
                if self.nodes[*gamma].requires_grad {
                    let dg = scratch[*gamma].get_or_insert_with(|| vec![0.0; c]);
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * spatial;
                            for p in 0..spatial {
                                let xh = (vx[base + p] - mean[ci]) * rstd[ci];
                                dg[ci] += g[base + p] * xh;
                            }
                        }
                    }
                }
                if self.nodes[*x].requires_grad {
                    let dx = scratch[*x].get_or_insert_with(|| vec![0.0; vx.len()]);
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * spatial;
                            let k = vg[ci] * rstd[ci];
                            for p in 0..spatial {
                                dx[base + p] += g[base + p] * k;
                            }
                        }
                    }
                }
            }
            Op::InstanceNorm { x, groups, spatial, mean, rstd } => {
                if self.nodes[*x].requires_grad {
                    let vx = &self.nodes[*x].value;
                    let dx = scratch[*x].get_or_insert_with(|| vec![0.0; vx.len()]);
                    let sp = *spatial;
                    for gr in 0..*groups {
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for p in 0..sp {
                            let h = g[gr * sp + p];
                            let xh = (vx[gr * sp + p] - mean[gr]) * rstd[gr];
                            mean_g += h;
                            mean_gx += h * xh;
                        }
                        mean_g /= sp as f64;
                        mean_gx /= sp as f64;
                        for p in 0..sp {
                            let h = g[gr * sp + p];
                            let xh = (vx[gr * sp + p] - mean[gr]) * rstd[gr];
                            dx[gr * sp + p] += rstd[gr] * (h - mean_g - xh * mean_gx);
                        }
                    }
                }
            }
            Op::ResizePad { a, c, h, w, rh, rw, pad_t, pad_l } => {
                let (c, h, w, rh, rw, pad_t, pad_l) = (*c, *h, *w, *rh, *rw, *pad_t, *pad_l);
                if let Some(da) = acc!(*a, c * h * w) {
                    for ci in 0..c {
                        for i in 0..rh {
                            let sy = i * h / rh;
                            for j in 0..rw {
                                let sx = j * w / rw;
                                da[ci * h * w + sy * w + sx] += g[ci * h * w + (pad_t + i) * w + (pad_l + j)];
                            }
                        }
                    }
                }
            }
        }
    }
}
