//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Graphs are built define-by-run: every operation eagerly computes its value
//! and records itself on the [`Tape`]; [`Tape::backward`] then walks the tape
//! in reverse, producing gradients for every node marked as a parameter. All
//! arithmetic is `f64`; the only delegated kernel is the dense matrix
//! multiply (`matrixmultiply::dgemm`).
//!
//! Layout conventions: matrices are row-major `[rows, cols]`; feature maps
//! are channels-last (`[batch, height, width, channels]` in 2D,
//! `[batch, d1, d2, d3, channels]` in 3D), which lets convolution lower to
//! one gather (im2col) plus one gemm with no transposes.
//!
//! Shape mismatches are programmer errors and panic; fallible validation
//! belongs to the public network API a level up.

use matrixmultiply::dgemm;

/// Index of a node on its tape.
pub type NodeId = usize;

/// Dense tensor: a shape and a flat row-major buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert!(n > 0, "zero-sized tensor shape {shape:?}");
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data.fill(v);
        t
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {shape:?} wants {n} values, got {}", data.len());
        assert!(n > 0, "zero-sized tensor shape {shape:?}");
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    fn with_shape(mut self, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len());
        self.shape = shape;
        self
    }
}

/// Row-major gemm: `c = alpha * a @ b + beta * c`, with optional logical
/// transposes. `a` is `[m, k]` (stored `[k, m]` when `ta`), `b` is `[k, n]`
/// (stored `[n, k]` when `tb`), `c` is `[m, n]`.
fn gemm_rm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        dgemm(
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

/// Static geometry of a square-kernel 2D convolution.
#[derive(Debug, Clone, Copy)]
struct Conv2dMeta {
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_c: usize,
    oh: usize,
    ow: usize,
}

/// Static geometry of a cubic-kernel 3D convolution.
#[derive(Debug, Clone, Copy)]
struct Conv3dMeta {
    b: usize,
    d: [usize; 3],
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_c: usize,
    od: [usize; 3],
}

/// Static geometry of the sparse voxel patch stem.
#[derive(Debug, Clone, Copy)]
struct VoxelStemMeta {
    dims: (usize, usize, usize),
    patch: (usize, usize, usize),
    grid: (usize, usize, usize),
    out_c: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `x [R, D] + row [D]` broadcast over rows.
    AddRow(NodeId, NodeId),
    /// `x [R, D] + table [T, D]`, row `r` adding `table[r % T]`.
    AddRowPeriodic(NodeId, NodeId, usize),
    MatMul(NodeId, NodeId),
    /// Batched matmul over leading dim; `trans_b` treats `b` as `[n, k]`.
    Bmm { a: NodeId, b: NodeId, trans_b: bool },
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Abs(NodeId),
    SoftmaxLast(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    ConcatCols(Vec<NodeId>),
    SliceCols { x: NodeId, from: usize, to: usize },
    Reshape(NodeId),
    /// `[B*T, H*dh] -> [B*H, T, dh]`.
    SplitHeads { x: NodeId, tokens: usize, heads: usize },
    /// `[B*H, T, dh] -> [B*T, H*dh]`.
    MergeHeads { x: NodeId, tokens: usize, heads: usize },
    /// T inputs of `[B, D]` -> `[B*T, D]`, batch-major.
    StackRows(Vec<NodeId>),
    MeanAll(NodeId),
    Conv2d { x: NodeId, w: NodeId, b: NodeId, meta: Conv2dMeta },
    Conv3d { x: NodeId, w: NodeId, b: NodeId, meta: Conv3dMeta },
    AvgPool2d { x: NodeId, k: usize },
    GlobalMeanSpatial(NodeId),
    /// Patch embedding computed from occupied voxel indices only; the dense
    /// grid is never materialized. Input occupancy is data, not a node, so
    /// no input gradient exists (weights and bias get gradients).
    VoxelStem { w: NodeId, b: NodeId, occupied: Vec<Vec<u32>>, meta: VoxelStemMeta },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Moves a gradient out, leaving `None`.
    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn accumulate(slot: &mut Option<Tensor>, add: Tensor) {
    match slot {
        Some(t) => {
            debug_assert_eq!(t.shape(), add.shape());
            for (a, b) in t.data.iter_mut().zip(add.data.iter()) {
                *a += *b;
            }
        }
        None => *slot = Some(add),
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        self.nodes.len() - 1
    }

    /// Records input data; gradients never flow into it.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Records a trainable parameter; [`Gradients`] will hold its gradient.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(va.shape(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let value = Tensor::from_vec(va.shape(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(va.shape(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let va = &self.nodes[a].value;
        let data = va.data.iter().map(|x| x * s).collect();
        let value = Tensor::from_vec(va.shape(), data);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, s), needs)
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (vx, vr) = (&self.nodes[x].value, &self.nodes[row].value);
        let d = *vx.shape().last().unwrap();
        assert_eq!(vr.shape(), [d], "add_row wants a [D] row matching the last dim");
        let mut data = vx.data.clone();
        for chunk in data.chunks_exact_mut(d) {
            for (v, r) in chunk.iter_mut().zip(&vr.data) {
                *v += *r;
            }
        }
        let value = Tensor::from_vec(vx.shape(), data);
        let needs = self.needs(x) || self.needs(row);
        self.push(value, Op::AddRow(x, row), needs)
    }

    pub fn add_row_periodic(&mut self, x: NodeId, table: NodeId) -> NodeId {
        let (vx, vt) = (&self.nodes[x].value, &self.nodes[table].value);
        assert_eq!(vx.shape().len(), 2);
        assert_eq!(vt.shape().len(), 2);
        let d = vx.shape()[1];
        let t = vt.shape()[0];
        assert_eq!(vt.shape()[1], d);
        assert_eq!(vx.shape()[0] % t, 0, "row count must be a multiple of the table period");
        let mut data = vx.data.clone();
        for (r, chunk) in data.chunks_exact_mut(d).enumerate() {
            let trow = &vt.data[(r % t) * d..(r % t + 1) * d];
            for (v, p) in chunk.iter_mut().zip(trow) {
                *v += *p;
            }
        }
        let value = Tensor::from_vec(vx.shape(), data);
        let needs = self.needs(x) || self.needs(table);
        self.push(value, Op::AddRowPeriodic(x, table, t), needs)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape().len(), 2);
        assert_eq!(vb.shape().len(), 2);
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (k2, n) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm_rm(m, k, n, 1.0, &va.data, false, &vb.data, false, 0.0, &mut out);
        let value = Tensor::from_vec(&[m, n], out);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), needs)
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape().len(), 3);
        assert_eq!(vb.shape().len(), 3);
        let (nb, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        assert_eq!(vb.shape()[0], nb);
        let n = if trans_b {
            assert_eq!(vb.shape()[2], k, "bmm inner dim");
            vb.shape()[1]
        } else {
            assert_eq!(vb.shape()[1], k, "bmm inner dim");
            vb.shape()[2]
        };
        let mut out = vec![0.0; nb * m * n];
        for i in 0..nb {
            let sa = &va.data[i * m * k..(i + 1) * m * k];
            let sb = &vb.data[i * k * n..(i + 1) * k * n];
            let sc = &mut out[i * m * n..(i + 1) * m * n];
            gemm_rm(m, k, n, 1.0, sa, false, sb, trans_b, 0.0, sc);
        }
        let value = Tensor::from_vec(&[nb, m, n], out);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Bmm { a, b, trans_b }, needs)
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: f64) -> NodeId {
        let vx = &self.nodes[x].value;
        let data = vx.data.iter().map(|&v| if v > 0.0 { v } else { alpha * v }).collect();
        let value = Tensor::from_vec(vx.shape(), data);
        let needs = self.needs(x);
        self.push(value, Op::LeakyRelu(x, alpha), needs)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x].value;
        let data = vx.data.iter().map(|v| v.tanh()).collect();
        let value = Tensor::from_vec(vx.shape(), data);
        let needs = self.needs(x);
        self.push(value, Op::Tanh(x), needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x].value;
        let data = vx.data.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let value = Tensor::from_vec(vx.shape(), data);
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid(x), needs)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x].value;
        let data = vx.data.iter().map(|v| v.abs()).collect();
        let value = Tensor::from_vec(vx.shape(), data);
        let needs = self.needs(x);
        self.push(value, Op::Abs(x), needs)
    }

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x].value;
        let d = *vx.shape().last().unwrap();
        let mut data = vx.data.clone();
        for row in data.chunks_exact_mut(d) {
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
        let value = Tensor::from_vec(vx.shape(), data);
        let needs = self.needs(x);
        self.push(value, Op::SoftmaxLast(x), needs)
    }

    /// Layer normalization over the last dimension with learned gain/bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let (vx, vg, vb) = (&self.nodes[x].value, &self.nodes[gain].value, &self.nodes[bias].value);
        let d = *vx.shape().last().unwrap();
        assert_eq!(vg.shape(), [d]);
        assert_eq!(vb.shape(), [d]);
        let mut data = vx.data.clone();
        for row in data.chunks_exact_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * vg.data[i] + vb.data[i];
            }
        }
        let value = Tensor::from_vec(vx.shape(), data);
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(value, Op::LayerNorm { x, gain, bias, eps }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0]].value.shape()[0];
        let mut total = 0;
        for &p in parts {
            let s = self.nodes[p].value.shape();
            assert_eq!(s.len(), 2);
            assert_eq!(s[0], rows, "concat_cols row mismatch");
            total += s[1];
        }
        let mut data = vec![0.0; rows * total];
        let mut at = 0;
        for &p in parts {
            let v = &self.nodes[p].value;
            let d = v.shape()[1];
            for r in 0..rows {
                data[r * total + at..r * total + at + d].copy_from_slice(&v.data[r * d..(r + 1) * d]);
            }
            at += d;
        }
        let value = Tensor::from_vec(&[rows, total], data);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let vx = &self.nodes[x].value;
        assert_eq!(vx.shape().len(), 2);
        let (rows, d) = (vx.shape()[0], vx.shape()[1]);
        assert!(from < to && to <= d, "slice [{from}, {to}) out of width {d}");
        let width = to - from;
        let mut data = vec![0.0; rows * width];
        for r in 0..rows {
            data[r * width..(r + 1) * width].copy_from_slice(&vx.data[r * d + from..r * d + to]);
        }
        let value = Tensor::from_vec(&[rows, width], data);
        let needs = self.needs(x);
        self.push(value, Op::SliceCols { x, from, to }, needs)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let vx = &self.nodes[x].value;
        let value = vx.clone().with_shape(shape.to_vec());
        let needs = self.needs(x);
        self.push(value, Op::Reshape(x), needs)
    }

    pub fn split_heads(&mut self, x: NodeId, tokens: usize, heads: usize) -> NodeId {
        let vx = &self.nodes[x].value;
        assert_eq!(vx.shape().len(), 2);
        let (bt, d) = (vx.shape()[0], vx.shape()[1]);
        assert_eq!(bt % tokens, 0);
        assert_eq!(d % heads, 0);
        let b = bt / tokens;
        let dh = d / heads;
        let mut data = vec![0.0; bt * d];
        for bi in 0..b {
            for h in 0..heads {
                for t in 0..tokens {
                    let dst = (((bi * heads + h) * tokens) + t) * dh;
                    let src = (bi * tokens + t) * d + h * dh;
                    data[dst..dst + dh].copy_from_slice(&vx.data[src..src + dh]);
                }
            }
        }
        let value = Tensor::from_vec(&[b * heads, tokens, dh], data);
        let needs = self.needs(x);
        self.push(value, Op::SplitHeads { x, tokens, heads }, needs)
    }

    pub fn merge_heads(&mut self, x: NodeId, tokens: usize, heads: usize) -> NodeId {
        let vx = &self.nodes[x].value;
        assert_eq!(vx.shape().len(), 3);
        let (bh, t, dh) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert_eq!(t, tokens);
        assert_eq!(bh % heads, 0);
        let b = bh / heads;
        let d = heads * dh;
        let mut data = vec![0.0; b * tokens * d];
        for bi in 0..b {
            for h in 0..heads {
                for tk in 0..tokens {
                    let src = (((bi * heads + h) * tokens) + tk) * dh;
                    let dst = (bi * tokens + tk) * d + h * dh;
                    data[dst..dst + dh].copy_from_slice(&vx.data[src..src + dh]);
                }
            }
        }
        let value = Tensor::from_vec(&[b * tokens, d], data);
        let needs = self.needs(x);
        self.push(value, Op::MergeHeads { x, tokens, heads }, needs)
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let first = self.nodes[parts[0]].value.shape().to_vec();
        assert_eq!(first.len(), 2);
        let (b, d) = (first[0], first[1]);
        for &p in parts {
            assert_eq!(self.nodes[p].value.shape(), &first[..], "stack_rows shape mismatch");
        }
        let t = parts.len();
        let mut data = vec![0.0; b * t * d];
        for (ti, &p) in parts.iter().enumerate() {
            let v = &self.nodes[p].value;
            for bi in 0..b {
                let dst = (bi * t + ti) * d;
                data[dst..dst + d].copy_from_slice(&v.data[bi * d..(bi + 1) * d]);
            }
        }
        let value = Tensor::from_vec(&[b * t, d], data);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::StackRows(parts.to_vec()), needs)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x].value;
        let mean = vx.data.iter().sum::<f64>() / vx.numel() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(mean), Op::MeanAll(x), needs)
    }

    /// 2D convolution, square kernel. `x` is `[B, H, W, C]`, `w` is
    /// `[k*k*C, OC]` with rows ordered (ky, kx, c), `bias` is `[OC]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, bias: NodeId, k: usize, stride: usize, pad: usize) -> NodeId {
        let (vx, vw, vb) = (&self.nodes[x].value, &self.nodes[w].value, &self.nodes[bias].value);
        assert_eq!(vx.shape().len(), 4, "conv2d input must be [B, H, W, C]");
        let (b, h, wd, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        assert_eq!(vw.shape().len(), 2);
        assert_eq!(vw.shape()[0], k * k * c, "conv2d weight rows");
        let out_c = vw.shape()[1];
        assert_eq!(vb.shape(), [out_c]);
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "kernel larger than padded input");
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let meta = Conv2dMeta { b, h, w: wd, c, k, stride, pad, out_c, oh, ow };

        let cols = im2col2d(&vx.data, &meta);
        let rows = b * oh * ow;
        let mut out = vec![0.0; rows * out_c];
        gemm_rm(rows, k * k * c, out_c, 1.0, &cols, false, &vw.data, false, 0.0, &mut out);
        for chunk in out.chunks_exact_mut(out_c) {
            for (v, bv) in chunk.iter_mut().zip(&vb.data) {
                *v += *bv;
            }
        }
        let value = Tensor::from_vec(&[b, oh, ow, out_c], out);
        let needs = self.needs(x) || self.needs(w) || self.needs(bias);
        self.push(value, Op::Conv2d { x, w, b: bias, meta }, needs)
    }

    /// 3D convolution, cubic kernel. `x` is `[B, D1, D2, D3, C]`, `w` is
    /// `[k^3*C, OC]` with rows ordered (k1, k2, k3, c), `bias` is `[OC]`.
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, bias: NodeId, k: usize, stride: usize, pad: usize) -> NodeId {
        let (vx, vw, vb) = (&self.nodes[x].value, &self.nodes[w].value, &self.nodes[bias].value);
        assert_eq!(vx.shape().len(), 5, "conv3d input must be [B, D1, D2, D3, C]");
        let b = vx.shape()[0];
        let d = [vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        let c = vx.shape()[4];
        assert_eq!(vw.shape().len(), 2);
        assert_eq!(vw.shape()[0], k * k * k * c, "conv3d weight rows");
        let out_c = vw.shape()[1];
        assert_eq!(vb.shape(), [out_c]);
        let od = [
            (d[0] + 2 * pad - k) / stride + 1,
            (d[1] + 2 * pad - k) / stride + 1,
            (d[2] + 2 * pad - k) / stride + 1,
        ];
        let meta = Conv3dMeta { b, d, c, k, stride, pad, out_c, od };

        let cols = im2col3d(&vx.data, &meta);
        let rows = b * od[0] * od[1] * od[2];
        let mut out = vec![0.0; rows * out_c];
        gemm_rm(rows, k * k * k * c, out_c, 1.0, &cols, false, &vw.data, false, 0.0, &mut out);
        for chunk in out.chunks_exact_mut(out_c) {
            for (v, bv) in chunk.iter_mut().zip(&vb.data) {
                *v += *bv;
            }
        }
        let value = Tensor::from_vec(&[b, od[0], od[1], od[2], out_c], out);
        let needs = self.needs(x) || self.needs(w) || self.needs(bias);
        self.push(value, Op::Conv3d { x, w, b: bias, meta }, needs)
    }

    /// Non-overlapping average pooling; spatial dims must divide by `k`.
    pub fn avg_pool2d(&mut self, x: NodeId, k: usize) -> NodeId {
        let vx = &self.nodes[x].value;
        assert_eq!(vx.shape().len(), 4);
        let (b, h, w, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        assert!(h % k == 0 && w % k == 0, "pool size must divide spatial dims");
        let (oh, ow) = (h / k, w / k);
        let mut out = vec![0.0; b * oh * ow * c];
        let inv = 1.0 / (k * k) as f64;
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let dst = ((bi * oh + oy) * ow + ox) * c;
                    for ky in 0..k {
                        for kx in 0..k {
                            let src = ((bi * h + oy * k + ky) * w + ox * k + kx) * c;
                            for ci in 0..c {
                                out[dst + ci] += vx.data[src + ci];
                            }
                        }
                    }
                    for ci in 0..c {
                        out[dst + ci] *= inv;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[b, oh, ow, c], out);
        let needs = self.needs(x);
        self.push(value, Op::AvgPool2d { x, k }, needs)
    }

    /// Means over all spatial dims: `[B, s..., C] -> [B, C]`.
    pub fn global_mean_spatial(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x].value;
        assert!(vx.shape().len() >= 3, "need at least one spatial dim");
        let b = vx.shape()[0];
        let c = *vx.shape().last().unwrap();
        let spatial: usize = vx.shape()[1..vx.shape().len() - 1].iter().product();
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for s in 0..spatial {
                let src = (bi * spatial + s) * c;
                for ci in 0..c {
                    out[bi * c + ci] += vx.data[src + ci];
                }
            }
        }
        let inv = 1.0 / spatial as f64;
        for v in &mut out {
            *v *= inv;
        }
        let value = Tensor::from_vec(&[b, c], out);
        let needs = self.needs(x);
        self.push(value, Op::GlobalMeanSpatial(x), needs)
    }

    /// Sparse patch embedding of binary voxel grids. For each sample,
    /// `occupied` lists linear cell indices (i-major) into `dims`; the output
    /// block at the cell's patch accumulates the weight row of the cell's
    /// position within the patch. Bias applies to every output cell.
    ///
    /// `w` is `[px*py*pz, OC]`, output is `[B, gx, gy, gz, OC]` with
    /// `g = dims / patch` (must divide exactly).
    pub fn voxel_stem(
        &mut self,
        w: NodeId,
        bias: NodeId,
        occupied: Vec<Vec<u32>>,
        dims: (usize, usize, usize),
        patch: (usize, usize, usize),
    ) -> NodeId {
        let (vw, vb) = (&self.nodes[w].value, &self.nodes[bias].value);
        assert!(dims.0 % patch.0 == 0 && dims.1 % patch.1 == 0 && dims.2 % patch.2 == 0);
        let grid = (dims.0 / patch.0, dims.1 / patch.1, dims.2 / patch.2);
        let patch_vol = patch.0 * patch.1 * patch.2;
        assert_eq!(vw.shape().len(), 2);
        assert_eq!(vw.shape()[0], patch_vol);
        let out_c = vw.shape()[1];
        assert_eq!(vb.shape(), [out_c]);
        let b = occupied.len();
        assert!(b > 0, "voxel_stem needs at least one sample");
        let meta = VoxelStemMeta { dims, patch, grid, out_c };

        let cells = grid.0 * grid.1 * grid.2;
        let mut out = vec![0.0; b * cells * out_c];
        for chunk in out.chunks_exact_mut(out_c) {
            chunk.copy_from_slice(&vb.data);
        }
        for (bi, occ) in occupied.iter().enumerate() {
            for &lin in occ {
                let (block, pos) = stem_cell_split(lin as usize, &meta);
                let dst = (bi * cells + block) * out_c;
                let src = pos * out_c;
                for ci in 0..out_c {
                    out[dst + ci] += vw.data[src + ci];
                }
            }
        }
        let value = Tensor::from_vec(&[b, grid.0, grid.1, grid.2, out_c], out);
        let needs = self.needs(w) || self.needs(bias);
        self.push(value, Op::VoxelStem { w, b: bias, occupied, meta }, needs)
    }

    /// Runs reverse-mode accumulation from a scalar `root`. Returns one
    /// gradient per node that participated; nodes with `needs_grad == false`
    /// are skipped entirely.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.nodes[root].value.numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root] = Some(Tensor::filled(self.nodes[root].value.shape(), 1.0));

        for id in (0..=root).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            self.backprop_node(id, &gy, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, id: NodeId, gy: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[*a], gy.clone());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[*b], gy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[*a], gy.clone());
                }
                if self.needs(*b) {
                    let data = gy.data.iter().map(|v| -v).collect();
                    accumulate(&mut grads[*b], Tensor::from_vec(gy.shape(), data));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let vb = &self.nodes[*b].value;
                    let data = gy.data.iter().zip(&vb.data).map(|(g, v)| g * v).collect();
                    accumulate(&mut grads[*a], Tensor::from_vec(gy.shape(), data));
                }
                if self.needs(*b) {
                    let va = &self.nodes[*a].value;
                    let data = gy.data.iter().zip(&va.data).map(|(g, v)| g * v).collect();
                    accumulate(&mut grads[*b], Tensor::from_vec(gy.shape(), data));
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    let data = gy.data.iter().map(|v| v * s).collect();
                    accumulate(&mut grads[*a], Tensor::from_vec(gy.shape(), data));
                }
            }
            Op::AddRow(x, row) => {
                if self.needs(*x) {
                    accumulate(&mut grads[*x], gy.clone());
                }
                if self.needs(*row) {
                    let d = *gy.shape().last().unwrap();
                    let mut dr = vec![0.0; d];
                    for chunk in gy.data.chunks_exact(d) {
                        for (acc, g) in dr.iter_mut().zip(chunk) {
                            *acc += *g;
                        }
                    }
                    accumulate(&mut grads[*row], Tensor::from_vec(&[d], dr));
                }
            }
            Op::AddRowPeriodic(x, table, t) => {
                if self.needs(*x) {
                    accumulate(&mut grads[*x], gy.clone());
                }
                if self.needs(*table) {
                    let d = gy.shape()[1];
                    let mut dt = vec![0.0; t * d];
                    for (r, chunk) in gy.data.chunks_exact(d).enumerate() {
                        let dst = (r % t) * d;
                        for (i, g) in chunk.iter().enumerate() {
                            dt[dst + i] += *g;
                        }
                    }
                    accumulate(&mut grads[*table], Tensor::from_vec(&[*t, d], dt));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_rm(m, n, k, 1.0, &gy.data, false, &vb.data, true, 0.0, &mut da);
                    accumulate(&mut grads[*a], Tensor::from_vec(&[m, k], da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_rm(k, m, n, 1.0, &va.data, true, &gy.data, false, 0.0, &mut db);
                    accumulate(&mut grads[*b], Tensor::from_vec(&[k, n], db));
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (nb, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = gy.shape()[2];
                if self.needs(*a) {
                    let mut da = vec![0.0; nb * m * k];
                    for i in 0..nb {
                        let g = &gy.data[i * m * n..(i + 1) * m * n];
                        let sb = &vb.data[i * k * n..(i + 1) * k * n];
                        let d = &mut da[i * m * k..(i + 1) * m * k];
                        // trans_b false: dA = G @ B^T; true: dA = G @ B.
                        gemm_rm(m, n, k, 1.0, g, false, sb, !*trans_b, 0.0, d);
                    }
                    accumulate(&mut grads[*a], Tensor::from_vec(va.shape(), da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; vb.numel()];
                    for i in 0..nb {
                        let g = &gy.data[i * m * n..(i + 1) * m * n];
                        let sa = &va.data[i * m * k..(i + 1) * m * k];
                        let d = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B stored [n, k]: dB = G^T @ A.
                            gemm_rm(n, m, k, 1.0, g, true, sa, false, 0.0, d);
                        } else {
                            // dB = A^T @ G.
                            gemm_rm(k, m, n, 1.0, sa, true, g, false, 0.0, d);
                        }
                    }
                    accumulate(&mut grads[*b], Tensor::from_vec(vb.shape(), db));
                }
            }
            Op::LeakyRelu(x, alpha) => {
                if self.needs(*x) {
                    let vx = &self.nodes[*x].value;
                    let data = gy
                        .data
                        .iter()
                        .zip(&vx.data)
                        .map(|(g, &v)| if v > 0.0 { *g } else { *g * alpha })
                        .collect();
                    accumulate(&mut grads[*x], Tensor::from_vec(gy.shape(), data));
                }
            }
            Op::Tanh(x) => {
                if self.needs(*x) {
                    let vy = &node.value;
                    let data = gy.data.iter().zip(&vy.data).map(|(g, y)| g * (1.0 - y * y)).collect();
                    accumulate(&mut grads[*x], Tensor::from_vec(gy.shape(), data));
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let vy = &node.value;
                    let data = gy.data.iter().zip(&vy.data).map(|(g, y)| g * y * (1.0 - y)).collect();
                    accumulate(&mut grads[*x], Tensor::from_vec(gy.shape(), data));
                }
            }
            Op::Abs(x) => {
                if self.needs(*x) {
                    let vx = &self.nodes[*x].value;
                    let data = gy
                        .data
                        .iter()
                        .zip(&vx.data)
                        .map(|(g, &v)| if v > 0.0 { *g } else if v < 0.0 { -*g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[*x], Tensor::from_vec(gy.shape(), data));
                }
            }
            Op::SoftmaxLast(x) => {
                if self.needs(*x) {
                    let vy = &node.value;
                    let d = *vy.shape().last().unwrap();
                    let mut dx = vec![0.0; vy.numel()];
                    for (row, (yrow, grow)) in vy.data.chunks_exact(d).zip(gy.data.chunks_exact(d)).enumerate() {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for i in 0..d {
                            dx[row * d + i] = yrow[i] * (grow[i] - dot);
                        }
                    }
                    accumulate(&mut grads[*x], Tensor::from_vec(vy.shape(), dx));
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let vx = &self.nodes[*x].value;
                let vg = &self.nodes[*gain].value;
                let d = *vx.shape().last().unwrap();
                let rows = vx.numel() / d;
                let mut dx = if self.needs(*x) { vec![0.0; vx.numel()] } else { Vec::new() };
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for r in 0..rows {
                    let xrow = &vx.data[r * d..(r + 1) * d];
                    let grow = &gy.data[r * d..(r + 1) * d];
                    let mean = xrow.iter().sum::<f64>() / d as f64;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xrow.iter().map(|v| (v - mean) * inv).collect();
                    for i in 0..d {
                        dg[i] += grow[i] * xhat[i];
                        db[i] += grow[i];
                    }
                    if self.needs(*x) {
                        let h: Vec<f64> = grow.iter().zip(&vg.data).map(|(g, w)| g * w).collect();
                        let mean_h = h.iter().sum::<f64>() / d as f64;
                        let mean_hx = h.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for i in 0..d {
                            dx[r * d + i] = inv * (h[i] - mean_h - xhat[i] * mean_hx);
                        }
                    }
                }
                if self.needs(*x) {
                    accumulate(&mut grads[*x], Tensor::from_vec(vx.shape(), dx));
                }
                if self.needs(*gain) {
                    accumulate(&mut grads[*gain], Tensor::from_vec(&[d], dg));
                }
                if self.needs(*bias) {
                    accumulate(&mut grads[*bias], Tensor::from_vec(&[d], db));
                }
            }
            Op::ConcatCols(parts) => {
                let rows = gy.shape()[0];
                let total = gy.shape()[1];
                let mut at = 0;
                for &p in parts {
                    let d = self.nodes[p].value.shape()[1];
                    if self.needs(p) {
                        let mut dp = vec![0.0; rows * d];
                        for r in 0..rows {
                            dp[r * d..(r + 1) * d]
                                .copy_from_slice(&gy.data[r * total + at..r * total + at + d]);
                        }
                        accumulate(&mut grads[p], Tensor::from_vec(&[rows, d], dp));
                    }
                    at += d;
                }
            }
            Op::SliceCols { x, from, to } => {
                if self.needs(*x) {
                    let vx = &self.nodes[*x].value;
                    let (rows, d) = (vx.shape()[0], vx.shape()[1]);
                    let width = to - from;
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        dx[r * d + from..r * d + to]
                            .copy_from_slice(&gy.data[r * width..(r + 1) * width]);
                    }
                    accumulate(&mut grads[*x], Tensor::from_vec(&[rows, d], dx));
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    let shape = self.nodes[*x].value.shape().to_vec();
                    accumulate(&mut grads[*x], gy.clone().with_shape(shape));
                }
            }
            Op::SplitHeads { x, tokens, heads } => {
                if self.needs(*x) {
                    let vx = &self.nodes[*x].value;
                    let (bt, d) = (vx.shape()[0], vx.shape()[1]);
                    let b = bt / tokens;
                    let dh = d / heads;
                    let mut dx = vec![0.0; bt * d];
                    for bi in 0..b {
                        for h in 0..*heads {
                            for t in 0..*tokens {
                                let src = (((bi * heads + h) * tokens) + t) * dh;
                                let dst = (bi * tokens + t) * d + h * dh;
                                dx[dst..dst + dh].copy_from_slice(&gy.data[src..src + dh]);
                            }
                        }
                    }
                    accumulate(&mut grads[*x], Tensor::from_vec(&[bt, d], dx));
                }
            }
            Op::MergeHeads { x, tokens, heads } => {
                if self.needs(*x) {
                    let vx = &self.nodes[*x].value;
                    let (bh, t, dh) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                    let b = bh / heads;
                    let d = heads * dh;
                    let mut dx = vec![0.0; bh * t * dh];
                    for bi in 0..b {
                        for h in 0..*heads {
                            for tk in 0..*tokens {
                                let dst = (((bi * heads + h) * tokens) + tk) * dh;
                                let src = (bi * tokens + tk) * d + h * dh;
                                dx[dst..dst + dh].copy_from_slice(&gy.data[src..src + dh]);
                            }
                        }
                    }
                    accumulate(&mut grads[*x], Tensor::from_vec(vx.shape(), dx));
                }
            }
            Op::StackRows(parts) => {
                let t = parts.len();
                let d = gy.shape()[1];
                let b = gy.shape()[0] / t;
                for (ti, &p) in parts.iter().enumerate() {
                    if self.needs(p) {
                        let mut dp = vec![0.0; b * d];
                        for bi in 0..b {
                            let src = (bi * t + ti) * d;
                            dp[bi * d..(bi + 1) * d].copy_from_slice(&gy.data[src..src + d]);
                        }
                        accumulate(&mut grads[p], Tensor::from_vec(&[b, d], dp));
                    }
                }
            }
            Op::MeanAll(x) => {
                if self.needs(*x) {
                    let vx = &self.nodes[*x].value;
                    let g = gy.item() / vx.numel() as f64;
                    accumulate(&mut grads[*x], Tensor::filled(vx.shape(), g));
                }
            }
            Op::Conv2d { x, w, b, meta } => {
                let (vx, vw) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let rows = meta.b * meta.oh * meta.ow;
                let kk = meta.k * meta.k * meta.c;
                if self.needs(*b) {
                    let mut db = vec![0.0; meta.out_c];
                    for chunk in gy.data.chunks_exact(meta.out_c) {
                        for (acc, g) in db.iter_mut().zip(chunk) {
                            *acc += *g;
                        }
                    }
                    accumulate(&mut grads[*b], Tensor::from_vec(&[meta.out_c], db));
                }
                if self.needs(*w) {
                    let cols = im2col2d(&vx.data, meta);
                    let mut dw = vec![0.0; kk * meta.out_c];
                    gemm_rm(kk, rows, meta.out_c, 1.0, &cols, true, &gy.data, false, 0.0, &mut dw);
                    accumulate(&mut grads[*w], Tensor::from_vec(&[kk, meta.out_c], dw));
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; rows * kk];
                    gemm_rm(rows, meta.out_c, kk, 1.0, &gy.data, false, &vw.data, true, 0.0, &mut dcols);
                    let dx = col2im2d(&dcols, meta);
                    accumulate(&mut grads[*x], Tensor::from_vec(vx.shape(), dx));
                }
            }
            Op::Conv3d { x, w, b, meta } => {
                let (vx, vw) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let rows = meta.b * meta.od[0] * meta.od[1] * meta.od[2];
                let kk = meta.k * meta.k * meta.k * meta.c;
                if self.needs(*b) {
                    let mut db = vec![0.0; meta.out_c];
                    for chunk in gy.data.chunks_exact(meta.out_c) {
                        for (acc, g) in db.iter_mut().zip(chunk) {
                            *acc += *g;
                        }
                    }
                    accumulate(&mut grads[*b], Tensor::from_vec(&[meta.out_c], db));
                }
                if self.needs(*w) {
                    let cols = im2col3d(&vx.data, meta);
                    let mut dw = vec![0.0; kk * meta.out_c];
                    gemm_rm(kk, rows, meta.out_c, 1.0, &cols, true, &gy.data, false, 0.0, &mut dw);
                    accumulate(&mut grads[*w], Tensor::from_vec(&[kk, meta.out_c], dw));
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; rows * kk];
                    gemm_rm(rows, meta.out_c, kk, 1.0, &gy.data, false, &vw.data, true, 0.0, &mut dcols);
                    let dx = col2im3d(&dcols, meta);
                    accumulate(&mut grads[*x], Tensor::from_vec(vx.shape(), dx));
                }
            }
            Op::AvgPool2d { x, k } => {
                if self.needs(*x) {
                    let vx = &self.nodes[*x].value;
                    let (b, h, w, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
                    let (oh, ow) = (h / k, w / k);
                    let inv = 1.0 / (k * k) as f64;
                    let mut dx = vec![0.0; vx.numel()];
                    for bi in 0..b {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let src = ((bi * oh + oy) * ow + ox) * c;
                                for ky in 0..*k {
                                    for kx in 0..*k {
                                        let dst = ((bi * h + oy * k + ky) * w + ox * k + kx) * c;
                                        for ci in 0..c {
                                            dx[dst + ci] += gy.data[src + ci] * inv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[*x], Tensor::from_vec(vx.shape(), dx));
                }
            }
            Op::GlobalMeanSpatial(x) => {
                if self.needs(*x) {
                    let vx = &self.nodes[*x].value;
                    let b = vx.shape()[0];
                    let c = *vx.shape().last().unwrap();
                    let spatial: usize = vx.shape()[1..vx.shape().len() - 1].iter().product();
                    let inv = 1.0 / spatial as f64;
                    let mut dx = vec![0.0; vx.numel()];
                    for bi in 0..b {
                        for s in 0..spatial {
                            let dst = (bi * spatial + s) * c;
                            for ci in 0..c {
                                dx[dst + ci] = gy.data[bi * c + ci] * inv;
                            }
                        }
                    }
                    accumulate(&mut grads[*x], Tensor::from_vec(vx.shape(), dx));
                }
            }
            Op::VoxelStem { w, b, occupied, meta } => {
                let cells = meta.grid.0 * meta.grid.1 * meta.grid.2;
                if self.needs(*b) {
                    let mut db = vec![0.0; meta.out_c];
                    for chunk in gy.data.chunks_exact(meta.out_c) {
                        for (acc, g) in db.iter_mut().zip(chunk) {
                            *acc += *g;
                        }
                    }
                    accumulate(&mut grads[*b], Tensor::from_vec(&[meta.out_c], db));
                }
                if self.needs(*w) {
                    let patch_vol = meta.patch.0 * meta.patch.1 * meta.patch.2;
                    let mut dw = vec![0.0; patch_vol * meta.out_c];
                    for (bi, occ) in occupied.iter().enumerate() {
                        for &lin in occ {
                            let (block, pos) = stem_cell_split(lin as usize, meta);
                            let src = (bi * cells + block) * meta.out_c;
                            let dst = pos * meta.out_c;
                            for ci in 0..meta.out_c {
                                dw[dst + ci] += gy.data[src + ci];
                            }
                        }
                    }
                    accumulate(&mut grads[*w], Tensor::from_vec(&[patch_vol, meta.out_c], dw));
                }
            }
        }
    }
}

/// Splits a linear voxel index into (output block linear index, position
/// within patch).
fn stem_cell_split(lin: usize, meta: &VoxelStemMeta) -> (usize, usize) {
    let (dx, dy, dz) = meta.dims;
    debug_assert!(lin < dx * dy * dz);
    let k = lin % dz;
    let rest = lin / dz;
    let j = rest % dy;
    let i = rest / dy;
    let (px, py, pz) = meta.patch;
    let block = ((i / px) * meta.grid.1 + (j / py)) * meta.grid.2 + (k / pz);
    let pos = ((i % px) * py + (j % py)) * pz + (k % pz);
    (block, pos)
}

fn im2col2d(x: &[f64], m: &Conv2dMeta) -> Vec<f64> {
    let kk = m.k * m.k * m.c;
    let mut cols = vec![0.0; m.b * m.oh * m.ow * kk];
    for bi in 0..m.b {
        for oy in 0..m.oh {
            for ox in 0..m.ow {
                let row = ((bi * m.oh + oy) * m.ow + ox) * kk;
                for ky in 0..m.k {
                    let iy = (oy * m.stride + ky) as isize - m.pad as isize;
                    if iy < 0 || iy >= m.h as isize {
                        continue;
                    }
                    for kx in 0..m.k {
                        let ix = (ox * m.stride + kx) as isize - m.pad as isize;
                        if ix < 0 || ix >= m.w as isize {
                            continue;
                        }
                        let src = ((bi * m.h + iy as usize) * m.w + ix as usize) * m.c;
                        let dst = row + (ky * m.k + kx) * m.c;
                        cols[dst..dst + m.c].copy_from_slice(&x[src..src + m.c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im2d(dcols: &[f64], m: &Conv2dMeta) -> Vec<f64> {
    let kk = m.k * m.k * m.c;
    let mut dx = vec![0.0; m.b * m.h * m.w * m.c];
    for bi in 0..m.b {
        for oy in 0..m.oh {
            for ox in 0..m.ow {
                let row = ((bi * m.oh + oy) * m.ow + ox) * kk;
                for ky in 0..m.k {
                    let iy = (oy * m.stride + ky) as isize - m.pad as isize;
                    if iy < 0 || iy >= m.h as isize {
                        continue;
                    }
                    for kx in 0..m.k {
                        let ix = (ox * m.stride + kx) as isize - m.pad as isize;
                        if ix < 0 || ix >= m.w as isize {
                            continue;
                        }
                        let dst = ((bi * m.h + iy as usize) * m.w + ix as usize) * m.c;
                        let src = row + (ky * m.k + kx) * m.c;
                        for ci in 0..m.c {
                            dx[dst + ci] += dcols[src + ci];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn im2col3d(x: &[f64], m: &Conv3dMeta) -> Vec<f64> {
    let kk = m.k * m.k * m.k * m.c;
    let mut cols = vec![0.0; m.b * m.od[0] * m.od[1] * m.od[2] * kk];
    for bi in 0..m.b {
        for o1 in 0..m.od[0] {
            for o2 in 0..m.od[1] {
                for o3 in 0..m.od[2] {
                    let row = (((bi * m.od[0] + o1) * m.od[1] + o2) * m.od[2] + o3) * kk;
                    for k1 in 0..m.k {
                        let i1 = (o1 * m.stride + k1) as isize - m.pad as isize;
                        if i1 < 0 || i1 >= m.d[0] as isize {
                            continue;
                        }
                        for k2 in 0..m.k {
                            let i2 = (o2 * m.stride + k2) as isize - m.pad as isize;
                            if i2 < 0 || i2 >= m.d[1] as isize {
                                continue;
                            }
                            for k3 in 0..m.k {
                                let i3 = (o3 * m.stride + k3) as isize - m.pad as isize;
                                if i3 < 0 || i3 >= m.d[2] as isize {
                                    continue;
                                }
                                let src = (((bi * m.d[0] + i1 as usize) * m.d[1] + i2 as usize)
                                    * m.d[2]
                                    + i3 as usize)
                                    * m.c;
                                let dst = row + ((k1 * m.k + k2) * m.k + k3) * m.c;
                                cols[dst..dst + m.c].copy_from_slice(&x[src..src + m.c]);
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im3d(dcols: &[f64], m: &Conv3dMeta) -> Vec<f64> {
    let kk = m.k * m.k * m.k * m.c;
    let mut dx = vec![0.0; m.b * m.d[0] * m.d[1] * m.d[2] * m.c];
    for bi in 0..m.b {
        for o1 in 0..m.od[0] {
            for o2 in 0..m.od[1] {
                for o3 in 0..m.od[2] {
                    let row = (((bi * m.od[0] + o1) * m.od[1] + o2) * m.od[2] + o3) * kk;
                    for k1 in 0..m.k {
                        let i1 = (o1 * m.stride + k1) as isize - m.pad as isize;
                        if i1 < 0 || i1 >= m.d[0] as isize {
                            continue;
                        }
                        for k2 in 0..m.k {
                            let i2 = (o2 * m.stride + k2) as isize - m.pad as isize;
                            if i2 < 0 || i2 >= m.d[1] as isize {
                                continue;
                            }
                            for k3 in 0..m.k {
                                let i3 = (o3 * m.stride + k3) as isize - m.pad as isize;
                                if i3 < 0 || i3 >= m.d[2] as isize {
                                    continue;
                                }
                                let dst = (((bi * m.d[0] + i1 as usize) * m.d[1] + i2 as usize)
                                    * m.d[2]
                                    + i3 as usize)
                                    * m.c;
                                let src = row + ((k1 * m.k + k2) * m.k + k3) * m.c;
                                for ci in 0..m.c {
                                    dx[dst + ci] += dcols[src + ci];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
