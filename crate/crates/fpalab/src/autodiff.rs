//! Reverse-mode automatic differentiation on a flat tape of `f32` tensors.
//!
//! Every forward operation appends one node (value + op record) to a [`Tape`];
//! [`Tape::backward`] walks the nodes in exact reverse execution order and
//! accumulates adjoints. The design is deliberately plain:
//!
//! * all arithmetic is 32-bit with fixed summation orders, so identical seeds
//!   and inputs reproduce bit-identical values within a build;
//! * a tape is built fresh for every attack iteration and consumed by a single
//!   backward sweep — a second sweep is an error, and higher-order derivatives
//!   are out of scope;
//! * gradients are retained only for leaves created with `requires_grad`;
//!   interior adjoint buffers are freed as the sweep retreats.
//!
//! Convolution uses zero padding, stride >= 1, no dilation, and accumulates
//! each output element over (input channel, kernel row, kernel column) in that
//! order.

use crate::error::{Error, Result};
use crate::fp::PermutationPlan;
use crate::tensor::{numel, strides, Tensor};
use std::sync::Arc;

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Per-sample placement used by the resize-and-pad op: the sample is resized
/// to `size x size` (bilinear) and pasted at `(top, left)` on a zero canvas of
/// the original spatial extent. `None` leaves the sample untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResamplePlacement {
    pub size: usize,
    pub top: usize,
    pub left: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, k: f32 },
    /// `b`'s shape is a suffix of `a`'s; `b` broadcasts over the leading axes.
    AddSuffix { a: NodeId, b: NodeId },
    /// `a` is `[N,C,H,W]`, `b` is `[C]` broadcast over batch and space.
    AddChannel { a: NodeId, b: NodeId },
    Matmul { a: NodeId, b: NodeId },
    BatchMatmul { a: NodeId, b: NodeId },
    Permute { a: NodeId, axes: Vec<usize> },
    Reshape { a: NodeId },
    Relu { a: NodeId },
    Gelu { a: NodeId },
    Softmax { a: NodeId, axis: usize },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Conv2d { x: NodeId, f: NodeId, stride: usize, padding: usize },
    AvgPool2d { x: NodeId, kernel: usize, stride: usize },
    Patchify { x: NodeId, patch: usize },
    CrossEntropy { logits: NodeId, labels: Arc<Vec<u8>> },
    FeaturePermutation { x: NodeId, plans: Arc<Vec<PermutationPlan>> },
    ResizePad { x: NodeId, placements: Arc<Vec<Option<ResamplePlacement>>> },
    Sum { a: NodeId },
    MeanAxis { a: NodeId, axis: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f32>>,
}

/// Flat autodiff tape. Build ops through the methods below, then call
/// [`Tape::backward`] on a scalar node exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

const LAYER_NORM_EPS: f32 = 1e-5;
const GELU_A: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_B: f32 = 0.044_715;

/// glibc serves allocations above ~128 KB straight from mmap and returns
/// them to the kernel on free, so every tape op would pay page-fault costs
/// for its activation buffer. Raising the threshold once keeps those buffers
/// on the regular heap, where freed blocks are reused across iterations.
fn tune_allocator() {
    #[cfg(target_env = "gnu")]
    {
        use std::sync::Once;
        static ONCE: Once = Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 512 * 1024 * 1024);
        });
    }
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

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of a `requires_grad` leaf after `backward`. `None`
    /// before the sweep, for interior nodes, and for leaves the loss never
    /// reached.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    // ===================== leaves =====================

    /// Insert an input tensor. Gradients are retained for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Insert a constant (no gradient tracked).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    // ===================== elementwise =====================

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "add",
                format!("lhs {:?} vs rhs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "mul",
                format!("lhs {:?} vs rhs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, a: NodeId, k: f32) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|x| k * x).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Scale { a, k }, needs))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (dense bias, positional
    /// embeddings).
    pub fn add_suffix(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.is_empty() || sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(Error::dim(
                "add_suffix",
                format!("rhs {sb:?} is not a trailing suffix of lhs {sa:?}"),
            ));
        }
        let blen = numel(&sb);
        let bdat = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bdat[i % blen])
            .collect();
        let value = Tensor::new(sa, data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::AddSuffix { a, b }, needs))
    }

    /// `a + b` where `a` is `[N,C,H,W]` and `b` is a per-channel bias `[C]`.
    pub fn add_channel_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 4 || sb.len() != 1 || sb[0] != sa[1] {
            return Err(Error::dim(
                "add_channel_bias",
                format!("activation {sa:?} with bias {sb:?} (need [N,C,H,W] and [C])"),
            ));
        }
        let (c, hw) = (sa[1], sa[2] * sa[3]);
        let mut data = self.value(a).data().to_vec();
        let bdat = self.value(b).data();
        for (plane, &bv) in data.chunks_mut(hw).zip(bdat.iter().cycle().take(sa[0] * c)) {
            for v in plane {
                *v += bv;
            }
        }
        let value = Tensor::new(sa, data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::AddChannel { a, b }, needs))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        // max(0.0) compiles to a branch-free vector max; NaN still maps to 0.
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Relu { a }, needs))
    }

    /// Tanh-approximation GELU: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| {
                let u = GELU_A * (x + GELU_B * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            })
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Gelu { a }, needs))
    }

    // ===================== linear algebra =====================

    /// `[M,K] x [K,N] -> [M,N]`, accumulating over `K` in index order.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(
                "matmul",
                format!("lhs {sa:?} vs rhs {sb:?} (inner axes must agree)"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), 1, m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul { a, b }, needs))
    }

    /// `[B,M,K] x [B,K,N] -> [B,M,N]`, batched over the leading axis.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim(
                "batch_matmul",
                format!("lhs {sa:?} vs rhs {sb:?} (need [B,M,K] x [B,K,N])"),
            ));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), bt, m, k, n);
        let value = Tensor::new(vec![bt, m, n], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::BatchMatmul { a, b }, needs))
    }

    // ===================== layout =====================

    /// Reorder axes; `axes` must be a permutation of `0..rank`.
    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len() || axes.iter().any(|&ax| ax >= sa.len() || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::dim(
                "permute",
                format!("axes {axes:?} is not a permutation of 0..{}", sa.len()),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| sa[ax]).collect();
        let data = permute_copy(self.value(a).data(), &sa, axes);
        let value = Tensor::new(out_shape, data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Permute { a, axes: axes.to_vec() }, needs))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(a)),
            ));
        }
        let value = Tensor::new(shape.to_vec(), self.value(a).data().to_vec())?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape { a }, needs))
    }

    // ===================== normalization =====================

    /// Numerically stable softmax along `axis` (max-subtracted exponentials).
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::dim(
                "softmax",
                format!("axis {axis} out of range for shape {sa:?}"),
            ));
        }
        let (outer, lanes, inner) = axis_split(&sa, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0f32; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * lanes + k) * inner + i;
                let mut mx = f32::NEG_INFINITY;
                for k in 0..lanes {
                    mx = mx.max(src[at(k)]);
                }
                let mut denom = 0.0f32;
                for k in 0..lanes {
                    let e = (src[at(k)] - mx).exp();
                    data[at(k)] = e;
                    denom += e;
                }
                for k in 0..lanes {
                    data[at(k)] /= denom;
                }
            }
        }
        let value = Tensor::new(sa, data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Softmax { a, axis }, needs))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::dim("layer_norm", "input is a scalar".to_string()))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} must both be [{d}] for input {sx:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let rows = numel(&sx) / d;
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut data = vec![0.0f32; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let (mean, rstd) = row_stats(row);
            for (j, out) in data[r * d..(r + 1) * d].iter_mut().enumerate() {
                *out = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let value = Tensor::new(sx, data)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias }, needs))
    }

    // ===================== spatial =====================

    /// 2-D convolution (cross-correlation): `[N,C,H,W] * [T,C,KH,KW] ->
    /// [N,T,OH,OW]` with zero padding and integer stride. Each output element
    /// accumulates over (channel, kernel row, kernel col) in that order.
    pub fn conv2d(&mut self, x: NodeId, f: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (sx, sf) = (self.shape(x).to_vec(), self.shape(f).to_vec());
        if sx.len() != 4 || sf.len() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("input {sx:?} and filter {sf:?} must both be rank 4"),
            ));
        }
        if sx[1] != sf[1] {
            return Err(Error::dim(
                "conv2d",
                format!("input channels {} != filter channels {}", sx[1], sf[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be >= 1".to_string()));
        }
        let geo = ConvGeometry::new(&sx, &sf, stride, padding)?;
        let data = conv2d_forward(self.value(x).data(), self.value(f).data(), &geo);
        let value = Tensor::new(vec![geo.n, geo.t, geo.oh, geo.ow], data)?;
        let needs = self.needs(x) || self.needs(f);
        Ok(self.push(value, Op::Conv2d { x, f, stride, padding }, needs))
    }

    /// Average pooling with a square `kernel x kernel` window. The window must
    /// tile the input exactly (`(H - kernel) % stride == 0`, same for W).
    pub fn avg_pool2d(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::dim("avg_pool2d", format!("expected [N,C,H,W], got {sx:?}")));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(Error::dim(
                "avg_pool2d",
                format!("kernel {kernel} / stride {stride} incompatible with {h}x{w} input"),
            ));
        }
        if (h - kernel) % stride != 0 || (w - kernel) % stride != 0 {
            return Err(Error::dim(
                "avg_pool2d",
                format!("window k={kernel}, s={stride} does not tile {h}x{w} exactly"),
            ));
        }
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let src = self.value(x).data();
        let norm = 1.0 / (kernel * kernel) as f32;
        let mut data = vec![0.0f32; n * c * oh * ow];
        for nc in 0..n * c {
            let plane = &src[nc * h * w..(nc + 1) * h * w];
            let out = &mut data[nc * oh * ow..(nc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ky in 0..kernel {
                        let row = &plane[(oy * stride + ky) * w + ox * stride..][..kernel];
                        for v in row {
                            acc += *v;
                        }
                    }
                    out[oy * ow + ox] = acc * norm;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::AvgPool2d { x, kernel, stride }, needs))
    }

    /// Cut `[N,C,H,W]` into non-overlapping `patch x patch` tiles:
    /// `[N, (H/p)*(W/p), C*p*p]`, tiles in row-major grid order, features in
    /// (channel, row, col) order.
    pub fn patchify(&mut self, x: NodeId, patch: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::dim("patchify", format!("expected [N,C,H,W], got {sx:?}")));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::dim(
                "patchify",
                format!("patch {patch} does not divide {h}x{w}"),
            ));
        }
        let (th, tw) = (h / patch, w / patch);
        let (tokens, feat) = (th * tw, c * patch * patch);
        let src = self.value(x).data();
        let mut data = vec![0.0f32; n * tokens * feat];
        for s in 0..n {
            for gy in 0..th {
                for gx in 0..tw {
                    let tok = gy * tw + gx;
                    let out = &mut data[(s * tokens + tok) * feat..][..feat];
                    for ch in 0..c {
                        for py in 0..patch {
                            let src_row = &src[((s * c + ch) * h + gy * patch + py) * w + gx * patch..][..patch];
                            let dst = &mut out[(ch * patch + py) * patch..][..patch];
                            dst.copy_from_slice(src_row);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, tokens, feat], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Patchify { x, patch }, needs))
    }

    // ===================== losses and reductions =====================

    /// Mean cross-entropy of `[N,K]` logits against integer labels, computed
    /// via a max-shifted log-sum-exp. Returns a scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[u8]) -> Result<NodeId> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 {
            return Err(Error::dim("cross_entropy", format!("expected [N,K] logits, got {sl:?}")));
        }
        let (n, k) = (sl[0], sl[1]);
        if labels.len() != n {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} labels for a batch of {n}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::dim(
                "cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let src = self.value(logits).data();
        let mut total = 0.0f32;
        for (row, &label) in labels.iter().enumerate() {
            let lane = &src[row * k..(row + 1) * k];
            let mx = lane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f32;
            for &v in lane {
                denom += (v - mx).exp();
            }
            total += mx + denom.ln() - lane[label as usize];
        }
        let value = Tensor::scalar(total / n as f32);
        let needs = self.needs(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: Arc::new(labels.to_vec()),
            },
            needs,
        ))
    }

    /// Sum of all elements (scalar node).
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let mut acc = 0.0f32;
        for v in self.value(a).data() {
            acc += *v;
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::scalar(acc), Op::Sum { a }, needs))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::dim(
                "mean_axis",
                format!("axis {axis} out of range for shape {sa:?}"),
            ));
        }
        let (outer, lanes, inner) = axis_split(&sa, axis);
        let src = self.value(a).data();
        let norm = 1.0 / lanes as f32;
        let mut data = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for k in 0..lanes {
                let base = (o * lanes + k) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        for v in &mut data {
            *v *= norm;
        }
        let mut out_shape = sa.clone();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::MeanAxis { a, axis }, needs))
    }

    // ===================== attack-specific ops =====================

    /// Permute spatial positions within masked channels according to `plans`
    /// (one per sample, or one shared). Pure data movement; the adjoint routes
    /// gradients through the inverse permutations.
    pub fn feature_permutation(&mut self, x: NodeId, plans: Vec<PermutationPlan>) -> Result<NodeId> {
        let value = crate::fp::apply_forward(self.value(x), &plans)?;
        let needs = self.needs(x);
        Ok(self.push(
            value,
            Op::FeaturePermutation {
                x,
                plans: Arc::new(plans),
            },
            needs,
        ))
    }

    /// Per-sample bilinear resize to `size x size` followed by zero padding
    /// back to the original extent at a given offset. `None` entries pass
    /// through bit-exactly, as does `size == H == W` at offset zero.
    pub fn resize_pad(&mut self, x: NodeId, placements: Vec<Option<ResamplePlacement>>) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::dim("resize_pad", format!("expected [N,C,H,W], got {sx:?}")));
        }
        let (n, _c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if placements.len() != n {
            return Err(Error::dim(
                "resize_pad",
                format!("{} placements for a batch of {n}", placements.len()),
            ));
        }
        for p in placements.iter().flatten() {
            if p.size == 0 || p.top + p.size > h || p.left + p.size > w {
                return Err(Error::dim(
                    "resize_pad",
                    format!("placement {p:?} does not fit inside {h}x{w}"),
                ));
            }
        }
        let value = resize_pad_forward(self.value(x), &placements)?;
        let needs = self.needs(x);
        Ok(self.push(
            value,
            Op::ResizePad {
                x,
                placements: Arc::new(placements),
            },
            needs,
        ))
    }

    // ===================== backward =====================

    /// Reverse sweep from a scalar node. Consumes the tape: a second call is
    /// an error, as is sweeping from a non-scalar node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape(
                "backward already ran on this tape; rebuild the graph to differentiate again".to_string(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Tape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    // Retain gradients only for leaves that asked for them.
                    self.nodes[i].grad = Some(g);
                    continue;
                }
                Op::Add { a, b } => {
                    if self.needs(a) && self.needs(b) {
                        give(&mut grads[a.0], g.clone());
                        give(&mut grads[b.0], g);
                    } else if self.needs(a) {
                        give(&mut grads[a.0], g);
                    } else if self.needs(b) {
                        give(&mut grads[b.0], g);
                    }
                }
                Op::Mul { a, b } => {
                    let mut g = g;
                    if self.needs(a) && self.needs(b) {
                        let bv = self.nodes[b.0].value.data();
                        let ga: Vec<f32> = g.iter().zip(bv).map(|(gi, bi)| gi * bi).collect();
                        give(&mut grads[a.0], ga);
                    } else if self.needs(a) {
                        let bv = self.nodes[b.0].value.data();
                        for (gi, bi) in g.iter_mut().zip(bv) {
                            *gi *= bi;
                        }
                        give(&mut grads[a.0], g);
                        continue;
                    }
                    if self.needs(b) {
                        let av = self.nodes[a.0].value.data();
                        for (gi, ai) in g.iter_mut().zip(av) {
                            *gi *= ai;
                        }
                        give(&mut grads[b.0], g);
                    }
                }
                Op::Scale { a, k } => {
                    if self.needs(a) {
                        let mut g = g;
                        for gi in g.iter_mut() {
                            *gi *= k;
                        }
                        give(&mut grads[a.0], g);
                    }
                }
                Op::AddSuffix { a, b } => {
                    if self.needs(b) {
                        let blen = self.nodes[b.0].value.len();
                        let gb = acc(&mut grads[b.0], blen);
                        for (i, gi) in g.iter().enumerate() {
                            gb[i % blen] += gi;
                        }
                    }
                    if self.needs(a) {
                        give(&mut grads[a.0], g);
                    }
                }
                Op::AddChannel { a, b } => {
                    if self.needs(b) {
                        let sa = self.nodes[a.0].value.shape().to_vec();
                        let (c, hw) = (sa[1], sa[2] * sa[3]);
                        let gb = acc(&mut grads[b.0], c);
                        for (i, gi) in g.iter().enumerate() {
                            gb[(i / hw) % c] += gi;
                        }
                    }
                    if self.needs(a) {
                        give(&mut grads[a.0], g);
                    }
                }
                Op::Matmul { a, b } => {
                    self.matmul_backward(&g, a, b, 1, &mut grads);
                }
                Op::BatchMatmul { a, b } => {
                    let bt = self.nodes[a.0].value.shape()[0];
                    self.matmul_backward(&g, a, b, bt, &mut grads);
                }
                Op::Permute { a, axes } => {
                    if self.needs(a) {
                        let sa = self.nodes[a.0].value.shape().to_vec();
                        let out_shape: Vec<usize> = axes.iter().map(|&ax| sa[ax]).collect();
                        let mut inverse = vec![0usize; axes.len()];
                        for (d, &ax) in axes.iter().enumerate() {
                            inverse[ax] = d;
                        }
                        let routed = permute_copy(&g, &out_shape, &inverse);
                        axpy(acc(&mut grads[a.0], self.nodes[a.0].value.len()), &routed, 1.0);
                    }
                }
                Op::Reshape { a } => {
                    if self.needs(a) {
                        give(&mut grads[a.0], g);
                    }
                }
                Op::Relu { a } => {
                    if self.needs(a) {
                        let av = self.nodes[a.0].value.data();
                        let mut g = g;
                        for (gi, &ai) in g.iter_mut().zip(av) {
                            *gi = if ai > 0.0 { *gi } else { 0.0 };
                        }
                        give(&mut grads[a.0], g);
                    }
                }
                Op::Gelu { a } => {
                    if self.needs(a) {
                        let av = self.nodes[a.0].value.data();
                        let mut g = g;
                        for (gi, &x) in g.iter_mut().zip(av) {
                            let u = GELU_A * (x + GELU_B * x * x * x);
                            let t = u.tanh();
                            let du = GELU_A * (1.0 + 3.0 * GELU_B * x * x);
                            *gi *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                        }
                        give(&mut grads[a.0], g);
                    }
                }
                Op::Softmax { a, axis } => {
                    if self.needs(a) {
                        let sa = self.nodes[i].value.shape().to_vec();
                        let y = self.nodes[i].value.data();
                        let (outer, lanes, inner) = axis_split(&sa, axis);
                        let ga = acc(&mut grads[a.0], y.len());
                        for o in 0..outer {
                            for ii in 0..inner {
                                let at = |k: usize| (o * lanes + k) * inner + ii;
                                let mut dot = 0.0f32;
                                for k in 0..lanes {
                                    dot += g[at(k)] * y[at(k)];
                                }
                                for k in 0..lanes {
                                    let idx = at(k);
                                    ga[idx] += y[idx] * (g[idx] - dot);
                                }
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    self.layer_norm_backward(&g, x, gain, bias, &mut grads);
                }
                Op::Conv2d { x, f, stride, padding } => {
                    let geo = ConvGeometry::new(
                        self.nodes[x.0].value.shape(),
                        self.nodes[f.0].value.shape(),
                        stride,
                        padding,
                    )
                    .expect("geometry validated at forward time");
                    if self.needs(x) {
                        let gx = conv2d_backward_input(&g, self.nodes[f.0].value.data(), &geo);
                        give(&mut grads[x.0], gx);
                    }
                    if self.needs(f) {
                        let gf = conv2d_backward_filter(&g, self.nodes[x.0].value.data(), &geo);
                        give(&mut grads[f.0], gf);
                    }
                }
                Op::AvgPool2d { x, kernel, stride } => {
                    if self.needs(x) {
                        let sx = self.nodes[x.0].value.shape().to_vec();
                        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
                        let norm = 1.0 / (kernel * kernel) as f32;
                        let gx = acc(&mut grads[x.0], n * c * h * w);
                        for nc in 0..n * c {
                            let gin = &mut gx[nc * h * w..(nc + 1) * h * w];
                            let gout = &g[nc * oh * ow..(nc + 1) * oh * ow];
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = gout[oy * ow + ox] * norm;
                                    for ky in 0..kernel {
                                        let row = &mut gin[(oy * stride + ky) * w + ox * stride..][..kernel];
                                        for v in row {
                                            *v += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Patchify { x, patch } => {
                    if self.needs(x) {
                        let sx = self.nodes[x.0].value.shape().to_vec();
                        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                        let (th, tw) = (h / patch, w / patch);
                        let (tokens, feat) = (th * tw, c * patch * patch);
                        let gx = acc(&mut grads[x.0], n * c * h * w);
                        for s in 0..n {
                            for gy in 0..th {
                                for gxx in 0..tw {
                                    let tok = gy * tw + gxx;
                                    let gout = &g[(s * tokens + tok) * feat..][..feat];
                                    for ch in 0..c {
                                        for py in 0..patch {
                                            let dst = &mut gx
                                                [((s * c + ch) * h + gy * patch + py) * w + gxx * patch..][..patch];
                                            let srcg = &gout[(ch * patch + py) * patch..][..patch];
                                            for (d, v) in dst.iter_mut().zip(srcg) {
                                                *d += v;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, labels } => {
                    if self.needs(logits) {
                        let sl = self.nodes[logits.0].value.shape().to_vec();
                        let (nb, k) = (sl[0], sl[1]);
                        let src = self.nodes[logits.0].value.data();
                        let gs = g[0] / nb as f32;
                        let gl = acc(&mut grads[logits.0], nb * k);
                        for (row, &label) in labels.iter().enumerate() {
                            let lane = &src[row * k..(row + 1) * k];
                            let mx = lane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                            let mut denom = 0.0f32;
                            for &v in lane {
                                denom += (v - mx).exp();
                            }
                            let out = &mut gl[row * k..(row + 1) * k];
                            for (j, o) in out.iter_mut().enumerate() {
                                let p = (lane[j] - mx).exp() / denom;
                                let ind = if j == label as usize { 1.0 } else { 0.0 };
                                *o += gs * (p - ind);
                            }
                        }
                    }
                }
                Op::FeaturePermutation { x, plans } => {
                    if self.needs(x) {
                        let gt = Tensor::new(self.nodes[i].value.shape().to_vec(), g)
                            .expect("grad buffer matches node shape");
                        let routed = crate::fp::apply_backward(&gt, &plans)
                            .expect("plans validated at forward time");
                        give(&mut grads[x.0], routed.into_data());
                    }
                }
                Op::ResizePad { x, placements } => {
                    if self.needs(x) {
                        let sx = self.nodes[x.0].value.shape().to_vec();
                        let routed = resize_pad_backward(&g, &sx, &placements);
                        give(&mut grads[x.0], routed);
                    }
                }
                Op::Sum { a } => {
                    if self.needs(a) {
                        let len = self.nodes[a.0].value.len();
                        match &mut grads[a.0] {
                            None => grads[a.0] = Some(vec![g[0]; len]),
                            Some(buf) => {
                                for o in buf.iter_mut() {
                                    *o += g[0];
                                }
                            }
                        }
                    }
                }
                Op::MeanAxis { a, axis } => {
                    if self.needs(a) {
                        let sa = self.nodes[a.0].value.shape().to_vec();
                        let (outer, lanes, inner) = axis_split(&sa, axis);
                        let norm = 1.0 / lanes as f32;
                        let ga = acc(&mut grads[a.0], self.nodes[a.0].value.len());
                        for o in 0..outer {
                            for k in 0..lanes {
                                let base = (o * lanes + k) * inner;
                                for ii in 0..inner {
                                    ga[base + ii] += g[o * inner + ii] * norm;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn matmul_backward(&self, g: &[f32], a: NodeId, b: NodeId, batches: usize, grads: &mut [Option<Vec<f32>>]) {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        let (m, k, n) = if batches == 1 {
            (sa[0], sa[1], sb[1])
        } else {
            (sa[1], sa[2], sb[2])
        };
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        if self.needs(a) {
            // dA[i,k] = sum_j dC[i,j] * B[k,j]
            let ga = acc(&mut grads[a.0], av.len());
            for bt in 0..batches {
                let gc = &g[bt * m * n..(bt + 1) * m * n];
                let bm = &bv[bt * k * n..(bt + 1) * k * n];
                let da = &mut ga[bt * m * k..(bt + 1) * m * k];
                for i in 0..m {
                    let grow = &gc[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let brow = &bm[kk * n..(kk + 1) * n];
                        let mut acc_v = 0.0f32;
                        for (gv, bvv) in grow.iter().zip(brow) {
                            acc_v += gv * bvv;
                        }
                        da[i * k + kk] += acc_v;
                    }
                }
            }
        }
        if self.needs(b) {
            // dB[k,j] = sum_i A[i,k] * dC[i,j]
            let gb = acc(&mut grads[b.0], bv.len());
            for bt in 0..batches {
                let gc = &g[bt * m * n..(bt + 1) * m * n];
                let am = &av[bt * m * k..(bt + 1) * m * k];
                let db = &mut gb[bt * k * n..(bt + 1) * k * n];
                for i in 0..m {
                    let grow = &gc[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let aik = am[i * k + kk];
                        if aik == 0.0 {
                            continue;
                        }
                        let drow = &mut db[kk * n..(kk + 1) * n];
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += aik * gv;
                        }
                    }
                }
            }
        }
    }

    fn layer_norm_backward(&self, g: &[f32], x: NodeId, gain: NodeId, bias: NodeId, grads: &mut [Option<Vec<f32>>]) {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let d = *sx.last().expect("validated at forward time");
        let rows = numel(&sx) / d;
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gain.0].value.data();
        let needs_x = self.needs(x);
        let needs_gain = self.needs(gain);
        let needs_bias = self.needs(bias);
        // Accumulate row by row so each parameter sees contributions in a
        // fixed (row-major) order.
        let mut dgain = if needs_gain { vec![0.0f32; d] } else { Vec::new() };
        let mut dbias = if needs_bias { vec![0.0f32; d] } else { Vec::new() };
        let mut dx = if needs_x { vec![0.0f32; xv.len()] } else { Vec::new() };
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let grow = &g[r * d..(r + 1) * d];
            let (mean, rstd) = row_stats(row);
            let mut mean_dxhat = 0.0f32;
            let mut mean_dxhat_xhat = 0.0f32;
            for j in 0..d {
                let xhat = (row[j] - mean) * rstd;
                let dxhat = grow[j] * gv[j];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xhat;
                if needs_gain {
                    dgain[j] += grow[j] * xhat;
                }
                if needs_bias {
                    dbias[j] += grow[j];
                }
            }
            if needs_x {
                mean_dxhat /= d as f32;
                mean_dxhat_xhat /= d as f32;
                let drow = &mut dx[r * d..(r + 1) * d];
                for j in 0..d {
                    let xhat = (row[j] - mean) * rstd;
                    let dxhat = grow[j] * gv[j];
                    drow[j] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
        }
        if needs_x {
            axpy(acc(&mut grads[x.0], xv.len()), &dx, 1.0);
        }
        if needs_gain {
            axpy(acc(&mut grads[gain.0], d), &dgain, 1.0);
        }
        if needs_bias {
            axpy(acc(&mut grads[bias.0], d), &dbias, 1.0);
        }
    }
}

// ===================== shared kernels =====================

/// Lazily allocate a zeroed gradient buffer.
fn acc(slot: &mut Option<Vec<f32>>, len: usize) -> &mut Vec<f32> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

/// `out += k * src`, elementwise.
fn axpy(out: &mut [f32], src: &[f32], k: f32) {
    for (o, s) in out.iter_mut().zip(src) {
        *o += k * s;
    }
}

/// Deposit a freshly computed gradient: move it into an empty slot, or
/// accumulate into the existing buffer. Skips the zero-fill-plus-add pass
/// for the common single-consumer case.
fn give(slot: &mut Option<Vec<f32>>, v: Vec<f32>) {
    match slot {
        None => *slot = Some(v),
        Some(buf) => axpy(buf, &v, 1.0),
    }
}

/// Split a shape at `axis` into (outer, lane length, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lanes = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lanes, inner)
}

/// Mean and reciprocal standard deviation (biased variance + epsilon) of a row.
fn row_stats(row: &[f32]) -> (f32, f32) {
    let d = row.len() as f32;
    let mut mean = 0.0f32;
    for v in row {
        mean += *v;
    }
    mean /= d;
    let mut var = 0.0f32;
    for v in row {
        let c = *v - mean;
        var += c * c;
    }
    var /= d;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Batched `[B,M,K] x [B,K,N]`, accumulating over K in index order.
fn matmul_kernel(a: &[f32], b: &[f32], batches: usize, m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; batches * m * n];
    for bt in 0..batches {
        let am = &a[bt * m * k..(bt + 1) * m * k];
        let bm = &b[bt * k * n..(bt + 1) * k * n];
        let om = &mut out[bt * m * n..(bt + 1) * m * n];
        for i in 0..m {
            let orow = &mut om[i * n..(i + 1) * n];
            for kk in 0..k {
                let aik = am[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bm[kk * n..(kk + 1) * n];
                for (o, bvv) in orow.iter_mut().zip(brow) {
                    *o += aik * bvv;
                }
            }
        }
    }
    out
}

/// Copy with permuted axes: `out[idx] = src[multi-index mapped through axes]`.
fn permute_copy(src: &[f32], src_shape: &[usize], axes: &[usize]) -> Vec<f32> {
    let out_shape: Vec<usize> = axes.iter().map(|&ax| src_shape[ax]).collect();
    let src_strides = strides(src_shape);
    let gather: Vec<usize> = axes.iter().map(|&ax| src_strides[ax]).collect();
    let mut out = vec![0.0f32; src.len()];
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src_off = 0usize;
    for slot in out.iter_mut() {
        *slot = src[src_off];
        // Odometer increment over the output multi-index.
        for d in (0..rank).rev() {
            idx[d] += 1;
            src_off += gather[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src_off -= gather[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    t: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(sx: &[usize], sf: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (t, kh, kw) = (sf[0], sf[2], sf[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeometry {
            n,
            c,
            h,
            w,
            t,
            kh,
            kw,
            oh,
            ow,
            stride,
            pad,
        })
    }

    /// Output rows with in-bounds input rows for kernel row `k`:
    /// `0 <= o*stride + k - pad < in_size`.
    fn valid_out_range(&self, in_size: usize, out_size: usize, k: usize) -> (usize, usize) {
        let s = self.stride as i64;
        let rel = k as i64 - self.pad as i64;
        let lo = if rel >= 0 { 0 } else { (-rel + s - 1) / s };
        let hi_num = in_size as i64 - 1 - rel;
        let hi = if hi_num < 0 { 0 } else { (hi_num / s + 1).min(out_size as i64) };
        (lo.min(out_size as i64) as usize, hi.max(lo.min(out_size as i64)) as usize)
    }
}

/// Stride-1 3x3 fast path. The input is copied once into a buffer whose
/// rows carry `pad` zero columns on each side plus one zero guard row per
/// plane edge, and the output is accumulated in a scratch plane with the
/// same row stride. Each (channel, kernel row) update is then one fused
/// three-tap pass over the whole contiguous valid-row segment: padded
/// column `ox + kx` is input column `ox + kx - pad`, and row spill lands
/// either in the discarded pad columns or in a guard row. Per-element
/// accumulation order stays (in channel, kernel row, kernel col).
fn conv3x3_s1_forward(x: &[f32], f: &[f32], geo: &ConvGeometry, out: &mut [f32]) {
    let (h, w, oh, ow, pad) = (geo.h, geo.w, geo.oh, geo.ow, geo.pad);
    let wp = w + 2 * pad;
    let hp = h + 2;
    let plane = hp * wp;
    let mut xp = vec![0.0f32; geo.n * geo.c * plane];
    for (nc, xrows) in x.chunks(h * w).enumerate() {
        let xp_nc = &mut xp[nc * plane + wp..];
        for (prow, xrow) in xp_nc.chunks_mut(wp).zip(xrows.chunks(w)) {
            prow[pad..pad + w].copy_from_slice(xrow);
        }
    }
    let mut acc = vec![0.0f32; oh * wp];
    for n in 0..geo.n {
        for t in 0..geo.t {
            acc.fill(0.0);
            for c in 0..geo.c {
                let xp_nc = &xp[(n * geo.c + c) * plane..][..plane];
                let wk = &f[(t * geo.c + c) * 9..][..9];
                for ky in 0..3usize {
                    let oy_lo = pad.saturating_sub(ky).min(oh);
                    let oy_hi = (h + pad).saturating_sub(ky).min(oh).max(oy_lo);
                    if oy_hi == oy_lo {
                        continue;
                    }
                    let seg = &mut acc[oy_lo * wp..oy_hi * wp];
                    let len = seg.len();
                    // Padded row of the first input row this kernel row reads.
                    let base = (oy_lo + ky + 1 - pad) * wp;
                    let (w0, w1, w2) = (wk[ky * 3], wk[ky * 3 + 1], wk[ky * 3 + 2]);
                    let t0 = &xp_nc[base - pad..base - pad + len];
                    let t1 = &xp_nc[base + 1 - pad..base + 1 - pad + len];
                    let t2 = &xp_nc[base + 2 - pad..base + 2 - pad + len];
                    for (((o, &a), &b), &c) in seg.iter_mut().zip(t0).zip(t1).zip(t2) {
                        *o += w0 * a + w1 * b + w2 * c;
                    }
                }
            }
            let o_nt = &mut out[(n * geo.t + t) * oh * ow..][..oh * ow];
            for (orow, arow) in o_nt.chunks_mut(ow).zip(acc.chunks(wp)) {
                orow.copy_from_slice(&arow[pad..pad + ow]);
            }
        }
    }
}

/// Phase index and shift of a kernel offset under stride 2: input index
/// `2*o + d` lands in parity class `r = d mod 2` at `j = o + q` with
/// `q = (d - r) / 2`.
fn tap_phase(d: i64) -> (usize, i64) {
    let r = d.rem_euclid(2);
    (r as usize, (d - r) / 2)
}

/// The nine stride-2 tap descriptors `(row parity, col parity, row shift,
/// col shift)` in (ky, kx) order.
fn s2_taps(pad: usize) -> [(usize, usize, i64, i64); 9] {
    let mut taps = [(0usize, 0usize, 0i64, 0i64); 9];
    for ky in 0..3 {
        for kx in 0..3 {
            let (ry, qy) = tap_phase(ky as i64 - pad as i64);
            let (rx, qx) = tap_phase(kx as i64 - pad as i64);
            taps[ky * 3 + kx] = (ry, rx, qy, qx);
        }
    }
    taps
}

/// Stride-2 3x3 fast path. Each sample is decomposed once into four
/// row/column parity subplanes (`sub[ry][rx][jy][jx] = x[2jy+ry][2jx+rx]`)
/// carrying one zero guard row and column per edge, and the output is
/// accumulated in a scratch plane with the same row stride. Every kernel
/// tap is then one contiguous pass: output `(oy, ox)` reads subplane
/// `((ky - pad) mod 2, (kx - pad) mod 2)` at `(oy + qy, ox + qx)`. Row
/// spill lands in discarded pad columns or guard rows. Per-element
/// accumulation order stays (in channel, kernel row, kernel col).
fn conv3x3_s2_forward(x: &[f32], f: &[f32], geo: &ConvGeometry, out: &mut [f32]) {
    let (h, w, oh, ow, pad) = (geo.h, geo.w, geo.oh, geo.ow, geo.pad);
    let wr = [(w + 1) / 2, w / 2];
    let hr = [(h + 1) / 2, h / 2];
    let stride = wr[0] + 2;
    let plane = (hr[0] + 2) * stride;
    let taps = s2_taps(pad);
    let mut sub = vec![0.0f32; geo.c * 4 * plane];
    let mut acc = vec![0.0f32; oh * stride];
    for n in 0..geo.n {
        for c in 0..geo.c {
            let x_nc = &x[(n * geo.c + c) * h * w..][..h * w];
            for iy in 0..h {
                let base = (c * 4 + (iy % 2) * 2) * plane + (iy / 2 + 1) * stride + 1;
                let row = &x_nc[iy * w..][..w];
                for (j, &v) in row.iter().step_by(2).enumerate() {
                    sub[base + j] = v;
                }
                for (j, &v) in row.iter().skip(1).step_by(2).enumerate() {
                    sub[plane + base + j] = v;
                }
            }
        }
        for t in 0..geo.t {
            acc.fill(0.0);
            for c in 0..geo.c {
                let wk = &f[(t * geo.c + c) * 9..][..9];
                for (k, &(ry, rx, qy, qx)) in taps.iter().enumerate() {
                    let sp = &sub[(c * 4 + ry * 2 + rx) * plane..][..plane];
                    let oy_lo = (-qy).clamp(0, oh as i64) as usize;
                    let oy_hi = (hr[ry] as i64 - qy).clamp(oy_lo as i64, oh as i64) as usize;
                    if oy_hi == oy_lo {
                        continue;
                    }
                    let seg = &mut acc[oy_lo * stride..oy_hi * stride];
                    let start = ((oy_lo as i64 + qy + 1) * stride as i64 + qx) as usize;
                    axpy(seg, &sp[start..start + seg.len()], wk[k]);
                }
            }
            let o_nt = &mut out[(n * geo.t + t) * oh * ow..][..oh * ow];
            for (orow, arow) in o_nt.chunks_mut(ow).zip(acc.chunks(stride)) {
                orow.copy_from_slice(&arow[1..1 + ow]);
            }
        }
    }
}

fn conv2d_forward(x: &[f32], f: &[f32], geo: &ConvGeometry) -> Vec<f32> {
    let (h, w, oh, ow, s, pad) = (geo.h, geo.w, geo.oh, geo.ow, geo.stride, geo.pad);
    let mut out = vec![0.0f32; geo.n * geo.t * oh * ow];
    if geo.kh == 3 && geo.kw == 3 && s == 1 && pad < 3 {
        conv3x3_s1_forward(x, f, geo, &mut out);
        return out;
    }
    if geo.kh == 3 && geo.kw == 3 && s == 2 && pad < 3 {
        conv3x3_s2_forward(x, f, geo, &mut out);
        return out;
    }
    for n in 0..geo.n {
        for t in 0..geo.t {
            let o_nt = &mut out[(n * geo.t + t) * oh * ow..][..oh * ow];
            for c in 0..geo.c {
                let x_nc = &x[(n * geo.c + c) * h * w..][..h * w];
                for ky in 0..geo.kh {
                    let (oy_lo, oy_hi) = geo.valid_out_range(h, oh, ky);
                    for kx in 0..geo.kw {
                        let wgt = f[((t * geo.c + c) * geo.kh + ky) * geo.kw + kx];
                        let (ox_lo, ox_hi) = geo.valid_out_range(w, ow, kx);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - pad;
                            let orow = &mut o_nt[oy * ow..][..ow];
                            let xrow = &x_nc[iy * w..][..w];
                            let ix0 = ox_lo * s + kx - pad;
                            let src = xrow[ix0..].iter().step_by(s);
                            for (o, v) in orow[ox_lo..ox_hi].iter_mut().zip(src) {
                                *o += wgt * v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Stride-1 3x3 input-gradient fast path, gather form. The upstream
/// gradient is copied once into a buffer whose rows carry two zero columns
/// on each side plus one zero guard row per plane edge, and the input
/// gradient is accumulated in a scratch plane with the same row stride.
/// Each (out channel, kernel row) update is then one fused three-tap pass
/// over the whole contiguous valid-row segment reading `ox = ix + pad - kx`
/// (padded column `ix + pad - kx + 2`). Per-element accumulation order is
/// (out channel, kernel row, kernel col).
fn conv3x3_s1_backward_input(g: &[f32], f: &[f32], geo: &ConvGeometry, gx: &mut [f32]) {
    let (h, w, oh, ow, pad) = (geo.h, geo.w, geo.oh, geo.ow, geo.pad);
    let owp = ow + 4;
    let ohp = oh + 2;
    let plane = ohp * owp;
    let mut gp = vec![0.0f32; geo.n * geo.t * plane];
    for (nt, grows) in g.chunks(oh * ow).enumerate() {
        let gp_nt = &mut gp[nt * plane + owp..];
        for (prow, grow) in gp_nt.chunks_mut(owp).zip(grows.chunks(ow)) {
            prow[2..2 + ow].copy_from_slice(grow);
        }
    }
    let mut acc = vec![0.0f32; h * owp];
    for n in 0..geo.n {
        for c in 0..geo.c {
            acc.fill(0.0);
            for t in 0..geo.t {
                let gp_nt = &gp[(n * geo.t + t) * plane..][..plane];
                let wk = &f[(t * geo.c + c) * 9..][..9];
                for ky in 0..3usize {
                    let iy_lo = ky.saturating_sub(pad).min(h);
                    let iy_hi = (oh + ky).saturating_sub(pad).min(h).max(iy_lo);
                    if iy_hi == iy_lo {
                        continue;
                    }
                    let seg = &mut acc[iy_lo * owp..iy_hi * owp];
                    let len = seg.len();
                    // Padded row of the first gradient row this kernel row reads.
                    let base = (iy_lo + pad - ky + 1) * owp;
                    let (w0, w1, w2) = (wk[ky * 3], wk[ky * 3 + 1], wk[ky * 3 + 2]);
                    let t0 = &gp_nt[base + pad..base + pad + len];
                    let t1 = &gp_nt[base + pad - 1..base + pad - 1 + len];
                    let t2 = &gp_nt[base + pad - 2..base + pad - 2 + len];
                    for (((d, &a), &b), &c) in seg.iter_mut().zip(t0).zip(t1).zip(t2) {
                        *d += w0 * a + w1 * b + w2 * c;
                    }
                }
            }
            let gx_nc = &mut gx[(n * geo.c + c) * h * w..][..h * w];
            for (grow, arow) in gx_nc.chunks_mut(w).zip(acc.chunks(owp)) {
                grow.copy_from_slice(&arow[2..2 + w]);
            }
        }
    }
}

/// Stride-2 3x3 input-gradient fast path, scatter form mirrored from the
/// forward decomposition: the input gradient is accumulated in four
/// row/column parity subplanes, and each kernel tap is one contiguous pass
/// reading the (guard-padded) upstream gradient at `(jy - qy, jx - qx)`,
/// after which the subplanes are interleaved back. Per-element accumulation
/// order is (out channel, kernel row, kernel col).
fn conv3x3_s2_backward_input(g: &[f32], f: &[f32], geo: &ConvGeometry, gx: &mut [f32]) {
    let (h, w, oh, ow, pad) = (geo.h, geo.w, geo.oh, geo.ow, geo.pad);
    let wr = [(w + 1) / 2, w / 2];
    let hr = [(h + 1) / 2, h / 2];
    let stride = wr[0].max(ow) + 2;
    let plane_a = hr[0] * stride;
    let plane_g = (oh + 2) * stride;
    let taps = s2_taps(pad);
    let mut gpad = vec![0.0f32; geo.t * plane_g];
    let mut acc = vec![0.0f32; 4 * plane_a];
    for n in 0..geo.n {
        for t in 0..geo.t {
            let g_nt = &g[(n * geo.t + t) * oh * ow..][..oh * ow];
            let gp_t = &mut gpad[t * plane_g..][..plane_g];
            for (prow, grow) in gp_t[stride..].chunks_mut(stride).zip(g_nt.chunks(ow)) {
                prow[1..1 + ow].copy_from_slice(grow);
            }
        }
        for c in 0..geo.c {
            acc.fill(0.0);
            for t in 0..geo.t {
                let gp_t = &gpad[t * plane_g..][..plane_g];
                let wk = &f[(t * geo.c + c) * 9..][..9];
                for (k, &(ry, rx, qy, qx)) in taps.iter().enumerate() {
                    let jy_lo = qy.clamp(0, hr[ry] as i64) as usize;
                    let jy_hi = (oh as i64 + qy).clamp(jy_lo as i64, hr[ry] as i64) as usize;
                    if jy_hi == jy_lo {
                        continue;
                    }
                    let base = (ry * 2 + rx) * plane_a;
                    let seg = &mut acc[base + jy_lo * stride..base + jy_hi * stride];
                    let start = ((jy_lo as i64 - qy + 1) * stride as i64 - qx) as usize;
                    axpy(seg, &gp_t[start..start + seg.len()], wk[k]);
                }
            }
            let gx_nc = &mut gx[(n * geo.c + c) * h * w..][..h * w];
            for iy in 0..h {
                let base = (iy % 2) * 2 * plane_a + (iy / 2) * stride + 1;
                let row = &mut gx_nc[iy * w..][..w];
                for (j, pair) in row.chunks_mut(2).enumerate() {
                    pair[0] = acc[base + j];
                    if let Some(v) = pair.get_mut(1) {
                        *v = acc[plane_a + base + j];
                    }
                }
            }
        }
    }
}

fn conv2d_backward_input(g: &[f32], f: &[f32], geo: &ConvGeometry) -> Vec<f32> {
    let (h, w, oh, ow, s, pad) = (geo.h, geo.w, geo.oh, geo.ow, geo.stride, geo.pad);
    let mut gx = vec![0.0f32; geo.n * geo.c * h * w];
    if geo.kh == 3 && geo.kw == 3 && s == 1 && pad < 3 {
        conv3x3_s1_backward_input(g, f, geo, &mut gx);
        return gx;
    }
    if geo.kh == 3 && geo.kw == 3 && s == 2 && pad < 3 {
        conv3x3_s2_backward_input(g, f, geo, &mut gx);
        return gx;
    }
    for n in 0..geo.n {
        for t in 0..geo.t {
            let g_nt = &g[(n * geo.t + t) * oh * ow..][..oh * ow];
            for c in 0..geo.c {
                let gx_nc = &mut gx[(n * geo.c + c) * h * w..][..h * w];
                for ky in 0..geo.kh {
                    let (oy_lo, oy_hi) = geo.valid_out_range(h, oh, ky);
                    for kx in 0..geo.kw {
                        let wgt = f[((t * geo.c + c) * geo.kh + ky) * geo.kw + kx];
                        let (ox_lo, ox_hi) = geo.valid_out_range(w, ow, kx);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - pad;
                            let grow = &g_nt[oy * ow..][..ow];
                            let xrow = &mut gx_nc[iy * w..][..w];
                            let ix0 = ox_lo * s + kx - pad;
                            let dst = xrow[ix0..].iter_mut().step_by(s);
                            for (d, gv) in dst.zip(&grow[ox_lo..ox_hi]) {
                                *d += wgt * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

fn conv2d_backward_filter(g: &[f32], x: &[f32], geo: &ConvGeometry) -> Vec<f32> {
    let (h, w, oh, ow, s, pad) = (geo.h, geo.w, geo.oh, geo.ow, geo.stride, geo.pad);
    let mut gf = vec![0.0f32; geo.t * geo.c * geo.kh * geo.kw];
    for n in 0..geo.n {
        for t in 0..geo.t {
            let g_nt = &g[(n * geo.t + t) * oh * ow..][..oh * ow];
            for c in 0..geo.c {
                let x_nc = &x[(n * geo.c + c) * h * w..][..h * w];
                for ky in 0..geo.kh {
                    let (oy_lo, oy_hi) = geo.valid_out_range(h, oh, ky);
                    for kx in 0..geo.kw {
                        let (ox_lo, ox_hi) = geo.valid_out_range(w, ow, kx);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut acc_v = 0.0f32;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - pad;
                            let grow = &g_nt[oy * ow..][..ow];
                            let xrow = &x_nc[iy * w..][..w];
                            if s == 1 {
                                let ix0 = ox_lo + kx - pad;
                                for (gv, xv) in grow[ox_lo..ox_hi].iter().zip(&xrow[ix0..ix0 + (ox_hi - ox_lo)]) {
                                    acc_v += gv * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    acc_v += grow[ox] * xrow[ox * s + kx - pad];
                                }
                            }
                        }
                        gf[((t * geo.c + c) * geo.kh + ky) * geo.kw + kx] += acc_v;
                    }
                }
            }
        }
    }
    gf
}

fn resize_pad_forward(x: &Tensor, placements: &[Option<ResamplePlacement>]) -> Result<Tensor> {
    let sx = x.shape();
    let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    for s in 0..n {
        let sample = &src[s * c * h * w..(s + 1) * c * h * w];
        let dst = &mut out[s * c * h * w..(s + 1) * c * h * w];
        match placements[s] {
            None => dst.copy_from_slice(sample),
            Some(p) if p.size == h && p.size == w => dst.copy_from_slice(sample),
            Some(p) => {
                for ch in 0..c {
                    let plane = &sample[ch * h * w..(ch + 1) * h * w];
                    let dplane = &mut dst[ch * h * w..(ch + 1) * h * w];
                    for dy in 0..p.size {
                        for dx in 0..p.size {
                            let taps = bilinear_taps(dy, dx, p.size, h, w);
                            let mut v = 0.0f32;
                            for (idx, wgt) in taps {
                                v += wgt * plane[idx];
                            }
                            dplane[(p.top + dy) * w + p.left + dx] = v;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(sx.to_vec(), out)
}

fn resize_pad_backward(g: &[f32], sx: &[usize], placements: &[Option<ResamplePlacement>]) -> Vec<f32> {
    let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
    let mut gx = vec![0.0f32; g.len()];
    for s in 0..n {
        let gout = &g[s * c * h * w..(s + 1) * c * h * w];
        let gin = &mut gx[s * c * h * w..(s + 1) * c * h * w];
        match placements[s] {
            None => gin.copy_from_slice(gout),
            Some(p) if p.size == h && p.size == w => gin.copy_from_slice(gout),
            Some(p) => {
                for ch in 0..c {
                    let gplane = &gout[ch * h * w..(ch + 1) * h * w];
                    let giplane = &mut gin[ch * h * w..(ch + 1) * h * w];
                    for dy in 0..p.size {
                        for dx in 0..p.size {
                            let gv = gplane[(p.top + dy) * w + p.left + dx];
                            if gv == 0.0 {
                                continue;
                            }
                            let taps = bilinear_taps(dy, dx, p.size, h, w);
                            for (idx, wgt) in taps {
                                giplane[idx] += wgt * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Four bilinear taps (flat index, weight) for destination cell `(dy, dx)` of
/// an `r x r` resample of an `h x w` plane, half-pixel-center convention.
fn bilinear_taps(dy: usize, dx: usize, r: usize, h: usize, w: usize) -> [(usize, f32); 4] {
    let map = |d: usize, extent: usize| -> (usize, usize, f32) {
        let scale = extent as f32 / r as f32;
        let src = ((d as f32 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(extent - 1);
        let hi = (lo + 1).min(extent - 1);
        (lo, hi, src - lo as f32)
    };
    let (y0, y1, wy) = map(dy, h);
    let (x0, x1, wx) = map(dx, w);
    [
        (y0 * w + x0, (1.0 - wy) * (1.0 - wx)),
        (y0 * w + x1, (1.0 - wy) * wx),
        (y1 * w + x0, wy * (1.0 - wx)),
        (y1 * w + x1, wy * wx),
    ]
}

// ===================== finite differences =====================

/// Central-difference gradient estimate of a scalar-valued function: one
/// coordinate of `x` is displaced by `±h` at a time and the quotient
/// `(f(x+h) - f(x-h)) / 2h` recorded. Costs two evaluations per element; used
/// as the independent oracle for `backward`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f32>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::config(format!("finite difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0f32; x.len()];
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = ((fp as f64 - fm as f64) / (2.0 * h as f64)) as f32;
    }
    Tensor::new(x.shape().to_vec(), grad)
}
