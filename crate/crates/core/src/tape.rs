//! Reverse-mode automatic differentiation on a recording tape.
//!
//! A [`Tape`] owns an arena of nodes; every operation appends one node holding
//! its output value and enough context to run the backward rule. [`Var`] is an
//! index into that arena. Calling [`Tape::backward`] on a scalar node walks the
//! arena in exact reverse creation order, accumulating adjoints; afterwards the
//! gradient of every `requires_grad` leaf can be read back.
//!
//! The op set is exactly what the tracker needs: dense linear algebra
//! (convolution, linear, batched matmul), batch norm, the four activations,
//! softmax, shape plumbing (reshape/permute/concat/slice/gather) and the
//! pointwise arithmetic used by the losses. Convolutions run through im2col +
//! GEMM with fast paths for 1x1 and depthwise kernels; im2col buffers are
//! recomputed in backward rather than cached, trading a little compute for a
//! much smaller peak footprint.

use crate::error::{Error, Result};
use crate::tensor::{strides_of, Elem, NdArray};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    fn i(self) -> usize {
        self.0 as usize
    }
}

/// Pointwise activation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Relu6,
    Hardswish,
    Sigmoid,
}

/// Recorded operation. Saved fields are exactly what backward needs.
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, groups: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    /// `mean`/`invstd` are the statistics normalization actually used
    /// (batch stats in train mode, running stats in eval mode).
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, invstd: Vec<T>, train: bool },
    Act { x: Var, kind: Activation },
    SoftmaxLast { x: Var },
    Upsample2x { x: Var },
    GlobalAvgPool { x: Var },
    ScaleChannels { x: Var, s: Var },
    Hadamard { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Div { a: Var, b: Var },
    Minimum { a: Var, b: Var },
    Maximum { a: Var, b: Var },
    Abs { x: Var },
    Ln { x: Var },
    MulScalar { x: Var, c: T },
    AddScalar { x: Var },
    Clamp { x: Var, lo: T, hi: T },
    SumAll { x: Var },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Concat { a: Var, b: Var, axis: usize },
    SliceAxis { x: Var, axis: usize, start: usize, len: usize },
    Pick { x: Var, idx: Vec<usize> },
    Bmm { a: Var, b: Var, trans_b: bool },
    AddRows { x: Var, t: Var },
    SubsampleGrid { x: Var, h: usize, w: usize },
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::Linear { .. } => "linear",
        Op::BatchNorm { .. } => "batch_norm",
        Op::Act { kind, .. } => match kind {
            Activation::Relu => "relu",
            Activation::Relu6 => "relu6",
            Activation::Hardswish => "hardswish",
            Activation::Sigmoid => "sigmoid",
        },
        Op::SoftmaxLast { .. } => "softmax",
        Op::Upsample2x { .. } => "upsample2x",
        Op::GlobalAvgPool { .. } => "global_avg_pool",
        Op::ScaleChannels { .. } => "scale_channels",
        Op::Hadamard { .. } => "hadamard",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Div { .. } => "div",
        Op::Minimum { .. } => "minimum",
        Op::Maximum { .. } => "maximum",
        Op::Abs { .. } => "abs",
        Op::Ln { .. } => "ln",
        Op::MulScalar { .. } => "mul_scalar",
        Op::AddScalar { .. } => "add_scalar",
        Op::Clamp { .. } => "clamp",
        Op::SumAll { .. } => "sum_all",
        Op::Reshape { .. } => "reshape",
        Op::Permute { .. } => "permute",
        Op::Concat { .. } => "concat",
        Op::SliceAxis { .. } => "slice_axis",
        Op::Pick { .. } => "pick",
        Op::Bmm { .. } => "bmm",
        Op::AddRows { .. } => "add_rows",
        Op::SubsampleGrid { .. } => "subsample_grid",
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Conv2d { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            if let Some(b) = b {
                v.push(*b);
            }
            v
        }
        Op::Linear { x, w, b } => {
            let mut v = vec![*x, *w];
            if let Some(b) = b {
                v.push(*b);
            }
            v
        }
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Act { x, .. }
        | Op::SoftmaxLast { x }
        | Op::Upsample2x { x }
        | Op::GlobalAvgPool { x }
        | Op::Abs { x }
        | Op::Ln { x }
        | Op::MulScalar { x, .. }
        | Op::AddScalar { x }
        | Op::Clamp { x, .. }
        | Op::SumAll { x }
        | Op::Reshape { x }
        | Op::Permute { x, .. }
        | Op::SliceAxis { x, .. }
        | Op::Pick { x, .. }
        | Op::SubsampleGrid { x, .. } => vec![*x],
        Op::ScaleChannels { x, s } => vec![*x, *s],
        Op::Hadamard { a, b }
        | Op::Add { a, b }
        | Op::Sub { a, b }
        | Op::Div { a, b }
        | Op::Minimum { a, b }
        | Op::Maximum { a, b }
        | Op::Concat { a, b, .. }
        | Op::Bmm { a, b, .. } => vec![*a, *b],
        Op::AddRows { x, t } => vec![*x, *t],
    }
}

struct Node<T> {
    value: NdArray<T>,
    op: Op<T>,
    needs_grad: bool,
    label: Option<String>,
}

/// Recording tape: arena of nodes plus, after backward, their adjoints.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    check_finite: bool,
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Tape<T> {
    /// Fresh tape. The eager non-finite check is on in debug builds.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), check_finite: cfg!(debug_assertions) }
    }

    /// Enables or disables the eager NaN/Inf check on every op output.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: NdArray<T>, op: Op<T>, label: Option<String>) -> Result<Var> {
        if self.check_finite {
            if let Some(i) = value.first_non_finite() {
                let name = label.as_deref().unwrap_or(op_name(&op));
                return Err(Error::NonFinite(format!("{} output, element {}", name, i)));
            }
        }
        let needs_grad = match op {
            Op::Leaf => value.requires_grad,
            _ => op_inputs(&op).iter().any(|v| self.nodes[v.i()].needs_grad),
        };
        let id = self.nodes.len();
        if id > u32::MAX as usize {
            return Err(Error::Usage("tape overflow".into()));
        }
        self.nodes.push(Node { value, op, needs_grad, label });
        Ok(Var(id as u32))
    }

    /// Registers an input leaf; gradients flow into it iff `arr.requires_grad`.
    pub fn leaf(&mut self, arr: NdArray<T>) -> Var {
        self.push(arr, Op::Leaf, None).expect("leaf push cannot fail without finite check")
    }

    /// Registers a named leaf (parameter name, used in diagnostics).
    pub fn leaf_labeled(&mut self, arr: NdArray<T>, label: &str) -> Result<Var> {
        self.push(arr, Op::Leaf, Some(label.to_string()))
    }

    /// Registers a non-trainable leaf.
    pub fn constant(&mut self, mut arr: NdArray<T>) -> Var {
        arr.requires_grad = false;
        self.leaf(arr)
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &NdArray<T> {
        &self.nodes[v.i()].value
    }

    /// Shape of a node's value.
    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.i()].value.shape()
    }

    /// Adjoint of a node after [`Tape::backward`]. Present for leaves that
    /// require grad (and kept for interior nodes only until consumed).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.i()).and_then(|g| g.as_deref())
    }

    /// First node (creation order) holding a non-finite value, with a
    /// diagnostic name. Cheap scan used to explain a non-finite loss.
    pub fn first_non_finite_node(&self) -> Option<(usize, String)> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.value.first_non_finite().is_some() {
                let name = n.label.clone().unwrap_or_else(|| op_name(&n.op).to_string());
                return Some((i, name));
            }
        }
        None
    }

    // ---- ops -------------------------------------------------------------

    /// 2-D convolution, NCHW layout, weight `[cout, cin/groups, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let bv = b.map(|b| self.value(b).data());
        let out = conv2d_forward(self.value(x), self.value(w), bv, stride, padding, groups)?;
        self.push(out, Op::Conv2d { x, w, b, stride, padding, groups }, None)
    }

    /// Affine map over the last axis: `y = x W^T + b`, weight `[dout, din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let bv = b.map(|b| self.value(b).data());
        let out = linear_forward(self.value(x), self.value(w), bv)?;
        self.push(out, Op::Linear { x, w, b }, None)
    }

    /// Batch normalization over NCHW. In train mode normalizes with batch
    /// statistics and returns `(mean, biased_var)` — the statistics exactly
    /// as used for normalization — for the caller's running update; in eval
    /// mode normalizes with the provided running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
        train: bool,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::dim(
                "batch_norm",
                format!("gamma/beta must have {} elements", c),
            ));
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batch_norm", format!("running stats must have {} elements", c)));
        }
        let m = n * h * w;
        let hw = h * w;
        let xd = self.value(x).data();
        let (mean, invstd, stats) = if train {
            if m == 0 {
                return Err(Error::dim("batch_norm", "empty batch"));
            }
            let mut mean = vec![T::ZERO; c];
            let mut var = vec![T::ZERO; c];
            for ci in 0..c {
                let mut s = T::ZERO;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for v in &xd[base..base + hw] {
                        s += *v;
                    }
                }
                mean[ci] = s / T::from_f64(m as f64);
                let mut sq = T::ZERO;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for v in &xd[base..base + hw] {
                        let d = *v - mean[ci];
                        sq += d * d;
                    }
                }
                var[ci] = sq / T::from_f64(m as f64);
            }
            let invstd: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
            let stats = Some((mean.clone(), var.clone()));
            (mean, invstd, stats)
        } else {
            let invstd: Vec<T> = running_var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
            (running_mean.to_vec(), invstd, None)
        };
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut out = vec![T::ZERO; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let (mu, is, ga, bt) = (mean[ci], invstd[ci], g[ci], be[ci]);
                for k in base..base + hw {
                    out[k] = (xd[k] - mu) * is * ga + bt;
                }
            }
        }
        let out = NdArray::from_vec(self.value(x).shape(), out)?;
        let var =
            self.push(out, Op::BatchNorm { x, gamma, beta, mean, invstd, train }, None)?;
        Ok((var, stats))
    }

    fn act(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let xd = self.value(x).data();
        let data: Vec<T> = match kind {
            Activation::Relu => xd.iter().map(|&v| v.maxv(T::ZERO)).collect(),
            Activation::Relu6 => {
                xd.iter().map(|&v| v.maxv(T::ZERO).minv(T::from_f64(6.0))).collect()
            }
            Activation::Hardswish => {
                let six = T::from_f64(6.0);
                let three = T::from_f64(3.0);
                xd.iter().map(|&v| v * (v + three).maxv(T::ZERO).minv(six) / six).collect()
            }
            Activation::Sigmoid => xd.iter().map(|&v| sigmoid(v)).collect(),
        };
        let out = NdArray::from_vec(self.value(x).shape(), data)?;
        self.push(out, Op::Act { x, kind }, None)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.act(x, Activation::Relu)
    }

    pub fn relu6(&mut self, x: Var) -> Result<Var> {
        self.act(x, Activation::Relu6)
    }

    pub fn hardswish(&mut self, x: Var) -> Result<Var> {
        self.act(x, Activation::Hardswish)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.act(x, Activation::Sigmoid)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let last = *shape.last().ok_or_else(|| Error::dim("softmax", "rank 0"))?;
        if last == 0 {
            return Err(Error::dim("softmax", "empty last axis"));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; xd.len()];
        for (row_in, row_out) in xd.chunks_exact(last).zip(out.chunks_exact_mut(last)) {
            let mut mx = row_in[0];
            for &v in row_in {
                mx = mx.maxv(v);
            }
            let mut sum = T::ZERO;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - mx).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o = *o / sum;
            }
        }
        let out = NdArray::from_vec(shape, out)?;
        self.push(out, Op::SoftmaxLast { x }, None)
    }

    /// Nearest-neighbour 2x upsampling of NCHW maps.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; n * c * 4 * h * w];
        let (ho, wo) = (2 * h, 2 * w);
        for nc in 0..n * c {
            let src = &xd[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
            for i in 0..ho {
                let si = i / 2;
                for j in 0..wo {
                    dst[i * wo + j] = src[si * w + j / 2];
                }
            }
        }
        let out = NdArray::from_vec(&[n, c, ho, wo], out)?;
        self.push(out, Op::Upsample2x { x }, None)
    }

    /// Spatial mean of NCHW maps, producing `[n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; n * c];
        for (o, chunk) in out.iter_mut().zip(xd.chunks_exact(hw)) {
            let mut s = T::ZERO;
            for &v in chunk {
                s += v;
            }
            *o = s / T::from_f64(hw as f64);
        }
        let out = NdArray::from_vec(&[n, c], out)?;
        self.push(out, Op::GlobalAvgPool { x }, None)
    }

    /// Multiplies each channel map of `x` (`[n,c,h,w]`) by `s` (`[n,c]`).
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(s).shape() != [n, c] {
            return Err(Error::dim(
                "scale_channels",
                format!("scale shape {:?}, expected [{}, {}]", self.value(s).shape(), n, c),
            ));
        }
        let hw = h * w;
        let xd = self.value(x).data();
        let sd = self.value(s).data();
        let mut out = vec![T::ZERO; xd.len()];
        for nc in 0..n * c {
            let sv = sd[nc];
            for k in 0..hw {
                out[nc * hw + k] = xd[nc * hw + k] * sv;
            }
        }
        let out = NdArray::from_vec(self.value(x).shape(), out)?;
        self.push(out, Op::ScaleChannels { x, s }, None)
    }

    fn zip_op(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(
                op_name(&op),
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data: Vec<T> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let out = NdArray::from_vec(self.value(a).shape(), data)?;
        self.push(out, op, None)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Hadamard { a, b }, |x, y| x * y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Div { a, b }, |x, y| x / y)
    }

    /// Elementwise minimum; ties route the gradient to the first argument.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Minimum { a, b }, |x, y| if x <= y { x } else { y })
    }

    /// Elementwise maximum; ties route the gradient to the first argument.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Maximum { a, b }, |x, y| if x >= y { x } else { y })
    }

    fn map_op(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let data: Vec<T> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let out = NdArray::from_vec(self.value(x).shape(), data)?;
        self.push(out, op, None)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map_op(x, Op::Abs { x }, |v| v.abs())
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.map_op(x, Op::Ln { x }, |v| v.ln())
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.map_op(x, Op::MulScalar { x, c }, |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.map_op(x, Op::AddScalar { x }, |v| v + c)
    }

    /// Clamps into `[lo, hi]`; gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.map_op(x, Op::Clamp { x, lo, hi }, |v| v.maxv(lo).minv(hi))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let mut s = T::ZERO;
        for &v in self.value(x).data() {
            s += v;
        }
        self.push(NdArray::scalar(s), Op::SumAll { x }, None)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        self.push(out, Op::Reshape { x }, None)
    }

    /// Axis permutation; `perm` must be a permutation of `0..rank`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.value(x).shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(
                "permute",
                format!("perm {:?} is not a permutation of 0..{}", perm, rank),
            ));
        }
        let out = permute_forward(self.value(x), perm);
        self.push(out, Op::Permute { x, perm: perm.to_vec() }, None)
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != sb.len() || axis >= sa.len() {
            return Err(Error::dim("concat", format!("{:?} vs {:?} on axis {}", sa, sb, axis)));
        }
        for d in 0..sa.len() {
            if d != axis && sa[d] != sb[d] {
                return Err(Error::dim(
                    "concat",
                    format!("{:?} vs {:?} differ on non-concat axis {}", sa, sb, d),
                ));
            }
        }
        let inner: usize = sa[axis + 1..].iter().product();
        let outer: usize = sa[..axis].iter().product();
        let (ab, bb) = (sa[axis] * inner, sb[axis] * inner);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![T::ZERO; ad.len() + bd.len()];
        for o in 0..outer {
            out[o * (ab + bb)..o * (ab + bb) + ab].copy_from_slice(&ad[o * ab..(o + 1) * ab]);
            out[o * (ab + bb) + ab..(o + 1) * (ab + bb)].copy_from_slice(&bd[o * bb..(o + 1) * bb]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let out = NdArray::from_vec(&shape, out)?;
        self.push(out, Op::Concat { a, b, axis }, None)
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::dim(
                "slice_axis",
                format!("range {}..{} on axis {} of {:?}", start, start + len, axis, shape),
            ));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xd = self.value(x).data();
        let src_block = shape[axis] * inner;
        let dst_block = len * inner;
        let mut out = vec![T::ZERO; outer * dst_block];
        for o in 0..outer {
            let src = o * src_block + start * inner;
            out[o * dst_block..(o + 1) * dst_block].copy_from_slice(&xd[src..src + dst_block]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        let out = NdArray::from_vec(&oshape, out)?;
        self.push(out, Op::SliceAxis { x, axis, start, len }, None)
    }

    /// Gathers flat element positions into a vector of shape `[idx.len()]`.
    pub fn pick(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let n = self.value(x).numel();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::dim("pick", format!("index {} out of {} elements", bad, n)));
        }
        let xd = self.value(x).data();
        let data: Vec<T> = idx.iter().map(|&i| xd[i]).collect();
        let out = NdArray::from_vec(&[idx.len()], data)?;
        self.push(out, Op::Pick { x, idx }, None)
    }

    /// Batched matmul over the last two axes; leading axes must match.
    /// With `trans_b`, `b` is `[..., n, k]` and used transposed.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = bmm_forward(self.value(a), self.value(b), trans_b)?;
        self.push(out, Op::Bmm { a, b, trans_b }, None)
    }

    /// Adds a `[l, c]` table to every batch row of `x` (`[n, l, c]`).
    pub fn add_rows(&mut self, x: Var, t: Var) -> Result<Var> {
        let (n, l, c) = self.value(x).dims3()?;
        if self.value(t).shape() != [l, c] {
            return Err(Error::dim(
                "add_rows",
                format!("table {:?}, expected [{}, {}]", self.value(t).shape(), l, c),
            ));
        }
        let xd = self.value(x).data();
        let td = self.value(t).data();
        let mut out = vec![T::ZERO; xd.len()];
        for ni in 0..n {
            let base = ni * l * c;
            for k in 0..l * c {
                out[base + k] = xd[base + k] + td[k];
            }
        }
        let out = NdArray::from_vec(self.value(x).shape(), out)?;
        self.push(out, Op::AddRows { x, t }, None)
    }

    /// Keeps every other grid row/column of a token segment: `x` is
    /// `[n, h*w, c]` laid out as an `h x w` grid; the result keeps positions
    /// `(2i, 2j)` and has `ceil(h/2) * ceil(w/2)` tokens.
    pub fn subsample_grid(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, l, c) = self.value(x).dims3()?;
        if h * w != l {
            return Err(Error::dim(
                "subsample_grid",
                format!("grid {}x{} does not cover {} tokens", h, w, l),
            ));
        }
        let (h2, w2) = ((h + 1) / 2, (w + 1) / 2);
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; n * h2 * w2 * c];
        for ni in 0..n {
            for i2 in 0..h2 {
                for j2 in 0..w2 {
                    let src = (ni * l + (2 * i2) * w + 2 * j2) * c;
                    let dst = (ni * h2 * w2 + i2 * w2 + j2) * c;
                    out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                }
            }
        }
        let out = NdArray::from_vec(&[n, h2 * w2, c], out)?;
        self.push(out, Op::SubsampleGrid { x, h, w }, None)
    }

    // ---- backward --------------------------------------------------------

    /// Runs reverse-mode accumulation from a scalar `loss` node. Afterwards
    /// every `requires_grad` leaf carries its gradient (readable through
    /// [`Tape::grad`] and mirrored into the leaf's `NdArray::grad`).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.i()].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar, got shape {:?}",
                self.nodes[loss.i()].value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.i()] = Some(vec![T::ONE]);
        for i in (0..=loss.i()).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(&self.nodes, i, &g, &mut grads)?;
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        for i in 0..n {
            if matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].value.requires_grad {
                let g = grads[i]
                    .clone()
                    .unwrap_or_else(|| vec![T::ZERO; self.nodes[i].value.numel()]);
                if grads[i].is_none() {
                    grads[i] = Some(g.clone());
                }
                self.nodes[i].value.grad = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn sigmoid<T: Elem>(x: T) -> T {
    // Stable on both tails.
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Adds `v` into the adjoint buffer of `target`, allocating zeros on first use.
/// Skips entirely when the target subtree has no trainable leaves.
fn acc<T: Elem>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    target: Var,
    v: &[T],
) {
    if !nodes[target.i()].needs_grad {
        return;
    }
    let slot = &mut grads[target.i()];
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(v) {
                *a += *b;
            }
        }
        None => *slot = Some(v.to_vec()),
    }
}

/// Like [`acc`] but takes ownership to avoid a copy on first use.
fn acc_owned<T: Elem>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    target: Var,
    v: Vec<T>,
) {
    if !nodes[target.i()].needs_grad {
        return;
    }
    let slot = &mut grads[target.i()];
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&v) {
                *a += *b;
            }
        }
        None => *slot = Some(v),
    }
}

/// Backward rule dispatch for node `i` with upstream adjoint `g`.
fn propagate<T: Elem>(
    nodes: &[Node<T>],
    i: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) -> Result<()> {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, stride, padding, groups } => {
            let (dx, dw, db) = conv2d_backward(
                &nodes[x.i()].value,
                &nodes[w.i()].value,
                g,
                *stride,
                *padding,
                *groups,
                nodes[x.i()].needs_grad,
                nodes[w.i()].needs_grad,
                b.map(|b| nodes[b.i()].needs_grad).unwrap_or(false),
            )?;
            if let Some(dx) = dx {
                acc_owned(nodes, grads, *x, dx);
            }
            if let Some(dw) = dw {
                acc_owned(nodes, grads, *w, dw);
            }
            if let (Some(db), Some(b)) = (db, b) {
                acc_owned(nodes, grads, *b, db);
            }
        }
        Op::Linear { x, w, b } => {
            let (dx, dw, db) = linear_backward(
                &nodes[x.i()].value,
                &nodes[w.i()].value,
                g,
                nodes[x.i()].needs_grad,
                nodes[w.i()].needs_grad,
                b.map(|b| nodes[b.i()].needs_grad).unwrap_or(false),
            )?;
            if let Some(dx) = dx {
                acc_owned(nodes, grads, *x, dx);
            }
            if let Some(dw) = dw {
                acc_owned(nodes, grads, *w, dw);
            }
            if let (Some(db), Some(b)) = (db, b) {
                acc_owned(nodes, grads, *b, db);
            }
        }
        Op::BatchNorm { x, gamma, beta, mean, invstd, train } => {
            let (n, c, h, w) = nodes[x.i()].value.dims4()?;
            let hw = h * w;
            let m = n * hw;
            let xd = nodes[x.i()].value.data();
            let gam = nodes[gamma.i()].value.data();
            let mut dgamma = vec![T::ZERO; c];
            let mut dbeta = vec![T::ZERO; c];
            let mut dx = if nodes[x.i()].needs_grad { vec![T::ZERO; xd.len()] } else { Vec::new() };
            for ci in 0..c {
                let (mu, is) = (mean[ci], invstd[ci]);
                let mut sum_g = T::ZERO;
                let mut sum_gx = T::ZERO;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for k in base..base + hw {
                        let xh = (xd[k] - mu) * is;
                        sum_g += g[k];
                        sum_gx += g[k] * xh;
                    }
                }
                dgamma[ci] = sum_gx;
                dbeta[ci] = sum_g;
                if !dx.is_empty() {
                    let scale = gam[ci] * is;
                    if *train {
                        let inv_m = T::ONE / T::from_f64(m as f64);
                        for ni in 0..n {
                            let base = (ni * c + ci) * hw;
                            for k in base..base + hw {
                                let xh = (xd[k] - mu) * is;
                                dx[k] = scale * (g[k] - sum_g * inv_m - xh * (sum_gx * inv_m));
                            }
                        }
                    } else {
                        for ni in 0..n {
                            let base = (ni * c + ci) * hw;
                            for k in base..base + hw {
                                dx[k] = scale * g[k];
                            }
                        }
                    }
                }
            }
            if !dx.is_empty() {
                acc_owned(nodes, grads, *x, dx);
            }
            acc_owned(nodes, grads, *gamma, dgamma);
            acc_owned(nodes, grads, *beta, dbeta);
        }
        Op::Act { x, kind } => {
            let xd = nodes[x.i()].value.data();
            let yd = node.value.data();
            let mut dx = vec![T::ZERO; xd.len()];
            match kind {
                Activation::Relu => {
                    for k in 0..dx.len() {
                        if xd[k] > T::ZERO {
                            dx[k] = g[k];
                        }
                    }
                }
                Activation::Relu6 => {
                    let six = T::from_f64(6.0);
                    for k in 0..dx.len() {
                        if xd[k] > T::ZERO && xd[k] < six {
                            dx[k] = g[k];
                        }
                    }
                }
                Activation::Hardswish => {
                    let three = T::from_f64(3.0);
                    let six = T::from_f64(6.0);
                    for k in 0..dx.len() {
                        let v = xd[k];
                        let d = if v <= -three {
                            T::ZERO
                        } else if v >= three {
                            T::ONE
                        } else {
                            (v + v + three) / six
                        };
                        dx[k] = g[k] * d;
                    }
                }
                Activation::Sigmoid => {
                    for k in 0..dx.len() {
                        dx[k] = g[k] * yd[k] * (T::ONE - yd[k]);
                    }
                }
            }
            acc_owned(nodes, grads, *x, dx);
        }
        Op::SoftmaxLast { x } => {
            let last = *node.value.shape().last().unwrap();
            let yd = node.value.data();
            let mut dx = vec![T::ZERO; yd.len()];
            for r in 0..yd.len() / last {
                let base = r * last;
                let mut dot = T::ZERO;
                for k in base..base + last {
                    dot += g[k] * yd[k];
                }
                for k in base..base + last {
                    dx[k] = yd[k] * (g[k] - dot);
                }
            }
            acc_owned(nodes, grads, *x, dx);
        }
        Op::Upsample2x { x } => {
            let (n, c, h, w) = nodes[x.i()].value.dims4()?;
            let (ho, wo) = (2 * h, 2 * w);
            let mut dx = vec![T::ZERO; n * c * h * w];
            for nc in 0..n * c {
                let src = &g[nc * ho * wo..(nc + 1) * ho * wo];
                let dst = &mut dx[nc * h * w..(nc + 1) * h * w];
                for i in 0..ho {
                    for j in 0..wo {
                        dst[(i / 2) * w + j / 2] += src[i * wo + j];
                    }
                }
            }
            acc_owned(nodes, grads, *x, dx);
        }
        Op::GlobalAvgPool { x } => {
            let (n, c, h, w) = nodes[x.i()].value.dims4()?;
            let hw = h * w;
            let inv = T::ONE / T::from_f64(hw as f64);
            let mut dx = vec![T::ZERO; n * c * hw];
            for nc in 0..n * c {
                let gv = g[nc] * inv;
                for k in 0..hw {
                    dx[nc * hw + k] = gv;
                }
            }
            acc_owned(nodes, grads, *x, dx);
        }
        Op::ScaleChannels { x, s } => {
            let (n, c, h, w) = nodes[x.i()].value.dims4()?;
            let hw = h * w;
            let xd = nodes[x.i()].value.data();
            let sd = nodes[s.i()].value.data();
            if nodes[x.i()].needs_grad {
                let mut dx = vec![T::ZERO; xd.len()];
                for nc in 0..n * c {
                    for k in 0..hw {
                        dx[nc * hw + k] = g[nc * hw + k] * sd[nc];
                    }
                }
                acc_owned(nodes, grads, *x, dx);
            }
            if nodes[s.i()].needs_grad {
                let mut ds = vec![T::ZERO; n * c];
                for nc in 0..n * c {
                    let mut acc_v = T::ZERO;
                    for k in 0..hw {
                        acc_v += g[nc * hw + k] * xd[nc * hw + k];
                    }
                    ds[nc] = acc_v;
                }
                acc_owned(nodes, grads, *s, ds);
            }
        }
        Op::Hadamard { a, b } => {
            let ad = nodes[a.i()].value.data();
            let bd = nodes[b.i()].value.data();
            if nodes[a.i()].needs_grad {
                let da: Vec<T> = g.iter().zip(bd).map(|(&gv, &bv)| gv * bv).collect();
                acc_owned(nodes, grads, *a, da);
            }
            if nodes[b.i()].needs_grad {
                let db: Vec<T> = g.iter().zip(ad).map(|(&gv, &av)| gv * av).collect();
                acc_owned(nodes, grads, *b, db);
            }
        }
        Op::Add { a, b } => {
            acc(nodes, grads, *a, g);
            acc(nodes, grads, *b, g);
        }
        Op::Sub { a, b } => {
            acc(nodes, grads, *a, g);
            if nodes[b.i()].needs_grad {
                let db: Vec<T> = g.iter().map(|&v| -v).collect();
                acc_owned(nodes, grads, *b, db);
            }
        }
        Op::Div { a, b } => {
            let ad = nodes[a.i()].value.data();
            let bd = nodes[b.i()].value.data();
            if nodes[a.i()].needs_grad {
                let da: Vec<T> = g.iter().zip(bd).map(|(&gv, &bv)| gv / bv).collect();
                acc_owned(nodes, grads, *a, da);
            }
            if nodes[b.i()].needs_grad {
                let db: Vec<T> = g
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                    .collect();
                acc_owned(nodes, grads, *b, db);
            }
        }
        Op::Minimum { a, b } => {
            let ad = nodes[a.i()].value.data();
            let bd = nodes[b.i()].value.data();
            if nodes[a.i()].needs_grad {
                let da: Vec<T> = g
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(&gv, (&av, &bv))| if av <= bv { gv } else { T::ZERO })
                    .collect();
                acc_owned(nodes, grads, *a, da);
            }
            if nodes[b.i()].needs_grad {
                let db: Vec<T> = g
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(&gv, (&av, &bv))| if av <= bv { T::ZERO } else { gv })
                    .collect();
                acc_owned(nodes, grads, *b, db);
            }
        }
        Op::Maximum { a, b } => {
            let ad = nodes[a.i()].value.data();
            let bd = nodes[b.i()].value.data();
            if nodes[a.i()].needs_grad {
                let da: Vec<T> = g
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(&gv, (&av, &bv))| if av >= bv { gv } else { T::ZERO })
                    .collect();
                acc_owned(nodes, grads, *a, da);
            }
            if nodes[b.i()].needs_grad {
                let db: Vec<T> = g
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(&gv, (&av, &bv))| if av >= bv { T::ZERO } else { gv })
                    .collect();
                acc_owned(nodes, grads, *b, db);
            }
        }
        Op::Abs { x } => {
            let xd = nodes[x.i()].value.data();
            let dx: Vec<T> = g
                .iter()
                .zip(xd)
                .map(|(&gv, &xv)| {
                    if xv > T::ZERO {
                        gv
                    } else if xv < T::ZERO {
                        -gv
                    } else {
                        T::ZERO
                    }
                })
                .collect();
            acc_owned(nodes, grads, *x, dx);
        }
        Op::Ln { x } => {
            let xd = nodes[x.i()].value.data();
            let dx: Vec<T> = g.iter().zip(xd).map(|(&gv, &xv)| gv / xv).collect();
            acc_owned(nodes, grads, *x, dx);
        }
        Op::MulScalar { x, c } => {
            let dx: Vec<T> = g.iter().map(|&v| v * *c).collect();
            acc_owned(nodes, grads, *x, dx);
        }
        Op::AddScalar { x } => {
            acc(nodes, grads, *x, g);
        }
        Op::Clamp { x, lo, hi } => {
            let xd = nodes[x.i()].value.data();
            let dx: Vec<T> = g
                .iter()
                .zip(xd)
                .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { T::ZERO })
                .collect();
            acc_owned(nodes, grads, *x, dx);
        }
        Op::SumAll { x } => {
            let n = nodes[x.i()].value.numel();
            acc_owned(nodes, grads, *x, vec![g[0]; n]);
        }
        Op::Reshape { x } => {
            acc(nodes, grads, *x, g);
        }
        Op::Permute { x, perm } => {
            // Adjoint of a permutation is the inverse permutation.
            let mut inv = vec![0usize; perm.len()];
            for (d, &p) in perm.iter().enumerate() {
                inv[p] = d;
            }
            let gy = NdArray::from_vec(node.value.shape(), g.to_vec())?;
            let dx = permute_forward(&gy, &inv);
            acc_owned(nodes, grads, *x, dx.into_data());
        }
        Op::Concat { a, b, axis } => {
            let sa = nodes[a.i()].value.shape();
            let sb = nodes[b.i()].value.shape();
            let inner: usize = sa[axis + 1..].iter().product();
            let outer: usize = sa[..*axis].iter().product();
            let (ab, bb) = (sa[*axis] * inner, sb[*axis] * inner);
            if nodes[a.i()].needs_grad {
                let mut da = vec![T::ZERO; outer * ab];
                for o in 0..outer {
                    da[o * ab..(o + 1) * ab]
                        .copy_from_slice(&g[o * (ab + bb)..o * (ab + bb) + ab]);
                }
                acc_owned(nodes, grads, *a, da);
            }
            if nodes[b.i()].needs_grad {
                let mut db = vec![T::ZERO; outer * bb];
                for o in 0..outer {
                    db[o * bb..(o + 1) * bb]
                        .copy_from_slice(&g[o * (ab + bb) + ab..(o + 1) * (ab + bb)]);
                }
                acc_owned(nodes, grads, *b, db);
            }
        }
        Op::SliceAxis { x, axis, start, len } => {
            let shape = nodes[x.i()].value.shape();
            let inner: usize = shape[axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            let src_block = shape[*axis] * inner;
            let dst_block = len * inner;
            let mut dx = vec![T::ZERO; nodes[x.i()].value.numel()];
            for o in 0..outer {
                let dst = o * src_block + start * inner;
                dx[dst..dst + dst_block].copy_from_slice(&g[o * dst_block..(o + 1) * dst_block]);
            }
            acc_owned(nodes, grads, *x, dx);
        }
        Op::Pick { x, idx } => {
            let mut dx = vec![T::ZERO; nodes[x.i()].value.numel()];
            for (k, &pos) in idx.iter().enumerate() {
                dx[pos] += g[k];
            }
            acc_owned(nodes, grads, *x, dx);
        }
        Op::Bmm { a, b, trans_b } => {
            let (da, db) = bmm_backward(
                &nodes[a.i()].value,
                &nodes[b.i()].value,
                g,
                *trans_b,
                nodes[a.i()].needs_grad,
                nodes[b.i()].needs_grad,
            )?;
            if let Some(da) = da {
                acc_owned(nodes, grads, *a, da);
            }
            if let Some(db) = db {
                acc_owned(nodes, grads, *b, db);
            }
        }
        Op::AddRows { x, t } => {
            acc(nodes, grads, *x, g);
            if nodes[t.i()].needs_grad {
                let (n, l, c) = nodes[x.i()].value.dims3()?;
                let mut dt = vec![T::ZERO; l * c];
                for ni in 0..n {
                    let base = ni * l * c;
                    for k in 0..l * c {
                        dt[k] += g[base + k];
                    }
                }
                acc_owned(nodes, grads, *t, dt);
            }
        }
        Op::SubsampleGrid { x, h, w } => {
            let (n, l, c) = nodes[x.i()].value.dims3()?;
            let (h2, w2) = ((h + 1) / 2, (w + 1) / 2);
            let mut dx = vec![T::ZERO; n * l * c];
            for ni in 0..n {
                for i2 in 0..h2 {
                    for j2 in 0..w2 {
                        let dst = (ni * l + (2 * i2) * w + 2 * j2) * c;
                        let src = (ni * h2 * w2 + i2 * w2 + j2) * c;
                        for k in 0..c {
                            dx[dst + k] += g[src + k];
                        }
                    }
                }
            }
            acc_owned(nodes, grads, *x, dx);
        }
    }
    Ok(())
}

// ---- dense kernels -------------------------------------------------------

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cg: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
    groups: usize,
}

fn conv_dims<T: Elem>(
    x: &NdArray<T>,
    w: &NdArray<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<ConvDims> {
    let (n, cin, h, wi) = x.dims4()?;
    let (cout, cg, kh, kw) = w.dims4()?;
    if stride == 0 || groups == 0 {
        return Err(Error::dim("conv2d", "stride and groups must be positive"));
    }
    if cin % groups != 0 || cout % groups != 0 {
        return Err(Error::dim(
            "conv2d",
            format!("channels ({} in, {} out) not divisible by {} groups", cin, cout, groups),
        ));
    }
    if cg != cin / groups {
        return Err(Error::dim(
            "conv2d",
            format!("weight expects {} channels/group, input provides {}", cg, cin / groups),
        ));
    }
    if h + 2 * padding < kh || wi + 2 * padding < kw {
        return Err(Error::dim(
            "conv2d",
            format!("kernel {}x{} exceeds padded input {}x{}", kh, kw, h + 2 * padding, wi + 2 * padding),
        ));
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (wi + 2 * padding - kw) / stride + 1;
    Ok(ConvDims { n, cin, h, w: wi, cout, cg, kh, kw, ho, wo, stride, padding, groups })
}

/// Valid output-column range for kernel column `kj`: all `oj` with
/// `0 <= oj*stride + kj - padding < w`.
fn out_range(kj: usize, d: &ConvDims, limit: usize, extent: usize) -> (usize, usize) {
    let lo = if kj >= d.padding { 0 } else { (d.padding - kj + d.stride - 1) / d.stride };
    let hi_raw = extent + d.padding;
    let hi = if hi_raw > kj {
        ((hi_raw - kj - 1) / d.stride + 1).min(limit)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Elem>(xc: &[T], col: &mut [T], d: &ConvDims) {
    col.iter_mut().for_each(|v| *v = T::ZERO);
    let howo = d.ho * d.wo;
    for c in 0..d.cg {
        for ki in 0..d.kh {
            let (oi_lo, oi_hi) = out_range(ki, d, d.ho, d.h);
            for kj in 0..d.kw {
                let (oj_lo, oj_hi) = out_range(kj, d, d.wo, d.w);
                let row = ((c * d.kh + ki) * d.kw + kj) * howo;
                for oi in oi_lo..oi_hi {
                    let ii = oi * d.stride + ki - d.padding;
                    let src = c * d.h * d.w + ii * d.w;
                    let dst = row + oi * d.wo;
                    if d.stride == 1 {
                        let jj0 = oj_lo + kj - d.padding;
                        col[dst + oj_lo..dst + oj_hi]
                            .copy_from_slice(&xc[src + jj0..src + jj0 + (oj_hi - oj_lo)]);
                    } else {
                        for oj in oj_lo..oj_hi {
                            col[dst + oj] = xc[src + oj * d.stride + kj - d.padding];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Elem>(col: &[T], dxc: &mut [T], d: &ConvDims) {
    let howo = d.ho * d.wo;
    for c in 0..d.cg {
        for ki in 0..d.kh {
            let (oi_lo, oi_hi) = out_range(ki, d, d.ho, d.h);
            for kj in 0..d.kw {
                let (oj_lo, oj_hi) = out_range(kj, d, d.wo, d.w);
                let row = ((c * d.kh + ki) * d.kw + kj) * howo;
                for oi in oi_lo..oi_hi {
                    let ii = oi * d.stride + ki - d.padding;
                    let dst = c * d.h * d.w + ii * d.w;
                    let src = row + oi * d.wo;
                    for oj in oj_lo..oj_hi {
                        dxc[dst + oj * d.stride + kj - d.padding] += col[src + oj];
                    }
                }
            }
        }
    }
}

fn conv2d_forward<T: Elem>(
    x: &NdArray<T>,
    w: &NdArray<T>,
    b: Option<&[T]>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<NdArray<T>> {
    let d = conv_dims(x, w, stride, padding, groups)?;
    if let Some(b) = b {
        if b.len() != d.cout {
            return Err(Error::dim("conv2d", format!("bias must have {} elements", d.cout)));
        }
    }
    let howo = d.ho * d.wo;
    let mut out = vec![T::ZERO; d.n * d.cout * howo];
    let xd = x.data();
    let wd = w.data();
    let pointwise = d.kh == 1 && d.kw == 1 && d.stride == 1 && d.padding == 0 && d.groups == 1;
    let depthwise = d.groups == d.cin && d.cout == d.cin && d.cg == 1;
    if pointwise {
        let hw = d.h * d.w;
        for ni in 0..d.n {
            unsafe {
                T::gemm(
                    d.cout,
                    d.cin,
                    hw,
                    T::ONE,
                    wd.as_ptr(),
                    d.cin as isize,
                    1,
                    xd.as_ptr().add(ni * d.cin * hw),
                    hw as isize,
                    1,
                    T::ZERO,
                    out.as_mut_ptr().add(ni * d.cout * hw),
                    hw as isize,
                    1,
                );
            }
        }
    } else if depthwise {
        for ni in 0..d.n {
            for c in 0..d.cin {
                let xb = &xd[(ni * d.cin + c) * d.h * d.w..][..d.h * d.w];
                let ob = &mut out[(ni * d.cout + c) * howo..][..howo];
                for ki in 0..d.kh {
                    let (oi_lo, oi_hi) = out_range(ki, &d, d.ho, d.h);
                    for kj in 0..d.kw {
                        let (oj_lo, oj_hi) = out_range(kj, &d, d.wo, d.w);
                        let wv = wd[(c * d.kh + ki) * d.kw + kj];
                        for oi in oi_lo..oi_hi {
                            let ii = oi * d.stride + ki - d.padding;
                            let src = ii * d.w;
                            let dst = oi * d.wo;
                            for oj in oj_lo..oj_hi {
                                ob[dst + oj] += wv * xb[src + oj * d.stride + kj - d.padding];
                            }
                        }
                    }
                }
            }
        }
    } else {
        let cog = d.cout / d.groups;
        let ckk = d.cg * d.kh * d.kw;
        let mut col = vec![T::ZERO; ckk * howo];
        for ni in 0..d.n {
            for gi in 0..d.groups {
                let xslice = &xd[(ni * d.cin + gi * d.cg) * d.h * d.w..][..d.cg * d.h * d.w];
                im2col(xslice, &mut col, &d);
                unsafe {
                    T::gemm(
                        cog,
                        ckk,
                        howo,
                        T::ONE,
                        wd.as_ptr().add(gi * cog * ckk),
                        ckk as isize,
                        1,
                        col.as_ptr(),
                        howo as isize,
                        1,
                        T::ZERO,
                        out.as_mut_ptr().add((ni * d.cout + gi * cog) * howo),
                        howo as isize,
                        1,
                    );
                }
            }
        }
    }
    if let Some(b) = b {
        for ni in 0..d.n {
            for c in 0..d.cout {
                let bv = b[c];
                for v in &mut out[(ni * d.cout + c) * howo..][..howo] {
                    *v += bv;
                }
            }
        }
    }
    NdArray::from_vec(&[d.n, d.cout, d.ho, d.wo], out)
}

#[allow(clippy::type_complexity)]
fn conv2d_backward<T: Elem>(
    x: &NdArray<T>,
    w: &NdArray<T>,
    gy: &[T],
    stride: usize,
    padding: usize,
    groups: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> Result<(Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>)> {
    let d = conv_dims(x, w, stride, padding, groups)?;
    let howo = d.ho * d.wo;
    let xd = x.data();
    let wd = w.data();
    let mut dx = if need_dx { Some(vec![T::ZERO; xd.len()]) } else { None };
    let mut dw = if need_dw { Some(vec![T::ZERO; wd.len()]) } else { None };
    let mut db = if need_db { Some(vec![T::ZERO; d.cout]) } else { None };
    if let Some(db) = db.as_mut() {
        for ni in 0..d.n {
            for c in 0..d.cout {
                let mut s = T::ZERO;
                for &v in &gy[(ni * d.cout + c) * howo..][..howo] {
                    s += v;
                }
                db[c] += s;
            }
        }
    }
    let pointwise = d.kh == 1 && d.kw == 1 && d.stride == 1 && d.padding == 0 && d.groups == 1;
    let depthwise = d.groups == d.cin && d.cout == d.cin && d.cg == 1;
    if pointwise {
        let hw = d.h * d.w;
        for ni in 0..d.n {
            let gy_n = unsafe { gy.as_ptr().add(ni * d.cout * hw) };
            let x_n = unsafe { xd.as_ptr().add(ni * d.cin * hw) };
            if let Some(dw) = dw.as_mut() {
                // dW += Gy_n (cout x hw) * X_n^T (hw x cin)
                unsafe {
                    T::gemm(
                        d.cout,
                        hw,
                        d.cin,
                        T::ONE,
                        gy_n,
                        hw as isize,
                        1,
                        x_n,
                        1,
                        hw as isize,
                        T::ONE,
                        dw.as_mut_ptr(),
                        d.cin as isize,
                        1,
                    );
                }
            }
            if let Some(dx) = dx.as_mut() {
                // dX_n = W^T (cin x cout) * Gy_n (cout x hw)
                unsafe {
                    T::gemm(
                        d.cin,
                        d.cout,
                        hw,
                        T::ONE,
                        wd.as_ptr(),
                        1,
                        d.cin as isize,
                        gy_n,
                        hw as isize,
                        1,
                        T::ZERO,
                        dx.as_mut_ptr().add(ni * d.cin * hw),
                        hw as isize,
                        1,
                    );
                }
            }
        }
    } else if depthwise {
        for ni in 0..d.n {
            for c in 0..d.cin {
                let xb = &xd[(ni * d.cin + c) * d.h * d.w..][..d.h * d.w];
                let gb = &gy[(ni * d.cout + c) * howo..][..howo];
                for ki in 0..d.kh {
                    let (oi_lo, oi_hi) = out_range(ki, &d, d.ho, d.h);
                    for kj in 0..d.kw {
                        let (oj_lo, oj_hi) = out_range(kj, &d, d.wo, d.w);
                        let widx = (c * d.kh + ki) * d.kw + kj;
                        let wv = wd[widx];
                        let mut wacc = T::ZERO;
                        for oi in oi_lo..oi_hi {
                            let ii = oi * d.stride + ki - d.padding;
                            let xrow = ii * d.w;
                            let grow = oi * d.wo;
                            for oj in oj_lo..oj_hi {
                                let jj = oj * d.stride + kj - d.padding;
                                let gv = gb[grow + oj];
                                wacc += gv * xb[xrow + jj];
                                if let Some(dx) = dx.as_mut() {
                                    dx[(ni * d.cin + c) * d.h * d.w + xrow + jj] += gv * wv;
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[widx] += wacc;
                        }
                    }
                }
            }
        }
    } else {
        let cog = d.cout / d.groups;
        let ckk = d.cg * d.kh * d.kw;
        let mut col = vec![T::ZERO; ckk * howo];
        let mut dcol = vec![T::ZERO; ckk * howo];
        for ni in 0..d.n {
            for gi in 0..d.groups {
                let gy_g = unsafe { gy.as_ptr().add((ni * d.cout + gi * cog) * howo) };
                if let Some(dw) = dw.as_mut() {
                    let xslice = &xd[(ni * d.cin + gi * d.cg) * d.h * d.w..][..d.cg * d.h * d.w];
                    im2col(xslice, &mut col, &d);
                    // dW_g += Gy_g (cog x howo) * col^T (howo x ckk)
                    unsafe {
                        T::gemm(
                            cog,
                            howo,
                            ckk,
                            T::ONE,
                            gy_g,
                            howo as isize,
                            1,
                            col.as_ptr(),
                            1,
                            howo as isize,
                            T::ONE,
                            dw.as_mut_ptr().add(gi * cog * ckk),
                            ckk as isize,
                            1,
                        );
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    // dcol = W_g^T (ckk x cog) * Gy_g (cog x howo)
                    unsafe {
                        T::gemm(
                            ckk,
                            cog,
                            howo,
                            T::ONE,
                            wd.as_ptr().add(gi * cog * ckk),
                            1,
                            ckk as isize,
                            gy_g,
                            howo as isize,
                            1,
                            T::ZERO,
                            dcol.as_mut_ptr(),
                            howo as isize,
                            1,
                        );
                    }
                    let dxs =
                        &mut dx[(ni * d.cin + gi * d.cg) * d.h * d.w..][..d.cg * d.h * d.w];
                    col2im_add(&dcol, dxs, &d);
                }
            }
        }
    }
    Ok((dx, dw, db))
}

fn linear_forward<T: Elem>(x: &NdArray<T>, w: &NdArray<T>, b: Option<&[T]>) -> Result<NdArray<T>> {
    let (dout, din) = w.dims2()?;
    let xs = x.shape();
    let last = *xs.last().ok_or_else(|| Error::dim("linear", "rank-0 input"))?;
    if last != din {
        return Err(Error::dim(
            "linear",
            format!("input last axis {} vs weight in-features {}", last, din),
        ));
    }
    if let Some(b) = b {
        if b.len() != dout {
            return Err(Error::dim("linear", format!("bias must have {} elements", dout)));
        }
    }
    let m = x.numel() / din;
    let mut out = vec![T::ZERO; m * dout];
    unsafe {
        T::gemm(
            m,
            din,
            dout,
            T::ONE,
            x.data().as_ptr(),
            din as isize,
            1,
            w.data().as_ptr(),
            1,
            din as isize,
            T::ZERO,
            out.as_mut_ptr(),
            dout as isize,
            1,
        );
    }
    if let Some(b) = b {
        for row in out.chunks_exact_mut(dout) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    let mut oshape = xs.to_vec();
    *oshape.last_mut().unwrap() = dout;
    NdArray::from_vec(&oshape, out)
}

#[allow(clippy::type_complexity)]
fn linear_backward<T: Elem>(
    x: &NdArray<T>,
    w: &NdArray<T>,
    gy: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> Result<(Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>)> {
    let (dout, din) = w.dims2()?;
    let m = x.numel() / din;
    let mut dx = None;
    if need_dx {
        let mut buf = vec![T::ZERO; m * din];
        unsafe {
            T::gemm(
                m,
                dout,
                din,
                T::ONE,
                gy.as_ptr(),
                dout as isize,
                1,
                w.data().as_ptr(),
                din as isize,
                1,
                T::ZERO,
                buf.as_mut_ptr(),
                din as isize,
                1,
            );
        }
        dx = Some(buf);
    }
    let mut dw = None;
    if need_dw {
        let mut buf = vec![T::ZERO; dout * din];
        unsafe {
            T::gemm(
                dout,
                m,
                din,
                T::ONE,
                gy.as_ptr(),
                1,
                dout as isize,
                x.data().as_ptr(),
                din as isize,
                1,
                T::ZERO,
                buf.as_mut_ptr(),
                din as isize,
                1,
            );
        }
        dw = Some(buf);
    }
    let mut db = None;
    if need_db {
        let mut buf = vec![T::ZERO; dout];
        for row in gy.chunks_exact(dout) {
            for (acc_v, &v) in buf.iter_mut().zip(row) {
                *acc_v += v;
            }
        }
        db = Some(buf);
    }
    Ok((dx, dw, db))
}

fn bmm_forward<T: Elem>(a: &NdArray<T>, b: &NdArray<T>, trans_b: bool) -> Result<NdArray<T>> {
    let sa = a.shape();
    let sb = b.shape();
    if sa.len() < 2 || sb.len() != sa.len() {
        return Err(Error::dim("bmm", format!("ranks {:?} vs {:?}", sa, sb)));
    }
    if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
        return Err(Error::dim("bmm", format!("leading axes {:?} vs {:?}", sa, sb)));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (bk, n) = if trans_b {
        (sb[sb.len() - 1], sb[sb.len() - 2])
    } else {
        (sb[sb.len() - 2], sb[sb.len() - 1])
    };
    if bk != k {
        return Err(Error::dim(
            "bmm",
            format!("inner axes differ: {} vs {} (trans_b={})", k, bk, trans_b),
        ));
    }
    let batch: usize = sa[..sa.len() - 2].iter().product();
    let mut out = vec![T::ZERO; batch * m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..batch {
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::ONE,
                ad.as_ptr().add(i * m * k),
                k as isize,
                1,
                bd.as_ptr().add(i * k * n),
                rsb,
                csb,
                T::ZERO,
                out.as_mut_ptr().add(i * m * n),
                n as isize,
                1,
            );
        }
    }
    let mut oshape = sa.to_vec();
    let rank = oshape.len();
    oshape[rank - 2] = m;
    oshape[rank - 1] = n;
    NdArray::from_vec(&oshape, out)
}

#[allow(clippy::type_complexity)]
fn bmm_backward<T: Elem>(
    a: &NdArray<T>,
    b: &NdArray<T>,
    gy: &[T],
    trans_b: bool,
    need_da: bool,
    need_db: bool,
) -> Result<(Option<Vec<T>>, Option<Vec<T>>)> {
    let sa = a.shape();
    let sb = b.shape();
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let n = if trans_b { sb[sb.len() - 2] } else { sb[sb.len() - 1] };
    let batch: usize = sa[..sa.len() - 2].iter().product();
    let ad = a.data();
    let bd = b.data();
    let mut da = if need_da { Some(vec![T::ZERO; ad.len()]) } else { None };
    let mut db = if need_db { Some(vec![T::ZERO; bd.len()]) } else { None };
    for i in 0..batch {
        let gy_i = unsafe { gy.as_ptr().add(i * m * n) };
        if let Some(da) = da.as_mut() {
            // normal: dA = Gy * B^T; trans_b: dA = Gy * B
            let (rsb, csb) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
            unsafe {
                T::gemm(
                    m,
                    n,
                    k,
                    T::ONE,
                    gy_i,
                    n as isize,
                    1,
                    bd.as_ptr().add(i * k * n),
                    rsb,
                    csb,
                    T::ZERO,
                    da.as_mut_ptr().add(i * m * k),
                    k as isize,
                    1,
                );
            }
        }
        if let Some(db) = db.as_mut() {
            if trans_b {
                // out = A * B^T, B is [n, k]: dB = Gy^T * A
                unsafe {
                    T::gemm(
                        n,
                        m,
                        k,
                        T::ONE,
                        gy_i,
                        1,
                        n as isize,
                        ad.as_ptr().add(i * m * k),
                        k as isize,
                        1,
                        T::ZERO,
                        db.as_mut_ptr().add(i * n * k),
                        k as isize,
                        1,
                    );
                }
            } else {
                // dB = A^T * Gy
                unsafe {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::ONE,
                        ad.as_ptr().add(i * m * k),
                        1,
                        k as isize,
                        gy_i,
                        n as isize,
                        1,
                        T::ZERO,
                        db.as_mut_ptr().add(i * k * n),
                        n as isize,
                        1,
                    );
                }
            }
        }
    }
    Ok((da, db))
}

fn permute_forward<T: Elem>(x: &NdArray<T>, perm: &[usize]) -> NdArray<T> {
    let xs = x.shape();
    let os: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
    let xstr = strides_of(xs);
    let step: Vec<usize> = perm.iter().map(|&p| xstr[p]).collect();
    let rank = xs.len();
    let mut out = vec![T::ZERO; x.numel()];
    let xd = x.data();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for o in out.iter_mut() {
        *o = xd[off];
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += step[d];
            if idx[d] < os[d] {
                break;
            }
            idx[d] = 0;
            off -= step[d] * os[d];
        }
    }
    NdArray::from_vec(&os, out).expect("permute preserves element count")
}
