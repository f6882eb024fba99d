//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Ops append
//! nodes whose inputs always precede them, so backward is a single reverse
//! sweep that visits each node once and sums gradient contributions along
//! fan-out edges. Tapes are single-threaded by construction; parallelism
//! lives inside the kernels and across independent tapes.

mod kernels;

pub use kernels::matmul as raw_matmul;

use crate::tensor::{strides_of, unravel, Scalar, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Scale { a: ValueId, c: f64 },
    MatMul { a: ValueId, b: ValueId },
    Bmm { a: ValueId, b: ValueId, rhs_batched: bool },
    Softmax { a: ValueId },
    LayerNorm { a: ValueId, gain: ValueId, bias: ValueId, eps: f64 },
    Gelu { a: ValueId },
    Relu { a: ValueId },
    Conv2d { input: ValueId, kernel: ValueId, stride: usize, pad_t: usize, pad_l: usize },
    MaxPool2d { a: ValueId, argmax: Vec<usize> },
    Embedding { table: ValueId, ids: Vec<usize> },
    Concat { parts: Vec<ValueId>, axis: usize },
    Reshape { a: ValueId },
    Permute { a: ValueId, perm: Vec<usize> },
    Slice { a: ValueId, starts: Vec<usize>, lens: Vec<usize> },
    MaskedFill { a: ValueId, mask: ValueId },
    SumAll { a: ValueId },
    MaskedCrossEntropy { logits: ValueId, targets: Vec<usize>, mask: Vec<bool>, m_count: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    tracked: bool,
}

/// The autodiff graph for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn is_tracked(&self, id: ValueId) -> bool {
        self.nodes[id.0].tracked
    }

    /// Gradient of the last `backward` w.r.t. `id`; zeros when the value is
    /// tracked but unreachable from the loss.
    pub fn grad(&self, id: ValueId) -> Tensor<T> {
        match &self.grads.get(id.0) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(self.nodes[id.0].value.shape()),
        }
    }

    /// Untracked input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> ValueId {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Tracked leaf; gradients accumulate here.
    pub fn parameter(&mut self, value: Tensor<T>) -> ValueId {
        self.push_unchecked(value, Op::Leaf, true)
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op, tracked: bool) -> ValueId {
        self.nodes.push(Node { value, op, tracked });
        ValueId(self.nodes.len() - 1)
    }

    fn push(&mut self, opname: &'static str, value: Tensor<T>, op: Op, tracked: bool) -> Result<ValueId> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: opname });
        }
        Ok(self.push_unchecked(value, op, tracked))
    }

    fn tracked_any(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tracked)
    }

    // ---- ops ------------------------------------------------------------

    /// Elementwise add; `b`'s shape must equal `a`'s or be a trailing suffix
    /// of it (broadcast over the leading axes).
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !is_suffix(&sb, &sa) {
            return Err(TensorError::ShapeMismatch { op: "add", lhs: sa, rhs: sb });
        }
        let bl = self.value(b).numel().max(1);
        let mut out = self.value(a).clone();
        let bd = self.value(b).data();
        for chunk in out.data_mut().chunks_mut(bl) {
            for (o, &bv) in chunk.iter_mut().zip(bd) {
                *o += bv;
            }
        }
        let tracked = self.tracked_any(&[a, b]);
        self.push("add", out, Op::Add { a, b }, tracked)
    }

    /// Elementwise multiply; shapes must match exactly.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op: "mul", lhs: sa, rhs: sb });
        }
        let mut out = self.value(a).clone();
        let bd = self.value(b).data();
        for (o, &bv) in out.data_mut().iter_mut().zip(bd) {
            *o *= bv;
        }
        let tracked = self.tracked_any(&[a, b]);
        self.push("mul", out, Op::Mul { a, b }, tracked)
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> Result<ValueId> {
        let cv = T::from_f64(c);
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o *= cv;
        }
        let tracked = self.nodes[a.0].tracked;
        self.push("scale", out, Op::Scale { a, c }, tracked)
    }

    /// 2-D matrix product (m,k)·(k,n).
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, out.data_mut());
        let tracked = self.tracked_any(&[a, b]);
        self.push("matmul", out, Op::MatMul { a, b }, tracked)
    }

    /// Batched matmul (..,m,k)·(..,k,n); a 2-D rhs is shared across the
    /// lhs batch.
    pub fn bmm(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch =
            || TensorError::ShapeMismatch { op: "bmm", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let lead_a = &sa[..sa.len() - 2];
        let rhs_batched = sb.len() > 2;
        if rhs_batched && &sb[..sb.len() - 2] != lead_a {
            return Err(mismatch());
        }
        let batch: usize = lead_a.iter().product();
        let mut out_shape = lead_a.to_vec();
        out_shape.extend_from_slice(&[m, n]);
        let mut out = Tensor::zeros(&out_shape);
        kernels::bmm(self.value(a).data(), self.value(b).data(), m, k, n, rhs_batched, out.data_mut());
        let _ = batch;
        let tracked = self.tracked_any(&[a, b]);
        self.push("bmm", out, Op::Bmm { a, b, rhs_batched }, tracked)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: ValueId) -> Result<ValueId> {
        let sa = self.shape(a).to_vec();
        let w = *sa.last().ok_or_else(|| TensorError::Invalid {
            op: "softmax",
            msg: "scalar input".into(),
        })?;
        let mut out = Tensor::zeros(&sa);
        kernels::softmax_rows(self.value(a).data(), w, out.data_mut());
        let tracked = self.nodes[a.0].tracked;
        self.push("softmax", out, Op::Softmax { a }, tracked)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, a: ValueId, gain: ValueId, bias: ValueId, eps: f64) -> Result<ValueId> {
        let sa = self.shape(a).to_vec();
        let w = *sa.last().ok_or_else(|| TensorError::Invalid {
            op: "layer_norm",
            msg: "scalar input".into(),
        })?;
        for (name, id) in [("gain", gain), ("bias", bias)] {
            if self.shape(id) != [w] {
                return Err(TensorError::Invalid {
                    op: "layer_norm",
                    msg: format!("{name} shape {:?} does not match width {w}", self.shape(id)),
                });
            }
        }
        let mut out = Tensor::zeros(&sa);
        kernels::layer_norm_rows(
            self.value(a).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            w,
            T::from_f64(eps),
            out.data_mut(),
        );
        let tracked = self.tracked_any(&[a, gain, bias]);
        self.push("layer_norm", out, Op::LayerNorm { a, gain, bias, eps }, tracked)
    }

    pub fn gelu(&mut self, a: ValueId) -> Result<ValueId> {
        let mut out = Tensor::zeros(self.shape(a));
        kernels::gelu(self.value(a).data(), out.data_mut());
        let tracked = self.nodes[a.0].tracked;
        self.push("gelu", out, Op::Gelu { a }, tracked)
    }

    pub fn relu(&mut self, a: ValueId) -> Result<ValueId> {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            if *o < T::zero() {
                *o = T::zero();
            }
        }
        let tracked = self.nodes[a.0].tracked;
        self.push("relu", out, Op::Relu { a }, tracked)
    }

    /// 2-D convolution: input (b, cin, h, w), kernel (cout, cin, kh, kw).
    pub fn conv2d(&mut self, input: ValueId, kernel: ValueId, stride: usize, padding: Padding) -> Result<ValueId> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: si, rhs: sk });
        }
        if stride == 0 {
            return Err(TensorError::Invalid { op: "conv2d", msg: "stride must be positive".into() });
        }
        let (bsz, cin, h, w) = (si[0], si[1], si[2], si[3]);
        let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
        let (ho, wo, pad_t, pad_l) = match padding {
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: si, rhs: sk });
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let ho = h.div_ceil(stride);
                let wo = w.div_ceil(stride);
                let pad_h = ((ho - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((wo - 1) * stride + kw).saturating_sub(w);
                (ho, wo, pad_h / 2, pad_w / 2)
            }
        };
        let mut out = Tensor::zeros(&[bsz, cout, ho, wo]);
        kernels::conv2d(
            self.value(input).data(),
            self.value(kernel).data(),
            bsz,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad_t,
            pad_l,
            ho,
            wo,
            out.data_mut(),
        );
        let tracked = self.tracked_any(&[input, kernel]);
        self.push("conv2d", out, Op::Conv2d { input, kernel, stride, pad_t, pad_l }, tracked)
    }

    /// Valid-padding max pool over the trailing two axes of (b, c, h, w).
    pub fn max_pool2d(&mut self, a: ValueId, k: usize, stride: usize) -> Result<ValueId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 4 || sa[2] < k || sa[3] < k || k == 0 || stride == 0 {
            return Err(TensorError::Invalid {
                op: "max_pool2d",
                msg: format!("input {sa:?} incompatible with pool k={k} stride={stride}"),
            });
        }
        let (h, w) = (sa[2], sa[3]);
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let planes = sa[0] * sa[1];
        let mut out = Tensor::zeros(&[sa[0], sa[1], ho, wo]);
        let mut argmax = vec![0usize; planes * ho * wo];
        kernels::max_pool2d(self.value(a).data(), h, w, k, stride, out.data_mut(), &mut argmax);
        let tracked = self.nodes[a.0].tracked;
        self.push("max_pool2d", out, Op::MaxPool2d { a, argmax }, tracked)
    }

    /// Embedding lookup: `ids` index rows of `table` (v, d); output is
    /// (ids.len(), d). Repeated ids accumulate gradient on the same row.
    pub fn embedding(&mut self, table: ValueId, ids: &[usize]) -> Result<ValueId> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: format!("table must be 2-D, got {st:?}"),
            });
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: format!("id {bad} out of range for table with {v} rows"),
            });
        }
        let mut out = Tensor::zeros(&[ids.len(), d]);
        let td = self.value(table).data();
        for (r, &id) in ids.iter().enumerate() {
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
        }
        let tracked = self.nodes[table.0].tracked;
        self.push("embedding", out, Op::Embedding { table, ids: ids.to_vec() }, tracked)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[ValueId], axis: usize) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(TensorError::Invalid { op: "concat", msg: "no inputs".into() });
        }
        let s0 = self.shape(parts[0]).to_vec();
        if axis >= s0.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {}", s0.len()),
            });
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != s0.len()
                || sp.iter().enumerate().any(|(d, &e)| d != axis && e != s0[d])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: s0.clone(),
                    rhs: sp.to_vec(),
                });
            }
            axis_total += sp[axis];
        }
        let mut out_shape = s0.clone();
        out_shape[axis] = axis_total;
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut out = Tensor::zeros(&out_shape);
        let row = axis_total * inner;
        for o in 0..outer {
            let mut off = 0usize;
            for &p in parts {
                let pa = self.shape(p)[axis];
                let block = pa * inner;
                let src = &self.value(p).data()[o * block..(o + 1) * block];
                out.data_mut()[o * row + off..o * row + off + block].copy_from_slice(src);
                off += block;
            }
        }
        let tracked = self.tracked_any(parts);
        self.push("concat", out, Op::Concat { parts: parts.to_vec(), axis }, tracked)
    }

    pub fn reshape(&mut self, a: ValueId, shape: &[usize]) -> Result<ValueId> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        let tracked = self.nodes[a.0].tracked;
        self.push("reshape", out, Op::Reshape { a }, tracked)
    }

    /// Axis permutation: output axis `i` draws from input axis `perm[i]`.
    pub fn permute(&mut self, a: ValueId, perm: &[usize]) -> Result<ValueId> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len() || perm.iter().any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {}", sa.len()),
            });
        }
        let out = permute_tensor(self.value(a), perm);
        let tracked = self.nodes[a.0].tracked;
        self.push("permute", out, Op::Permute { a, perm: perm.to_vec() }, tracked)
    }

    /// Rectangular slice: `starts[d]..starts[d]+lens[d]` per axis.
    pub fn slice(&mut self, a: ValueId, starts: &[usize], lens: &[usize]) -> Result<ValueId> {
        let sa = self.shape(a).to_vec();
        if starts.len() != sa.len()
            || lens.len() != sa.len()
            || sa.iter()
                .zip(starts.iter().zip(lens))
                .any(|(&e, (&s, &l))| l == 0 || s + l > e)
        {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("starts {starts:?} lens {lens:?} out of bounds for {sa:?}"),
            });
        }
        let mut out = Tensor::zeros(lens);
        copy_region(self.value(a).data(), &sa, starts, lens, out.data_mut(), false);
        let tracked = self.nodes[a.0].tracked;
        self.push(
            "slice",
            out,
            Op::Slice { a, starts: starts.to_vec(), lens: lens.to_vec() },
            tracked,
        )
    }

    /// Where `mask` is nonzero the output takes `fill`; elsewhere it takes
    /// `a`. The mask broadcasts over leading axes like `add` and never
    /// receives gradient.
    pub fn masked_fill(&mut self, a: ValueId, mask: ValueId, fill: f64) -> Result<ValueId> {
        let (sa, sm) = (self.shape(a).to_vec(), self.shape(mask).to_vec());
        if !is_suffix(&sm, &sa) {
            return Err(TensorError::ShapeMismatch { op: "masked_fill", lhs: sa, rhs: sm });
        }
        let ml = self.value(mask).numel().max(1);
        let fv = T::from_f64(fill);
        let mut out = self.value(a).clone();
        let md = self.value(mask).data();
        for chunk in out.data_mut().chunks_mut(ml) {
            for (o, &mv) in chunk.iter_mut().zip(md) {
                if mv != T::zero() {
                    *o = fv;
                }
            }
        }
        let tracked = self.nodes[a.0].tracked;
        self.push("masked_fill", out, Op::MaskedFill { a, mask }, tracked)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, a: ValueId) -> Result<ValueId> {
        let mut s = T::zero();
        for &v in self.value(a).data() {
            s += v;
        }
        let tracked = self.nodes[a.0].tracked;
        self.push("sum_all", Tensor::scalar(s), Op::SumAll { a }, tracked)
    }

    /// Mean token-level cross-entropy of `logits` (rows, vocab) against
    /// `targets`, restricted to positions where `mask` is true.
    pub fn masked_cross_entropy(
        &mut self,
        logits: ValueId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<ValueId> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || targets.len() != sl[0] || mask.len() != sl[0] {
            return Err(TensorError::Invalid {
                op: "masked_cross_entropy",
                msg: format!(
                    "logits {sl:?} with {} targets / {} mask entries",
                    targets.len(),
                    mask.len()
                ),
            });
        }
        let vocab = sl[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(TensorError::Invalid {
                op: "masked_cross_entropy",
                msg: format!("target {bad} out of vocab {vocab}"),
            });
        }
        if !mask.iter().any(|&b| b) {
            return Err(TensorError::Invalid {
                op: "masked_cross_entropy",
                msg: "mask selects no positions".into(),
            });
        }
        let mut losses = vec![T::zero(); sl[0]];
        let (loss, m_count) =
            kernels::masked_cross_entropy(self.value(logits).data(), targets, mask, vocab, &mut losses);
        let tracked = self.nodes[logits.0].tracked;
        self.push(
            "masked_cross_entropy",
            Tensor::scalar(loss),
            Op::MaskedCrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), m_count },
            tracked,
        )
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients of all tracked nodes are
    /// then available through [`Tape::grad`].
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].tracked {
            return Ok(()); // loss touches no tracked value; all grads zero
        }
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].tracked {
                continue;
            }
            let Some(g) = self.grads[id].clone() else { continue };
            self.backprop(id, &g);
        }
        Ok(())
    }

    fn acc(&mut self, id: ValueId, contribution: Tensor<T>) {
        if !self.nodes[id.0].tracked {
            return;
        }
        match &mut self.grads[id.0] {
            Some(existing) => {
                for (o, &c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                    *o += c;
                }
            }
            slot => *slot = Some(contribution),
        }
    }

    fn backprop(&mut self, id: usize, g: &Tensor<T>) {
        // Ops are matched by moving the cheap metadata out; values are read
        // through immutable borrows scoped before each `acc`.
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::Add { a, b } => {
                self.acc(a, g.clone());
                if self.nodes[b.0].tracked {
                    let bl = self.value(b).numel().max(1);
                    let mut db = Tensor::zeros(self.shape(b));
                    for chunk in g.data().chunks(bl) {
                        for (o, &gv) in db.data_mut().iter_mut().zip(chunk) {
                            *o += gv;
                        }
                    }
                    self.acc(b, db);
                }
            }
            &Op::Mul { a, b } => {
                if self.nodes[a.0].tracked {
                    let mut da = g.clone();
                    for (o, &bv) in da.data_mut().iter_mut().zip(self.value(b).data()) {
                        *o *= bv;
                    }
                    self.acc(a, da);
                }
                if self.nodes[b.0].tracked {
                    let mut db = g.clone();
                    for (o, &av) in db.data_mut().iter_mut().zip(self.value(a).data()) {
                        *o *= av;
                    }
                    self.acc(b, db);
                }
            }
            &Op::Scale { a, c } => {
                let cv = T::from_f64(c);
                let mut da = g.clone();
                for o in da.data_mut() {
                    *o *= cv;
                }
                self.acc(a, da);
            }
            &Op::MatMul { a, b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.nodes[a.0].tracked {
                    let mut da = Tensor::zeros(&[m, k]);
                    kernels::bmm_grad_lhs(g.data(), self.value(b).data(), m, k, n, true, da.data_mut());
                    self.acc(a, da);
                }
                if self.nodes[b.0].tracked {
                    let mut db = Tensor::zeros(&[k, n]);
                    kernels::bmm_grad_rhs(g.data(), self.value(a).data(), 1, m, k, n, true, db.data_mut());
                    self.acc(b, db);
                }
            }
            &Op::Bmm { a, b, rhs_batched } => {
                let sa = self.shape(a).to_vec();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = *self.shape(b).last().unwrap();
                let batch: usize = sa[..sa.len() - 2].iter().product();
                if self.nodes[a.0].tracked {
                    let mut da = Tensor::zeros(&sa);
                    kernels::bmm_grad_lhs(g.data(), self.value(b).data(), m, k, n, rhs_batched, da.data_mut());
                    self.acc(a, da);
                }
                if self.nodes[b.0].tracked {
                    let mut db = Tensor::zeros(self.shape(b));
                    kernels::bmm_grad_rhs(
                        g.data(),
                        self.value(a).data(),
                        batch,
                        m,
                        k,
                        n,
                        rhs_batched,
                        db.data_mut(),
                    );
                    self.acc(b, db);
                }
            }
            &Op::Softmax { a } => {
                let w = *self.shape(a).last().unwrap();
                let mut da = Tensor::zeros(self.shape(a));
                kernels::softmax_backward(self.nodes[id].value.data(), g.data(), w, da.data_mut());
                self.acc(a, da);
            }
            &Op::LayerNorm { a, gain, bias, eps } => {
                let w = *self.shape(a).last().unwrap();
                let epsv = T::from_f64(eps);
                if self.nodes[a.0].tracked {
                    let mut da = Tensor::zeros(self.shape(a));
                    kernels::layer_norm_backward_input(
                        self.value(a).data(),
                        self.value(gain).data(),
                        g.data(),
                        w,
                        epsv,
                        da.data_mut(),
                    );
                    self.acc(a, da);
                }
                if self.nodes[gain.0].tracked || self.nodes[bias.0].tracked {
                    let mut dgain = Tensor::zeros(&[w]);
                    let mut dbias = Tensor::zeros(&[w]);
                    kernels::layer_norm_backward_affine(
                        self.value(a).data(),
                        g.data(),
                        w,
                        epsv,
                        dgain.data_mut(),
                        dbias.data_mut(),
                    );
                    self.acc(gain, dgain);
                    self.acc(bias, dbias);
                }
            }
            &Op::Gelu { a } => {
                let mut da = Tensor::zeros(self.shape(a));
                kernels::gelu_backward(self.value(a).data(), g.data(), da.data_mut());
                self.acc(a, da);
            }
            &Op::Relu { a } => {
                let mut da = g.clone();
                for (o, &xv) in da.data_mut().iter_mut().zip(self.value(a).data()) {
                    if xv <= T::zero() {
                        *o = T::zero();
                    }
                }
                self.acc(a, da);
            }
            &Op::Conv2d { input, kernel, stride, pad_t, pad_l } => {
                let si = self.shape(input).to_vec();
                let sk = self.shape(kernel).to_vec();
                let so = self.nodes[id].value.shape().to_vec();
                let (bsz, cin, h, w) = (si[0], si[1], si[2], si[3]);
                let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
                let (ho, wo) = (so[2], so[3]);
                if self.nodes[input.0].tracked {
                    let mut di = Tensor::zeros(&si);
                    kernels::conv2d_grad_input(
                        g.data(),
                        self.value(kernel).data(),
                        bsz,
                        cin,
                        h,
                        w,
                        cout,
                        kh,
                        kw,
                        stride,
                        pad_t,
                        pad_l,
                        ho,
                        wo,
                        di.data_mut(),
                    );
                    self.acc(input, di);
                }
                if self.nodes[kernel.0].tracked {
                    let mut dk = Tensor::zeros(&sk);
                    kernels::conv2d_grad_kernel(
                        g.data(),
                        self.value(input).data(),
                        bsz,
                        cin,
                        h,
                        w,
                        cout,
                        kh,
                        kw,
                        stride,
                        pad_t,
                        pad_l,
                        ho,
                        wo,
                        dk.data_mut(),
                    );
                    self.acc(kernel, dk);
                }
            }
            Op::MaxPool2d { a, argmax } => {
                let (a, argmax) = (*a, argmax.clone());
                let sa = self.shape(a).to_vec();
                let so = self.nodes[id].value.shape().to_vec();
                let mut da = Tensor::zeros(&sa);
                kernels::max_pool2d_backward(
                    g.data(),
                    &argmax,
                    sa[2],
                    sa[3],
                    so[2] * so[3],
                    da.data_mut(),
                );
                self.acc(a, da);
            }
            Op::Embedding { table, ids } => {
                let (table, ids) = (*table, ids.clone());
                let d = self.shape(table)[1];
                let mut dt = Tensor::zeros(self.shape(table));
                for (r, &tok) in ids.iter().enumerate() {
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let trow = &mut dt.data_mut()[tok * d..(tok + 1) * d];
                    for (o, &gv) in trow.iter_mut().zip(grow) {
                        *o += gv;
                    }
                }
                self.acc(table, dt);
            }
            Op::Concat { parts, axis } => {
                let (parts, axis) = (parts.clone(), *axis);
                let so = self.nodes[id].value.shape().to_vec();
                let inner: usize = so[axis + 1..].iter().product();
                let outer: usize = so[..axis].iter().product();
                let row = so[axis] * inner;
                let mut off = 0usize;
                for p in parts {
                    let pa = self.shape(p)[axis];
                    let block = pa * inner;
                    if self.nodes[p.0].tracked {
                        let mut dp = Tensor::zeros(self.shape(p));
                        for o in 0..outer {
                            dp.data_mut()[o * block..(o + 1) * block]
                                .copy_from_slice(&g.data()[o * row + off..o * row + off + block]);
                        }
                        self.acc(p, dp);
                    }
                    off += block;
                }
            }
            &Op::Reshape { a } => {
                let da = g.clone().reshaped(self.shape(a).to_vec()).expect("reshape grad volume");
                self.acc(a, da);
            }
            Op::Permute { a, perm } => {
                let (a, perm) = (*a, perm.clone());
                let mut inverse = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let da = permute_tensor(g, &inverse);
                self.acc(a, da);
            }
            Op::Slice { a, starts, lens } => {
                let (a, starts, lens) = (*a, starts.clone(), lens.clone());
                let sa = self.shape(a).to_vec();
                let mut da = Tensor::zeros(&sa);
                copy_region(g.data(), &sa, &starts, &lens, da.data_mut(), true);
                self.acc(a, da);
            }
            &Op::MaskedFill { a, mask } => {
                let ml = self.value(mask).numel().max(1);
                let mut da = g.clone();
                let md = self.value(mask).data();
                for chunk in da.data_mut().chunks_mut(ml) {
                    for (o, &mv) in chunk.iter_mut().zip(md) {
                        if mv != T::zero() {
                            *o = T::zero();
                        }
                    }
                }
                self.acc(a, da);
            }
            &Op::SumAll { a } => {
                let gv = g.item();
                self.acc(a, Tensor::full(self.shape(a), gv));
            }
            Op::MaskedCrossEntropy { logits, targets, mask, m_count } => {
                let (logits, targets, mask, m_count) = (*logits, targets.clone(), mask.clone(), *m_count);
                let vocab = self.shape(logits)[1];
                let mut dl = Tensor::zeros(self.shape(logits));
                kernels::masked_cross_entropy_backward(
                    self.value(logits).data(),
                    &targets,
                    &mask,
                    vocab,
                    m_count,
                    g.item(),
                    dl.data_mut(),
                );
                self.acc(logits, dl);
            }
        }
    }
}

/// True when `suffix` equals the trailing axes of `shape` (or all of it).
fn is_suffix(suffix: &[usize], shape: &[usize]) -> bool {
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
}

fn permute_tensor<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let sin = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| sin[p]).collect();
    let in_strides = strides_of(sin);
    // Input stride seen when walking each *output* axis.
    let stride_for_out: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Tensor::zeros(&out_shape);
    let nd = out_shape.len();
    if nd == 0 {
        out.data_mut()[0] = x.data()[0];
        return out;
    }
    let inner = out_shape[nd - 1].max(1);
    let inner_stride = stride_for_out[nd - 1];
    let lead_shape = &out_shape[..nd - 1];
    let lead_strides = &stride_for_out[..nd - 1];
    let xd = x.data();
    crate::par::for_each_chunk_mut(out.data_mut(), inner, 2, |row, chunk| {
        // Decompose the row index over the leading output axes.
        let mut rem = row;
        let mut src = 0usize;
        for d in (0..lead_shape.len()).rev() {
            src += (rem % lead_shape[d]) * lead_strides[d];
            rem /= lead_shape[d];
        }
        if inner_stride == 1 {
            chunk.copy_from_slice(&xd[src..src + chunk.len()]);
        } else {
            for (j, o) in chunk.iter_mut().enumerate() {
                *o = xd[src + j * inner_stride];
            }
        }
    });
    out
}

/// Copies the rectangular region between a full tensor and its slice.
/// `scatter=false` gathers tensor→slice; `scatter=true` adds slice→tensor.
fn copy_region<T: Scalar>(
    src: &[T],
    full_shape: &[usize],
    starts: &[usize],
    lens: &[usize],
    dst: &mut [T],
    scatter: bool,
) {
    let full_strides = strides_of(full_shape);
    let volume: usize = lens.iter().product();
    for flat in 0..volume {
        let coords = unravel(flat, lens);
        let mut full_idx = 0usize;
        for (d, &c) in coords.iter().enumerate() {
            full_idx += (starts[d] + c) * full_strides[d];
        }
        if scatter {
            dst[full_idx] += src[flat];
        } else {
            dst[flat] = src[full_idx];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[4], &[3.0, 3.0, 3.0, 3.0]));
        let gain = tape.constant(Tensor::full(&[4], 1.0));
        let bias = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-9, "expected zeros, got {v}");
        }
    }

    #[test]
    fn conv2d_of_ones_counts_window() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = tape.conv2d(x, k, 2, Padding::Valid).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::<f64>::new();
        let w = tape.parameter(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_parameter_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let w = tape.parameter(t(&[2], &[1.0, 2.0]));
        let u = tape.parameter(t(&[2], &[5.0, 6.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(u).data(), &[0.0, 0.0]);
    }

    #[test]
    fn loss_from_constants_only_leaves_all_grads_zero() {
        let mut tape = Tape::<f64>::new();
        let w = tape.parameter(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let loss = tape.sum_all(c).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shared_subexpression_accumulates_like_duplicated_subgraph() {
        // loss = sum(h) + sum(h) with h shared…
        let mut shared = Tape::<f64>::new();
        let w = shared.parameter(t(&[3], &[0.5, -1.0, 2.0]));
        let h = shared.mul(w, w).unwrap();
        let s1 = shared.sum_all(h).unwrap();
        let s2 = shared.sum_all(h).unwrap();
        let both = shared.add(s1, s2).unwrap();
        shared.backward(both).unwrap();
        // …must equal the version where h is rebuilt twice.
        let mut dup = Tape::<f64>::new();
        let w2 = dup.parameter(t(&[3], &[0.5, -1.0, 2.0]));
        let h1 = dup.mul(w2, w2).unwrap();
        let h2 = dup.mul(w2, w2).unwrap();
        let s1 = dup.sum_all(h1).unwrap();
        let s2 = dup.sum_all(h2).unwrap();
        let both = dup.add(s1, s2).unwrap();
        dup.backward(both).unwrap();
        assert_eq!(shared.grad(w).data(), dup.grad(w2).data());
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let w = tape.parameter(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1], &[1e308]));
        let b = tape.constant(t(&[1], &[1e308]));
        let err = tape.add(a, b).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { op: "add" }));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[1.0, -2.0, 0.3, 100.0, 100.0, -50.0]));
        let y = tape.softmax(x).unwrap();
        for r in 0..2 {
            let s: f64 = tape.value(y).data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn permute_roundtrip_restores_layout() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let xt = tape.permute(x, &[1, 0]).unwrap();
        assert_eq!(tape.shape(xt), &[3, 2]);
        assert_eq!(tape.value(xt).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = tape.permute(xt, &[1, 0]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
    }

    #[test]
    fn masked_cross_entropy_rejects_empty_mask() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[2, 4]));
        let err = tape.masked_cross_entropy(logits, &[0, 1], &[false, false]).unwrap_err();
        assert!(err.to_string().contains("no positions"));
    }

    #[test]
    fn uniform_logits_loss_is_ln_vocab() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[3, 7]));
        let loss = tape.masked_cross_entropy(logits, &[1, 2, 3], &[true, true, true]).unwrap();
        assert!((tape.value(loss).item() - (7.0f64).ln()).abs() < 1e-12);
    }
}
