//! Wengert tape. Forward ops append nodes in topological order; `backward`
//! walks the record in reverse and accumulates gradients into every node that
//! requires them. Ops can only reference ids already on the tape, so the
//! topological invariant holds by construction.

use super::kernels;
use super::{lit, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Scale { a: ValueId, factor: T },
    AddRow { x: ValueId, bias: ValueId },
    MatMul { a: ValueId, b: ValueId },
    MatMulNT { a: ValueId, b: ValueId },
    Gelu { a: ValueId },
    Softmax { a: ValueId, axis: usize },
    LayerNorm { x: ValueId, gamma: ValueId, beta: ValueId, eps: T },
    Conv2d { x: ValueId, w: ValueId, stride: (usize, usize), pad: (usize, usize) },
    GatherPatches { x: ValueId, ph: usize, pw: usize },
    SliceRows { x: ValueId, start: usize, len: usize },
    SliceCols { x: ValueId, start: usize, len: usize },
    ConcatRows { parts: Vec<ValueId> },
    ConcatCols { parts: Vec<ValueId> },
    Reshape { x: ValueId },
    SumAll { x: ValueId },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records one forward computation; dropped and rebuilt every step.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. `trainable` leaves receive gradients.
    pub fn leaf(&mut self, mut tensor: Tensor<T>, trainable: bool) -> ValueId {
        tensor.requires_grad = trainable;
        tensor.grad = None;
        self.push(tensor, Op::Leaf, trainable)
    }

    pub fn tensor(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn value(&self, id: ValueId) -> &[T] {
        self.nodes[id.0].value.data()
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient buffer of a node, populated by [`Tape::backward`].
    pub fn grad(&self, id: ValueId) -> Option<&[T]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> ValueId {
        self.nodes.push(Node { value, op, requires_grad });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn check_same_shape(&self, what: &str, a: ValueId, b: ValueId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn check_rank2(&self, what: &str, a: ValueId) -> Result<(usize, usize)> {
        match self.shape(a) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::shape(format!("{what}: expected rank-2 tensor, got {s:?}"))),
        }
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_same_shape("add", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add { a, b }, self.needs(&[a, b])))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_same_shape("sub", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Sub { a, b }, self.needs(&[a, b])))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_same_shape("mul", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul { a, b }, self.needs(&[a, b])))
    }

    pub fn scale(&mut self, a: ValueId, factor: T) -> Result<ValueId> {
        let data = self.value(a).iter().map(|&x| x * factor).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Scale { a, factor }, self.needs(&[a])))
    }

    /// x[m,n] + bias[n], broadcast over rows.
    pub fn add_row(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (m, n) = self.check_rank2("add_row", x)?;
        if self.shape(bias) != [n] {
            return Err(Error::shape(format!(
                "add_row: rows of {:?} vs bias {:?}",
                self.shape(x),
                self.shape(bias)
            )));
        }
        let xv = self.value(x);
        let bv = self.value(bias);
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                data.push(xv[r * n + c] + bv[c]);
            }
        }
        let t = Tensor::from_vec(vec![m, n], data)?;
        Ok(self.push(t, Op::AddRow { x, bias }, self.needs(&[x, bias])))
    }

    pub fn gelu(&mut self, a: ValueId) -> Result<ValueId> {
        let data = self.value(a).iter().map(|&x| gelu_fwd(x)).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Gelu { a }, self.needs(&[a])))
    }

    // ── matrix products ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, ka) = self.check_rank2("matmul lhs", a)?;
        let (kb, n) = self.check_rank2("matmul rhs", b)?;
        if ka != kb {
            return Err(Error::shape(format!(
                "matmul: inner dimensions of {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = kernels::mm(self.value(a), self.value(b), m, ka, n);
        let t = Tensor::from_vec(vec![m, n], data)?;
        Ok(self.push(t, Op::MatMul { a, b }, self.needs(&[a, b])))
    }

    /// a[m,k] * b[n,k]^T. Used for attention scores without materializing a
    /// transpose.
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, ka) = self.check_rank2("matmul_nt lhs", a)?;
        let (n, kb) = self.check_rank2("matmul_nt rhs", b)?;
        if ka != kb {
            return Err(Error::shape(format!(
                "matmul_nt: inner dimensions of {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = kernels::mm_nt(self.value(a), self.value(b), m, ka, n);
        let t = Tensor::from_vec(vec![m, n], data)?;
        Ok(self.push(t, Op::MatMulNT { a, b }, self.needs(&[a, b])))
    }

    // ── normalization ───────────────────────────────────────────────────

    /// Numerically stable softmax along `axis`: the slice maximum is
    /// subtracted before exponentiation, so the result is shift-invariant.
    pub fn softmax(&mut self, a: ValueId, axis: usize) -> Result<ValueId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "softmax: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let xv = self.value(a);
        let mut data = xv.to_vec();
        let axis_len = shape[axis];
        for (start, stride) in kernels::axis_slices(&shape, axis) {
            let mut max = data[start];
            for j in 1..axis_len {
                let v = data[start + j * stride];
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for j in 0..axis_len {
                let idx = start + j * stride;
                let e = (data[idx] - max).exp();
                data[idx] = e;
                sum = sum + e;
            }
            for j in 0..axis_len {
                data[start + j * stride] = data[start + j * stride] / sum;
            }
        }
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.push(t, Op::Softmax { a, axis }, self.needs(&[a])))
    }

    /// Layer normalization over the last axis with learnable gain and shift.
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: T,
    ) -> Result<ValueId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm: rank-0 input"))?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(id) != [d] {
                return Err(Error::shape(format!(
                    "layer_norm: {name} {:?} vs normalized extent [{d}]",
                    self.shape(id)
                )));
            }
        }
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let rows = xv.len() / d;
        let mut data = Vec::with_capacity(xv.len());
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let (mean, var) = mean_var(row);
            let inv = (var + eps).sqrt().recip();
            for c in 0..d {
                data.push((row[c] - mean) * inv * gv[c] + bv[c]);
            }
        }
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, eps }, self.needs(&[x, gamma, beta])))
    }

    // ── convolution and layout ──────────────────────────────────────────

    /// x[h,w,cin] convolved with w[kh,kw,cin,cout], zero padding.
    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<ValueId> {
        let (h, wid, cin) = match self.shape(x) {
            [h, w, c] => (*h, *w, *c),
            s => return Err(Error::shape(format!("conv2d: input must be [h,w,c], got {s:?}"))),
        };
        let (kh, kw, wcin, cout) = match self.shape(w) {
            [kh, kw, ci, co] => (*kh, *kw, *ci, *co),
            s => {
                return Err(Error::shape(format!(
                    "conv2d: weight must be [kh,kw,cin,cout], got {s:?}"
                )))
            }
        };
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d: input channels {cin} vs weight channels {wcin}"
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::config("conv2d: zero stride".to_string()));
        }
        if kh > h + 2 * pad.0 || kw > wid + 2 * pad.1 {
            return Err(Error::shape(format!(
                "conv2d: kernel [{kh},{kw}] does not fit padded input [{},{}]",
                h + 2 * pad.0,
                wid + 2 * pad.1
            )));
        }
        let oh = kernels::conv_out_extent(h, kh, stride.0, pad.0);
        let ow = kernels::conv_out_extent(wid, kw, stride.1, pad.1);
        let data =
            kernels::conv2d(self.value(x), self.value(w), h, wid, cin, kh, kw, cout, stride, pad);
        let t = Tensor::from_vec(vec![oh, ow, cout], data)?;
        Ok(self.push(t, Op::Conv2d { x, w, stride, pad }, self.needs(&[x, w])))
    }

    /// x[h,w,c] -> [n, ph*pw*c]: non-overlapping patches enumerated row-major
    /// over the patch grid, elements row-major within each patch.
    pub fn gather_patches(&mut self, x: ValueId, ph: usize, pw: usize) -> Result<ValueId> {
        let (h, w, c) = match self.shape(x) {
            [h, w, c] => (*h, *w, *c),
            s => {
                return Err(Error::shape(format!(
                    "gather_patches: input must be [h,w,c], got {s:?}"
                )))
            }
        };
        if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
            return Err(Error::config(format!(
                "gather_patches: patch [{ph},{pw}] does not tile feature [{h},{w}]"
            )));
        }
        let (gh, gw) = (h / ph, w / pw);
        let xv = self.value(x);
        let mut data = Vec::with_capacity(h * w * c);
        for gr in 0..gh {
            for gc in 0..gw {
                for pr in 0..ph {
                    for pc in 0..pw {
                        let base = ((gr * ph + pr) * w + gc * pw + pc) * c;
                        data.extend_from_slice(&xv[base..base + c]);
                    }
                }
            }
        }
        let t = Tensor::from_vec(vec![gh * gw, ph * pw * c], data)?;
        Ok(self.push(t, Op::GatherPatches { x, ph, pw }, self.needs(&[x])))
    }

    pub fn slice_rows(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let (m, n) = self.check_rank2("slice_rows", x)?;
        if start + len > m {
            return Err(Error::shape(format!(
                "slice_rows: rows {start}..{} out of range for {:?}",
                start + len,
                self.shape(x)
            )));
        }
        let data = self.value(x)[start * n..(start + len) * n].to_vec();
        let t = Tensor::from_vec(vec![len, n], data)?;
        Ok(self.push(t, Op::SliceRows { x, start, len }, self.needs(&[x])))
    }

    pub fn slice_cols(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let (m, n) = self.check_rank2("slice_cols", x)?;
        if start + len > n {
            return Err(Error::shape(format!(
                "slice_cols: cols {start}..{} out of range for {:?}",
                start + len,
                self.shape(x)
            )));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&xv[r * n + start..r * n + start + len]);
        }
        let t = Tensor::from_vec(vec![m, len], data)?;
        Ok(self.push(t, Op::SliceCols { x, start, len }, self.needs(&[x])))
    }

    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows: no parts".to_string()));
        }
        let (_, n) = self.check_rank2("concat_rows", parts[0])?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.check_rank2("concat_rows", p)?;
            if pn != n {
                return Err(Error::shape(format!(
                    "concat_rows: column mismatch {:?} vs {:?}",
                    self.shape(parts[0]),
                    self.shape(p)
                )));
            }
            rows += pm;
            data.extend_from_slice(self.value(p));
        }
        let t = Tensor::from_vec(vec![rows, n], data)?;
        let needs = self.needs(parts);
        Ok(self.push(t, Op::ConcatRows { parts: parts.to_vec() }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols: no parts".to_string()));
        }
        let (m, _) = self.check_rank2("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.check_rank2("concat_cols", p)?;
            if pm != m {
                return Err(Error::shape(format!(
                    "concat_cols: row mismatch {:?} vs {:?}",
                    self.shape(parts[0]),
                    self.shape(p)
                )));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &pn) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p)[r * pn..(r + 1) * pn]);
            }
        }
        let t = Tensor::from_vec(vec![m, total], data)?;
        let needs = self.needs(parts);
        Ok(self.push(t, Op::ConcatCols { parts: parts.to_vec() }, needs))
    }

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(Error::shape(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape(x),
                shape
            )));
        }
        let t = Tensor::from_vec(shape, self.value(x).to_vec())?;
        Ok(self.push(t, Op::Reshape { x }, self.needs(&[x])))
    }

    pub fn sum_all(&mut self, x: ValueId) -> Result<ValueId> {
        let total: T = self.value(x).iter().copied().sum();
        Ok(self.push(Tensor::scalar(total), Op::SumAll { x }, self.needs(&[x])))
    }

    // ── reverse pass ────────────────────────────────────────────────────

    /// Seeds d(loss)/d(loss) = 1 and accumulates gradients in reverse
    /// recording order. `loss` must be a finite scalar.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.value(loss)[0].is_finite() {
            return Err(Error::numeric(format!(
                "backward: non-finite loss {}",
                self.value(loss)[0]
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.apply_rule(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                node.value.grad = Some(g);
            }
        }
        Ok(())
    }

    fn apply_rule(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        // Accumulates into an input's gradient buffer unless that input is
        // outside the differentiated subgraph.
        macro_rules! sink {
            ($id:expr) => {{
                let id: ValueId = $id;
                if self.nodes[id.0].requires_grad {
                    Some(
                        grads[id.0]
                            .get_or_insert_with(|| vec![T::zero(); self.nodes[id.0].value.numel()]),
                    )
                } else {
                    None
                }
            }};
        }

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if let Some(ga) = sink!(*a) {
                    kernels::acc(ga, g);
                }
                if let Some(gb) = sink!(*b) {
                    kernels::acc(gb, g);
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = sink!(*a) {
                    kernels::acc(ga, g);
                }
                if let Some(gb) = sink!(*b) {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d = *d - s;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = sink!(*a) {
                    for ((d, &gv), &bvv) in ga.iter_mut().zip(g).zip(bv) {
                        *d = *d + gv * bvv;
                    }
                }
                if let Some(gb) = sink!(*b) {
                    for ((d, &gv), &avv) in gb.iter_mut().zip(g).zip(av) {
                        *d = *d + gv * avv;
                    }
                }
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                if let Some(ga) = sink!(*a) {
                    for (d, &gv) in ga.iter_mut().zip(g) {
                        *d = *d + gv * f;
                    }
                }
            }
            Op::AddRow { x, bias } => {
                let n = self.shape(*bias)[0];
                if let Some(gx) = sink!(*x) {
                    kernels::acc(gx, g);
                }
                if let Some(gb) = sink!(*bias) {
                    for (idx, &gv) in g.iter().enumerate() {
                        gb[idx % n] = gb[idx % n] + gv;
                    }
                }
            }
            Op::MatMul { a, b } => {
                let [m, k] = *two(self.shape(*a));
                let n = self.shape(*b)[1];
                if let Some(ga) = sink!(*a) {
                    // dA = dC * B^T
                    kernels::acc(ga, &kernels::mm_nt(g, self.value(*b), m, n, k));
                }
                if let Some(gb) = sink!(*b) {
                    // dB = A^T * dC
                    kernels::acc(gb, &kernels::mm_tn(self.value(*a), g, k, m, n));
                }
            }
            Op::MatMulNT { a, b } => {
                let [m, k] = *two(self.shape(*a));
                let n = self.shape(*b)[0];
                if let Some(ga) = sink!(*a) {
                    // dA = dC * B
                    kernels::acc(ga, &kernels::mm(g, self.value(*b), m, n, k));
                }
                if let Some(gb) = sink!(*b) {
                    // dB = dC^T * A
                    kernels::acc(gb, &kernels::mm_tn(g, self.value(*a), n, m, k));
                }
            }
            Op::Gelu { a } => {
                let av = self.value(*a);
                if let Some(ga) = sink!(*a) {
                    for ((d, &gv), &x) in ga.iter_mut().zip(g).zip(av) {
                        *d = *d + gv * gelu_bwd(x);
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let shape = self.shape(ValueId(i)).to_vec();
                let y = self.value(ValueId(i));
                let axis_len = shape[*axis];
                if let Some(ga) = sink!(*a) {
                    for (start, stride) in kernels::axis_slices(&shape, *axis) {
                        let mut dot = T::zero();
                        for j in 0..axis_len {
                            let idx = start + j * stride;
                            dot = dot + g[idx] * y[idx];
                        }
                        for j in 0..axis_len {
                            let idx = start + j * stride;
                            ga[idx] = ga[idx] + y[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let d = self.shape(*gamma)[0];
                let rows = xv.len() / d;
                let inv_d = T::one() / lit::<T>(d as f64);
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let (mean, var) = mean_var(row);
                    let inv = (var + *eps).sqrt().recip();
                    // dxhat, then its mean and its xhat-weighted mean.
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for c in 0..d {
                        let dxhat = grow[c] * gv[c];
                        let xhat = (row[c] - mean) * inv;
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                    }
                    let mean_dxhat = sum_dxhat * inv_d;
                    let mean_dxhat_xhat = sum_dxhat_xhat * inv_d;
                    if let Some(gx) = sink!(*x) {
                        for c in 0..d {
                            let dxhat = grow[c] * gv[c];
                            let xhat = (row[c] - mean) * inv;
                            gx[r * d + c] =
                                gx[r * d + c] + inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    if let Some(gg) = sink!(*gamma) {
                        for c in 0..d {
                            let xhat = (row[c] - mean) * inv;
                            gg[c] = gg[c] + grow[c] * xhat;
                        }
                    }
                    if let Some(gb) = sink!(*beta) {
                        for c in 0..d {
                            gb[c] = gb[c] + grow[c];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let [h, wid, cin] = *three(self.shape(*x));
                let (kh, kw, cout) = {
                    let s = self.shape(*w);
                    (s[0], s[1], s[3])
                };
                let needs_x = self.nodes[x.0].requires_grad;
                let needs_w = self.nodes[w.0].requires_grad;
                if needs_x || needs_w {
                    let (gx, gw) = kernels::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        g,
                        h,
                        wid,
                        cin,
                        kh,
                        kw,
                        cout,
                        *stride,
                        *pad,
                    );
                    if let Some(dst) = sink!(*x) {
                        kernels::acc(dst, &gx);
                    }
                    if let Some(dst) = sink!(*w) {
                        kernels::acc(dst, &gw);
                    }
                }
            }
            Op::GatherPatches { x, ph, pw } => {
                let [_, w, c] = *three(self.shape(*x));
                let (ph, pw) = (*ph, *pw);
                let gw_cols = w / pw;
                if let Some(gx) = sink!(*x) {
                    let patch_len = ph * pw * c;
                    for (row, patch) in g.chunks_exact(patch_len).enumerate() {
                        let (gr, gc) = (row / gw_cols, row % gw_cols);
                        let mut src = 0;
                        for pr in 0..ph {
                            for pc in 0..pw {
                                let base = ((gr * ph + pr) * w + gc * pw + pc) * c;
                                for ch in 0..c {
                                    gx[base + ch] = gx[base + ch] + patch[src];
                                    src += 1;
                                }
                            }
                        }
                    }
                }
            }
            Op::SliceRows { x, start, len } => {
                let n = self.shape(*x)[1];
                if let Some(gx) = sink!(*x) {
                    kernels::acc(&mut gx[start * n..(start + len) * n], g);
                }
            }
            Op::SliceCols { x, start, len } => {
                let [m, n] = *two(self.shape(*x));
                if let Some(gx) = sink!(*x) {
                    for r in 0..m {
                        kernels::acc(
                            &mut gx[r * n + start..r * n + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let numel = self.nodes[p.0].value.numel();
                    if let Some(gp) = sink!(p) {
                        kernels::acc(gp, &g[offset..offset + numel]);
                    }
                    offset += numel;
                }
            }
            Op::ConcatCols { parts } => {
                let m = self.shape(parts[0])[0];
                let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                let mut offset = 0;
                for &p in parts {
                    let pn = self.shape(p)[1];
                    if let Some(gp) = sink!(p) {
                        for r in 0..m {
                            kernels::acc(
                                &mut gp[r * pn..(r + 1) * pn],
                                &g[r * total + offset..r * total + offset + pn],
                            );
                        }
                    }
                    offset += pn;
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = sink!(*x) {
                    kernels::acc(gx, g);
                }
            }
            Op::SumAll { x } => {
                let gv = g[0];
                if let Some(gx) = sink!(*x) {
                    for d in gx.iter_mut() {
                        *d = *d + gv;
                    }
                }
            }
        }
    }
}

fn two(shape: &[usize]) -> &[usize; 2] {
    shape.try_into().expect("rank-2 checked at record time")
}

fn three(shape: &[usize]) -> &[usize; 3] {
    shape.try_into().expect("rank-3 checked at record time")
}

fn mean_var<T: Scalar>(row: &[T]) -> (T, T) {
    let n = lit::<T>(row.len() as f64);
    let mut sum = T::zero();
    for &v in row {
        sum = sum + v;
    }
    let mean = sum / n;
    let mut var = T::zero();
    for &v in row {
        let d = v - mean;
        var = var + d * d;
    }
    (mean, var / n)
}

/// Tanh-form GELU; smooth everywhere, which keeps central finite differences
/// clean for the whole-model gradient check.
fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = lit::<T>(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = lit::<T>(0.044715);
    let half = lit::<T>(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = lit::<T>(0.797_884_560_802_865_4);
    let a = lit::<T>(0.044715);
    let half = lit::<T>(0.5);
    let three = lit::<T>(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}
