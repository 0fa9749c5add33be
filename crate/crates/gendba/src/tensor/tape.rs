//! Operation tape: forward recording plus reverse-mode backward.
//!
//! Nodes are appended in creation order, which is a valid topological order,
//! so backward is a single reverse sweep. `backward` accumulates into each
//! tensor's grad buffer; call `zero_grad` between steps if accumulation is
//! not wanted.

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Matmul(Var, Var),
    Conv2d { x: Var, k: Var, stride: usize, pad: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// [m x n] plus a [n] bias row.
    AddRowBias(Var, Var),
    /// [c x h x w] plus a [c] per-channel bias.
    AddChanBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embed { table: Var, ids: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    MaskedFill { x: Var, mask: Vec<bool> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64> },
    SumAll(Var),
    MeanAll(Var),
    ConcatRows(Vec<Var>),
    /// Elementwise product with a constant buffer (dropout masks and the like).
    MulConst(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf node.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    /// Convenience: constant (no-grad) leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    /// Gradient of a node, if backward has produced one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Move a node's tensor out of the tape.
    pub fn take(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(vec![0]))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dim(format!("expected 2-d tensor, got shape {s:?}"))),
        }
    }

    // ---- ops ------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.dims2(a)?;
        let (kb, n) = self.dims2(b)?;
        if ka != kb {
            return Err(Error::Dim(format!(
                "matmul shape mismatch: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = kernels::matmul(self.data(a), self.data(b), m, ka, n);
        let t = Tensor { shape: vec![m, n], data, requires_grad: false, grad: None };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Matmul(a, b), needs))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, w) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::Dim(format!("conv2d input must be [c,h,w], got {s:?}"))),
        };
        let (cout, kcin, kh, kw) = match self.shape(k) {
            [co, ci, kh, kw] => (*co, *ci, *kh, *kw),
            s => return Err(Error::Dim(format!("conv2d kernel must be 4-d, got {s:?}"))),
        };
        if kcin != cin {
            return Err(Error::Dim(format!(
                "conv2d channel mismatch: input {cin}, kernel {kcin}"
            )));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Dim(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        if stride == 0 {
            return Err(Error::Arg("conv2d stride must be >= 1".into()));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let data = kernels::conv2d(self.data(x), self.data(k), cin, h, w, cout, kh, kw, stride, pad);
        let t = Tensor { shape: vec![cout, oh, ow], data, requires_grad: false, grad: None };
        let needs = self.needs(x) || self.needs(k);
        Ok(self.push(t, Op::Conv2d { x, k, stride, pad }, needs))
    }

    fn elementwise2(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim(format!(
                "elementwise shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data, requires_grad: false, grad: None };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.shape(b) != [n] {
            return Err(Error::Dim(format!(
                "row bias shape {:?} does not match columns {n}",
                self.shape(b)
            )));
        }
        let bd = self.data(b).to_vec();
        let mut data = self.data(x).to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bd[j];
            }
        }
        let t = Tensor { shape: vec![m, n], data, requires_grad: false, grad: None };
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(t, Op::AddRowBias(x, b), needs))
    }

    pub fn add_chan_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (c, h, w) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::Dim(format!("chan bias input must be [c,h,w], got {s:?}"))),
        };
        if self.shape(b) != [c] {
            return Err(Error::Dim(format!(
                "chan bias shape {:?} does not match channels {c}",
                self.shape(b)
            )));
        }
        let bd = self.data(b).to_vec();
        let mut data = self.data(x).to_vec();
        for ci in 0..c {
            for p in 0..h * w {
                data[ci * h * w + p] += bd[ci];
            }
        }
        let t = Tensor { shape: vec![c, h, w], data, requires_grad: false, grad: None };
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(t, Op::AddChanBias(x, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data, requires_grad: false, grad: None };
        let needs = self.needs(x);
        self.push(t, Op::Scale(x, c), needs)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| v + c).collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data, requires_grad: false, grad: None };
        let needs = self.needs(x);
        self.push(t, Op::AddScalar(x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.tanh()).collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data, requires_grad: false, grad: None };
        let needs = self.needs(x);
        self.push(t, Op::Tanh(x), needs)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| kernels::gelu(*v)).collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data, requires_grad: false, grad: None };
        let needs = self.needs(x);
        self.push(t, Op::Gelu(x), needs)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let data = kernels::softmax_rows(self.data(x), r, c);
        let t = Tensor { shape: vec![r, c], data, requires_grad: false, grad: None };
        let needs = self.needs(x);
        Ok(self.push(t, Op::SoftmaxRows(x), needs))
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if self.shape(g) != [c] || self.shape(b) != [c] {
            return Err(Error::Dim(format!(
                "layer norm scale/offset must be [{c}], got {:?}/{:?}",
                self.shape(g),
                self.shape(b)
            )));
        }
        let (out, xhat, inv_std) =
            kernels::layer_norm_rows(self.data(x), r, c, self.data(g), self.data(b), eps);
        let t = Tensor { shape: vec![r, c], data: out, requires_grad: false, grad: None };
        let needs = self.needs(x) || self.needs(g) || self.needs(b);
        Ok(self.push(t, Op::LayerNorm { x, g, b, xhat, inv_std }, needs))
    }

    /// Row lookup: out[i] = table[ids[i]].
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(table)?;
        for (i, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(Error::Index(format!(
                    "embedding id {id} at position {i} out of range (table has {rows} rows)"
                )));
            }
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let t = Tensor { shape: vec![ids.len(), d], data, requires_grad: false, grad: None };
        let needs = self.needs(table);
        Ok(self.push(t, Op::Embed { table, ids: ids.to_vec() }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(Error::Dim(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape(x),
                self.value(x).numel(),
                shape
            )));
        }
        let t = Tensor { shape, data: self.data(x).to_vec(), requires_grad: false, grad: None };
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let data = kernels::transpose(self.data(x), r, c);
        let t = Tensor { shape: vec![c, r], data, requires_grad: false, grad: None };
        let needs = self.needs(x);
        Ok(self.push(t, Op::Transpose(x), needs))
    }

    /// Where mask is true the output is `value`; gradient flows only through
    /// unmasked positions.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::Dim(format!(
                "mask length {} does not match tensor {:?}",
                mask.len(),
                self.shape(x)
            )));
        }
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .zip(mask)
            .map(|(v, m)| if *m { value } else { *v })
            .collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data, requires_grad: false, grad: None };
        let needs = self.needs(x);
        Ok(self.push(t, Op::MaskedFill { x, mask: mask.to_vec() }, needs))
    }

    /// Mean over masked-in positions of -log softmax(logits)[target].
    /// An all-masked-out call returns 0 with zero gradient.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let (t_len, v) = self.dims2(logits)?;
        if targets.len() != t_len || mask.len() != t_len {
            return Err(Error::Dim(format!(
                "targets/mask length {}/{} does not match {t_len} rows",
                targets.len(),
                mask.len()
            )));
        }
        for (i, &y) in targets.iter().enumerate() {
            if y >= v {
                return Err(Error::Index(format!(
                    "target {y} at position {i} out of vocabulary range {v}"
                )));
            }
        }
        let probs = kernels::softmax_rows(self.data(logits), t_len, v);
        let count = mask.iter().filter(|m| **m).count();
        let mut loss = 0.0;
        if count > 0 {
            for t in 0..t_len {
                if mask[t] {
                    loss -= probs[t * v + targets[t]].max(1e-300).ln();
                }
            }
            loss /= count as f64;
        }
        let tensor = Tensor::scalar(loss);
        let needs = self.needs(logits);
        Ok(self.push(
            tensor,
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs },
            needs,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s: f64 = self.data(x).iter().sum::<f64>() / n as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), needs)
    }

    /// Stack 2-d tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Arg("concat_rows of zero tensors".into()));
        }
        let (_, cols) = self.dims2(xs[0])?;
        let mut rows = 0;
        for &x in xs {
            let (r, c) = self.dims2(x)?;
            if c != cols {
                return Err(Error::Dim(format!(
                    "concat_rows column mismatch: {cols} vs {c}"
                )));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &x in xs {
            data.extend_from_slice(self.data(x));
        }
        let t = Tensor { shape: vec![rows, cols], data, requires_grad: false, grad: None };
        let needs = xs.iter().any(|x| self.needs(*x));
        Ok(self.push(t, Op::ConcatRows(xs.to_vec()), needs))
    }

    pub fn mul_const(&mut self, x: Var, m: &[f64]) -> Result<Var> {
        if m.len() != self.value(x).numel() {
            return Err(Error::Dim(format!(
                "constant buffer length {} does not match tensor {:?}",
                m.len(),
                self.shape(x)
            )));
        }
        let data: Vec<f64> = self.data(x).iter().zip(m).map(|(a, b)| a * b).collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data, requires_grad: false, grad: None };
        let needs = self.needs(x);
        Ok(self.push(t, Op::MulConst(x, m.to_vec()), needs))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Populates grad buffers of every
    /// grad-requiring node (accumulating across calls).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_traced(loss).map(|_| ())
    }

    /// Like [`backward`], additionally returning the node indices whose
    /// backward rule ran, in execution order (used to assert traversal order).
    pub fn backward_traced(&mut self, loss: Var) -> Result<Vec<usize>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        let mut trace = Vec::new();

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let d = match grads[idx].take() {
                Some(d) => d,
                None => continue,
            };
            trace.push(idx);
            self.propagate(idx, &d, &mut grads);
            self.nodes[idx].value.accumulate_grad(&d);
        }
        Ok(trace)
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            None => grads[v.0] = Some(contrib.to_vec()),
        }
    }

    fn acc_zeros(&self, grads: &mut [Option<Vec<f64>>], v: Var) -> bool {
        if !self.nodes[v.0].needs_grad {
            return false;
        }
        if grads[v.0].is_none() {
            grads[v.0] = Some(vec![0.0; self.nodes[v.0].value.numel()]);
        }
        true
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, idx: usize, d: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.acc_zeros(grads, *a) {
                    let mut ga = std::mem::take(grads[a.0].as_mut().unwrap());
                    kernels::matmul_bt_acc(d, self.data(*b), m, n, k, &mut ga);
                    grads[a.0] = Some(ga);
                }
                if self.acc_zeros(grads, *b) {
                    let mut gb = std::mem::take(grads[b.0].as_mut().unwrap());
                    kernels::matmul_at_acc(self.data(*a), d, k, m, n, &mut gb);
                    grads[b.0] = Some(gb);
                }
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (cin, h, w) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let (cout, kh, kw) = (self.shape(*k)[0], self.shape(*k)[2], self.shape(*k)[3]);
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (w + 2 * pad - kw) / stride + 1;
                let kd = self.data(*k);
                let xd = self.data(*x);
                if self.acc_zeros(grads, *x) {
                    let gx = grads[x.0].as_mut().unwrap();
                    for co in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let dv = d[(co * oh + oy) * ow + ox];
                                if dv == 0.0 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - *pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - *pad as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            gx[(ci * h + iy as usize) * w + ix as usize] +=
                                                dv * kd[((co * cin + ci) * kh + ky) * kw + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if self.acc_zeros(grads, *k) {
                    let gk = grads[k.0].as_mut().unwrap();
                    for co in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let dv = d[(co * oh + oy) * ow + ox];
                                if dv == 0.0 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - *pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - *pad as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            gk[((co * cin + ci) * kh + ky) * kw + kx] +=
                                                dv * xd[(ci * h + iy as usize) * w + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, d);
                self.acc(grads, *b, d);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, d);
                if self.acc_zeros(grads, *b) {
                    let gb = grads[b.0].as_mut().unwrap();
                    for (g, dv) in gb.iter_mut().zip(d) {
                        *g -= dv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let contrib: Vec<f64> =
                        d.iter().zip(self.data(*b)).map(|(dv, bv)| dv * bv).collect();
                    self.acc(grads, *a, &contrib);
                }
                if self.nodes[b.0].needs_grad {
                    let contrib: Vec<f64> =
                        d.iter().zip(self.data(*a)).map(|(dv, av)| dv * av).collect();
                    self.acc(grads, *b, &contrib);
                }
            }
            Op::AddRowBias(x, b) => {
                self.acc(grads, *x, d);
                if self.nodes[b.0].needs_grad {
                    let n = self.shape(*b)[0];
                    let mut contrib = vec![0.0; n];
                    for (i, dv) in d.iter().enumerate() {
                        contrib[i % n] += dv;
                    }
                    self.acc(grads, *b, &contrib);
                }
            }
            Op::AddChanBias(x, b) => {
                self.acc(grads, *x, d);
                if self.nodes[b.0].needs_grad {
                    let c = self.shape(*b)[0];
                    let per = d.len() / c;
                    let mut contrib = vec![0.0; c];
                    for ci in 0..c {
                        contrib[ci] = d[ci * per..(ci + 1) * per].iter().sum();
                    }
                    self.acc(grads, *b, &contrib);
                }
            }
            Op::Scale(x, c) => {
                if self.nodes[x.0].needs_grad {
                    let contrib: Vec<f64> = d.iter().map(|dv| dv * c).collect();
                    self.acc(grads, *x, &contrib);
                }
            }
            Op::AddScalar(x) => self.acc(grads, *x, d),
            Op::Tanh(x) => {
                if self.nodes[x.0].needs_grad {
                    let y = &self.nodes[idx].value.data;
                    let contrib: Vec<f64> =
                        d.iter().zip(y).map(|(dv, yv)| dv * (1.0 - yv * yv)).collect();
                    self.acc(grads, *x, &contrib);
                }
            }
            Op::Gelu(x) => {
                if self.nodes[x.0].needs_grad {
                    let contrib: Vec<f64> = d
                        .iter()
                        .zip(self.data(*x))
                        .map(|(dv, xv)| dv * kernels::gelu_deriv(*xv))
                        .collect();
                    self.acc(grads, *x, &contrib);
                }
            }
            Op::SoftmaxRows(x) => {
                if self.nodes[x.0].needs_grad {
                    let y = &self.nodes[idx].value.data;
                    let cols = self.shape(*x)[1];
                    let rows = self.shape(*x)[0];
                    let mut contrib = vec![0.0; d.len()];
                    for r in 0..rows {
                        let dr = &d[r * cols..(r + 1) * cols];
                        let yr = &y[r * cols..(r + 1) * cols];
                        let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            contrib[r * cols + c] = yr[c] * (dr[c] - dot);
                        }
                    }
                    self.acc(grads, *x, &contrib);
                }
            }
            Op::LayerNorm { x, g, b, xhat, inv_std } => {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                let gd = self.data(*g);
                if self.nodes[x.0].needs_grad {
                    let mut contrib = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let dr = &d[r * cols..(r + 1) * cols];
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut m1 = 0.0; // mean of d*g
                        let mut m2 = 0.0; // mean of d*g*xhat
                        for c in 0..cols {
                            let dg = dr[c] * gd[c];
                            m1 += dg;
                            m2 += dg * xh[c];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for c in 0..cols {
                            contrib[r * cols + c] =
                                inv_std[r] * (dr[c] * gd[c] - m1 - xh[c] * m2);
                        }
                    }
                    self.acc(grads, *x, &contrib);
                }
                if self.nodes[g.0].needs_grad {
                    let mut contrib = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            contrib[c] += d[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                    self.acc(grads, *g, &contrib);
                }
                if self.nodes[b.0].needs_grad {
                    let mut contrib = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            contrib[c] += d[r * cols + c];
                        }
                    }
                    self.acc(grads, *b, &contrib);
                }
            }
            Op::Embed { table, ids } => {
                if self.acc_zeros(grads, *table) {
                    let dcols = self.shape(*table)[1];
                    let gt = grads[table.0].as_mut().unwrap();
                    for (i, &id) in ids.iter().enumerate() {
                        for c in 0..dcols {
                            gt[id * dcols + c] += d[i * dcols + c];
                        }
                    }
                }
            }
            Op::Reshape(x) => self.acc(grads, *x, d),
            Op::Transpose(x) => {
                if self.nodes[x.0].needs_grad {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    // d has shape [c, r]; transpose back.
                    let contrib = kernels::transpose(d, c, r);
                    self.acc(grads, *x, &contrib);
                }
            }
            Op::MaskedFill { x, mask } => {
                if self.nodes[x.0].needs_grad {
                    let contrib: Vec<f64> = d
                        .iter()
                        .zip(mask)
                        .map(|(dv, m)| if *m { 0.0 } else { *dv })
                        .collect();
                    self.acc(grads, *x, &contrib);
                }
            }
            Op::CrossEntropy { logits, targets, mask, probs } => {
                if self.nodes[logits.0].needs_grad {
                    let count = mask.iter().filter(|m| **m).count();
                    if count > 0 {
                        let v = self.shape(*logits)[1];
                        let scale = d[0] / count as f64;
                        let mut contrib = vec![0.0; probs.len()];
                        for (t, m) in mask.iter().enumerate() {
                            if !*m {
                                continue;
                            }
                            for c in 0..v {
                                let onehot = if c == targets[t] { 1.0 } else { 0.0 };
                                contrib[t * v + c] = scale * (probs[t * v + c] - onehot);
                            }
                        }
                        self.acc(grads, *logits, &contrib);
                    }
                }
            }
            Op::SumAll(x) => {
                if self.acc_zeros(grads, *x) {
                    let gx = grads[x.0].as_mut().unwrap();
                    for g in gx.iter_mut() {
                        *g += d[0];
                    }
                }
            }
            Op::MeanAll(x) => {
                if self.acc_zeros(grads, *x) {
                    let gx = grads[x.0].as_mut().unwrap();
                    let n = gx.len().max(1) as f64;
                    for g in gx.iter_mut() {
                        *g += d[0] / n;
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.nodes[x.0].value.numel();
                    if self.nodes[x.0].needs_grad {
                        let contrib = &d[off..off + len];
                        self.acc(grads, x, contrib);
                    }
                    off += len;
                }
            }
            Op::MulConst(x, m) => {
                if self.nodes[x.0].needs_grad {
                    let contrib: Vec<f64> = d.iter().zip(m).map(|(dv, mv)| dv * mv).collect();
                    self.acc(grads, *x, &contrib);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape, data).unwrap().with_grad())
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let i2 = leaf(&mut tape, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let c = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);

        let b = leaf(&mut tape, vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let d = tape.matmul(a, b).unwrap();
        // Hand expansion of the 2x2 product.
        assert_eq!(tape.data(d), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_dimension_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1, 2], vec![1.0, 2.0]);
        let b = leaf(&mut tape, vec![3, 1], vec![1.0, 1.0, 1.0]);
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[1, 2]") && err.contains("[3, 1]"), "{err}");
    }

    #[test]
    fn sum_backward_gives_ones() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]);
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn elementwise_square_backward() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![1.0, -2.0, 3.0]);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_on_non_scalar_is_a_contract_error() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn diamond_graph_order_and_gradient() {
        // x -> a = 2x, b = 3x; c = a * b = 6x^2; sum(c) backward.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let a = tape.scale(x, 2.0);
        let b = tape.scale(x, 3.0);
        let c = tape.mul(a, b).unwrap();
        let s = tape.sum_all(c);
        let trace = tape.backward_traced(s).unwrap();
        // Reverse topological: each node's rule runs only after its grad is
        // finalized, i.e. trace indices strictly decrease.
        assert!(trace.windows(2).all(|w| w[0] > w[1]), "trace {trace:?}");
        // d/dx 6x^2 = 12x.
        assert_eq!(tape.grad(x).unwrap(), &[12.0, 24.0]);
    }

    #[test]
    fn forward_independent_of_requires_grad() {
        let data = vec![0.3, -0.7, 1.1, 0.0, 2.0, -1.0];
        let run = |rg: bool| {
            let mut tape = Tape::new();
            let mut t = Tensor::new(vec![2, 3], data.clone()).unwrap();
            t.requires_grad = rg;
            let x = tape.leaf(t);
            let y = tape.gelu(x);
            let z = tape.softmax_rows(y).unwrap();
            tape.data(z).to_vec()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn conv2d_hand_examples() {
        let mut tape = Tape::new();
        // 1x3x3 ones through a 1x1x1x1 kernel of value 2.
        let x = leaf(&mut tape, vec![1, 3, 3], vec![1.0; 9]);
        let k = leaf(&mut tape, vec![1, 1, 1, 1], vec![2.0]);
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 3]);
        assert_eq!(tape.data(y), &[2.0; 9]);

        // 1x2x2 [[1,2],[3,4]] through a 2x2 kernel of ones: single window sum.
        let x2 = leaf(&mut tape, vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let k2 = leaf(&mut tape, vec![1, 1, 2, 2], vec![1.0; 4]);
        let y2 = tape.conv2d(x2, k2, 1, 0).unwrap();
        assert_eq!(tape.shape(y2), &[1, 1, 1]);
        assert_eq!(tape.data(y2), &[10.0]);
    }

    #[test]
    fn conv2d_kernel_larger_than_padded_input_errors() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 2, 2], vec![1.0; 4]);
        let k = leaf(&mut tape, vec![1, 1, 5, 5], vec![1.0; 25]);
        assert!(tape.conv2d(x, k, 1, 0).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, vec![1, 4], vec![0.0; 4]);
        let loss = tape.softmax_cross_entropy(logits, &[2], &[true]).unwrap();
        assert!((tape.data(loss)[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_empty_mask_is_zero_with_zero_grad() {
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let loss = tape.softmax_cross_entropy(logits, &[0, 1], &[false, false]).unwrap();
        assert_eq!(tape.data(loss), &[0.0]);
        tape.backward(loss).unwrap();
        // Loss does not depend on logits; grad must be absent or all-zero.
        match tape.grad(logits) {
            None => {}
            Some(g) => assert!(g.iter().all(|v| *v == 0.0)),
        }
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, vec![1, 3], vec![0.0; 3]);
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[3], &[true]),
            Err(Error::Index(_))
        ));
    }
}
