//! Reverse-mode differentiation over whole-matrix operations.
//!
//! A [`Tape`] records every operation of one forward pass together with the
//! values its gradient rule needs. [`Tape::backward`] walks the record in
//! reverse and accumulates gradients into a [`Gradients`] table keyed by
//! [`ParamId`], so parameters referenced from several places (the shared
//! attention and scan cores) collect the sum of all their uses.

use crate::attention::{attention_backward, attention_forward, AttentionCache, Span};
use crate::error::{Error, Result};
use crate::ssm::{scan_backward, scan_forward, ScanCache};
use crate::tensor::{matmul_at_into, matmul_bt_into, sigmoid, silu, softplus, Matrix, Real};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<S> {
    pub name: String,
    pub value: Matrix<S>,
    /// Whether decoupled weight decay applies (matrices yes, biases and norms no).
    pub decay: bool,
}

/// Named learnable tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<S>, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix<S> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<S> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<S>] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), decay: e.decay })
                .collect(),
        }
    }

    /// Zero every parameter whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.value.as_mut_slice().iter_mut().for_each(|v| *v = S::zero());
                n += 1;
            }
        }
        n
    }
}

/// Gradient per parameter, `None` for parameters the loss does not reach.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Matrix<S>>>,
}

impl<S: Real> Gradients<S> {
    pub fn zeros_like(store: &ParamStore<S>) -> Self {
        Self { grads: store.entries().iter().map(|e| Some(Matrix::zeros(e.value.rows(), e.value.cols()))).collect() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix<S>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Element-wise accumulation; missing entries count as zero.
    pub fn accumulate(&mut self, other: &Gradients<S>) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(t),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: S) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(s);
        }
    }

    pub fn global_norm(&self) -> S {
        let sq: S = self.grads.iter().flatten().flat_map(|g| g.as_slice().iter()).map(|&v| v * v).sum();
        sq.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::is_finite)
    }
}

/// Handle to a value recorded on a tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    ScaleCols(Var, Vec<S>),
    Relu(Var),
    Silu(Var),
    Softplus(Var),
    Concat(Var, Var),
    ReverseValid(Var, usize),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix<S>, inv_std: Vec<S> },
    CausalConv { x: Var, w: Var, b: Var },
    Downsample { x: Var, w: Var, b: Var, valid: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, cache: AttentionCache<S> },
    Scan { x: Var, delta: Var, a_log: Var, b: Var, c: Var, d: Var, cache: ScanCache<S> },
    FocalSum { logits: Var, targets: Vec<ClassTarget> },
    DiouSum { pred: Var, targets: Vec<(usize, [S; 2])> },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleCols(..) => "scale_cols",
            Op::Relu(_) => "relu",
            Op::Silu(_) => "silu",
            Op::Softplus(_) => "softplus",
            Op::Concat(..) => "concat",
            Op::ReverseValid(..) => "reverse",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CausalConv { .. } => "causal_conv",
            Op::Downsample { .. } => "downsample",
            Op::MaxPool { .. } => "max_pool",
            Op::Attention { .. } => "masked_attention",
            Op::Scan { .. } => "selective_scan",
            Op::FocalSum { .. } => "focal_loss",
            Op::DiouSum { .. } => "diou_loss",
        }
    }
}

/// Classification target of one grid point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassTarget {
    /// Padding or otherwise excluded from the loss.
    Ignore,
    Background,
    Class(usize),
}

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
const LN_EPS: f64 = 1e-5;

struct Node<S> {
    value: Matrix<S>,
    op: Op<S>,
}

pub struct Tape<'p, S: Real> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p, S: Real> Tape<'p, S> {
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamStore<S> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Matrix<S> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix<S>) -> Var {
        self.push(value, Op::Constant)
    }

    /// The tape node of a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a `1×C` row vector to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Shape(format!("bias {:?} for input {:?}", bv.shape(), xv.shape())));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, &bb) in out.row_mut(i).iter_mut().zip(bv.as_slice()) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let bv = self.value(b).as_slice();
        let mut out = self.value(a).clone();
        for (o, &y) in out.as_mut_slice().iter_mut().zip(bv) {
            *o *= y;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let mut out = self.value(x).clone();
        out.scale(s);
        self.push(out, Op::Scale(x, s))
    }

    /// Multiplies column `j` by the constant `factors[j]` (channel dropout).
    pub fn scale_cols(&mut self, x: Var, factors: Vec<S>) -> Result<Var> {
        if factors.len() != self.value(x).cols() {
            return Err(Error::Shape("column factor count".into()));
        }
        let mut out = self.value(x).clone();
        let cols = out.cols();
        for (i, o) in out.as_mut_slice().iter_mut().enumerate() {
            *o *= factors[i % cols];
        }
        Ok(self.push(out, Op::ScaleCols(x, factors)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        self.push(out, Op::Relu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(silu);
        self.push(out, Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus(x))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_cols(self.value(b))?;
        Ok(self.push(out, Op::Concat(a, b)))
    }

    /// Reverses the first `valid` rows and leaves trailing padding rows in place.
    pub fn reverse(&mut self, x: Var, valid: usize) -> Var {
        let out = reverse_valid(self.value(x), valid);
        self.push(out, Op::ReverseValid(x, valid))
    }

    /// Per-row normalization over channels followed by a per-channel affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (t, c) = xv.shape();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.shape() != (1, c) || b.shape() != (1, c) {
            return Err(Error::Shape("layer norm affine parameters".into()));
        }
        let mut xhat = Matrix::zeros(t, c);
        let mut out = Matrix::zeros(t, c);
        let mut inv_std = Vec::with_capacity(t);
        let n = S::of(c as f64);
        for i in 0..t {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let is = S::one() / (var + S::of(LN_EPS)).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat.set(i, j, h);
                out.set(i, j, h * g.get(0, j) + b.get(0, j));
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    /// Depthwise convolution where output `t` sees inputs `t−k+1 ..= t` (zero padded on the left).
    /// `w` is `k×C`, tap `k−1` multiplies the current step.
    pub fn causal_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (t, c) = xv.shape();
        let k = wv.rows();
        if wv.cols() != c || bv.shape() != (1, c) {
            return Err(Error::Shape("causal conv kernel".into()));
        }
        let mut out = Matrix::zeros(t, c);
        for i in 0..t {
            let orow = out.row_mut(i);
            orow.copy_from_slice(bv.as_slice());
            for tap in 0..k {
                let shift = k - 1 - tap;
                if shift > i {
                    continue;
                }
                let xr = xv.row(i - shift);
                let wr = wv.row(tap);
                for j in 0..c {
                    orow[j] += wr[j] * xr[j];
                }
            }
        }
        Ok(self.push(out, Op::CausalConv { x, w, b }))
    }

    /// Stride-2 depthwise convolution of width 3 centered on even inputs. Rows at or after
    /// `valid` are treated as zeros so padding never leaks into valid outputs.
    pub fn downsample(&mut self, x: Var, w: Var, b: Var, valid: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (t, c) = xv.shape();
        if wv.shape() != (3, c) || bv.shape() != (1, c) {
            return Err(Error::Shape("downsample kernel".into()));
        }
        let to = t.div_ceil(2);
        let mut out = Matrix::zeros(to, c);
        for i in 0..to {
            let orow = out.row_mut(i);
            orow.copy_from_slice(bv.as_slice());
            for tap in 0..3 {
                let src = 2 * i + tap;
                if src == 0 || src > valid.min(t) {
                    continue;
                }
                let xr = xv.row(src - 1);
                let wr = wv.row(tap);
                for j in 0..c {
                    orow[j] += wr[j] * xr[j];
                }
            }
        }
        Ok(self.push(out, Op::Downsample { x, w, b, valid }))
    }

    /// Stride-2 max pooling of width 3 restricted to valid rows.
    pub fn max_pool(&mut self, x: Var, valid: usize) -> Var {
        let xv = self.value(x);
        let (t, c) = xv.shape();
        let to = t.div_ceil(2);
        let mut out = Matrix::zeros(to, c);
        let mut argmax = vec![0usize; to * c];
        for i in 0..to {
            for j in 0..c {
                let mut best: Option<(usize, S)> = None;
                for src in (2 * i).saturating_sub(1)..=(2 * i + 1) {
                    if src >= t || (src >= valid && src != 2 * i) {
                        continue;
                    }
                    let v = xv.get(src, j);
                    if best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((src, v));
                    }
                }
                let (src, v) = best.expect("center tap always exists");
                out.set(i, j, v);
                argmax[i * c + j] = src;
            }
        }
        self.push(out, Op::MaxPool { x, argmax })
    }

    /// Multi-head attention where row `i` attends to keys in `spans[i]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, spans: Vec<Span>) -> Result<Var> {
        let (out, cache) = attention_forward(self.value(q), self.value(k), self.value(v), heads, spans)?;
        Ok(self.push(out, Op::Attention { q, k, v, cache }))
    }

    /// Selective scan; see [`crate::ssm::scan_forward`] for the recurrence.
    #[allow(clippy::too_many_arguments)]
    pub fn scan(&mut self, x: Var, delta: Var, a_log: Var, b: Var, c: Var, d: Var, chunk: Option<usize>) -> Result<Var> {
        let (y, cache) = scan_forward(
            self.value(x),
            self.value(delta),
            self.value(a_log),
            self.value(b),
            self.value(c),
            self.value(d),
            chunk,
        )?;
        Ok(self.push(y, Op::Scan { x, delta, a_log, b, c, d, cache }))
    }

    /// Sigmoid focal loss summed over points and classes (a `1×1` value).
    pub fn focal_sum(&mut self, logits: Var, targets: Vec<ClassTarget>) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() {
            return Err(Error::Shape(format!("{} targets for {} points", targets.len(), lv.rows())));
        }
        let mut total = S::zero();
        for (i, t) in targets.iter().enumerate() {
            if *t == ClassTarget::Ignore {
                continue;
            }
            for (j, &x) in lv.row(i).iter().enumerate() {
                total += focal_term(x, *t == ClassTarget::Class(j)).0;
            }
        }
        Ok(self.push(Matrix::filled(1, 1, total), Op::FocalSum { logits, targets }))
    }

    /// Distance-IoU loss summed over `(row, target distances)` pairs (a `1×1` value).
    pub fn diou_sum(&mut self, pred: Var, targets: Vec<(usize, [S; 2])>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.cols() != 2 || targets.iter().any(|(r, _)| *r >= pv.rows()) {
            return Err(Error::Shape("distance predictions".into()));
        }
        let mut total = S::zero();
        for (r, t) in &targets {
            total += diou_term([pv.get(*r, 0), pv.get(*r, 1)], *t).0;
        }
        Ok(self.push(Matrix::filled(1, 1, total), Op::DiouSum { pred, targets }))
    }

    /// Gradients of the `1×1` value `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Matrix<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, S::one()));
        let mut out = Gradients { grads: vec![None; self.params.len()] };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !g.is_finite() {
                return Err(Error::GradientOverflow { op: node.op.name() });
            }
            let mut acc = |v: Var, delta: Matrix<S>| {
                if !delta.is_finite() {
                    return Err(Error::GradientOverflow { op: node.op.name() });
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
                Ok(())
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.grads[id.0] = Some(g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let mut da = Matrix::zeros(m, k);
                    matmul_bt_into(g.as_slice(), bv.as_slice(), da.as_mut_slice(), m, n, k);
                    let mut db = Matrix::zeros(k, n);
                    matmul_at_into(av.as_slice(), g.as_slice(), db.as_mut_slice(), m, k, n);
                    acc(*a, da)?;
                    acc(*b, db)?;
                }
                Op::AddBias(x, b) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, &gv) in db.as_mut_slice().iter_mut().zip(g.row(i)) {
                            *d += gv;
                        }
                    }
                    acc(*b, db)?;
                    acc(*x, g)?;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g)?;
                }
                Op::Mul(a, b) => {
                    let mut da = g.clone();
                    for (d, &y) in da.as_mut_slice().iter_mut().zip(self.value(*b).as_slice()) {
                        *d *= y;
                    }
                    let mut db = g;
                    for (d, &y) in db.as_mut_slice().iter_mut().zip(self.value(*a).as_slice()) {
                        *d *= y;
                    }
                    acc(*a, da)?;
                    acc(*b, db)?;
                }
                Op::Scale(x, s) => {
                    let mut d = g;
                    d.scale(*s);
                    acc(*x, d)?;
                }
                Op::ScaleCols(x, f) => {
                    let mut d = g;
                    let cols = d.cols();
                    for (i, v) in d.as_mut_slice().iter_mut().enumerate() {
                        *v *= f[i % cols];
                    }
                    acc(*x, d)?;
                }
                Op::Relu(x) => {
                    let mut d = g;
                    for (v, &xv) in d.as_mut_slice().iter_mut().zip(self.value(*x).as_slice()) {
                        if xv <= S::zero() {
                            *v = S::zero();
                        }
                    }
                    acc(*x, d)?;
                }
                Op::Silu(x) => {
                    let mut d = g;
                    for (v, &xv) in d.as_mut_slice().iter_mut().zip(self.value(*x).as_slice()) {
                        let s = sigmoid(xv);
                        *v *= s * (S::one() + xv * (S::one() - s));
                    }
                    acc(*x, d)?;
                }
                Op::Softplus(x) => {
                    let mut d = g;
                    for (v, &xv) in d.as_mut_slice().iter_mut().zip(self.value(*x).as_slice()) {
                        *v *= sigmoid(xv);
                    }
                    acc(*x, d)?;
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let mut da = Matrix::zeros(g.rows(), ca);
                    let mut db = Matrix::zeros(g.rows(), cb);
                    for i in 0..g.rows() {
                        da.row_mut(i).copy_from_slice(&g.row(i)[..ca]);
                        db.row_mut(i).copy_from_slice(&g.row(i)[ca..]);
                    }
                    acc(*a, da)?;
                    acc(*b, db)?;
                }
                Op::ReverseValid(x, valid) => acc(*x, reverse_valid(&g, *valid))?,
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let (t, c) = g.shape();
                    let gam = self.value(*gamma);
                    let mut dgamma = Matrix::zeros(1, c);
                    let mut dbeta = Matrix::zeros(1, c);
                    let mut dx = Matrix::zeros(t, c);
                    let n = S::of(c as f64);
                    for i in 0..t {
                        let gr = g.row(i);
                        let hr = xhat.row(i);
                        let mut sum_dh = S::zero();
                        let mut sum_dh_h = S::zero();
                        for j in 0..c {
                            dgamma.as_mut_slice()[j] += gr[j] * hr[j];
                            dbeta.as_mut_slice()[j] += gr[j];
                            let dh = gr[j] * gam.get(0, j);
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let dr = dx.row_mut(i);
                        for j in 0..c {
                            let dh = gr[j] * gam.get(0, j);
                            dr[j] = inv_std[i] * (dh - sum_dh / n - hr[j] * sum_dh_h / n);
                        }
                    }
                    acc(*x, dx)?;
                    acc(*gamma, dgamma)?;
                    acc(*beta, dbeta)?;
                }
                Op::CausalConv { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (t, c) = xv.shape();
                    let k = wv.rows();
                    let mut dx = Matrix::zeros(t, c);
                    let mut dw = Matrix::zeros(k, c);
                    let mut db = Matrix::zeros(1, c);
                    for i in 0..t {
                        let gr = g.row(i);
                        for j in 0..c {
                            db.as_mut_slice()[j] += gr[j];
                        }
                        for tap in 0..k {
                            let shift = k - 1 - tap;
                            if shift > i {
                                continue;
                            }
                            let src = i - shift;
                            for j in 0..c {
                                dw.as_mut_slice()[tap * c + j] += gr[j] * xv.get(src, j);
                                dx.as_mut_slice()[src * c + j] += gr[j] * wv.get(tap, j);
                            }
                        }
                    }
                    acc(*x, dx)?;
                    acc(*w, dw)?;
                    acc(*b, db)?;
                }
                Op::Downsample { x, w, b, valid } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (t, c) = xv.shape();
                    let mut dx = Matrix::zeros(t, c);
                    let mut dw = Matrix::zeros(3, c);
                    let mut db = Matrix::zeros(1, c);
                    for i in 0..g.rows() {
                        let gr = g.row(i);
                        for j in 0..c {
                            db.as_mut_slice()[j] += gr[j];
                        }
                        for tap in 0..3 {
                            let src = 2 * i + tap;
                            if src == 0 || src > (*valid).min(t) {
                                continue;
                            }
                            let src = src - 1;
                            for j in 0..c {
                                dw.as_mut_slice()[tap * c + j] += gr[j] * xv.get(src, j);
                                dx.as_mut_slice()[src * c + j] += gr[j] * wv.get(tap, j);
                            }
                        }
                    }
                    acc(*x, dx)?;
                    acc(*w, dw)?;
                    acc(*b, db)?;
                }
                Op::MaxPool { x, argmax } => {
                    let (t, c) = self.value(*x).shape();
                    let mut dx = Matrix::zeros(t, c);
                    for (idx, &src) in argmax.iter().enumerate() {
                        let j = idx % c;
                        dx.as_mut_slice()[src * c + j] += g.as_slice()[idx];
                    }
                    acc(*x, dx)?;
                }
                Op::Attention { q, k, v, cache } => {
                    let (dq, dk, dv) = attention_backward(self.value(*q), self.value(*k), self.value(*v), cache, &g);
                    acc(*q, dq)?;
                    acc(*k, dk)?;
                    acc(*v, dv)?;
                }
                Op::Scan { x, delta, a_log, b, c, d, cache } => {
                    let gr = scan_backward(
                        self.value(*x),
                        self.value(*delta),
                        self.value(*a_log),
                        self.value(*b),
                        self.value(*c),
                        self.value(*d),
                        cache,
                        &g,
                    );
                    acc(*x, gr.dx)?;
                    acc(*delta, gr.ddelta)?;
                    acc(*a_log, gr.da_log)?;
                    acc(*b, gr.db)?;
                    acc(*c, gr.dc)?;
                    acc(*d, gr.dd)?;
                }
                Op::FocalSum { logits, targets } => {
                    let lv = self.value(*logits);
                    let scale = g.get(0, 0);
                    let mut dl = Matrix::zeros(lv.rows(), lv.cols());
                    for (i, t) in targets.iter().enumerate() {
                        if *t == ClassTarget::Ignore {
                            continue;
                        }
                        for (j, &x) in lv.row(i).iter().enumerate() {
                            dl.set(i, j, scale * focal_term(x, *t == ClassTarget::Class(j)).1);
                        }
                    }
                    acc(*logits, dl)?;
                }
                Op::DiouSum { pred, targets } => {
                    let pv = self.value(*pred);
                    let scale = g.get(0, 0);
                    let mut dp = Matrix::zeros(pv.rows(), 2);
                    for (r, t) in targets {
                        let (_, grad) = diou_term([pv.get(*r, 0), pv.get(*r, 1)], *t);
                        dp.as_mut_slice()[r * 2] += scale * grad[0];
                        dp.as_mut_slice()[r * 2 + 1] += scale * grad[1];
                    }
                    acc(*pred, dp)?;
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn reverse_valid<S: Real>(x: &Matrix<S>, valid: usize) -> Matrix<S> {
    let valid = valid.min(x.rows());
    let mut out = x.clone();
    for i in 0..valid {
        out.row_mut(i).copy_from_slice(x.row(valid - 1 - i));
    }
    out
}

/// Focal loss of one logit and its derivative.
pub(crate) fn focal_term<S: Real>(x: S, positive: bool) -> (S, S) {
    let alpha = S::of(FOCAL_ALPHA);
    let gamma = S::of(FOCAL_GAMMA);
    let p = sigmoid(x);
    if positive {
        // -ln p = softplus(-x)
        let ce = softplus(-x);
        let q = S::one() - p;
        let mod_ = q.powf(gamma);
        let loss = alpha * mod_ * ce;
        let grad = alpha * (-gamma * q.powf(gamma - S::one()) * p * q * ce - mod_ * q);
        (loss, grad)
    } else {
        let ce = softplus(x);
        let mod_ = p.powf(gamma);
        let one_m_alpha = S::one() - alpha;
        let loss = one_m_alpha * mod_ * ce;
        let grad = one_m_alpha * (gamma * p.powf(gamma - S::one()) * p * (S::one() - p) * ce + mod_ * p);
        (loss, grad)
    }
}

/// 1-D distance-IoU loss between segments `[-l, r]` around the same point, with its gradient
/// with respect to the predicted `(l, r)`.
pub(crate) fn diou_term<S: Real>(pred: [S; 2], target: [S; 2]) -> (S, [S; 2]) {
    let [lp, rp] = pred;
    let [lt, rt] = target;
    let zero = S::zero();
    let one = S::one();
    let two = S::of(2.0);

    let (inter_l, dil) = if lp < lt { (lp, one) } else { (lt, zero) };
    let (inter_r, dir) = if rp < rt { (rp, one) } else { (rt, zero) };
    let inter = inter_l + inter_r;
    let union = lp + rp + lt + rt - inter;
    let ue = union.max(S::min_positive_value());
    let iou = inter / ue;

    let (enc_l, del) = if lp > lt { (lp, one) } else { (lt, zero) };
    let (enc_r, der) = if rp > rt { (rp, one) } else { (rt, zero) };
    let enclose = enc_l + enc_r;
    let offset = (rp - lp - rt + lt) / two;
    let enc2 = (enclose * enclose).max(S::min_positive_value());
    let loss = one - iou + offset * offset / enc2;

    let mut grad = [zero; 2];
    let d_inter = [dil, dir];
    let d_enc = [del, der];
    let d_offset = [-one / two, one / two];
    for i in 0..2 {
        let d_union = one - d_inter[i];
        let d_iou = (d_inter[i] * ue - inter * d_union) / (ue * ue);
        let d_pen = (two * offset * d_offset[i] * enc2 - offset * offset * two * enclose * d_enc[i]) / (enc2 * enc2);
        grad[i] = -d_iou + d_pen;
    }
    (loss, grad)
}
