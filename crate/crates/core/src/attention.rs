//! Direction-restricted multi-head self-attention.
//!
//! The past-only (backward) branch lets position `i` attend to `j ≤ i`, the
//! future-only (forward) branch to `j ≥ i`. Both branches read the same
//! query/key/value maps; only the input projector and the gate are
//! per-direction. Masked keys are excluded from the softmax outright rather
//! than added as a large negative constant, so perturbing an invisible token
//! cannot change a single bit of the output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Context, Linear};
use crate::rng::Rng;
use crate::tape::{ParamStore, Tape, Var};
use crate::tensor::{dot, Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Past and present only.
    Backward,
    /// Present and future only.
    Forward,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Backward, Direction::Forward];

    pub fn index(self) -> usize {
        match self {
            Direction::Backward => 0,
            Direction::Forward => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Backward => "backward",
            Direction::Forward => "forward",
        }
    }
}

/// Inclusive range `lo..=hi` of key positions visible to one query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub lo: usize,
    pub hi: usize,
}

impl Span {
    #[inline]
    pub fn contains(&self, j: usize) -> bool {
        self.lo <= j && j <= self.hi
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.hi + 1 - self.lo
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Additive `{0, −∞}` attention mask over a length-`len` sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CausalMask {
    pub len: usize,
    pub direction: Direction,
    pub window: Option<usize>,
}

pub fn causal_mask(len: usize, direction: Direction, window: Option<usize>) -> Result<CausalMask> {
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    if window == Some(0) {
        return Err(Error::Config("attention window must be at least 1".into()));
    }
    Ok(CausalMask { len, direction, window })
}

impl CausalMask {
    pub fn span(&self, i: usize) -> Span {
        direction_span(i, self.len, self.direction, self.window)
    }

    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.span(i).contains(j)
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if self.is_visible(i, j) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn to_additive<S: Real>(&self) -> Matrix<S> {
        Matrix::from_fn(self.len, self.len, |i, j| S::of(self.entry(i, j)))
    }

    pub fn spans(&self) -> Vec<Span> {
        (0..self.len).map(|i| self.span(i)).collect()
    }
}

fn direction_span(i: usize, valid: usize, direction: Direction, window: Option<usize>) -> Span {
    let w = window.unwrap_or(usize::MAX);
    match direction {
        Direction::Backward => Span { lo: i.saturating_sub(w - 1), hi: i },
        Direction::Forward => Span { lo: i, hi: (valid - 1).min(i.saturating_add(w - 1)) },
    }
}

/// Visible spans for a possibly padded sequence of `len` rows whose first `valid` rows are real.
/// Padding rows only see themselves, and real rows never see padding.
pub fn visible_spans(len: usize, valid: usize, direction: Option<Direction>, window: Option<usize>) -> Vec<Span> {
    let valid = valid.min(len);
    (0..len)
        .map(|i| {
            if i >= valid {
                return Span { lo: i, hi: i };
            }
            match direction {
                Some(d) => direction_span(i, valid, d, window),
                None => {
                    let w = window.unwrap_or(usize::MAX);
                    Span { lo: i.saturating_sub(w - 1), hi: (valid - 1).min(i.saturating_add(w - 1)) }
                }
            }
        })
        .collect()
}

/// Single-head `softmax(Q Kᵀ / √d_k + M) V` for an arbitrary additive mask `M`.
/// `−∞` entries are excluded; a row without any finite entry is an error.
pub fn masked_attention<S: Real>(q: &Matrix<S>, k: &Matrix<S>, v: &Matrix<S>, mask: &Matrix<S>) -> Result<Matrix<S>> {
    let probs = attention_probabilities(q, k, mask)?;
    if v.rows() != k.rows() {
        return Err(Error::Shape(format!("{} values for {} keys", v.rows(), k.rows())));
    }
    probs.matmul(v)
}

/// Row-stochastic attention weights of [`masked_attention`].
pub fn attention_probabilities<S: Real>(q: &Matrix<S>, k: &Matrix<S>, mask: &Matrix<S>) -> Result<Matrix<S>> {
    let (t, dk) = q.shape();
    if k.cols() != dk || mask.shape() != (t, k.rows()) {
        return Err(Error::Shape(format!(
            "q {:?}, k {:?}, mask {:?}",
            q.shape(),
            k.shape(),
            mask.shape()
        )));
    }
    let scale = S::one() / S::of(dk as f64).sqrt();
    let mut probs = Matrix::zeros(t, k.rows());
    for i in 0..t {
        let mut max = S::neg_infinity();
        for j in 0..k.rows() {
            let m = mask.get(i, j);
            if m == S::neg_infinity() {
                continue;
            }
            let s = dot(q.row(i), k.row(j)) * scale + m;
            probs.set(i, j, s);
            max = max.max(s);
        }
        if max == S::neg_infinity() {
            return Err(Error::DegenerateMask { row: i });
        }
        let mut z = S::zero();
        for j in 0..k.rows() {
            if mask.get(i, j) == S::neg_infinity() {
                continue;
            }
            let e = (probs.get(i, j) - max).exp();
            probs.set(i, j, e);
            z += e;
        }
        for p in probs.row_mut(i) {
            *p /= z;
        }
    }
    Ok(probs)
}

/// Softmax probabilities saved by the forward pass, stored ragged per row.
pub struct AttentionCache<S> {
    heads: usize,
    spans: Vec<Span>,
    offsets: Vec<usize>,
    total: usize,
    probs: Vec<S>,
}

impl<S: Real> AttentionCache<S> {
    /// Attention weights of `head` for query `i`, aligned with `spans[i]`.
    pub fn row(&self, head: usize, i: usize) -> &[S] {
        let o = head * self.total + self.offsets[i];
        &self.probs[o..o + self.spans[i].len()]
    }
}

/// Multi-head attention over contiguous visible spans. Columns are split into `heads`
/// equal groups; each group attends independently.
pub fn attention_forward<S: Real>(
    q: &Matrix<S>,
    k: &Matrix<S>,
    v: &Matrix<S>,
    heads: usize,
    spans: Vec<Span>,
) -> Result<(Matrix<S>, AttentionCache<S>)> {
    let (t, dm) = q.shape();
    if k.shape() != (t, dm) || v.shape() != (t, dm) || spans.len() != t {
        return Err(Error::Shape(format!("q {:?} k {:?} v {:?}", q.shape(), k.shape(), v.shape())));
    }
    if heads == 0 || dm % heads != 0 {
        return Err(Error::Shape(format!("{dm} channels do not split into {heads} heads")));
    }
    if t == 0 {
        return Err(Error::EmptySequence);
    }
    for (i, s) in spans.iter().enumerate() {
        if s.lo > s.hi || s.hi >= t {
            return Err(Error::DegenerateMask { row: i });
        }
    }
    let dh = dm / heads;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let mut offsets = Vec::with_capacity(t);
    let mut total = 0;
    for s in &spans {
        offsets.push(total);
        total += s.len();
    }
    let mut probs = vec![S::zero(); heads * total];
    let mut out = Matrix::zeros(t, dm);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..t {
            let span = spans[i];
            let p = &mut probs[h * total + offsets[i]..h * total + offsets[i] + span.len()];
            let qi = &q.row(i)[cols.clone()];
            let mut max = S::neg_infinity();
            for (pj, j) in p.iter_mut().zip(span.lo..=span.hi) {
                let s = dot(qi, &k.row(j)[cols.clone()]) * scale;
                *pj = s;
                max = max.max(s);
            }
            let mut z = S::zero();
            for pj in p.iter_mut() {
                *pj = (*pj - max).exp();
                z += *pj;
            }
            let inv = S::one() / z;
            let orow = &mut out.row_mut(i)[cols.clone()];
            for (pj, j) in p.iter_mut().zip(span.lo..=span.hi) {
                *pj *= inv;
                let vj = &v.row(j)[cols.clone()];
                for (o, &vv) in orow.iter_mut().zip(vj) {
                    *o += *pj * vv;
                }
            }
        }
    }
    Ok((out, AttentionCache { heads, spans, offsets, total, probs }))
}

pub fn attention_backward<S: Real>(
    q: &Matrix<S>,
    k: &Matrix<S>,
    v: &Matrix<S>,
    cache: &AttentionCache<S>,
    dout: &Matrix<S>,
) -> (Matrix<S>, Matrix<S>, Matrix<S>) {
    let (t, dm) = q.shape();
    let dh = dm / cache.heads;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let mut dq = Matrix::zeros(t, dm);
    let mut dk = Matrix::zeros(t, dm);
    let mut dv = Matrix::zeros(t, dm);
    let mut dp = Vec::new();
    for h in 0..cache.heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..t {
            let span = cache.spans[i];
            let p = cache.row(h, i);
            let doi = &dout.row(i)[cols.clone()];
            dp.clear();
            let mut weighted = S::zero();
            for (&pj, j) in p.iter().zip(span.lo..=span.hi) {
                let g = dot(doi, &v.row(j)[cols.clone()]);
                dp.push(g);
                weighted += pj * g;
                let dvj = &mut dv.row_mut(j)[cols.clone()];
                for (d, &o) in dvj.iter_mut().zip(doi) {
                    *d += pj * o;
                }
            }
            let qi: Vec<S> = q.row(i)[cols.clone()].to_vec();
            for ((&pj, &g), j) in p.iter().zip(&dp).zip(span.lo..=span.hi) {
                let ds = pj * (g - weighted) * scale;
                if ds == S::zero() {
                    continue;
                }
                let kj = &k.row(j)[cols.clone()];
                let dqi = &mut dq.row_mut(i)[cols.clone()];
                for (d, &kk) in dqi.iter_mut().zip(kj) {
                    *d += ds * kk;
                }
                let dkj = &mut dk.row_mut(j)[cols.clone()];
                for (d, &qq) in dkj.iter_mut().zip(&qi) {
                    *d += ds * qq;
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Gated bidirectional attention with one query/key/value/output set shared by both directions.
#[derive(Clone, Debug)]
pub struct CausalAttention {
    /// Input projector per direction, indexed by [`Direction::index`].
    pub proj: [Linear; 2],
    pub gate: [Linear; 2],
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    /// Maps the concatenated branch outputs back to the model width.
    pub out: Linear,
    pub heads: usize,
    pub window: Option<usize>,
}

impl CausalAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        inner: usize,
        heads: usize,
        window: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || !inner.is_multiple_of(heads) {
            return Err(Error::Config(format!("attention width {inner} not divisible by {heads} heads")));
        }
        let proj = [
            Linear::new(store, &format!("{name}.proj_bwd"), dim, inner, true, rng),
            Linear::new(store, &format!("{name}.proj_fwd"), dim, inner, true, rng),
        ];
        let gate = [
            Linear::new(store, &format!("{name}.gate_bwd"), dim, inner, true, rng),
            Linear::new(store, &format!("{name}.gate_fwd"), dim, inner, true, rng),
        ];
        let query = Linear::new(store, &format!("{name}.query"), inner, inner, false, rng);
        let key = Linear::new(store, &format!("{name}.key"), inner, inner, false, rng);
        let value = Linear::new(store, &format!("{name}.value"), inner, inner, false, rng);
        let out = Linear::new(store, &format!("{name}.out"), 2 * inner, dim, true, rng);
        Ok(Self { proj, gate, query, key, value, out, heads, window })
    }

    pub fn inner_dim(&self) -> usize {
        self.query.out_dim
    }

    /// Gated output `U_d` of one direction branch. With `masked = false` the branch sees the whole
    /// (valid part of the) sequence, ignoring any window.
    pub fn branch<S: Real>(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        valid: usize,
        direction: Direction,
        masked: bool,
    ) -> Result<Var> {
        let len = tape.value(x).rows();
        if len == 0 {
            return Err(Error::EmptySequence);
        }
        let d = direction.index();
        let z = self.proj[d].forward(tape, x)?;
        let q = self.query.forward(tape, z)?;
        let k = self.key.forward(tape, z)?;
        let v = self.value.forward(tape, z)?;
        // a window is a mask too, so the unmasked branch sees every valid row
        let spans = if masked {
            visible_spans(len, valid, Some(direction), self.window)
        } else {
            visible_spans(len, valid, None, None)
        };
        let a = tape.attention(q, k, v, self.heads, spans)?;
        let g = self.gate[d].forward(tape, x)?;
        let g = tape.silu(g);
        tape.mul(a, g)
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, x: Var, valid: usize, context: Context) -> Result<Var> {
        let (bwd, fwd) = match context {
            Context::Bidirectional => (
                self.branch(tape, x, valid, Direction::Backward, true)?,
                self.branch(tape, x, valid, Direction::Forward, true)?,
            ),
            Context::PastOnly => {
                let b = self.branch(tape, x, valid, Direction::Backward, true)?;
                let rows = tape.value(x).rows();
                (b, tape.constant(Matrix::zeros(rows, self.inner_dim())))
            }
            Context::Symmetric => (
                self.branch(tape, x, valid, Direction::Backward, false)?,
                self.branch(tape, x, valid, Direction::Forward, false)?,
            ),
        };
        let cat = tape.concat(bwd, fwd)?;
        self.out.forward(tape, cat)
    }
}

/// Evaluates the bidirectional block on an unpadded sequence.
pub fn bidirectional_mhsa<S: Real>(x: &Matrix<S>, layer: &CausalAttention, store: &ParamStore<S>) -> Result<Matrix<S>> {
    if !x.is_finite() {
        return Err(Error::InvalidData("non-finite attention input".into()));
    }
    let mut tape = Tape::new(store);
    let xv = tape.constant(x.clone());
    let y = layer.forward(&mut tape, xv, x.rows(), Context::Bidirectional)?;
    Ok(tape.value(y).clone())
}
