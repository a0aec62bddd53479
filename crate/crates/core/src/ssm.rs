//! Selective state-space scan with input-dependent step, input and readout.
//!
//! Per channel `d` and state lane `n`:
//!
//! ```text
//! Ā[t,d,n] = exp(Δ[t,d] · A[d,n])          A = −exp(A_log) < 0
//! h[t,d,n] = Ā[t,d,n] · h[t−1,d,n] + Δ[t,d] · B[t,n] · x[t,d]
//! y[t,d]   = Σ_n C[t,n] · h[t,d,n] + D[d] · x[t,d]
//! ```
//!
//! The sequential scan is the reference. The chunked scan computes, per chunk,
//! the local scan from a zero state together with the cumulative decay, then
//! composes the `(decay, state)` pairs across chunks; this is the associative
//! form that lets chunks run in parallel.

use rayon::prelude::*;

use crate::attention::Direction;
use crate::error::{Error, Result};
use crate::layers::{uniform, Context, Linear};
use crate::rng::Rng;
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::{softplus, Matrix, Real};
use rand::Rng as _;

/// Zero-order hold on `A`, Euler on `B`: returns `(exp(Δ·A), Δ·B)` for one time step.
/// `a` is `D_inner×N`, `delta` has one entry per channel and `b` one per state lane.
pub fn discretize<S: Real>(delta: &[S], a: &Matrix<S>, b: &[S]) -> Result<(Matrix<S>, Matrix<S>)> {
    if delta.len() != a.rows() || b.len() != a.cols() {
        return Err(Error::Shape(format!("{} steps, A {:?}, {} inputs", delta.len(), a.shape(), b.len())));
    }
    if let Some(&bad) = delta.iter().find(|&&d| d <= S::zero() || d.is_nan()) {
        return Err(Error::InvalidStep(bad.f64()));
    }
    let abar = Matrix::from_fn(a.rows(), a.cols(), |d, n| (delta[d] * a.get(d, n)).exp());
    let bbar = Matrix::from_fn(a.rows(), a.cols(), |d, n| delta[d] * b[n]);
    Ok((abar, bbar))
}

/// Hidden states and decays saved for the backward pass, laid out `[t][d][n]`.
pub struct ScanCache<S> {
    pub h: Vec<S>,
    pub abar: Vec<S>,
    pub state: usize,
}

pub struct ScanGrads<S> {
    pub dx: Matrix<S>,
    pub ddelta: Matrix<S>,
    pub da_log: Matrix<S>,
    pub db: Matrix<S>,
    pub dc: Matrix<S>,
    pub dd: Matrix<S>,
}

fn check_scan_shapes<S: Real>(
    x: &Matrix<S>,
    delta: &Matrix<S>,
    a_log: &Matrix<S>,
    b: &Matrix<S>,
    c: &Matrix<S>,
    d: &Matrix<S>,
) -> Result<()> {
    let (t, di) = x.shape();
    let n = a_log.cols();
    if delta.shape() != (t, di) || a_log.rows() != di || b.shape() != (t, n) || c.shape() != (t, n) || d.shape() != (1, di)
    {
        return Err(Error::Shape(format!(
            "scan x {:?} delta {:?} A {:?} B {:?} C {:?} D {:?}",
            x.shape(),
            delta.shape(),
            a_log.shape(),
            b.shape(),
            c.shape(),
            d.shape()
        )));
    }
    Ok(())
}

/// Runs the recurrence. `chunk = None` (or a chunk covering the whole sequence) is the
/// sequential reference; smaller chunks use the composed form.
pub fn scan_forward<S: Real>(
    x: &Matrix<S>,
    delta: &Matrix<S>,
    a_log: &Matrix<S>,
    b: &Matrix<S>,
    c: &Matrix<S>,
    d: &Matrix<S>,
    chunk: Option<usize>,
) -> Result<(Matrix<S>, ScanCache<S>)> {
    check_scan_shapes(x, delta, a_log, b, c, d)?;
    let (t, di) = x.shape();
    let n = a_log.cols();
    let a: Vec<S> = a_log.as_slice().iter().map(|&v| -v.exp()).collect();
    let lane = di * n;
    let mut h = vec![S::zero(); t * lane];
    let mut abar = vec![S::zero(); t * lane];

    let chunk = chunk.unwrap_or(t).max(1);
    if chunk >= t {
        local_scan(x, delta, &a, b, 0, t, n, &mut h, &mut abar, None);
    } else {
        chunked_states(x, delta, &a, b, chunk, n, &mut h, &mut abar);
    }

    let mut y = Matrix::zeros(t, di);
    for ti in 0..t {
        let crow = c.row(ti);
        let xrow = x.row(ti);
        let yrow = y.row_mut(ti);
        for dd in 0..di {
            let hs = &h[ti * lane + dd * n..ti * lane + (dd + 1) * n];
            let mut acc = S::zero();
            for (cc, hh) in crow.iter().zip(hs) {
                acc += *cc * *hh;
            }
            yrow[dd] = acc + d.as_slice()[dd] * xrow[dd];
        }
    }
    Ok((y, ScanCache { h, abar, state: n }))
}

/// Scan of rows `start..end` from a zero state, writing states and decays into buffers that
/// start at row `start`. When `cum` is given it receives the running product of decays.
#[allow(clippy::too_many_arguments)]
fn local_scan<S: Real>(
    x: &Matrix<S>,
    delta: &Matrix<S>,
    a: &[S],
    b: &Matrix<S>,
    start: usize,
    end: usize,
    n: usize,
    h: &mut [S],
    abar: &mut [S],
    mut cum: Option<&mut [S]>,
) {
    let di = x.cols();
    let lane = di * n;
    for ti in start..end {
        let local = ti - start;
        let brow = b.row(ti);
        for dd in 0..di {
            let xd = x.get(ti, dd);
            let dl = delta.get(ti, dd);
            let base = local * lane + dd * n;
            for nn in 0..n {
                let ab = (dl * a[dd * n + nn]).exp();
                let u = dl * brow[nn] * xd;
                abar[base + nn] = ab;
                h[base + nn] = if local == 0 { u } else { ab * h[base - lane + nn] + u };
                if let Some(cum) = cum.as_deref_mut() {
                    cum[base + nn] = if local == 0 { ab } else { cum[base - lane + nn] * ab };
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn chunked_states<S: Real>(
    x: &Matrix<S>,
    delta: &Matrix<S>,
    a: &[S],
    b: &Matrix<S>,
    chunk: usize,
    n: usize,
    h: &mut [S],
    abar: &mut [S],
) {
    let (t, di) = x.shape();
    let lane = di * n;
    let mut cum = vec![S::zero(); t * lane];
    let parallel = t * lane >= 1 << 16;

    let local = |(k, ((hc, ac), cc)): (usize, ((&mut [S], &mut [S]), &mut [S]))| {
        let start = k * chunk;
        let end = (start + chunk).min(t);
        local_scan(x, delta, a, b, start, end, n, hc, ac, Some(cc));
    };
    let step = chunk * lane;
    if parallel {
        h.par_chunks_mut(step)
            .zip(abar.par_chunks_mut(step))
            .zip(cum.par_chunks_mut(step))
            .enumerate()
            .for_each(local);
    } else {
        h.chunks_mut(step).zip(abar.chunks_mut(step)).zip(cum.chunks_mut(step)).enumerate().for_each(local);
    }

    // Entry state of each chunk, composed left to right.
    let chunks = t.div_ceil(chunk);
    let mut entry = vec![S::zero(); chunks * lane];
    for k in 1..chunks {
        let last = (k * chunk - 1) * lane;
        for i in 0..lane {
            entry[k * lane + i] = h[last + i] + cum[last + i] * entry[(k - 1) * lane + i];
        }
    }

    let fix = |(k, (hc, cc)): (usize, (&mut [S], &[S]))| {
        if k == 0 {
            return;
        }
        let e = &entry[k * lane..(k + 1) * lane];
        for (row_h, row_c) in hc.chunks_mut(lane).zip(cc.chunks(lane)) {
            for i in 0..lane {
                row_h[i] += row_c[i] * e[i];
            }
        }
    };
    if parallel {
        h.par_chunks_mut(step).zip(cum.par_chunks(step)).enumerate().for_each(fix);
    } else {
        h.chunks_mut(step).zip(cum.chunks(step)).enumerate().for_each(fix);
    }
}

/// Backpropagation through time over the recurrence.
#[allow(clippy::too_many_arguments)]
pub fn scan_backward<S: Real>(
    x: &Matrix<S>,
    delta: &Matrix<S>,
    a_log: &Matrix<S>,
    b: &Matrix<S>,
    c: &Matrix<S>,
    d: &Matrix<S>,
    cache: &ScanCache<S>,
    dy: &Matrix<S>,
) -> ScanGrads<S> {
    let (t, di) = x.shape();
    let n = cache.state;
    let lane = di * n;
    let a: Vec<S> = a_log.as_slice().iter().map(|&v| -v.exp()).collect();
    let mut dx = Matrix::zeros(t, di);
    let mut ddelta = Matrix::zeros(t, di);
    let mut da = vec![S::zero(); lane];
    let mut db = Matrix::zeros(t, n);
    let mut dc = Matrix::zeros(t, n);
    let mut dd = Matrix::zeros(1, di);
    let mut carry = vec![S::zero(); lane];

    for ti in (0..t).rev() {
        let brow = b.row(ti).to_vec();
        let crow = c.row(ti).to_vec();
        for dch in 0..di {
            let xd = x.get(ti, dch);
            let dl = delta.get(ti, dch);
            let gy = dy.get(ti, dch);
            dd.as_mut_slice()[dch] += gy * xd;
            let mut dxd = gy * d.as_slice()[dch];
            let mut ddl = S::zero();
            let base = ti * lane + dch * n;
            for nn in 0..n {
                let h = cache.h[base + nn];
                dc.as_mut_slice()[ti * n + nn] += gy * h;
                let g = gy * crow[nn] + carry[dch * n + nn];
                let ab = cache.abar[base + nn];
                let hprev = if ti > 0 { cache.h[base - lane + nn] } else { S::zero() };
                let dab = g * hprev * ab;
                let av = a[dch * n + nn];
                ddl += dab * av + g * brow[nn] * xd;
                da[dch * n + nn] += dab * dl;
                db.as_mut_slice()[ti * n + nn] += g * dl * xd;
                dxd += g * dl * brow[nn];
                carry[dch * n + nn] = g * ab;
            }
            ddelta.as_mut_slice()[ti * di + dch] += ddl;
            dx.as_mut_slice()[ti * di + dch] += dxd;
        }
    }
    let da_log = Matrix::from_fn(di, n, |i, j| da[i * n + j] * a[i * n + j]);
    ScanGrads { dx, ddelta, da_log, db, dc, dd }
}

/// Plain-value parameters of the scan core, for use outside a tape.
#[derive(Clone, Debug)]
pub struct ScanWeights<S> {
    pub a_log: Matrix<S>,
    pub d_skip: Matrix<S>,
    /// `D_inner×D_inner` step projection and its `1×D_inner` bias.
    pub w_delta: Matrix<S>,
    pub b_delta: Matrix<S>,
    pub w_b: Matrix<S>,
    pub w_c: Matrix<S>,
}

impl<S: Real> ScanWeights<S> {
    fn projections(&self, x: &Matrix<S>) -> Result<(Matrix<S>, Matrix<S>, Matrix<S>)> {
        let mut delta = x.matmul(&self.w_delta)?;
        for i in 0..delta.rows() {
            for (v, &bias) in delta.row_mut(i).iter_mut().zip(self.b_delta.as_slice()) {
                *v = softplus(*v + bias);
            }
        }
        Ok((delta, x.matmul(&self.w_b)?, x.matmul(&self.w_c)?))
    }
}

pub fn selective_scan_sequential<S: Real>(x: &Matrix<S>, w: &ScanWeights<S>) -> Result<Matrix<S>> {
    let (delta, b, c) = w.projections(x)?;
    Ok(scan_forward(x, &delta, &w.a_log, &b, &c, &w.d_skip, None)?.0)
}

pub fn selective_scan_chunked<S: Real>(x: &Matrix<S>, w: &ScanWeights<S>, chunk_size: usize) -> Result<Matrix<S>> {
    if chunk_size == 0 {
        return Err(Error::Config("chunk size must be at least 1".into()));
    }
    let (delta, b, c) = w.projections(x)?;
    Ok(scan_forward(x, &delta, &w.a_log, &b, &c, &w.d_skip, Some(chunk_size))?.0)
}

/// Scan parameters shared by both directions of a block, plus the depthwise causal conv.
#[derive(Clone, Debug)]
pub struct SsmCore {
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub delta: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub state: usize,
    pub chunk: Option<usize>,
}

/// Inverse of softplus, for initializing the step bias.
fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmCore {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        inner: usize,
        state: usize,
        conv_width: usize,
        chunk: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if state == 0 || inner == 0 || conv_width == 0 {
            return Err(Error::Config("scan widths must be positive".into()));
        }
        // A spread log-uniformly over [−N, −1] along the state axis.
        let span = (state as f64).ln();
        let a_log = Matrix::from_fn(inner, state, |_, j| {
            let frac = if state > 1 { j as f64 / (state - 1) as f64 } else { 0.0 };
            S::of(span * frac)
        });
        let a_log = store.add(format!("{name}.a_log"), a_log, false);
        let d_skip = store.add(format!("{name}.d_skip"), Matrix::filled(1, inner, S::one()), false);
        let delta = Linear::new(store, &format!("{name}.delta"), inner, inner, true, rng);
        {
            let w = store.get_mut(delta.weight);
            w.scale(S::of(0.1));
        }
        let bias = Matrix::from_fn(1, inner, |_, _| {
            let dt = (rng.random_range(0.001f64.ln()..0.1f64.ln())).exp();
            S::of(inv_softplus(dt))
        });
        *store.get_mut(delta.bias.expect("delta bias")) = bias;
        let b_proj = Linear::new(store, &format!("{name}.b_proj"), inner, state, false, rng);
        let c_proj = Linear::new(store, &format!("{name}.c_proj"), inner, state, false, rng);
        let conv_w = store.add(
            format!("{name}.conv.weight"),
            uniform(conv_width, inner, 1.0 / (conv_width as f64).sqrt(), rng),
            true,
        );
        let conv_b = store.add(format!("{name}.conv.bias"), Matrix::zeros(1, inner), false);
        Ok(Self { a_log, d_skip, delta, b_proj, c_proj, conv_w, conv_b, state, chunk })
    }

    pub fn weights<S: Real>(&self, store: &ParamStore<S>) -> ScanWeights<S> {
        ScanWeights {
            a_log: store.get(self.a_log).clone(),
            d_skip: store.get(self.d_skip).clone(),
            w_delta: store.get(self.delta.weight).clone(),
            b_delta: store.get(self.delta.bias.expect("delta bias")).clone(),
            w_b: store.get(self.b_proj.weight).clone(),
            w_c: store.get(self.c_proj.weight).clone(),
        }
    }

    /// Conv, activation and scan of an already projected sequence, all causal in row order.
    pub fn scan_path<S: Real>(&self, tape: &mut Tape<S>, u: Var) -> Result<Var> {
        let w = tape.param(self.conv_w);
        let b = tape.param(self.conv_b);
        let conv = tape.causal_conv(u, w, b)?;
        let x = tape.silu(conv);
        let dpre = self.delta.forward(tape, x)?;
        let delta = tape.softplus(dpre);
        let bm = self.b_proj.forward(tape, x)?;
        let cm = self.c_proj.forward(tape, x)?;
        let a = tape.param(self.a_log);
        let d = tape.param(self.d_skip);
        tape.scan(x, delta, a, bm, cm, d, self.chunk)
    }
}

/// Decomposed bidirectional scan block: per-direction projector and gate around one shared core.
#[derive(Clone, Debug)]
pub struct CausalMamba {
    pub proj: [Linear; 2],
    pub gate: [Linear; 2],
    pub core: SsmCore,
    pub out: Linear,
}

impl CausalMamba {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        inner: usize,
        state: usize,
        conv_width: usize,
        chunk: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let proj = [
            Linear::new(store, &format!("{name}.proj_bwd"), dim, inner, true, rng),
            Linear::new(store, &format!("{name}.proj_fwd"), dim, inner, true, rng),
        ];
        let gate = [
            Linear::new(store, &format!("{name}.gate_bwd"), dim, inner, true, rng),
            Linear::new(store, &format!("{name}.gate_fwd"), dim, inner, true, rng),
        ];
        let core = SsmCore::new(store, &format!("{name}.core"), inner, state, conv_width, chunk, rng)?;
        let out = Linear::new(store, &format!("{name}.out"), 2 * inner, dim, true, rng);
        Ok(Self { proj, gate, core, out })
    }

    pub fn inner_dim(&self) -> usize {
        self.proj[0].out_dim
    }

    /// Gated output of one scan direction. The forward (future-only) direction reverses the valid
    /// rows, runs the same causal machinery and reverses back. `projector` selects which
    /// direction's projector/gate pair is used.
    pub fn branch<S: Real>(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        valid: usize,
        direction: Direction,
        projector: Direction,
    ) -> Result<Var> {
        if tape.value(x).rows() == 0 {
            return Err(Error::EmptySequence);
        }
        let p = projector.index();
        let mut u = self.proj[p].forward(tape, x)?;
        if direction == Direction::Forward {
            u = tape.reverse(u, valid);
        }
        let mut y = self.core.scan_path(tape, u)?;
        if direction == Direction::Forward {
            y = tape.reverse(y, valid);
        }
        let g = self.gate[p].forward(tape, x)?;
        let g = tape.silu(g);
        tape.mul(y, g)
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, x: Var, valid: usize, context: Context) -> Result<Var> {
        let (bwd, fwd) = match context {
            Context::Bidirectional => (
                self.branch(tape, x, valid, Direction::Backward, Direction::Backward)?,
                self.branch(tape, x, valid, Direction::Forward, Direction::Forward)?,
            ),
            Context::PastOnly => {
                let b = self.branch(tape, x, valid, Direction::Backward, Direction::Backward)?;
                let rows = tape.value(x).rows();
                (b, tape.constant(Matrix::zeros(rows, self.inner_dim())))
            }
            Context::Symmetric => (
                self.branch(tape, x, valid, Direction::Backward, Direction::Backward)?,
                self.branch(tape, x, valid, Direction::Forward, Direction::Backward)?,
            ),
        };
        let cat = tape.concat(bwd, fwd)?;
        self.out.forward(tape, cat)
    }
}

/// Evaluates the bidirectional scan block on an unpadded sequence.
pub fn causal_mamba_block<S: Real>(x: &Matrix<S>, layer: &CausalMamba, store: &ParamStore<S>) -> Result<Matrix<S>> {
    if !x.is_finite() {
        return Err(Error::InvalidData("non-finite scan input".into()));
    }
    let mut tape = Tape::new(store);
    let xv = tape.constant(x.clone());
    let y = layer.forward(&mut tape, xv, x.rows(), Context::Bidirectional)?;
    Ok(tape.value(y).clone())
}
