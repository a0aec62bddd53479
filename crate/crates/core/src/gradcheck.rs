//! Central finite-difference checks of the analytic gradients at 64-bit.

use std::fmt;

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::attention::{visible_spans, Direction};
use crate::data::SegmentAnnotation;
use crate::encoder::{Branches, EncoderConfig, HybridBlock};
use crate::error::{Error, Result};
use crate::head::{assign_targets, loss_on_tape, AssignmentConfig, Grid};
use crate::layers::Context;
use crate::model::{Detector, ModelSpec};
use crate::rng::{seeded, Rng};
use crate::tape::{ClassTarget, ParamStore, Tape, Var};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Identity,
    /// Every elementary tape operation on its own.
    Primitives,
    Attention,
    Scan,
    Block,
    Model,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Identity,
        Component::Primitives,
        Component::Attention,
        Component::Scan,
        Component::Block,
        Component::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Identity => "identity",
            Component::Primitives => "primitives",
            Component::Attention => "attention",
            Component::Scan => "scan",
            Component::Block => "block",
            Component::Model => "model",
        }
    }
}

impl std::str::FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck component {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorError {
    pub name: String,
    pub size: usize,
    /// `max(‖analytic‖∞, ‖numeric‖∞)`.
    pub grad_scale: f64,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub component: String,
    pub eps: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorError>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} (eps {:e}, tol {:e}): {}", self.component, self.eps, self.tolerance, if self.passed { "PASS" } else { "FAIL" })?;
        for t in &self.tensors {
            writeln!(f, "  {:<40} {:>6}  |g| {:.3e}  err {:.3e}", t.name, t.size, t.grad_scale, t.max_rel_error)?;
        }
        Ok(())
    }
}

/// Compares the tape gradient of `build` with central differences for every coordinate of
/// every tensor in `store`. The error of a tensor is `max|a − n| / max(‖a‖∞, ‖n‖∞, 1e-10)`.
pub fn finite_difference(
    store: &mut ParamStore<f64>,
    build: &dyn Fn(&mut Tape<f64>) -> Result<Var>,
    eps: f64,
) -> Result<Vec<TensorError>> {
    let grads = {
        let mut tape = Tape::new(store);
        let loss = build(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new(store);
        let loss = build(&mut tape)?;
        Ok(tape.value(loss).get(0, 0))
    };
    let mut out = Vec::new();
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).len();
        let mut numeric = Vec::with_capacity(n);
        for k in 0..n {
            let orig = store.get(id).as_slice()[k];
            store.get_mut(id).as_mut_slice()[k] = orig + eps;
            let fp = eval(store)?;
            store.get_mut(id).as_mut_slice()[k] = orig - eps;
            let fm = eval(store)?;
            store.get_mut(id).as_mut_slice()[k] = orig;
            numeric.push((fp - fm) / (2.0 * eps));
        }
        let zeros = vec![0.0; n];
        let analytic = grads.get(id).map_or(&zeros[..], |g| g.as_slice());
        let scale = analytic.iter().chain(&numeric).fold(1e-10f64, |m, v| m.max(v.abs()));
        let diff = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        out.push(TensorError { name: store.entry(id).name.clone(), size: n, grad_scale: scale, max_rel_error: diff / scale });
    }
    Ok(out)
}

fn randn(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| scale * Distribution::<f64>::sample(&StandardNormal, rng))
}

/// `Σ out ⊙ r` for a fixed random `r`, reducing any output to a scalar.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let (rows, cols) = tape.value(out).shape();
    let r = tape.constant(randn(rows, cols, 1.0, &mut seeded(seed)));
    let prod = tape.mul(out, r)?;
    let left = tape.constant(Matrix::filled(1, rows, 1.0));
    let right = tape.constant(Matrix::filled(cols, 1, 1.0));
    let s = tape.matmul(left, prod)?;
    tape.matmul(s, right)
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One `(name, input shapes, body)` case per elementary operation; every body output is reduced
/// by a random weighted sum unless it is already a scalar loss.
fn primitive_cases(len: usize, seed: u64) -> Vec<(&'static str, Vec<(usize, usize)>, Build)> {
    let t = len.max(3);
    let valid = t - t / 3;
    let reduce = move |tape: &mut Tape<f64>, v: Var| weighted_sum(tape, v, seed ^ 5);
    vec![
        ("matmul", vec![(t, 3), (3, 4)], Box::new(move |tp, v| {
            let y = tp.matmul(v[0], v[1])?;
            reduce(tp, y)
        })),
        ("add_bias", vec![(t, 3), (1, 3)], Box::new(move |tp, v| {
            let y = tp.add_bias(v[0], v[1])?;
            let y = tp.mul(y, y)?;
            reduce(tp, y)
        })),
        ("add_mul", vec![(t, 3), (t, 3)], Box::new(move |tp, v| {
            let y = tp.add(v[0], v[1])?;
            let y = tp.mul(y, v[0])?;
            reduce(tp, y)
        })),
        ("scale", vec![(t, 3)], Box::new(move |tp, v| {
            let y = tp.scale(v[0], -1.7);
            let y = tp.scale_cols(y, vec![0.0, 2.0, -0.5])?;
            let y = tp.mul(y, v[0])?;
            reduce(tp, y)
        })),
        ("relu", vec![(t, 3)], Box::new(move |tp, v| {
            let y = tp.relu(v[0]);
            reduce(tp, y)
        })),
        ("silu", vec![(t, 3)], Box::new(move |tp, v| {
            let y = tp.silu(v[0]);
            reduce(tp, y)
        })),
        ("softplus", vec![(t, 3)], Box::new(move |tp, v| {
            let y = tp.softplus(v[0]);
            reduce(tp, y)
        })),
        ("concat_reverse", vec![(t, 2), (t, 3)], Box::new(move |tp, v| {
            let y = tp.concat(v[0], v[1])?;
            let y = tp.reverse(y, valid);
            let y = tp.mul(y, y)?;
            reduce(tp, y)
        })),
        ("layer_norm", vec![(t, 4), (1, 4), (1, 4)], Box::new(move |tp, v| {
            let y = tp.layer_norm(v[0], v[1], v[2])?;
            reduce(tp, y)
        })),
        ("causal_conv", vec![(t, 3), (4, 3), (1, 3)], Box::new(move |tp, v| {
            let y = tp.causal_conv(v[0], v[1], v[2])?;
            reduce(tp, y)
        })),
        ("downsample", vec![(t, 3), (3, 3), (1, 3)], Box::new(move |tp, v| {
            let y = tp.downsample(v[0], v[1], v[2], valid)?;
            reduce(tp, y)
        })),
        ("max_pool", vec![(t, 3)], Box::new(move |tp, v| {
            let y = tp.max_pool(v[0], valid);
            reduce(tp, y)
        })),
        ("focal", vec![(t, 3)], Box::new(move |tp, v| {
            let targets = (0..t)
                .map(|i| match i % 4 {
                    0 => ClassTarget::Class(i % 3),
                    1 => ClassTarget::Ignore,
                    _ => ClassTarget::Background,
                })
                .collect();
            tp.focal_sum(v[0], targets)
        })),
        ("diou", vec![(t, 2)], Box::new(move |tp, v| {
            let d = tp.softplus(v[0]);
            let targets = (0..t).step_by(2).map(|i| (i, [0.5 + i as f64 * 0.3, 1.5 - i as f64 * 0.1])).collect();
            tp.diou_sum(d, targets)
        })),
    ]
}

/// Moves initialized weights to a generic point with scan steps of order one. At init the steps
/// are tiny and the decay rates get gradients below the finite-difference noise floor.
fn generic_point(store: &mut ParamStore<f64>, rng: &mut Rng) {
    for e in store.entries_mut() {
        let step_bias = e.name.ends_with("delta.bias");
        for v in e.value.as_mut_slice() {
            let noise = 0.3 * Distribution::<f64>::sample(&StandardNormal, rng);
            *v = if step_bias { 0.5 + noise } else { *v + noise };
        }
    }
}

/// Runs the finite-difference check of one component on tiny shapes; `len` is the sequence
/// length.
pub fn grad_check(component: Component, len: usize, eps: f64, tol: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = seeded(seed);
    let mut store = ParamStore::<f64>::new();
    let tensors = match component {
        Component::Identity => {
            // small integers keep x ± eps and the sum exact for power-of-two eps
            let x = store.add("input", Matrix::from_fn(len, 3, |i, j| ((i * 3 + j) % 7) as f64 - 3.0), false);
            let build = move |tape: &mut Tape<f64>| -> Result<Var> {
                let v = tape.param(x);
                let (rows, cols) = tape.value(v).shape();
                let left = tape.constant(Matrix::filled(1, rows, 1.0));
                let right = tape.constant(Matrix::filled(cols, 1, 1.0));
                let s = tape.matmul(left, v)?;
                tape.matmul(s, right)
            };
            finite_difference(&mut store, &build, eps)?
        }
        Component::Primitives => {
            let mut all = Vec::new();
            for (op, shapes, body) in primitive_cases(len, seed) {
                let mut local = ParamStore::<f64>::new();
                let ids: Vec<_> =
                    shapes.iter().enumerate().map(|(i, &(r, c))| local.add(format!("{op}/{i}"), randn(r, c, 1.0, &mut rng), false)).collect();
                let build = move |tape: &mut Tape<f64>| -> Result<Var> {
                    let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
                    body(tape, &vars)
                };
                all.extend(finite_difference(&mut local, &build, eps)?);
            }
            all
        }
        Component::Attention => {
            let (heads, dh) = (2, 3);
            let q = store.add("q", randn(len, heads * dh, 1.0, &mut rng), false);
            let k = store.add("k", randn(len, heads * dh, 1.0, &mut rng), false);
            let v = store.add("v", randn(len, heads * dh, 1.0, &mut rng), false);
            let build = move |tape: &mut Tape<f64>| -> Result<Var> {
                let (qv, kv, vv) = (tape.param(q), tape.param(k), tape.param(v));
                let back = tape.attention(qv, kv, vv, heads, visible_spans(len, len, Some(Direction::Backward), None))?;
                let fwd = tape.attention(qv, kv, vv, heads, visible_spans(len, len, Some(Direction::Forward), Some(2)))?;
                let both = tape.concat(back, fwd)?;
                weighted_sum(tape, both, seed ^ 1)
            };
            finite_difference(&mut store, &build, eps)?
        }
        Component::Scan => {
            let (di, n) = (2, 2);
            let x = store.add("x", randn(len, di, 1.0, &mut rng), false);
            let dr = store.add("delta_raw", randn(len, di, 0.5, &mut rng), false);
            let a = store.add("a_log", randn(di, n, 0.3, &mut rng), false);
            let b = store.add("b", randn(len, n, 1.0, &mut rng), false);
            let c = store.add("c", randn(len, n, 1.0, &mut rng), false);
            let d = store.add("d", randn(1, di, 1.0, &mut rng), false);
            let build = move |tape: &mut Tape<f64>| -> Result<Var> {
                let raw = tape.param(dr);
                let delta = tape.softplus(raw);
                let (xv, av, bv, cv, dv) = (tape.param(x), tape.param(a), tape.param(b), tape.param(c), tape.param(d));
                let seq = tape.scan(xv, delta, av, bv, cv, dv, None)?;
                let chunked = tape.scan(xv, delta, av, bv, cv, dv, Some(3))?;
                let both = tape.concat(seq, chunked)?;
                weighted_sum(tape, both, seed ^ 2)
            };
            finite_difference(&mut store, &build, eps)?
        }
        Component::Block => {
            let cfg = EncoderConfig { dim: 4, heads: 2, ssm_state: 2, conv_width: 3, ..Default::default() };
            let block = HybridBlock::new(&mut store, "block", &cfg, &mut rng)?;
            generic_point(&mut store, &mut rng);
            let x = store.add("input", randn(len, 4, 1.0, &mut rng), false);
            let build = move |tape: &mut Tape<f64>| -> Result<Var> {
                let xv = tape.param(x);
                let y = block.forward(tape, xv, len, Branches::Hybrid, Context::Bidirectional)?;
                weighted_sum(tape, y, seed ^ 3)
            };
            finite_difference(&mut store, &build, eps)?
        }
        Component::Model => {
            let spec = ModelSpec {
                input_dim: 3,
                num_classes: 2,
                encoder: EncoderConfig { levels: 2, dim: 4, heads: 2, ssm_state: 2, conv_width: 3, ..Default::default() },
            };
            let (det, s) = Detector::new::<f64>(&spec, seed)?;
            store = s;
            generic_point(&mut store, &mut rng);
            let x = store.add("input", randn(len, 3, 1.0, &mut rng), false);
            let dur = len as f64;
            let gts = [
                SegmentAnnotation { start_s: 0.1 * dur, end_s: 0.45 * dur, label_id: 0 },
                SegmentAnnotation { start_s: 0.5 * dur, end_s: 0.95 * dur, label_id: 1 },
            ];
            let grid = Grid::new(len, 2, 1.0, dur)?;
            let targets = assign_targets(&grid, &gts, &AssignmentConfig::default());
            let norm = targets.num_positives() as f64;
            let build = move |tape: &mut Tape<f64>| -> Result<Var> {
                let xv = tape.param(x);
                let outs = det.forward(tape, xv, len, None)?;
                // The prior-initialized classifier leaves background gradients near 1e-8, below
                // the finite-difference noise floor, so a random probe of every output is added.
                let mut loss = loss_on_tape(tape, &outs, &targets, 1.0, norm)?;
                for (l, o) in outs.iter().enumerate() {
                    let p = weighted_sum(tape, o.logits, seed ^ (16 + 2 * l as u64))?;
                    let q = weighted_sum(tape, o.distances, seed ^ (17 + 2 * l as u64))?;
                    loss = tape.add(loss, p)?;
                    loss = tape.add(loss, q)?;
                }
                Ok(loss)
            };
            finite_difference(&mut store, &build, eps)?
        }
    };
    let passed = tensors.iter().all(|t| t.max_rel_error <= tol);
    Ok(GradCheckReport { component: component.name().to_string(), eps, tolerance: tol, tensors, passed })
}
