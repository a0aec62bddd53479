#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeMap;

use causaltad::attention::{CausalAttention, Direction};
use causaltad::data::{AnnotationDB, Predictions, Proposal, SegmentAnnotation, Subset, VideoAnnotations};
use causaltad::encoder::{level_lengths, EncoderConfig};
use causaltad::head::{RawDetectorOutput, RawLevel};
use causaltad::model::{Detector, ModelSpec};
use causaltad::rng::{seeded, Rng};
use causaltad::ssm::{CausalMamba, ScanWeights};
use causaltad::tape::{ParamStore, Tape, Var};
use causaltad::tensor::{softplus, Matrix, Real};
use rand::seq::SliceRandom;
use rand::Rng as _;

pub const CASES: u64 = 100;

pub fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix<f32> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0f32..2.0))
}

pub fn rows_equal(a: &Matrix<f32>, b: &Matrix<f32>, rows: impl Iterator<Item = usize>) -> bool {
    rows.into_iter().all(|i| a.row(i).iter().zip(b.row(i)).all(|(x, y)| x.to_bits() == y.to_bits()))
}

pub fn run(store: &ParamStore<f32>, x: &Matrix<f32>, f: &dyn Fn(&mut Tape<f32>, Var) -> Var) -> Matrix<f32> {
    let mut tape = Tape::new(store);
    let xv = tape.constant(x.clone());
    let y = f(&mut tape, xv);
    tape.value(y).clone()
}

pub fn attention(store: &mut ParamStore<f32>, dim: usize, rng: &mut Rng) -> CausalAttention {
    let window = if rng.random_bool(0.3) { Some(rng.random_range(1..6)) } else { None };
    CausalAttention::new(store, "attn", dim, dim, 2, window, rng).unwrap()
}

pub fn mamba(store: &mut ParamStore<f32>, dim: usize, rng: &mut Rng) -> CausalMamba {
    let chunk = if rng.random_bool(0.5) { Some(rng.random_range(1..8)) } else { None };
    CausalMamba::new(store, "ssm", dim, 2 * dim, 3, 4, chunk, rng).unwrap()
}

/// Perturbs one row and checks that the rows on the protected side are bit-identical.
pub fn with_layer<L>(
    make: fn(&mut ParamStore<f32>, usize, &mut Rng) -> L,
    apply: fn(&L, &mut Tape<f32>, Var, usize) -> Var,
    seed: u64,
    direction: Direction,
) {
    for case in 0..CASES {
        let mut rng = seeded(seed * 1000 + case);
        let dim = [4, 8][rng.random_range(0..2)];
        let len = rng.random_range(2..=24);
        let mut store = ParamStore::new();
        let layer = make(&mut store, dim, &mut rng);
        let x = random(len, dim, &mut rng);
        let p = rng.random_range(0..len);
        let mut x2 = x.clone();
        for v in x2.row_mut(p) {
            *v += rng.random_range(0.5f32..3.0);
        }
        let f = |t: &mut Tape<f32>, v: Var| apply(&layer, t, v, len);
        let (a, b) = (run(&store, &x, &f), run(&store, &x2, &f));
        let protected: Vec<usize> = match direction {
            Direction::Backward => (0..p).collect(),
            Direction::Forward => (p + 1..len).collect(),
        };
        assert!(rows_equal(&a, &b, protected.into_iter()), "case {case}: len {len}, perturbed {p}");
        assert!(!rows_equal(&a, &b, std::iter::once(p)), "case {case}: perturbed row did not change");
    }
}

/// Appends random padding rows and checks that the real rows are unchanged bit for bit.
pub fn check_padding<L>(make: fn(&mut ParamStore<f32>, usize, &mut Rng) -> L, apply: fn(&L, &mut Tape<f32>, Var, usize) -> Var, seed: u64) {
    for case in 0..CASES {
        let mut rng = seeded(seed * 1000 + case);
        let dim = [4, 8][rng.random_range(0..2)];
        let valid = rng.random_range(1..=20);
        let pad = rng.random_range(1..=8);
        let mut store = ParamStore::new();
        let layer = make(&mut store, dim, &mut rng);
        let x = random(valid, dim, &mut rng);
        let padded = Matrix::from_fn(valid + pad, dim, |i, j| if i < valid { x.get(i, j) } else { rng.random_range(-50.0f32..50.0) });
        let a = run(&store, &x, &|t, v| apply(&layer, t, v, valid));
        let b = run(&store, &padded, &|t, v| apply(&layer, t, v, valid));
        assert!(rows_equal(&a, &b, 0..valid), "case {case}: valid {valid}, pad {pad}");
    }
}

/// Padding appended to the detector input never changes the real rows of any level.
pub fn check_pyramid_padding(seed: u64) {
    for case in 0..CASES {
        let mut rng = seeded(seed + case);
        let levels = rng.random_range(1..=3);
        let valid = rng.random_range(1usize << (levels - 1)..=24);
        let pad = rng.random_range(1..=8);
        let spec = ModelSpec {
            input_dim: 3,
            num_classes: 2,
            encoder: EncoderConfig { levels, dim: 4, heads: 2, ssm_state: 2, ..Default::default() },
        };
        let (det, store) = Detector::new::<f32>(&spec, case).unwrap();
        let x = random(valid, 3, &mut rng);
        let padded = Matrix::from_fn(valid + pad, 3, |i, j| if i < valid { x.get(i, j) } else { rng.random_range(-50.0f32..50.0) });
        let outputs = |input: &Matrix<f32>| {
            let mut tape = Tape::new(&store);
            let xv = tape.constant(input.clone());
            let outs = det.forward(&mut tape, xv, valid, None).unwrap();
            outs.iter()
                .map(|o| (o.valid, tape.value(o.logits).clone(), tape.value(o.distances).clone()))
                .collect::<Vec<_>>()
        };
        for (l, (a, b)) in outputs(&x).into_iter().zip(outputs(&padded)).enumerate() {
            assert_eq!(a.0, b.0);
            assert!(rows_equal(&a.1, &b.1, 0..a.0), "case {case} level {l}: logits differ");
            assert!(rows_equal(&a.2, &b.2, 0..a.0), "case {case} level {l}: distances differ");
        }
    }
}

pub fn iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    if hi <= lo {
        return 0.0;
    }
    let inter = hi - lo;
    inter / ((a.1 - a.0) + (b.1 - b.0) - inter)
}

pub struct Instance {
    pub gt: AnnotationDB,
    pub preds: Predictions,
}

pub fn random_instance(rng: &mut Rng) -> Instance {
    let num_classes = rng.random_range(1..=3);
    let mut videos = BTreeMap::new();
    let mut preds = Predictions::new();
    for v in 0..rng.random_range(1..=4) {
        let id = format!("v{v}");
        let duration = 100.0;
        let mut segments = Vec::new();
        for _ in 0..rng.random_range(0..=5) {
            let s = rng.random_range(0.0..80.0);
            let len = rng.random_range(2.0..20.0);
            segments.push(SegmentAnnotation { start_s: s, end_s: s + len, label_id: rng.random_range(0..num_classes) });
        }
        let mut ps = Vec::new();
        for g in &segments {
            for _ in 0..rng.random_range(0..=3) {
                let js = g.start_s + rng.random_range(-3.0..3.0);
                let je = g.end_s + rng.random_range(-3.0..3.0);
                if js < je {
                    let label = if rng.random_bool(0.85) { g.label_id } else { rng.random_range(0..num_classes) };
                    ps.push(Proposal { start_s: js, end_s: je, score: rng.random_range(0.0..1.0), label_id: label });
                }
            }
        }
        for _ in 0..rng.random_range(0..=6) {
            let s = rng.random_range(0.0..90.0);
            ps.push(Proposal { start_s: s, end_s: s + rng.random_range(1.0..15.0), score: rng.random_range(0.0..1.0), label_id: rng.random_range(0..num_classes) });
        }
        ps.shuffle(rng);
        preds.insert(id.clone(), ps);
        videos.insert(id, VideoAnnotations { duration_s: duration, subset: Subset::Val, segments });
    }
    let gt = AnnotationDB {
        num_classes,
        classes: (0..num_classes).map(|c| format!("c{c}")).collect(),
        videos,
        clip_warnings: 0,
    };
    Instance { gt, preds }
}

/// One prediction flattened with its video.
#[derive(Clone)]
pub struct Flat {
    pub video: String,
    pub p: Proposal,
}

pub fn ranked(mut v: Vec<Flat>) -> Vec<Flat> {
    v.sort_by(|a, b| {
        b.p.score.partial_cmp(&a.p.score).unwrap().then(a.p.start_s.partial_cmp(&b.p.start_s).unwrap()).then(a.video.cmp(&b.video))
    });
    v
}

/// Hit flags of a greedy match, recomputing candidate lists from scratch for every prediction.
pub fn brute_hits(preds: &[Flat], gts: &[(String, SegmentAnnotation)], tau: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    let mut hits = Vec::new();
    for f in preds {
        let cands: Vec<(usize, f64)> = gts
            .iter()
            .enumerate()
            .filter(|(k, (v, _))| !used[*k] && *v == f.video)
            .map(|(k, (_, g))| (k, iou((f.p.start_s, f.p.end_s), (g.start_s, g.end_s))))
            .filter(|&(_, o)| o >= tau)
            .collect();
        let best = cands.iter().fold(None::<(usize, f64)>, |acc, &(k, o)| match acc {
            Some((_, bo)) if bo >= o => acc,
            _ => Some((k, o)),
        });
        if let Some((k, _)) = best {
            used[k] = true;
        }
        hits.push(best.is_some());
    }
    hits
}

pub fn brute_ap(preds: &[Flat], gts: &[(String, SegmentAnnotation)], tau: f64) -> f64 {
    let hits = brute_hits(&ranked(preds.to_vec()), gts, tau);
    let mut sum = 0.0;
    for r in 0..hits.len() {
        if hits[r] {
            let tp_upto = hits[..=r].iter().filter(|h| **h).count();
            sum += tp_upto as f64 / (r + 1) as f64;
        }
    }
    sum / gts.len() as f64
}

pub fn class_lists(inst: &Instance, c: usize) -> (Vec<Flat>, Vec<(String, SegmentAnnotation)>) {
    let preds = inst
        .preds
        .iter()
        .flat_map(|(v, ps)| ps.iter().filter(|p| p.label_id == c).map(|p| Flat { video: v.clone(), p: *p }))
        .collect();
    let gts = inst
        .gt
        .videos
        .iter()
        .flat_map(|(v, a)| a.segments.iter().filter(|g| g.label_id == c).map(|g| (v.clone(), *g)))
        .collect();
    (preds, gts)
}

pub fn brute_map(inst: &Instance, tau: f64) -> f64 {
    let aps: Vec<f64> = (0..inst.gt.num_classes)
        .filter_map(|c| {
            let (p, g) = class_lists(inst, c);
            (!g.is_empty()).then(|| brute_ap(&p, &g, tau))
        })
        .collect();
    aps.iter().sum::<f64>() / aps.len() as f64
}

pub fn brute_recall(inst: &Instance, k: usize, tau: f64) -> f64 {
    let (mut hits, mut total) = (0, 0);
    for c in 0..inst.gt.num_classes {
        let (p, g) = class_lists(inst, c);
        for video in inst.gt.videos.keys() {
            let gs: Vec<_> = g.iter().filter(|(v, _)| v == video).cloned().collect();
            if gs.is_empty() {
                continue;
            }
            let mut ps = ranked(p.iter().filter(|f| &f.video == video).cloned().collect());
            ps.truncate(k * gs.len());
            hits += brute_hits(&ps, &gs, tau).iter().filter(|h| **h).count();
            total += gs.len();
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Classic greedy hard NMS: scan in score order, drop every later proposal overlapping a kept one.
pub fn brute_hard_nms(props: &[Proposal], thr: f64, class_aware: bool) -> Vec<Proposal> {
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| props[b].score.partial_cmp(&props[a].score).unwrap().then(a.cmp(&b)));
    let mut alive = vec![true; props.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if !alive[i] {
            continue;
        }
        kept.push(props[i]);
        for &j in &order[pos + 1..] {
            let same = !class_aware || props[j].label_id == props[i].label_id;
            if same && iou((props[i].start_s, props[i].end_s), (props[j].start_s, props[j].end_s)) > thr {
                alive[j] = false;
            }
        }
    }
    kept
}

pub fn key(p: &Proposal) -> (u64, u64, u64, usize) {
    (p.start_s.to_bits(), p.end_s.to_bits(), p.score.to_bits(), p.label_id)
}

pub fn random64(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

pub fn scan_weights(di: usize, n: usize, rng: &mut Rng) -> ScanWeights<f64> {
    ScanWeights {
        a_log: random64(di, n, -1.0, 1.5, rng),
        d_skip: random64(1, di, -1.0, 1.0, rng),
        w_delta: random64(di, di, -0.5, 0.5, rng),
        b_delta: random64(1, di, -2.0, 0.0, rng),
        w_b: random64(di, n, -1.0, 1.0, rng),
        w_c: random64(di, n, -1.0, 1.0, rng),
    }
}

pub fn cast(w: &ScanWeights<f64>) -> ScanWeights<f32> {
    ScanWeights {
        a_log: w.a_log.cast(),
        d_skip: w.d_skip.cast(),
        w_delta: w.w_delta.cast(),
        b_delta: w.b_delta.cast(),
        w_b: w.w_b.cast(),
        w_c: w.w_c.cast(),
    }
}

pub fn rel_error<S: Real>(a: &Matrix<S>, b: &Matrix<S>) -> f64 {
    let scale = a.max_abs().f64().max(b.max_abs().f64()).max(1e-10);
    a.max_abs_diff(b).f64() / scale
}

/// Direct transcription of the recurrence with an explicit state array.
pub fn naive_scan(x: &Matrix<f64>, w: &ScanWeights<f64>) -> Matrix<f64> {
    let (t, di) = x.shape();
    let n = w.a_log.cols();
    let proj = |m: &Matrix<f64>, ti: usize, col: usize| (0..di).map(|k| x.get(ti, k) * m.get(k, col)).sum::<f64>();
    let mut h = vec![vec![0.0; n]; di];
    let mut y = Matrix::zeros(t, di);
    for ti in 0..t {
        for d in 0..di {
            let delta = softplus(proj(&w.w_delta, ti, d) + w.b_delta.get(0, d));
            let mut out = w.d_skip.get(0, d) * x.get(ti, d);
            for (s, hs) in h[d].iter_mut().enumerate() {
                let a = -w.a_log.get(d, s).exp();
                *hs = (delta * a).exp() * *hs + delta * proj(&w.w_b, ti, s) * x.get(ti, d);
                out += proj(&w.w_c, ti, s) * *hs;
            }
            y.set(ti, d, out);
        }
    }
    y
}

pub fn random_raw(seed: u64, len: usize, levels: usize, classes: usize) -> RawDetectorOutput {
    let mut rng = seeded(seed);
    let lens = level_lengths(len, levels).unwrap();
    RawDetectorOutput {
        video_id: "v".into(),
        duration_s: len as f64 / 2.0,
        feature_fps: 2.0,
        num_classes: classes,
        levels: lens
            .iter()
            .enumerate()
            .map(|(l, &n)| RawLevel {
                stride: 1 << l,
                logits: Matrix::from_fn(n, classes, |_, _| rng.random_range(-6.0f32..3.0)),
                distances: Matrix::from_fn(n, 2, |_, _| rng.random_range(0.0f32..6.0)),
            })
            .collect(),
    }
}

pub fn same_bits(a: &RawDetectorOutput, b: &RawDetectorOutput) -> bool {
    a.levels.iter().zip(&b.levels).all(|(x, y)| {
        x.logits.as_slice().iter().zip(y.logits.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits())
            && x.distances.as_slice().iter().zip(y.distances.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits())
    })
}
