//! Anchor-free classification and regression heads, point assignment, losses and decoding.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Proposal, SegmentAnnotation};
use crate::encoder::{level_lengths, PyramidLevel};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::rng::Rng;
use crate::tape::{diou_term, focal_term, ClassTarget, ParamStore, Tape, Var};
use crate::tensor::{sigmoid, Matrix, Real};

/// Initial foreground probability of every class logit.
const PRIOR_PROB: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelShape {
    pub len: usize,
    pub stride: usize,
}

/// Time coordinates of every point of every pyramid level of one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub levels: Vec<LevelShape>,
    pub feature_fps: f64,
    pub duration_s: f64,
}

impl Grid {
    pub fn new(len: usize, levels: usize, feature_fps: f64, duration_s: f64) -> Result<Self> {
        let levels = level_lengths(len, levels)?
            .into_iter()
            .enumerate()
            .map(|(l, len)| LevelShape { len, stride: 1 << l })
            .collect();
        Ok(Self { levels, feature_fps, duration_s })
    }

    /// Seconds per snippet.
    pub fn snippet_dt(&self) -> f64 {
        1.0 / self.feature_fps
    }

    /// Time in seconds of point `i` at `level`: the centre of its first snippet.
    pub fn point_time(&self, level: usize, i: usize) -> f64 {
        (i as f64 * self.levels[level].stride as f64 + 0.5) / self.feature_fps
    }

    pub fn num_points(&self) -> usize {
        self.levels.iter().map(|l| l.len).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignmentConfig {
    /// Centre sampling radius, in strides of the point's level.
    pub center_radius: f64,
    /// Upper bound (snippets) of the first level's regression range; every further level
    /// doubles it and the last level is unbounded.
    pub base_range: f64,
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        Self { center_radius: 1.5, base_range: 4.0 }
    }
}

impl AssignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.center_radius > 0.0 && self.base_range > 0.0) {
            return Err(Error::Config("center_radius and base_range must be positive".into()));
        }
        Ok(())
    }

    /// Regression ranges `[lo, hi)` in snippets; they partition `[0, ∞)`.
    pub fn ranges(&self, levels: usize) -> Vec<(f64, f64)> {
        (0..levels)
            .map(|l| {
                let lo = if l == 0 { 0.0 } else { self.base_range * (1u64 << (l - 1)) as f64 };
                let hi = if l + 1 == levels { f64::INFINITY } else { self.base_range * (1u64 << l) as f64 };
                (lo, hi)
            })
            .collect()
    }
}

/// Targets of one pyramid level.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LevelTargets {
    pub classes: Vec<ClassTarget>,
    /// `(point, [left, right])` for positives, distances in strides.
    pub distances: Vec<(usize, [f64; 2])>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Targets {
    pub levels: Vec<LevelTargets>,
}

impl Targets {
    pub fn num_positives(&self) -> usize {
        self.levels.iter().map(|l| l.distances.len()).sum()
    }
}

/// Assigns every grid point to at most one ground truth segment.
pub fn assign_targets(grid: &Grid, segments: &[SegmentAnnotation], acfg: &AssignmentConfig) -> Targets {
    let ranges = acfg.ranges(grid.levels.len());
    let dt = grid.snippet_dt();
    let mut out = Targets::default();
    for (l, shape) in grid.levels.iter().enumerate() {
        let stride = shape.stride as f64;
        let (lo, hi) = ranges[l];
        let mut level = LevelTargets { classes: vec![ClassTarget::Background; shape.len], distances: Vec::new() };
        for i in 0..shape.len {
            let c = grid.point_time(l, i);
            let mut best: Option<&SegmentAnnotation> = None;
            for g in segments {
                if c < g.start_s || c > g.end_s {
                    continue;
                }
                let center = 0.5 * (g.start_s + g.end_s);
                if (c - center).abs() > acfg.center_radius * stride * dt {
                    continue;
                }
                let reach = (c - g.start_s).max(g.end_s - c) / dt;
                if reach < lo || reach >= hi {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some(b) => {
                        let (lg, lb) = (g.end_s - g.start_s, b.end_s - b.start_s);
                        (lg, g.start_s, g.end_s, g.label_id) < (lb, b.start_s, b.end_s, b.label_id)
                    }
                };
                if better {
                    best = Some(g);
                }
            }
            if let Some(g) = best {
                level.classes[i] = ClassTarget::Class(g.label_id);
                level.distances.push((i, [(c - g.start_s) / dt / stride, (g.end_s - c) / dt / stride]));
            }
        }
        out.levels.push(level);
    }
    out
}

/// Sigmoid focal loss over all points and classes divided by `max(1, #positives)`.
pub fn focal_loss(logits: &Matrix<f64>, targets: &[ClassTarget]) -> f64 {
    let mut total = 0.0;
    let mut positives = 0usize;
    for (i, t) in targets.iter().enumerate() {
        if *t == ClassTarget::Ignore {
            continue;
        }
        positives += matches!(t, ClassTarget::Class(_)) as usize;
        for (j, &x) in logits.row(i).iter().enumerate() {
            total += focal_term(x, *t == ClassTarget::Class(j)).0;
        }
    }
    total / positives.max(1) as f64
}

/// Mean 1-D distance-IoU loss over positives; `0` without positives.
pub fn diou_loss(pred: &[[f64; 2]], target: &[[f64; 2]]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(target).map(|(p, t)| diou_term(*p, *t).0).sum::<f64>() / pred.len() as f64
}

pub fn total_loss(focal: f64, diou: f64, lambda_reg: f64) -> f64 {
    focal + lambda_reg * diou
}

/// Classification and regression towers shared by every level.
#[derive(Clone, Debug)]
pub struct Heads {
    pub cls: [Linear; 2],
    pub reg: [Linear; 2],
    pub num_classes: usize,
}

/// Head outputs of one level on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LevelOutput {
    pub logits: Var,
    pub distances: Var,
    pub stride: usize,
    pub valid: usize,
}

impl Heads {
    pub fn new<S: Real>(store: &mut ParamStore<S>, dim: usize, num_classes: usize, rng: &mut Rng) -> Self {
        let cls = [
            Linear::new(store, "head.cls.0", dim, dim, true, rng),
            Linear::new(store, "head.cls.1", dim, num_classes, true, rng),
        ];
        let prior = S::of(-((1.0 - PRIOR_PROB) / PRIOR_PROB).ln());
        if let Some(b) = cls[1].bias {
            *store.get_mut(b) = Matrix::filled(1, num_classes, prior);
        }
        let reg = [
            Linear::new(store, "head.reg.0", dim, dim, true, rng),
            Linear::new(store, "head.reg.1", dim, 2, true, rng),
        ];
        Self { cls, reg, num_classes }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, level: &PyramidLevel) -> Result<LevelOutput> {
        let h = self.cls[0].forward(tape, level.features)?;
        let h = tape.relu(h);
        let logits = self.cls[1].forward(tape, h)?;
        let r = self.reg[0].forward(tape, level.features)?;
        let r = tape.relu(r);
        let r = self.reg[1].forward(tape, r)?;
        let distances = tape.softplus(r);
        Ok(LevelOutput { logits, distances, stride: level.stride, valid: level.valid })
    }
}

/// Records `(focal + λ·diou) / normalizer` on the tape, restricted to each level's valid rows.
pub fn loss_on_tape<S: Real>(
    tape: &mut Tape<S>,
    outputs: &[LevelOutput],
    targets: &Targets,
    lambda_reg: f64,
    normalizer: f64,
) -> Result<Var> {
    if outputs.len() != targets.levels.len() {
        return Err(Error::Shape(format!("{} output levels, {} target levels", outputs.len(), targets.levels.len())));
    }
    let mut total: Option<Var> = None;
    for (out, tgt) in outputs.iter().zip(&targets.levels) {
        let rows = tape.value(out.logits).rows();
        let mut classes = vec![ClassTarget::Ignore; rows];
        classes[..tgt.classes.len().min(rows)].copy_from_slice(&tgt.classes[..tgt.classes.len().min(rows)]);
        for c in classes.iter_mut().skip(out.valid) {
            *c = ClassTarget::Ignore;
        }
        let f = tape.focal_sum(out.logits, classes)?;
        let mut term = f;
        if lambda_reg != 0.0 {
            let dist: Vec<(usize, [S; 2])> = tgt
                .distances
                .iter()
                .filter(|(i, _)| *i < out.valid)
                .map(|&(i, [a, b])| (i, [S::of(a), S::of(b)]))
                .collect();
            let d = tape.diou_sum(out.distances, dist)?;
            let d = tape.scale(d, S::of(lambda_reg));
            term = tape.add(f, d)?;
        }
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    let total = total.ok_or_else(|| Error::Shape("no pyramid levels".into()))?;
    Ok(tape.scale(total, S::of(1.0 / normalizer.max(1.0))))
}

/// Raw head outputs of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct RawLevel {
    pub stride: usize,
    /// `T_l×C` class logits.
    pub logits: Matrix<f32>,
    /// `T_l×2` non-negative (left, right) distances in strides.
    pub distances: Matrix<f32>,
}

/// Undecoded detector output for one video; the exchange unit for seed ensembling.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDetectorOutput {
    pub video_id: String,
    pub duration_s: f64,
    pub feature_fps: f64,
    pub num_classes: usize,
    pub levels: Vec<RawLevel>,
}

impl RawDetectorOutput {
    pub fn grid(&self) -> Grid {
        Grid {
            levels: self.levels.iter().map(|l| LevelShape { len: l.logits.rows(), stride: l.stride }).collect(),
            feature_fps: self.feature_fps,
            duration_s: self.duration_s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (l, lv) in self.levels.iter().enumerate() {
            if lv.logits.cols() != self.num_classes || lv.distances.shape() != (lv.logits.rows(), 2) {
                return Err(Error::Shape(format!("{}: level {l} has inconsistent shapes", self.video_id)));
            }
            if lv.distances.as_slice().iter().any(|&d| !(d >= 0.0)) {
                return Err(Error::InvalidData(format!("{}: negative distance at level {l}", self.video_id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub pre_nms_topk: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { score_threshold: 0.001, pre_nms_topk: 2000 }
    }
}

/// `[c − left·scale, c + right·scale]` clipped into `[0, duration]`.
pub fn segment_around(c: f64, left: f64, right: f64, scale: f64, duration: f64) -> (f64, f64) {
    ((c - left * scale).clamp(0.0, duration), (c + right * scale).clamp(0.0, duration))
}

pub(crate) fn point_segment(grid: &Grid, level: usize, i: usize, left: f64, right: f64) -> (f64, f64) {
    let scale = grid.levels[level].stride as f64 * grid.snippet_dt();
    segment_around(grid.point_time(level, i), left, right, scale, grid.duration_s)
}

/// Orders by descending score; equal scores keep their original relative order.
pub(crate) fn sort_by_score(props: &mut [Proposal]) {
    props.sort_by(|a, b| b.score.total_cmp(&a.score));
}

pub fn decode(raw: &RawDetectorOutput, cfg: &DecodeConfig) -> Vec<Proposal> {
    let grid = raw.grid();
    let mut out = Vec::new();
    for (l, lv) in raw.levels.iter().enumerate() {
        for i in 0..lv.logits.rows() {
            let (start, end) =
                point_segment(&grid, l, i, lv.distances.get(i, 0) as f64, lv.distances.get(i, 1) as f64);
            if start >= end {
                continue;
            }
            for (c, &logit) in lv.logits.row(i).iter().enumerate() {
                let score = sigmoid(logit as f64);
                if score > cfg.score_threshold {
                    out.push(Proposal { start_s: start, end_s: end, score, label_id: c });
                }
            }
        }
    }
    sort_by_score(&mut out);
    out.truncate(cfg.pre_nms_topk);
    out
}

const RAW_MAGIC: &[u8; 8] = b"CTADRAW1";

#[derive(Serialize, Deserialize)]
struct RawHeader {
    video_id: String,
    duration_s: f64,
    feature_fps: f64,
    num_classes: usize,
    levels: Vec<LevelShape>,
}

fn put_f32s(buf: &mut Vec<u8>, m: &Matrix<f32>) {
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes raw outputs of any number of videos into one file.
pub fn write_raw(path: &Path, raws: &[RawDetectorOutput]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&(raws.len() as u64).to_le_bytes());
    for raw in raws {
        raw.validate()?;
        let header = RawHeader {
            video_id: raw.video_id.clone(),
            duration_s: raw.duration_s,
            feature_fps: raw.feature_fps,
            num_classes: raw.num_classes,
            levels: raw.grid().levels,
        };
        let text = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
        buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
        buf.extend_from_slice(&text);
        for lv in &raw.levels {
            put_f32s(&mut buf, &lv.logits);
            put_f32s(&mut buf, &lv.distances);
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::InvalidData("truncated raw file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix<f32>> {
        let bytes = self.take(rows * cols * 4)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Matrix::from_vec(rows, cols, data)
    }
}

pub fn read_raw(path: &Path) -> Result<Vec<RawDetectorOutput>> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != RAW_MAGIC {
        return Err(Error::InvalidData(format!("{}: not a raw output file", path.display())));
    }
    let count = cur.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = cur.u64()? as usize;
        let header: RawHeader = serde_json::from_slice(cur.take(n)?).map_err(|e| Error::json(path, e))?;
        let mut levels = Vec::with_capacity(header.levels.len());
        for shape in &header.levels {
            let logits = cur.matrix(shape.len, header.num_classes)?;
            let distances = cur.matrix(shape.len, 2)?;
            levels.push(RawLevel { stride: shape.stride, logits, distances });
        }
        let raw = RawDetectorOutput {
            video_id: header.video_id,
            duration_s: header.duration_s,
            feature_fps: header.feature_fps,
            num_classes: header.num_classes,
            levels,
        };
        raw.validate()?;
        out.push(raw);
    }
    if cur.pos != bytes.len() {
        return Err(Error::InvalidData(format!("{}: trailing bytes", path.display())));
    }
    Ok(out)
}
