//! Optimizer, schedule, weight averaging, checkpoints and the training loop.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSequence, SegmentAnnotation};
use crate::encoder::channel_dropout_mask;
use crate::error::{Error, Result};
use crate::head::{assign_targets, loss_on_tape, AssignmentConfig, Grid, Targets};
use crate::model::{Detector, ModelSpec};
use crate::rng::{derive_seed, seeded};
use crate::tape::{Gradients, ParamStore, Tape};
use crate::tensor::Matrix;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Videos per optimizer step.
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    pub lambda_reg: f64,
    pub seed: u64,
    /// Longer training videos are randomly cropped to this many snippets.
    pub max_seq_len: Option<usize>,
    pub ema_decay: f64,
    /// Global gradient norm cap; `0` disables clipping.
    pub clip_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            base_lr: 1e-3,
            weight_decay: 0.05,
            warmup_epochs: 1.0,
            lambda_reg: 1.0,
            seed: 0,
            max_seq_len: None,
            ema_decay: 0.999,
            clip_grad_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if !(self.base_lr >= 0.0 && self.weight_decay >= 0.0 && self.warmup_epochs >= 0.0 && self.lambda_reg >= 0.0) {
            return bad("learning rate, weight decay, warmup and lambda_reg must be non-negative");
        }
        if !(self.clip_grad_norm >= 0.0) {
            return bad("clip_grad_norm must be non-negative");
        }
        if self.max_seq_len == Some(0) {
            return bad("max_seq_len must be positive");
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Matrix<f32>>,
    pub v: Vec<Matrix<f32>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros = || store.entries().iter().map(|e| Matrix::zeros(e.value.rows(), e.value.cols())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>, lr: f64, weight_decay: f64) {
        self.t += 1;
        let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let lr32 = lr as f32;
        let decay = (1.0 - lr * weight_decay) as f32;
        for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let apply_decay = store.entry(id).decay && weight_decay != 0.0;
            let w = store.get_mut(id).as_mut_slice();
            if apply_decay {
                w.iter_mut().for_each(|x| *x *= decay);
            }
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (self.m[k].as_mut_slice(), self.v[k].as_mut_slice());
            for (((w, &g), m), v) in w.iter_mut().zip(g.as_slice()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m as f64 / c1;
                let vhat = *v as f64 / c2;
                *w -= lr32 * (mhat / (vhat.sqrt() + ADAM_EPS)) as f32;
            }
        }
    }
}

/// Decay used at update `t` (1-based): `min(decay, (1 + t) / (10 + t))`, so early averages
/// are not dominated by the initial weights.
pub fn ema_decay_at(decay: f64, t: usize) -> f64 {
    decay.min((1.0 + t as f64) / (10.0 + t as f64))
}

/// Exponential moving average `e ← d·e + (1−d)·w` of every parameter, accumulated at 64-bit
/// so a halted run's average reaches the raw weights instead of stalling one rounding step away.
pub fn ema_update(ema: &mut ParamStore<f64>, params: &ParamStore<f32>, decay: f64) {
    for (e, p) in ema.entries_mut().iter_mut().zip(params.entries()) {
        for (a, &b) in e.value.as_mut_slice().iter_mut().zip(p.value.as_slice()) {
            *a = decay * *a + (1.0 - decay) * b as f64;
        }
    }
}

const CKPT_MAGIC: &[u8; 8] = b"CTADCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    version: u32,
    spec: ModelSpec,
    config: serde_json::Value,
    step: u64,
    adam_t: u64,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    /// Snapshot of the run configuration.
    pub config: serde_json::Value,
    pub step: u64,
    pub params: Vec<(String, Matrix<f32>)>,
    pub ema: Vec<(String, Matrix<f32>)>,
    pub adam: AdamW,
}

fn named(store: &ParamStore<f32>) -> Vec<(String, Matrix<f32>)> {
    store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect()
}

fn fill(store: &mut ParamStore<f32>, tensors: &[(String, Matrix<f32>)], what: &str) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!("{what}: {} tensors for {} parameters", tensors.len(), store.len())));
    }
    for (name, value) in tensors {
        let id = store.find(name).ok_or_else(|| Error::Checkpoint(format!("{what}: unknown tensor {name}")))?;
        if store.get(id).shape() != value.shape() {
            return Err(Error::Checkpoint(format!("{what}: tensor {name} has shape {:?}", value.shape())));
        }
        *store.get_mut(id) = value.clone();
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(
        spec: &ModelSpec,
        config: serde_json::Value,
        step: u64,
        params: &ParamStore<f32>,
        ema: &ParamStore<f64>,
        adam: &AdamW,
    ) -> Self {
        Self { spec: spec.clone(), config, step, params: named(params), ema: named(&ema.cast()), adam: adam.clone() }
    }

    /// Rebuilds the detector with raw (`ema = false`) or averaged weights.
    pub fn detector(&self, ema: bool) -> Result<(Detector, ParamStore<f32>)> {
        let (det, mut store) = Detector::new::<f32>(&self.spec, 0)?;
        fill(&mut store, if ema { &self.ema } else { &self.params }, if ema { "ema" } else { "model" })?;
        Ok((det, store))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CkptHeader {
            version: CKPT_VERSION,
            spec: self.spec.clone(),
            config: self.config.clone(),
            step: self.step,
            adam_t: self.adam.t,
        };
        let text = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
        buf.extend_from_slice(&text);
        let groups: [(&str, Vec<(String, &Matrix<f32>)>); 4] = [
            ("model/", self.params.iter().map(|(n, m)| (n.clone(), m)).collect()),
            ("ema/", self.ema.iter().map(|(n, m)| (n.clone(), m)).collect()),
            ("adam_m/", self.params.iter().zip(&self.adam.m).map(|((n, _), m)| (n.clone(), m)).collect()),
            ("adam_v/", self.params.iter().zip(&self.adam.v).map(|((n, _), m)| (n.clone(), m)).collect()),
        ];
        let count: usize = groups.iter().map(|g| g.1.len()).sum();
        buf.extend_from_slice(&(count as u64).to_le_bytes());
        for (prefix, tensors) in &groups {
            for (name, m) in tensors {
                let full = format!("{prefix}{name}");
                buf.extend_from_slice(&(full.len() as u32).to_le_bytes());
                buf.extend_from_slice(full.as_bytes());
                buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
                buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
                for v in m.as_slice() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated"))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(8)? != CKPT_MAGIC {
            return Err(corrupt("not a checkpoint"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != CKPT_VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let header: CkptHeader = serde_json::from_slice(take(n)?).map_err(|e| Error::json(path, e))?;
        let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let mut ckpt = Checkpoint {
            spec: header.spec,
            config: header.config,
            step: header.step,
            params: Vec::new(),
            ema: Vec::new(),
            adam: AdamW { m: Vec::new(), v: Vec::new(), t: header.adam_t },
        };
        for _ in 0..count {
            let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let rows = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let cols = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let data = take(rows * cols * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let m = Matrix::from_vec(rows, cols, data)?;
            let (prefix, rest) = name.split_once('/').ok_or_else(|| corrupt("tensor without group"))?;
            match prefix {
                "model" => ckpt.params.push((rest.to_string(), m)),
                "ema" => ckpt.ema.push((rest.to_string(), m)),
                "adam_m" => ckpt.adam.m.push(m),
                "adam_v" => ckpt.adam.v.push(m),
                other => return Err(corrupt(&format!("unknown tensor group {other}"))),
            }
        }
        if pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        if ckpt.adam.m.len() != ckpt.params.len() || ckpt.adam.v.len() != ckpt.params.len() {
            return Err(corrupt("optimizer moments do not match the parameters"));
        }
        Ok(ckpt)
    }
}

/// One training video with its ground truth.
#[derive(Clone, Debug)]
pub struct TrainVideo {
    pub sequence: FeatureSequence,
    pub segments: Vec<SegmentAnnotation>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub detector: Detector,
    pub params: ParamStore<f32>,
    pub ema: ParamStore<f64>,
    /// Mean step loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

struct Prepared {
    features: Matrix<f32>,
    targets: Targets,
}

/// Crops `video` to `max_len` snippets starting at a random snippet.
fn crop(video: &TrainVideo, max_len: usize, rng: &mut crate::rng::Rng) -> (Matrix<f32>, Vec<SegmentAnnotation>, f64) {
    let t = video.sequence.len();
    if t <= max_len {
        return (video.sequence.features.clone(), video.segments.clone(), video.sequence.duration_s);
    }
    let fps = video.sequence.feature_fps;
    let start = rng.random_range(0..=t - max_len);
    let (lo, hi) = (start as f64 / fps, (start + max_len) as f64 / fps);
    let segments = video
        .segments
        .iter()
        .filter_map(|s| {
            let (a, b) = (s.start_s.max(lo) - lo, s.end_s.min(hi) - lo);
            (a < b).then_some(SegmentAnnotation { start_s: a, end_s: b, label_id: s.label_id })
        })
        .collect();
    (video.sequence.features.slice_rows(start, start + max_len), segments, max_len as f64 / fps)
}

/// Trains a fresh detector. `config` is stored verbatim in the checkpoint.
pub fn train(
    videos: &[TrainVideo],
    spec: &ModelSpec,
    tcfg: &TrainConfig,
    acfg: &AssignmentConfig,
    config: serde_json::Value,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    acfg.validate()?;
    if videos.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let (detector, mut params) = Detector::new::<f32>(spec, derive_seed(tcfg.seed, &[0]))?;
    let mut ema = params.cast::<f64>();
    let mut adam = AdamW::new(&params);
    let steps_per_epoch = videos.len().div_ceil(tcfg.batch_size);
    let schedule = Schedule {
        base_lr: tcfg.base_lr,
        warmup_steps: (tcfg.warmup_epochs * steps_per_epoch as f64).round() as usize,
        total_steps: tcfg.epochs * steps_per_epoch,
    };
    let levels = spec.encoder.levels;
    let p = spec.encoder.channel_dropout_p;

    let fixed: Option<Vec<Prepared>> = match tcfg.max_seq_len {
        Some(m) if videos.iter().any(|v| v.sequence.len() > m) => None,
        _ => Some(
            videos
                .iter()
                .map(|v| {
                    let s = &v.sequence;
                    let grid = Grid::new(s.len(), levels, s.feature_fps, s.duration_s)?;
                    Ok(Prepared { features: s.features.clone(), targets: assign_targets(&grid, &v.segments, acfg) })
                })
                .collect::<Result<_>>()?,
        ),
    };

    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..videos.len()).collect();
        order.shuffle(&mut seeded(derive_seed(tcfg.seed, &[1, epoch as u64])));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(tcfg.batch_size) {
            let cropped: Vec<Prepared>;
            let prepared: Vec<&Prepared> = match &fixed {
                Some(all) => batch.iter().map(|&i| &all[i]).collect(),
                None => {
                    let mut rng = seeded(derive_seed(tcfg.seed, &[3, step as u64]));
                    cropped = batch
                        .iter()
                        .map(|&i| {
                            let v = &videos[i];
                            let (features, segments, duration) = crop(v, tcfg.max_seq_len.unwrap_or(usize::MAX), &mut rng);
                            let grid = Grid::new(features.rows(), levels, v.sequence.feature_fps, duration)?;
                            Ok(Prepared { features, targets: assign_targets(&grid, &segments, acfg) })
                        })
                        .collect::<Result<_>>()?;
                    cropped.iter().collect()
                }
            };
            let normalizer = prepared.iter().map(|p| p.targets.num_positives()).sum::<usize>() as f64;
            let results: Vec<(f64, Gradients<f32>)> = prepared
                .par_iter()
                .enumerate()
                .map(|(slot, prep)| {
                    let mut rng = seeded(derive_seed(tcfg.seed, &[2, step as u64, slot as u64]));
                    let mask = (p > 0.0).then(|| channel_dropout_mask::<f32>(prep.features.cols(), p, &mut rng));
                    let mut tape = Tape::new(&params);
                    let x = tape.constant(prep.features.clone());
                    let outputs = detector.forward(&mut tape, x, prep.features.rows(), mask)?;
                    let loss = loss_on_tape(&mut tape, &outputs, &prep.targets, tcfg.lambda_reg, normalizer)?;
                    let value = tape.value(loss).get(0, 0) as f64;
                    if !value.is_finite() {
                        return Err(Error::DivergedAtStep { step, loss: value });
                    }
                    Ok((value, tape.backward(loss)?))
                })
                .collect::<Result<_>>()?;
            let mut grads = Gradients::zeros_like(&params);
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                grads.accumulate(g);
            }
            if !loss.is_finite() {
                return Err(Error::DivergedAtStep { step, loss });
            }
            if tcfg.clip_grad_norm > 0.0 {
                let norm = grads.global_norm() as f64;
                if norm > tcfg.clip_grad_norm {
                    grads.scale((tcfg.clip_grad_norm / norm) as f32);
                }
            }
            adam.step(&mut params, &grads, schedule.lr_at(step), tcfg.weight_decay);
            ema_update(&mut ema, &params, ema_decay_at(tcfg.ema_decay, step + 1));
            epoch_loss += loss;
            step += 1;
        }
        let mean = epoch_loss / steps_per_epoch as f64;
        log::info!("epoch {:>3}  loss {:.5}  lr {:.2e}", epoch + 1, mean, schedule.lr_at(step));
        epoch_losses.push(mean);
    }
    let checkpoint = Checkpoint::new(spec, config, step as u64, &params, &ema, &adam);
    Ok(TrainOutcome { checkpoint, detector, params, ema, epoch_losses })
}
