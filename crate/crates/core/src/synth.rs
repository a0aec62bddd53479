//! Seeded synthetic feature streams with cued action boundaries.
//!
//! Every action of class `c` carries the class motif. The snippets right before an onset
//! carry a shared "cause" cue and the snippets right after an offset carry an "effect" cue,
//! so each boundary is announced from outside the action.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{write_features, AnnotationDB, FeatureSequence, SegmentAnnotation, Subset, VideoAnnotations};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, Rng};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Total videos, validation included.
    pub num_videos: usize,
    /// Videos tagged `val`; the rest are `train`.
    pub val_videos: usize,
    /// Snippets per video.
    pub length: usize,
    /// Feature channels.
    pub dim: usize,
    pub num_classes: usize,
    pub min_actions: usize,
    pub max_actions: usize,
    /// Action length range in snippets, inclusive.
    pub min_len: usize,
    pub max_len: usize,
    /// Cue length in snippets.
    pub cue_len: usize,
    pub noise_std: f64,
    pub feature_fps: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_videos: 250,
            val_videos: 50,
            length: 256,
            dim: 32,
            num_classes: 5,
            min_actions: 1,
            max_actions: 4,
            min_len: 8,
            max_len: 48,
            cue_len: 3,
            noise_std: 0.5,
            feature_fps: 4.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.num_videos == 0 || self.length == 0 || self.dim == 0 || self.num_classes == 0 {
            return bad("counts must be positive");
        }
        if self.min_actions == 0 || self.min_actions > self.max_actions {
            return bad("need 1 <= min_actions <= max_actions");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        if self.cue_len == 0 || self.cue_len >= self.min_len {
            return bad("need 1 <= cue_len < min_len");
        }
        if self.max_len + 2 * self.cue_len > self.length {
            return bad("longest action plus cues exceeds the video length");
        }
        if self.val_videos > self.num_videos {
            return bad("val_videos exceeds num_videos");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative");
        }
        if !(self.feature_fps > 0.0 && self.feature_fps.is_finite()) {
            return bad("feature_fps must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub sequences: Vec<FeatureSequence>,
    pub annotations: AnnotationDB,
}

impl SynthDataset {
    /// Writes `features.json`, one `.f32` payload per video and `annotations.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_features(&dir.join("features.json"), &self.sequences)?;
        self.annotations.save(&dir.join("annotations.json"))
    }

    pub fn sequence(&self, video_id: &str) -> Option<&FeatureSequence> {
        self.sequences.iter().find(|s| s.video_id == video_id)
    }
}

fn sign_vector(dim: usize, rng: &mut Rng) -> Vec<f32> {
    (0..dim).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

pub fn video_id(index: usize) -> String {
    format!("video_{index:04}")
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut motif_rng = seeded(derive_seed(cfg.seed, &[0]));
    let motifs: Vec<Vec<f32>> = (0..cfg.num_classes).map(|_| sign_vector(cfg.dim, &mut motif_rng)).collect();
    let cause = sign_vector(cfg.dim, &mut motif_rng);
    let effect = sign_vector(cfg.dim, &mut motif_rng);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;

    let t = cfg.length;
    let duration = t as f64 / cfg.feature_fps;
    let mut sequences = Vec::with_capacity(cfg.num_videos);
    let mut db = AnnotationDB {
        num_classes: cfg.num_classes,
        classes: (0..cfg.num_classes).map(|c| format!("class_{c}")).collect(),
        ..Default::default()
    };
    for v in 0..cfg.num_videos {
        let id = video_id(v);
        let mut rng = seeded(derive_seed(cfg.seed, &[1, v as u64]));
        let count = rng.random_range(cfg.min_actions..=cfg.max_actions);
        // (start, len, class), occupied region includes both cues
        let mut placed: Vec<(usize, usize, usize)> = Vec::with_capacity(count);
        for _ in 0..count {
            let mut ok = false;
            for _ in 0..100 {
                let len = rng.random_range(cfg.min_len..=cfg.max_len);
                let start = rng.random_range(cfg.cue_len..=t - len - cfg.cue_len);
                let (lo, hi) = (start - cfg.cue_len, start + len + cfg.cue_len);
                let clash = placed.iter().any(|&(s, l, _)| lo < s + l + cfg.cue_len && s - cfg.cue_len < hi);
                if !clash {
                    placed.push((start, len, rng.random_range(0..cfg.num_classes)));
                    ok = true;
                    break;
                }
            }
            if !ok {
                return Err(Error::PlacementFailure { video: id, actions: count });
            }
        }
        placed.sort_unstable();

        let mut x = Matrix::<f32>::zeros(t, cfg.dim);
        if cfg.noise_std > 0.0 {
            for value in x.as_mut_slice() {
                *value = noise.sample(&mut rng) as f32;
            }
        }
        let mut add = |rows: std::ops::Range<usize>, pattern: &[f32]| {
            for i in rows {
                for (value, p) in x.row_mut(i).iter_mut().zip(pattern) {
                    *value += p;
                }
            }
        };
        let mut segments = Vec::with_capacity(placed.len());
        for &(start, len, class) in &placed {
            add(start..start + len, &motifs[class]);
            add(start - cfg.cue_len..start, &cause);
            add(start + len..start + len + cfg.cue_len, &effect);
            segments.push(SegmentAnnotation {
                start_s: start as f64 / cfg.feature_fps,
                end_s: (start + len) as f64 / cfg.feature_fps,
                label_id: class,
            });
        }
        let subset = if v < cfg.num_videos - cfg.val_videos { Subset::Train } else { Subset::Val };
        db.videos.insert(id.clone(), VideoAnnotations { duration_s: duration, subset, segments });
        sequences.push(FeatureSequence::new(id, x, cfg.feature_fps, duration)?);
    }
    db.validate()?;
    Ok(SynthDataset { sequences, annotations: db })
}
