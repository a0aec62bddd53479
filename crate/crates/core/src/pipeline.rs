//! End-to-end helpers: load a split, train, infer, post-process, evaluate, ablate.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{load_annotations, write_json, load_features_from, AnnotationDB, FeatureManifest, FeatureSequence, Predictions, Subset};
use crate::encoder::Branches;
use crate::error::{Error, Result};
use crate::eval::{detection_map, EvalReport};
use crate::head::RawDetectorOutput;
use crate::layers::Context;
use crate::model::{Detector, ModelSpec};
use crate::postprocess::postprocess_video;
use crate::synth::SynthDataset;
use crate::tape::ParamStore;
use crate::train::{train, TrainOutcome, TrainVideo};

/// Features and ground truth of one subset.
#[derive(Clone, Debug)]
pub struct Split {
    pub sequences: Vec<FeatureSequence>,
    pub annotations: AnnotationDB,
}

impl Split {
    pub fn from_synth(ds: &SynthDataset, subset: Subset) -> Self {
        let annotations = ds.annotations.subset(subset);
        let sequences = ds.sequences.iter().filter(|s| annotations.videos.contains_key(&s.video_id)).cloned().collect();
        Self { sequences, annotations }
    }

    pub fn load(manifest: &Path, annotations: &Path, subset: Subset) -> Result<Self> {
        let db = load_annotations(annotations)?.subset(subset);
        let man = FeatureManifest::load(manifest)?;
        let dir = manifest.parent().unwrap_or(Path::new(""));
        let sequences = db.videos.keys().map(|vid| load_features_from(&man, dir, vid)).collect::<Result<Vec<_>>>()?;
        Ok(Self { sequences, annotations: db })
    }

    pub fn train_videos(&self) -> Vec<TrainVideo> {
        self.sequences
            .iter()
            .map(|s| TrainVideo {
                sequence: s.clone(),
                segments: self.annotations.videos.get(&s.video_id).map(|v| v.segments.clone()).unwrap_or_default(),
            })
            .collect()
    }

    pub fn input_dim(&self) -> Result<usize> {
        self.sequences.first().map(FeatureSequence::dim).ok_or_else(|| Error::Config("split has no videos".into()))
    }
}

pub fn model_spec(cfg: &RunConfig, input_dim: usize, num_classes: usize) -> ModelSpec {
    ModelSpec { input_dim, num_classes, encoder: cfg.model.clone() }
}

pub fn train_split(cfg: &RunConfig, split: &Split) -> Result<TrainOutcome> {
    let spec = model_spec(cfg, split.input_dim()?, split.annotations.num_classes);
    train(&split.train_videos(), &spec, &cfg.train, &cfg.assign, cfg.to_json())
}

/// Raw outputs of every sequence, in input order.
pub fn infer_all(det: &Detector, store: &ParamStore<f32>, sequences: &[FeatureSequence]) -> Result<Vec<RawDetectorOutput>> {
    sequences.par_iter().map(|s| det.infer(store, s)).collect()
}

pub fn predictions_from_raws(cfg: &RunConfig, raws: &[RawDetectorOutput]) -> Predictions {
    let per: Vec<_> = raws.par_iter().map(|r| (r.video_id.clone(), postprocess_video(r, &cfg.decode, &cfg.nms))).collect();
    per.into_iter().collect()
}

pub fn evaluate(cfg: &RunConfig, preds: &Predictions, gt: &AnnotationDB) -> Result<EvalReport> {
    detection_map(preds, gt, &cfg.eval.thresholds, &cfg.eval.recall)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub branches: Branches,
    pub context: Context,
    pub label: String,
    /// Average mAP per training seed.
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub thresholds: Vec<f64>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn row(&self, branches: Branches, context: Context) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.branches == branches && r.context == context)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<36}", "variant");
        for seed in &self.seeds {
            let _ = write!(s, "{:>10}", format!("seed {seed}"));
        }
        let _ = writeln!(s, "{:>10}", "mean");
        for r in &self.rows {
            let _ = write!(s, "{:<36}", r.label);
            for v in &r.per_seed {
                let _ = write!(s, "{:>10.2}", 100.0 * v);
            }
            let _ = writeln!(s, "{:>10.2}", 100.0 * r.mean);
        }
        s
    }
}

/// Trains and evaluates every branch × context variant for every seed.
pub fn run_ablation(
    cfg: &RunConfig,
    train: &Split,
    val: &Split,
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for branches in Branches::ALL {
        for context in Context::ALL {
            let mut per_seed = Vec::with_capacity(cfg.ablation.seeds.len());
            for &seed in &cfg.ablation.seeds {
                let mut run = cfg.clone();
                run.model.branches = branches;
                run.model.context = context;
                run.train.seed = seed;
                let out = train_split(&run, train)?;
                let (det, store) = out.checkpoint.detector(true)?;
                let raws = infer_all(&det, &store, &val.sequences)?;
                let preds = predictions_from_raws(&run, &raws);
                per_seed.push(evaluate(&run, &preds, &val.annotations)?.average_map);
            }
            let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
            let row = AblationRow {
                branches,
                context,
                label: format!("{} / {}", branches.label(), context.label()),
                per_seed,
                mean,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(AblationReport { thresholds: cfg.eval.thresholds.clone(), seeds: cfg.ablation.seeds.clone(), rows })
}
