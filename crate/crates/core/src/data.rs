//! On-disk formats for features, annotations and predictions.
//!
//! Features are raw little-endian `f32` payloads (`T·D` values, time-major)
//! described by a JSON manifest:
//!
//! ```json
//! {"videos": {"video_0000": {"path": "video_0000.f32", "T": 256, "D": 32, "feature_fps": 4.0}}}
//! ```
//!
//! Annotations and predictions use the usual benchmark JSON layouts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    /// `T×D`, one row per snippet.
    pub features: Matrix<f32>,
    /// Snippets per second.
    pub feature_fps: f64,
    pub duration_s: f64,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, features: Matrix<f32>, feature_fps: f64, duration_s: f64) -> Result<Self> {
        let seq = Self { video_id: video_id.into(), features, feature_fps, duration_s };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (t, d) = self.features.shape();
        if t == 0 || d == 0 {
            return Err(Error::InvalidData(format!("{}: empty feature matrix {t}x{d}", self.video_id)));
        }
        if !(self.feature_fps > 0.0 && self.feature_fps.is_finite()) {
            return Err(Error::InvalidData(format!("{}: feature_fps must be positive", self.video_id)));
        }
        if !self.features.is_finite() {
            return Err(Error::InvalidData(format!("{}: non-finite feature values", self.video_id)));
        }
        let implied = t as f64 / self.feature_fps;
        if (implied - self.duration_s).abs() > 1.0 / self.feature_fps + 1e-9 {
            return Err(Error::InvalidData(format!(
                "{}: {t} snippets at {} fps do not match duration {}",
                self.video_id, self.feature_fps, self.duration_s
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    pub start_s: f64,
    pub end_s: f64,
    pub label_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Subset::Train),
            "val" | "validation" => Ok(Subset::Val),
            "test" => Ok(Subset::Test),
            other => Err(Error::Config(format!("unknown subset {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoAnnotations {
    pub duration_s: f64,
    pub subset: Subset,
    pub segments: Vec<SegmentAnnotation>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AnnotationDB {
    pub num_classes: usize,
    pub classes: Vec<String>,
    pub videos: BTreeMap<String, VideoAnnotations>,
    /// Segments clipped into `[0, duration]` while loading.
    pub clip_warnings: usize,
}

impl AnnotationDB {
    pub fn video_ids(&self, subset: Subset) -> Vec<String> {
        self.videos.iter().filter(|(_, v)| v.subset == subset).map(|(k, _)| k.clone()).collect()
    }

    pub fn subset(&self, subset: Subset) -> AnnotationDB {
        AnnotationDB {
            num_classes: self.num_classes,
            classes: self.classes.clone(),
            videos: self.videos.iter().filter(|(_, v)| v.subset == subset).map(|(k, v)| (k.clone(), v.clone())).collect(),
            clip_warnings: 0,
        }
    }

    pub fn num_segments(&self) -> usize {
        self.videos.values().map(|v| v.segments.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() != self.num_classes {
            return Err(Error::InvalidData(format!(
                "{} class names for {} classes",
                self.classes.len(),
                self.num_classes
            )));
        }
        for (vid, v) in &self.videos {
            for s in &v.segments {
                if !(0.0 <= s.start_s && s.start_s < s.end_s && s.end_s <= v.duration_s) {
                    return Err(Error::InvalidSegment { video: vid.clone(), start: s.start_s, end: s.end_s });
                }
                if s.label_id >= self.num_classes {
                    return Err(Error::InvalidData(format!("{vid}: label {} out of range", s.label_id)));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = AnnotationFile {
            num_classes: self.num_classes,
            classes: self.classes.clone(),
            database: self
                .videos
                .iter()
                .map(|(k, v)| {
                    let entry = VideoEntryFile {
                        duration: v.duration_s,
                        subset: v.subset,
                        annotations: v
                            .segments
                            .iter()
                            .map(|s| SegmentFile { segment: [s.start_s, s.end_s], label_id: Some(s.label_id), label: None })
                            .collect(),
                    };
                    (k.clone(), entry)
                })
                .collect(),
        };
        write_json(path, &file)
    }
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    num_classes: usize,
    classes: Vec<String>,
    database: BTreeMap<String, VideoEntryFile>,
}

#[derive(Serialize, Deserialize)]
struct VideoEntryFile {
    duration: f64,
    subset: Subset,
    annotations: Vec<SegmentFile>,
}

#[derive(Serialize, Deserialize)]
struct SegmentFile {
    segment: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Loads annotations, clipping segments into `[0, duration]` and counting each clip.
pub fn load_annotations(path: &Path) -> Result<AnnotationDB> {
    let file: AnnotationFile = read_json(path)?;
    let mut db = AnnotationDB { num_classes: file.num_classes, classes: file.classes, ..Default::default() };
    for (vid, entry) in file.database {
        let mut segments = Vec::with_capacity(entry.annotations.len());
        for seg in entry.annotations {
            let label_id = match (seg.label_id, seg.label) {
                (Some(id), _) => id,
                (None, Some(name)) => db
                    .classes
                    .iter()
                    .position(|c| *c == name)
                    .ok_or_else(|| Error::UnknownLabel { video: vid.clone(), label: name.clone() })?,
                (None, None) => return Err(Error::UnknownLabel { video: vid.clone(), label: String::new() }),
            };
            let [s, e] = seg.segment;
            let (cs, ce) = (s.clamp(0.0, entry.duration), e.clamp(0.0, entry.duration));
            if cs != s || ce != e {
                db.clip_warnings += 1;
            }
            if cs >= ce || cs.is_nan() || ce.is_nan() {
                return Err(Error::InvalidSegment { video: vid.clone(), start: cs, end: ce });
            }
            segments.push(SegmentAnnotation { start_s: cs, end_s: ce, label_id });
        }
        db.videos.insert(vid, VideoAnnotations { duration_s: entry.duration, subset: entry.subset, segments });
    }
    if db.clip_warnings > 0 {
        log::warn!("{}: clipped {} segments into their video duration", path.display(), db.clip_warnings);
    }
    db.validate()?;
    Ok(db)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Payload path, relative to the manifest's directory.
    pub path: String,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub feature_fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub videos: BTreeMap<String, ManifestEntry>,
}

impl FeatureManifest {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

fn manifest_dir(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Reads one video's features from the payload named in the manifest.
pub fn load_features(manifest_path: &Path, video_id: &str) -> Result<FeatureSequence> {
    let manifest = FeatureManifest::load(manifest_path)?;
    load_features_from(&manifest, &manifest_dir(manifest_path), video_id)
}

pub fn load_features_from(manifest: &FeatureManifest, dir: &Path, video_id: &str) -> Result<FeatureSequence> {
    let entry = manifest.videos.get(video_id).ok_or_else(|| Error::NotFound(video_id.to_string()))?;
    let path = dir.join(&entry.path);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = entry.t * entry.d * 4;
    if bytes.len() != expected {
        return Err(Error::CorruptFeatureFile { path, expected, found: bytes.len() });
    }
    let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData(format!("{}: non-finite feature value", path.display())));
    }
    let features = Matrix::from_vec(entry.t, entry.d, values)?;
    let duration = entry.duration.unwrap_or(entry.t as f64 / entry.feature_fps);
    FeatureSequence::new(video_id, features, entry.feature_fps, duration)
}

/// Writes every sequence as `<video_id>.f32` next to a manifest at `manifest_path`.
pub fn write_features(manifest_path: &Path, sequences: &[FeatureSequence]) -> Result<()> {
    let dir = manifest_dir(manifest_path);
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut manifest = FeatureManifest::default();
    for seq in sequences {
        let file = format!("{}.f32", seq.video_id);
        let bytes: Vec<u8> = seq.features.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        manifest.videos.insert(
            seq.video_id.clone(),
            ManifestEntry {
                path: file,
                t: seq.len(),
                d: seq.dim(),
                feature_fps: seq.feature_fps,
                duration: Some(seq.duration_s),
            },
        );
    }
    manifest.save(manifest_path)
}

/// A scored, labeled candidate interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub start_s: f64,
    pub end_s: f64,
    pub score: f64,
    pub label_id: usize,
}

impl Proposal {
    pub fn is_valid(&self) -> bool {
        self.start_s < self.end_s && self.score.is_finite() && (0.0..=1.0).contains(&self.score)
    }
}

pub type Predictions = BTreeMap<String, Vec<Proposal>>;

#[derive(Serialize, Deserialize)]
struct PredictionFile {
    results: BTreeMap<String, Vec<PredictionEntry>>,
}

#[derive(Serialize, Deserialize)]
struct PredictionEntry {
    segment: [f64; 2],
    score: f64,
    label_id: usize,
}

pub fn write_predictions(path: &Path, predictions: &Predictions) -> Result<()> {
    if let Some((vid, p)) = predictions.iter().find_map(|(k, ps)| ps.iter().find(|p| !p.is_valid()).map(|p| (k, p))) {
        return Err(Error::InvalidData(format!("{vid}: invalid proposal {p:?}")));
    }
    let file = PredictionFile {
        results: predictions
            .iter()
            .map(|(k, ps)| {
                let entries = ps
                    .iter()
                    .map(|p| PredictionEntry { segment: [p.start_s, p.end_s], score: p.score, label_id: p.label_id })
                    .collect();
                (k.clone(), entries)
            })
            .collect(),
    };
    write_json(path, &file)
}

pub fn read_predictions(path: &Path) -> Result<Predictions> {
    let file: PredictionFile = read_json(path)?;
    Ok(file
        .results
        .into_iter()
        .map(|(k, es)| {
            let ps = es
                .into_iter()
                .map(|e| Proposal { start_s: e.segment[0], end_s: e.segment[1], score: e.score, label_id: e.label_id })
                .collect();
            (k, ps)
        })
        .collect())
}
