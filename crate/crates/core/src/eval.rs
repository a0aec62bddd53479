//! Temporal IoU, average precision, mAP over tIoU grids and Recall@kx.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_json, AnnotationDB, Predictions, Proposal, SegmentAnnotation};
use crate::error::{Error, Result};

/// `|a∩b| / |a∪b|` of two intervals; `0` when they do not overlap.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if inter <= 0.0 || union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// A prediction together with its video.
#[derive(Clone, Copy, Debug)]
pub struct Scored<'a> {
    pub video: &'a str,
    pub proposal: Proposal,
}

fn rank_order(a: &Scored, b: &Scored) -> std::cmp::Ordering {
    b.proposal
        .score
        .total_cmp(&a.proposal.score)
        .then(a.proposal.start_s.total_cmp(&b.proposal.start_s))
        .then(a.video.cmp(b.video))
}

/// Flags of a greedy matching of ranked predictions to ground truth: `true` marks a hit.
fn greedy_match(ranked: &[Scored], gts: &[(&str, SegmentAnnotation)], tau: f64) -> Vec<bool> {
    let mut by_video: HashMap<&str, Vec<(SegmentAnnotation, bool)>> = HashMap::new();
    for (v, g) in gts {
        by_video.entry(v).or_default().push((*g, false));
    }
    ranked
        .iter()
        .map(|p| {
            let Some(cands) = by_video.get_mut(p.video) else { return false };
            let mut best: Option<(usize, f64)> = None;
            for (k, (g, used)) in cands.iter().enumerate() {
                if *used {
                    continue;
                }
                let iou = tiou((p.proposal.start_s, p.proposal.end_s), (g.start_s, g.end_s));
                if iou >= tau && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((k, iou));
                }
            }
            match best {
                Some((k, _)) => {
                    cands[k].1 = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Non-interpolated AP of one class; `None` when the class has no ground truth.
pub fn average_precision(preds: &[Scored], gts: &[(&str, SegmentAnnotation)], tau: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut ranked = preds.to_vec();
    ranked.sort_by(rank_order);
    let hits = greedy_match(&ranked, gts, tau);
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, hit) in hits.iter().enumerate() {
        if *hit {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / gts.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub name: String,
    pub num_gt: usize,
    /// AP per threshold; `None` for classes without ground truth.
    pub ap: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub k: usize,
    pub tiou: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub map: Vec<f64>,
    pub average_map: f64,
    pub per_class: Vec<ClassAp>,
    pub recall: Vec<RecallAt>,
    pub num_videos: usize,
    pub num_gt: usize,
    pub num_predictions: usize,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<16}", "tIoU");
        for t in &self.thresholds {
            let _ = write!(s, "{t:>8.2}");
        }
        let _ = writeln!(s, "{:>8}", "avg");
        let _ = write!(s, "{:<16}", "mAP");
        for m in &self.map {
            let _ = write!(s, "{:>8.2}", 100.0 * m);
        }
        let _ = writeln!(s, "{:>8.2}", 100.0 * self.average_map);
        for c in &self.per_class {
            let name: String = c.name.chars().take(15).collect();
            let _ = write!(s, "{name:<16}");
            match &c.ap {
                Some(ap) => {
                    for a in ap {
                        let _ = write!(s, "{:>8.2}", 100.0 * a);
                    }
                    let _ = writeln!(s, "{:>8.2}", 100.0 * ap.iter().sum::<f64>() / ap.len().max(1) as f64);
                }
                None => {
                    let _ = writeln!(s, "  (no ground truth)");
                }
            }
        }
        for r in &self.recall {
            let _ = writeln!(s, "Recall@{}x tIoU={:.2}: {:.2}", r.k, r.tiou, 100.0 * r.recall);
        }
        let _ = writeln!(s, "videos {}  gt {}  predictions {}", self.num_videos, self.num_gt, self.num_predictions);
        s
    }
}

struct Flat<'a> {
    gts: Vec<Vec<(&'a str, SegmentAnnotation)>>,
    preds: Vec<Vec<Scored<'a>>>,
}

fn flatten<'a>(preds: &'a Predictions, gt: &'a AnnotationDB) -> Result<Flat<'a>> {
    let c = gt.num_classes;
    let mut flat = Flat { gts: vec![Vec::new(); c], preds: vec![Vec::new(); c] };
    for (vid, v) in &gt.videos {
        for s in &v.segments {
            flat.gts[s.label_id].push((vid.as_str(), *s));
        }
    }
    for (vid, ps) in preds {
        if !gt.videos.contains_key(vid) {
            continue;
        }
        for p in ps {
            if p.label_id >= c {
                return Err(Error::InvalidData(format!("{vid}: predicted label {} of {c} classes", p.label_id)));
            }
            flat.preds[p.label_id].push(Scored { video: vid, proposal: *p });
        }
    }
    Ok(flat)
}

/// Recall when each (video, class) with `n` ground truths keeps its top `k·n` predictions.
pub fn recall_at_kx(preds: &Predictions, gt: &AnnotationDB, k: usize, tau: f64) -> Result<f64> {
    let flat = flatten(preds, gt)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (cls_gts, cls_preds) in flat.gts.iter().zip(&flat.preds) {
        let mut groups: BTreeMap<&str, (Vec<(&str, SegmentAnnotation)>, Vec<Scored>)> = BTreeMap::new();
        for g in cls_gts {
            groups.entry(g.0).or_default().0.push(*g);
        }
        for p in cls_preds {
            if let Some(group) = groups.get_mut(p.video) {
                group.1.push(*p);
            }
        }
        for (gs, mut ps) in groups.into_values() {
            ps.sort_by(rank_order);
            ps.truncate(k * gs.len());
            hits += greedy_match(&ps, &gs, tau).iter().filter(|h| **h).count();
            total += gs.len();
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// mAP at every threshold, their mean, and Recall@kx for every `(k, tIoU)` pair.
pub fn detection_map(
    preds: &Predictions,
    gt: &AnnotationDB,
    thresholds: &[f64],
    recall: &[(usize, f64)],
) -> Result<EvalReport> {
    let num_gt = gt.num_segments();
    if num_gt == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    if thresholds.is_empty() {
        return Err(Error::Config("no tIoU thresholds".into()));
    }
    let flat = flatten(preds, gt)?;
    let per_class: Vec<ClassAp> = (0..gt.num_classes)
        .map(|c| ClassAp {
            class_id: c,
            name: gt.classes.get(c).cloned().unwrap_or_else(|| c.to_string()),
            num_gt: flat.gts[c].len(),
            ap: (!flat.gts[c].is_empty()).then(|| {
                thresholds
                    .iter()
                    .map(|&t| average_precision(&flat.preds[c], &flat.gts[c], t).unwrap_or(0.0))
                    .collect()
            }),
        })
        .collect();
    let evaluated: Vec<&Vec<f64>> = per_class.iter().filter_map(|c| c.ap.as_ref()).collect();
    let map: Vec<f64> = (0..thresholds.len())
        .map(|t| evaluated.iter().map(|ap| ap[t]).sum::<f64>() / evaluated.len() as f64)
        .collect();
    let average_map = map.iter().sum::<f64>() / map.len() as f64;
    let recall = recall
        .iter()
        .map(|&(k, t)| Ok(RecallAt { k, tiou: t, recall: recall_at_kx(preds, gt, k, t)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        map,
        average_map,
        per_class,
        recall,
        num_videos: gt.videos.len(),
        num_gt,
        num_predictions: flat.preds.iter().map(Vec::len).sum(),
    })
}
