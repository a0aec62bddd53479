//! Soft-NMS, noun×verb action composition and seed ensembling of raw outputs.

use serde::{Deserialize, Serialize};

use crate::data::Proposal;
use crate::error::{Error, Result};
use crate::eval::tiou;
use crate::head::{decode, point_segment, sort_by_score, DecodeConfig, RawDetectorOutput, RawLevel};
use crate::tensor::{sigmoid, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NmsMethod {
    #[default]
    Gaussian,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmsConfig {
    /// Gaussian decay scale.
    pub sigma: f64,
    pub method: NmsMethod,
    /// Overlap above which hard mode drops a proposal.
    pub hard_iou_threshold: f64,
    pub max_kept: usize,
    pub min_score: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self { sigma: 2.0, method: NmsMethod::Gaussian, hard_iou_threshold: 0.5, max_kept: 200, min_score: 0.0 }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Config("nms sigma must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.hard_iou_threshold) || !(0.0..=1.0).contains(&self.min_score) {
            return Err(Error::Config("nms thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Greedy score-decay suppression. Equal scores are resolved by input order.
pub fn soft_nms(props: &[Proposal], cfg: &NmsConfig, class_aware: bool) -> Vec<Proposal> {
    let mut pool: Vec<(usize, Proposal)> = props.iter().copied().enumerate().collect();
    let mut kept: Vec<(usize, Proposal)> = Vec::new();
    while kept.len() < cfg.max_kept && !pool.is_empty() {
        let mut best = 0;
        for (k, (i, p)) in pool.iter().enumerate() {
            let (bi, bp) = &pool[best];
            if p.score > bp.score || (p.score == bp.score && i < bi) {
                best = k;
            }
        }
        if pool[best].1.score < cfg.min_score {
            break;
        }
        let (mi, m) = pool.swap_remove(best);
        kept.push((mi, m));
        pool.retain_mut(|(_, b)| {
            if class_aware && b.label_id != m.label_id {
                return true;
            }
            let iou = tiou((m.start_s, m.end_s), (b.start_s, b.end_s));
            match cfg.method {
                NmsMethod::Hard => iou <= cfg.hard_iou_threshold,
                NmsMethod::Gaussian => {
                    b.score *= (-iou * iou / cfg.sigma).exp();
                    true
                }
            }
        });
    }
    kept.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    kept.into_iter().map(|(_, p)| p).collect()
}

/// Decode then class-aware suppression of one video.
pub fn postprocess_video(raw: &RawDetectorOutput, decode_cfg: &DecodeConfig, nms: &NmsConfig) -> Vec<Proposal> {
    soft_nms(&decode(raw, decode_cfg), nms, true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActionBoundaries {
    /// Elementwise mean of both models' distances.
    #[default]
    Average,
    /// Distances of the verb model only.
    Verb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComposeConfig {
    /// Classes taken from each model per point.
    pub top_k: usize,
    pub boundaries: ActionBoundaries,
}

impl Default for ComposeConfig {
    fn default() -> Self {
        Self { top_k: 10, boundaries: ActionBoundaries::Average }
    }
}

fn check_same_grid(a: &RawDetectorOutput, b: &RawDetectorOutput) -> Result<()> {
    if a.grid() != b.grid() {
        return Err(Error::GridMismatch(format!("{} vs {}", a.video_id, b.video_id)));
    }
    Ok(())
}

fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Every `k²` noun×verb candidate of every point, before suppression.
pub fn compose_candidates(noun: &RawDetectorOutput, verb: &RawDetectorOutput, cfg: &ComposeConfig) -> Result<Vec<Proposal>> {
    check_same_grid(noun, verb)?;
    let grid = noun.grid();
    let verbs = verb.num_classes;
    let mut out = Vec::new();
    for (l, (nl, vl)) in noun.levels.iter().zip(&verb.levels).enumerate() {
        for i in 0..nl.logits.rows() {
            let pn: Vec<f64> = nl.logits.row(i).iter().map(|&x| sigmoid(x as f64)).collect();
            let pv: Vec<f64> = vl.logits.row(i).iter().map(|&x| sigmoid(x as f64)).collect();
            let (left, right) = match cfg.boundaries {
                ActionBoundaries::Average => (
                    0.5 * (nl.distances.get(i, 0) as f64 + vl.distances.get(i, 0) as f64),
                    0.5 * (nl.distances.get(i, 1) as f64 + vl.distances.get(i, 1) as f64),
                ),
                ActionBoundaries::Verb => (vl.distances.get(i, 0) as f64, vl.distances.get(i, 1) as f64),
            };
            let (start, end) = point_segment(&grid, l, i, left, right);
            for n in top_k(&pn, cfg.top_k) {
                for v in top_k(&pv, cfg.top_k) {
                    out.push(Proposal { start_s: start, end_s: end, score: pn[n] * pv[v], label_id: n * verbs + v });
                }
            }
        }
    }
    Ok(out)
}

/// Joint action proposals: candidates, `pre_nms_topk` cut, class-agnostic suppression.
pub fn compose_actions(
    noun: &RawDetectorOutput,
    verb: &RawDetectorOutput,
    cfg: &ComposeConfig,
    decode_cfg: &DecodeConfig,
    nms: &NmsConfig,
) -> Result<Vec<Proposal>> {
    let mut cands: Vec<Proposal> = compose_candidates(noun, verb, cfg)?
        .into_iter()
        .filter(|p| p.start_s < p.end_s && p.score >= nms.min_score)
        .collect();
    sort_by_score(&mut cands);
    cands.truncate(decode_cfg.pre_nms_topk);
    Ok(soft_nms(&cands, nms, false))
}

fn mean_sorted(values: &mut [f64]) -> f32 {
    values.sort_by(f64::total_cmp);
    (values.iter().sum::<f64>() / values.len() as f64) as f32
}

/// Entrywise mean of shape-identical raw outputs. Each entry's values are summed in sorted
/// order, so the result does not depend on the order of `raws`.
pub fn ensemble(raws: &[RawDetectorOutput]) -> Result<RawDetectorOutput> {
    let first = raws.first().ok_or_else(|| Error::Shape("nothing to ensemble".into()))?;
    for r in &raws[1..] {
        if r.num_classes != first.num_classes || r.grid() != first.grid() || r.video_id != first.video_id {
            return Err(Error::Shape(format!("cannot ensemble {} with {}", first.video_id, r.video_id)));
        }
    }
    let mut buf = vec![0.0f64; raws.len()];
    let mut mean = |pick: &dyn Fn(&RawDetectorOutput) -> f32| {
        for (b, r) in buf.iter_mut().zip(raws) {
            *b = pick(r) as f64;
        }
        mean_sorted(&mut buf)
    };
    let mut levels = Vec::with_capacity(first.levels.len());
    for (l, lv) in first.levels.iter().enumerate() {
        let logits = Matrix::from_fn(lv.logits.rows(), lv.logits.cols(), |i, j| mean(&|r| r.levels[l].logits.get(i, j)));
        let distances = Matrix::from_fn(lv.distances.rows(), 2, |i, j| mean(&|r| r.levels[l].distances.get(i, j)));
        levels.push(RawLevel { stride: lv.stride, logits, distances });
    }
    Ok(RawDetectorOutput { levels, ..first.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prop(s: f64, e: f64, score: f64, label: usize) -> Proposal {
        Proposal { start_s: s, end_s: e, score, label_id: label }
    }

    #[test]
    fn disjoint_proposals_keep_their_scores() {
        let out = soft_nms(&[prop(0.0, 1.0, 0.9, 0), prop(2.0, 3.0, 0.8, 0)], &NmsConfig::default(), true);
        assert_eq!(out[0].score, 0.9);
        assert_eq!(out[1].score, 0.8);
    }

    #[test]
    fn duplicate_is_decayed_by_exp_minus_half() {
        let out = soft_nms(&[prop(1.0, 4.0, 0.9, 0), prop(1.0, 4.0, 0.8, 0)], &NmsConfig::default(), true);
        assert_eq!(out[0].score, 0.9);
        assert!((out[1].score - 0.8 * (-0.5f64).exp()).abs() < 1e-12);
        assert!((out[1].score - 0.4852).abs() < 1e-4);
    }

    #[test]
    fn huge_sigma_leaves_scores_alone() {
        let cfg = NmsConfig { sigma: 1e9, ..Default::default() };
        let props = [prop(1.0, 4.0, 0.9, 0), prop(1.5, 4.0, 0.8, 0), prop(0.0, 3.0, 0.7, 0)];
        let out = soft_nms(&props, &cfg, false);
        for (o, p) in out.iter().zip(&props) {
            assert!((o.score - p.score).abs() < 1e-9);
        }
    }

    #[test]
    fn class_aware_mode_ignores_other_classes() {
        let props = [prop(1.0, 4.0, 0.9, 0), prop(1.0, 4.0, 0.8, 1)];
        assert_eq!(soft_nms(&props, &NmsConfig::default(), true)[1].score, 0.8);
        assert!(soft_nms(&props, &NmsConfig::default(), false)[1].score < 0.8);
    }

    #[test]
    fn ties_keep_input_order() {
        let props = [prop(0.0, 1.0, 0.5, 0), prop(5.0, 6.0, 0.5, 1), prop(8.0, 9.0, 0.5, 2)];
        let out = soft_nms(&props, &NmsConfig::default(), true);
        assert_eq!(out.iter().map(|p| p.label_id).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    fn raw(logits: Vec<Vec<f32>>, dists: Vec<[f32; 2]>) -> RawDetectorOutput {
        let c = logits[0].len();
        RawDetectorOutput {
            video_id: "v".into(),
            duration_s: 100.0,
            feature_fps: 1.0,
            num_classes: c,
            levels: vec![RawLevel {
                stride: 1,
                logits: Matrix::from_rows(&logits).unwrap(),
                distances: Matrix::from_rows(&dists.iter().map(|d| d.to_vec()).collect::<Vec<_>>()).unwrap(),
            }],
        }
    }

    fn logit(p: f64) -> f32 {
        (p / (1.0 - p)).ln() as f32
    }

    #[test]
    fn composition_product_and_count() {
        let noun = raw(vec![vec![logit(0.5), logit(0.1)]], vec![[1.0, 1.0]]);
        let verb = raw(vec![vec![logit(0.2), logit(0.4), logit(0.3)]], vec![[1.0, 1.0]]);
        let one = compose_candidates(&noun, &verb, &ComposeConfig { top_k: 1, ..Default::default() }).unwrap();
        assert_eq!(one.len(), 1);
        assert!((one[0].score - 0.2).abs() < 1e-6);
        assert_eq!(one[0].label_id, 1);
        assert_eq!(one[0].start_s, 0.0);
        assert_eq!(one[0].end_s, 1.5);

        let noun3 = raw(vec![vec![0.1, 0.2, 0.3]; 4], vec![[1.0, 2.0]; 4]);
        let verb3 = raw(vec![vec![0.3, -0.2, 0.0]; 4], vec![[1.0, 2.0]; 4]);
        let cands = compose_candidates(&noun3, &verb3, &ComposeConfig { top_k: 2, ..Default::default() }).unwrap();
        assert_eq!(cands.len(), 4 * 4);
        let direct = decode(&verb3, &DecodeConfig { score_threshold: 0.0, pre_nms_topk: 100 });
        assert!(cands.iter().all(|c| direct.iter().any(|d| d.start_s == c.start_s && d.end_s == c.end_s)));
    }

    #[test]
    fn verb_boundaries_switch() {
        let noun = raw(vec![vec![0.0]], vec![[3.0, 3.0]]);
        let verb = raw(vec![vec![0.0]], vec![[1.0, 1.0]]);
        let avg = compose_candidates(&noun, &verb, &ComposeConfig::default()).unwrap();
        let cfg = ComposeConfig { boundaries: ActionBoundaries::Verb, ..Default::default() };
        let v = compose_candidates(&noun, &verb, &cfg).unwrap();
        assert_eq!((avg[0].start_s, avg[0].end_s), (0.0, 2.5));
        assert_eq!((v[0].start_s, v[0].end_s), (0.0, 1.5));
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let a = raw(vec![vec![0.0]; 2], vec![[1.0, 1.0]; 2]);
        let b = raw(vec![vec![0.0]; 3], vec![[1.0, 1.0]; 3]);
        assert!(matches!(compose_candidates(&a, &b, &ComposeConfig::default()), Err(Error::GridMismatch(_))));
        assert!(matches!(
            compose_actions(&a, &b, &ComposeConfig::default(), &DecodeConfig::default(), &NmsConfig::default()),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn ensemble_identities() {
        let a = raw(vec![vec![-1.0, 0.3], vec![0.7, 2.5]], vec![[1.0, 0.5], [0.1, 3.0]]);
        assert_eq!(ensemble(std::slice::from_ref(&a)).unwrap(), a);
        assert_eq!(ensemble(&[a.clone(), a.clone()]).unwrap(), a);
        let mut b = a.clone();
        b.levels[0].logits.set(0, 0, 1.0);
        assert_eq!(ensemble(&[a.clone(), b]).unwrap().levels[0].logits.get(0, 0), 0.0);
        let short = raw(vec![vec![0.0, 0.0]], vec![[1.0, 1.0]]);
        assert!(matches!(ensemble(&[a, short]), Err(Error::Shape(_))));
        assert!(ensemble(&[]).is_err());
    }
}
