//! Video-level average precision and recall over spatio-temporal mask IoU.

use std::collections::{BTreeMap, HashMap};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{Video, VideoDataset};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tracker::{TrackResult, VideoResult};

/// `0.50, 0.55, ..., 0.95`, each computed as an exact decimal.
pub fn default_iou_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

pub const RECALL_POINTS: usize = 101;
pub const MAX_DETS: [usize; 3] = [1, 10, 100];

/// `Σ_t |A_t ∩ B_t| / Σ_t |A_t ∪ B_t|`, zero when both tracks are empty.
pub fn spatiotemporal_iou(a: &[BinaryMask], b: &[BinaryMask]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("tracks span {} and {} frames", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        let (i, u) = x.overlap(y)?;
        inter += i;
        union += u;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    pub num_gt: usize,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar1: f64,
    pub ar10: f64,
    /// Recall with at most `k` predictions per video and class, out of at
    /// most `k` ground-truth tracks per video and class.
    pub ar1_clipped: f64,
    pub ar10_clipped: f64,
    pub per_class: Vec<ClassReport>,
    pub num_videos: usize,
}

/// Ground truth of one video as class-grouped mask sequences.
fn gt_tracks(v: &Video) -> Vec<(usize, Vec<BinaryMask>)> {
    v.tracks
        .iter()
        .map(|tr| {
            let masks = (0..v.num_frames())
                .map(|t| match tr.masks.get(t) {
                    Some(Some(m)) => m.clone(),
                    _ => BinaryMask::empty(v.height, v.width),
                })
                .collect();
            (tr.class_id, masks)
        })
        .collect()
}

/// The ground truth of one video written as a prediction with confidence 1.
pub fn ground_truth_result(v: &Video) -> VideoResult {
    VideoResult {
        video_id: v.id,
        num_frames: v.num_frames(),
        height: v.height,
        width: v.width,
        tracks: v
            .tracks
            .iter()
            .zip(gt_tracks(v))
            .map(|(tr, (class_id, masks))| TrackResult {
                identity: tr.id,
                class_id,
                confidence: 1.0,
                masks,
            })
            .collect(),
    }
}

fn check_alignment(r: &VideoResult, v: &Video) -> Result<()> {
    if r.num_frames != v.num_frames() {
        return Err(Error::Shape(format!(
            "result for video {} has {} frames, ground truth has {}",
            v.id,
            r.num_frames,
            v.num_frames()
        )));
    }
    for tr in &r.tracks {
        if tr.masks.len() != v.num_frames() {
            return Err(Error::Shape(format!(
                "identity {} in video {} has {} masks for {} frames",
                tr.identity,
                v.id,
                tr.masks.len(),
                v.num_frames()
            )));
        }
        if let Some(m) = tr.masks.iter().find(|m| m.shape() != (v.height, v.width)) {
            return Err(Error::Shape(format!(
                "identity {} in video {} has {:?} masks, frames are {}x{}",
                tr.identity,
                v.id,
                m.shape(),
                v.height,
                v.width
            )));
        }
    }
    Ok(())
}

/// Detections of one video and class, matched at every threshold.
struct Unit {
    scores: Vec<f64>,
    /// `ious[d][g]`.
    ious: Vec<Vec<f64>>,
    num_gt: usize,
}

impl Unit {
    /// Greedy matching of the first `max_det` detections at `thr`: each
    /// detection takes the unmatched ground truth of highest IoU ≥ `thr`.
    fn matches(&self, thr: f64, max_det: usize) -> Vec<bool> {
        let mut taken = vec![false; self.num_gt];
        self.ious
            .iter()
            .take(max_det)
            .map(|row| {
                let mut best: Option<usize> = None;
                let mut best_iou = thr;
                for (g, &iou) in row.iter().enumerate() {
                    if taken[g] || iou < best_iou {
                        continue;
                    }
                    best_iou = iou;
                    best = Some(g);
                }
                if let Some(g) = best {
                    taken[g] = true;
                }
                best.is_some()
            })
            .collect()
    }
}

/// 101-point interpolated precision over score-ranked detections.
pub fn interpolated_ap(ranked: &[(f64, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| ranked[b].0.total_cmp(&ranked[a].0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for &k in &order {
        if ranked[k].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for k in (1..precision.len()).rev() {
        if precision[k] > precision[k - 1] {
            precision[k - 1] = precision[k];
        }
    }
    let mut sum = 0.0;
    for p in 0..RECALL_POINTS {
        let r = p as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Evaluates predictions against `gt`. Videos without a result count as
/// having no predictions. Detections of equal confidence are ranked by
/// lower identity first.
pub fn evaluate(results: &[VideoResult], gt: &VideoDataset, thresholds: &[f64]) -> Result<EvalReport> {
    let by_id: HashMap<u64, &VideoResult> = results.iter().map(|r| (r.video_id, r)).collect();
    if let Some(r) = results.iter().find(|r| !gt.videos.iter().any(|v| v.id == r.video_id)) {
        return Err(Error::Annotation(format!("result for unknown video {}", r.video_id)));
    }
    let num_classes = gt.num_classes();
    // units[class] = per-video units
    let mut units: Vec<Vec<Unit>> = (0..num_classes).map(|_| Vec::new()).collect();
    for v in &gt.videos {
        let gts = gt_tracks(v);
        let mut dets: Vec<_> = match by_id.get(&v.id) {
            Some(r) => {
                check_alignment(r, v)?;
                r.tracks.iter().collect()
            }
            None => Vec::new(),
        };
        dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.identity.cmp(&b.identity)));
        for (c, class_units) in units.iter_mut().enumerate() {
            let g: Vec<&Vec<BinaryMask>> = gts.iter().filter(|(k, _)| *k == c).map(|(_, m)| m).collect();
            let d: Vec<_> = dets.iter().filter(|t| t.class_id == c).collect();
            if g.is_empty() && d.is_empty() {
                continue;
            }
            let ious = d
                .iter()
                .map(|t| g.iter().map(|m| spatiotemporal_iou(&t.masks, m)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            class_units.push(Unit {
                scores: d.iter().map(|t| t.confidence).collect(),
                ious,
                num_gt: g.len(),
            });
        }
    }

    let total_gt: usize = units.iter().flatten().map(|u| u.num_gt).sum();
    if total_gt == 0 {
        warn!("ground truth has no tracks; reporting zero for every metric");
    }
    let t50 = thresholds.iter().position(|&t| t == 0.5);
    let t75 = thresholds.iter().position(|&t| t == 0.75);
    let mut ap_all = Vec::new();
    let (mut ap50_all, mut ap75_all) = (Vec::new(), Vec::new());
    let mut ar = [Vec::new(), Vec::new()];
    let mut ar_clipped = [Vec::new(), Vec::new()];
    let mut per_class = Vec::with_capacity(num_classes);
    for (c, class_units) in units.iter().enumerate() {
        let num_gt: usize = class_units.iter().map(|u| u.num_gt).sum();
        let mut report = ClassReport {
            class_id: c,
            name: gt.categories.get(c).map(|k| k.name.clone()).unwrap_or_default(),
            num_gt,
            ..Default::default()
        };
        if num_gt > 0 {
            let mut aps = Vec::with_capacity(thresholds.len());
            for &thr in thresholds {
                let ranked: Vec<(f64, bool)> = class_units
                    .iter()
                    .flat_map(|u| u.scores.iter().copied().zip(u.matches(thr, MAX_DETS[2])))
                    .collect();
                aps.push(interpolated_ap(&ranked, num_gt));
                for (slot, &k) in MAX_DETS[..2].iter().enumerate() {
                    let hits: usize = class_units
                        .iter()
                        .map(|u| u.matches(thr, k).iter().filter(|&&m| m).count())
                        .sum();
                    let clipped: usize = class_units.iter().map(|u| u.num_gt.min(k)).sum();
                    ar[slot].push(hits as f64 / num_gt as f64);
                    ar_clipped[slot].push(hits as f64 / clipped as f64);
                }
            }
            report.ap = Some(mean(&aps));
            report.ap50 = t50.map(|i| aps[i]);
            report.ap75 = t75.map(|i| aps[i]);
            ap_all.extend(&aps);
            ap50_all.extend(report.ap50);
            ap75_all.extend(report.ap75);
        }
        per_class.push(report);
    }
    Ok(EvalReport {
        ap: mean(&ap_all),
        ap50: mean(&ap50_all),
        ap75: mean(&ap75_all),
        ar1: mean(&ar[0]),
        ar10: mean(&ar[1]),
        ar1_clipped: mean(&ar_clipped[0]),
        ar10_clipped: mean(&ar_clipped[1]),
        per_class,
        num_videos: gt.videos.len(),
    })
}

/// Fraction of ground-truth tracks that a single predicted identity covers
/// with spatio-temporal IoU ≥ `thr`, regardless of class.
pub fn identity_consistency(results: &[VideoResult], gt: &VideoDataset, thr: f64) -> Result<f64> {
    let by_id: BTreeMap<u64, &VideoResult> = results.iter().map(|r| (r.video_id, r)).collect();
    let (mut hit, mut total) = (0usize, 0usize);
    for v in &gt.videos {
        let gts = gt_tracks(v);
        total += gts.len();
        let Some(r) = by_id.get(&v.id) else { continue };
        check_alignment(r, v)?;
        for (_, g) in &gts {
            let mut covered = false;
            for tr in &r.tracks {
                if spatiotemporal_iou(&tr.masks, g)? >= thr {
                    covered = true;
                    break;
                }
            }
            hit += covered as usize;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}
