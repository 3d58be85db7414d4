//! Scalar reference implementations and fixtures shared by the integration
//! tests. Nothing here calls into the library's numeric code paths.

#![allow(dead_code)]

use rand::{Rng, RngExt};
use visolo_core::eval::RECALL_POINTS;
use visolo_core::mask::BinaryMask;
use visolo_core::Tensor;

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Same-padded, stride-1 convolution by direct summation.
/// `x: [C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
pub fn conv_same(x: &Tensor, w: &Tensor, b: &[f64]) -> Tensor {
    let s = x.shape();
    let (c, h, wd) = (s[0], s[1], s[2]);
    let ws = w.shape();
    let (o, k) = (ws[0], ws[2]);
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; o * h * wd];
    for oc in 0..o {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - pad;
                            let sx = xx as isize + kx as isize - pad;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            acc += w.data()[((oc * c + ic) * k + ky) * k + kx] * x.data()[(ic * h + sy as usize) * wd + sx as usize];
                        }
                    }
                }
                out[(oc * h + y) * wd + xx] = acc;
            }
        }
    }
    Tensor::from_vec(&[o, h, wd], out)
}

/// `logits[r][c] = scale · Σ_e q[e, r] · m[e, c]` for `[E, H, W]` maps.
pub fn gram(q: &Tensor, m: &Tensor, scale: f64) -> Vec<Vec<f64>> {
    let s = q.shape();
    let (e, n) = (s[0], s[1] * s[2]);
    (0..n)
        .map(|r| (0..n).map(|c| scale * (0..e).map(|k| q.data()[k * n + r] * m.data()[k * n + c]).sum::<f64>()).collect())
        .collect()
}

/// Row-wise softmax over the concatenation of several logit matrices.
pub fn joint_softmax(logits: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let rows = logits[0].len();
    (0..rows)
        .map(|r| {
            let row: Vec<f64> = logits.iter().flat_map(|l| l[r].iter().copied()).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = ex.iter().sum();
            ex.iter().map(|v| v / z).collect()
        })
        .collect()
}

/// `α(1−p)^γ·(−ln p)` for positives, `(1−α)p^γ·(−ln(1−p))` for negatives.
pub fn focal_oracle(p: &[f64], t: &[bool], alpha: f64, gamma: f64) -> f64 {
    p.iter()
        .zip(t)
        .map(|(&p, &t)| {
            if t {
                -alpha * (1.0 - p).powf(gamma) * p.ln()
            } else {
                -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
            }
        })
        .sum()
}

pub fn dice_oracle(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let mut inter = 0.0;
    let mut pp = 0.0;
    let mut qq = 0.0;
    for i in 0..p.len() {
        inter += p[i] * q[i];
        pp += p[i] * p[i];
        qq += q[i] * q[i];
    }
    1.0 - (2.0 * inter + eps) / (pp + qq + eps)
}

pub fn st_iou_oracle(a: &[BinaryMask], b: &[BinaryMask]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.iter().zip(b) {
        for (&u, &v) in x.data().iter().zip(y.data()) {
            inter += (u && v) as usize;
            union += (u || v) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// A track for the evaluator oracle.
#[derive(Clone, Debug)]
pub struct OTrack {
    pub class_id: usize,
    pub score: f64,
    pub masks: Vec<BinaryMask>,
}

/// Evaluates by enumerating every partial one-to-one assignment between
/// detections and ground truth, per video and class, and keeping the one
/// that is lexicographically best when detections are visited by
/// descending score: each detection prefers being matched, then higher
/// IoU, then the later ground truth on exact ties.
pub struct EvalOracle {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar1: f64,
    pub ar10: f64,
}

/// Lexicographic key of an assignment, and the assignment.
type Ranked = (Vec<(bool, f64, usize)>, Vec<Option<usize>>);

fn best_assignment(ious: &[Vec<f64>], thr: f64) -> Vec<Option<usize>> {
    let nd = ious.len();
    let ng = ious.first().map_or(0, Vec::len);
    let mut best: Option<Ranked> = None;
    let mut cur = vec![None; nd];
    fn rec(
        d: usize,
        ious: &[Vec<f64>],
        thr: f64,
        ng: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        best: &mut Option<Ranked>,
    ) {
        if d == ious.len() {
            let key: Vec<(bool, f64, usize)> = cur
                .iter()
                .enumerate()
                .map(|(k, g)| match g {
                    Some(g) => (true, ious[k][*g], *g),
                    None => (false, 0.0, 0),
                })
                .collect();
            let better = match best {
                None => true,
                Some((bk, _)) => key.partial_cmp(bk) == Some(std::cmp::Ordering::Greater),
            };
            if better {
                *best = Some((key, cur.clone()));
            }
            return;
        }
        cur[d] = None;
        rec(d + 1, ious, thr, ng, used, cur, best);
        for g in 0..ng {
            if !used[g] && ious[d][g] >= thr {
                used[g] = true;
                cur[d] = Some(g);
                rec(d + 1, ious, thr, ng, used, cur, best);
                cur[d] = None;
                used[g] = false;
            }
        }
    }
    rec(0, ious, thr, ng, &mut vec![false; ng], &mut cur, &mut best);
    best.map(|(_, a)| a).unwrap_or_default()
}

/// Area under the 101-point interpolated precision curve; recall levels
/// are compared in exact integer arithmetic.
fn ap_oracle(ranked: &[(f64, bool)], num_gt: usize) -> f64 {
    let mut sorted = ranked.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut tp = 0usize;
    let mut pts = Vec::new();
    for (k, &(_, hit)) in sorted.iter().enumerate() {
        tp += hit as usize;
        pts.push((tp, tp as f64 / (k + 1) as f64));
    }
    let mut sum = 0.0;
    for p in 0..RECALL_POINTS {
        // max precision among prefixes whose recall tp/num_gt ≥ p/100
        let best = pts
            .iter()
            .filter(|&&(tp, _)| tp * (RECALL_POINTS - 1) >= p * num_gt)
            .map(|&(_, prec)| prec)
            .fold(0.0, f64::max);
        sum += best;
    }
    sum / RECALL_POINTS as f64
}

/// `videos[v] = (ground truth, detections)`.
pub fn eval_oracle(videos: &[(Vec<OTrack>, Vec<OTrack>)], num_classes: usize) -> EvalOracle {
    let thresholds: Vec<f64> = (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect();
    let mut aps = vec![Vec::new(); thresholds.len()];
    let mut ars = [Vec::new(), Vec::new()];
    for c in 0..num_classes {
        let num_gt: usize = videos.iter().map(|(g, _)| g.iter().filter(|t| t.class_id == c).count()).sum();
        if num_gt == 0 {
            continue;
        }
        for (ti, &thr) in thresholds.iter().enumerate() {
            let mut ranked = Vec::new();
            let mut hits = [0usize; 2];
            for (g, d) in videos {
                let g: Vec<&OTrack> = g.iter().filter(|t| t.class_id == c).collect();
                let mut d: Vec<&OTrack> = d.iter().filter(|t| t.class_id == c).collect();
                d.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
                for (slot, &k) in [1usize, 10].iter().enumerate() {
                    let dk = &d[..d.len().min(k)];
                    let ious: Vec<Vec<f64>> = dk.iter().map(|x| g.iter().map(|y| st_iou_oracle(&x.masks, &y.masks)).collect()).collect();
                    hits[slot] += best_assignment(&ious, thr).iter().filter(|a| a.is_some()).count();
                }
                let dk = &d[..d.len().min(100)];
                let ious: Vec<Vec<f64>> = dk.iter().map(|x| g.iter().map(|y| st_iou_oracle(&x.masks, &y.masks)).collect()).collect();
                for (x, a) in dk.iter().zip(best_assignment(&ious, thr)) {
                    ranked.push((x.score, a.is_some()));
                }
            }
            aps[ti].push(ap_oracle(&ranked, num_gt));
            for s in 0..2 {
                ars[s].push(hits[s] as f64 / num_gt as f64);
            }
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let all: Vec<f64> = aps.iter().flatten().copied().collect();
    EvalOracle {
        ap: mean(&all),
        ap50: mean(&aps[0]),
        ap75: mean(&aps[5]),
        ar1: mean(&ars[0]),
        ar10: mean(&ars[1]),
    }
}

/// A random mask with roughly `density` of its pixels set.
pub fn rand_mask(rng: &mut impl Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| rng.random_bool(density)).collect()).unwrap()
}

/// Ordinary least squares slope of `y` on `x` and its t statistic.
pub fn ols_slope_t(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let se = (rss / (n - 2.0) / sxx).sqrt();
    (slope, slope / se)
}
