//! Per-frame instance extraction: score filtering, mask assembly and
//! Matrix NMS.

use serde::{Deserialize, Serialize};

use crate::aggregation::ReweightedScores;
use crate::error::{shape_err, Error, Result};
use crate::mask::{mask_iou, BinaryMask};
use crate::network::{assemble_mask, DynamicKernels, MaskFeatureMap};
use crate::tensor::{resize_bilinear, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmsKernel {
    Gaussian,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Minimum class score for a grid to become a candidate.
    pub score_thresh: f64,
    /// Minimum score after NMS decay.
    pub update_thresh: f64,
    pub nms_kernel: NmsKernel,
    pub nms_sigma: f64,
    pub max_instances: usize,
    pub mask_thresh: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.1,
            update_thresh: 0.3,
            nms_kernel: NmsKernel::Gaussian,
            nms_sigma: 2.0,
            max_instances: 10,
            mask_thresh: 0.5,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("score_thresh", self.score_thresh),
            ("update_thresh", self.update_thresh),
            ("mask_thresh", self.mask_thresh),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("decoder.{name} must lie in (0, 1), got {v}")));
            }
        }
        if !(self.nms_sigma > 0.0) {
            return Err(Error::Config(format!("decoder.nms_sigma must be positive, got {}", self.nms_sigma)));
        }
        if self.max_instances == 0 {
            return Err(Error::Config("decoder.max_instances must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstancePrediction {
    pub grid_index: (usize, usize),
    pub class_id: usize,
    pub score: f64,
    /// `[H, W]` probabilities at input resolution.
    pub soft_mask: Tensor,
    pub mask: BinaryMask,
}

/// One NMS candidate: class, score and binary mask.
#[derive(Clone, Debug)]
pub struct NmsCandidate {
    pub class_id: usize,
    pub score: f64,
    pub mask: BinaryMask,
}

/// Decayed scores for candidates already sorted by descending score.
///
/// Each candidate `j` is decayed by `min_i f(iou_ij) / f(comp_i)` over
/// higher-ranked candidates `i` of the same class, with
/// `f(x) = exp(-sigma * x^2)` or `f(x) = 1 - x`, where `comp_i` is the
/// largest IoU of `i` with anything ranked above it. The factor is capped
/// at 1.
pub fn matrix_nms(cands: &[NmsCandidate], kernel: NmsKernel, sigma: f64) -> Result<Vec<f64>> {
    let n = cands.len();
    let mut iou = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..j {
            if cands[i].class_id == cands[j].class_id {
                iou[i * n + j] = mask_iou(&cands[i].mask, &cands[j].mask)?;
            }
        }
    }
    let comp: Vec<f64> = (0..n)
        .map(|i| (0..i).map(|k| iou[k * n + i]).fold(0.0, f64::max))
        .collect();
    let f = |x: f64| match kernel {
        NmsKernel::Gaussian => (-sigma * x * x).exp(),
        NmsKernel::Linear => 1.0 - x,
    };
    Ok((0..n)
        .map(|j| {
            let mut decay: f64 = 1.0;
            for i in 0..j {
                if cands[i].class_id != cands[j].class_id {
                    continue;
                }
                let ratio = f(iou[i * n + j]) / f(comp[i]).max(1e-12);
                decay = decay.min(ratio);
            }
            cands[j].score * decay
        })
        .collect())
}

/// Instances of one frame, sorted by descending score with ties broken by
/// `(class_id, i, j)`.
pub fn decode_frame(
    scores: &ReweightedScores,
    kernels: &DynamicKernels,
    mask_feats: &MaskFeatureMap,
    cfg: &DecoderConfig,
    output_size: [usize; 2],
) -> Result<Vec<InstancePrediction>> {
    let (classes, sh, sw) = scores.scores.chw();
    let (_, kh, kw) = kernels.kernels.chw();
    if (sh, sw) != (kh, kw) {
        return Err(shape_err(format!("scores grid {sh}x{sw} differs from kernel grid {kh}x{kw}")));
    }
    struct Cand {
        grid: (usize, usize),
        class_id: usize,
        score: f64,
        soft: Tensor,
        mask: BinaryMask,
    }
    let mut cands = Vec::new();
    for i in 0..sh {
        for j in 0..sw {
            let (mut best, mut class_id) = (f64::NEG_INFINITY, 0);
            for c in 0..classes {
                let s = scores.at(i, j, c);
                if s > best {
                    best = s;
                    class_id = c;
                }
            }
            if best <= cfg.score_thresh {
                continue;
            }
            let soft = assemble_mask(kernels, mask_feats, (i, j))?;
            let mask = BinaryMask::threshold(&soft, cfg.mask_thresh);
            if mask.is_empty() {
                continue;
            }
            cands.push(Cand {
                grid: (i, j),
                class_id,
                score: best,
                soft,
                mask,
            });
        }
    }
    let order = |a: &Cand, b: &Cand| {
        b.score
            .total_cmp(&a.score)
            .then(a.class_id.cmp(&b.class_id))
            .then(a.grid.cmp(&b.grid))
    };
    cands.sort_by(order);
    let nms_in: Vec<NmsCandidate> = cands
        .iter()
        .map(|c| NmsCandidate {
            class_id: c.class_id,
            score: c.score,
            mask: c.mask.clone(),
        })
        .collect();
    let decayed = matrix_nms(&nms_in, cfg.nms_kernel, cfg.nms_sigma)?;
    let mut kept: Vec<Cand> = cands
        .into_iter()
        .zip(decayed)
        .filter(|(_, s)| *s > cfg.update_thresh)
        .map(|(c, s)| Cand { score: s, ..c })
        .collect();
    kept.sort_by(order);
    kept.truncate(cfg.max_instances);
    let [h, w] = output_size;
    Ok(kept
        .into_iter()
        .map(|c| {
            let soft_mask = resize_bilinear(&c.soft, h, w);
            let mask = BinaryMask::threshold(&soft_mask, cfg.mask_thresh);
            InstancePrediction {
                grid_index: c.grid,
                class_id: c.class_id,
                score: c.score,
                soft_mask,
                mask,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(h: usize, w: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| (y0..y1).contains(&y) && (x0..x1).contains(&x))
    }

    #[test]
    fn duplicate_decays_by_gaussian_factor() {
        let m = block(4, 4, 0, 0, 2, 2);
        let cands = vec![
            NmsCandidate { class_id: 0, score: 0.9, mask: m.clone() },
            NmsCandidate { class_id: 0, score: 0.8, mask: m },
        ];
        let d = matrix_nms(&cands, NmsKernel::Gaussian, 2.0).unwrap();
        assert_eq!(d[0], 0.9);
        assert!((d[1] - 0.8 * (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn disjoint_or_other_class_is_untouched() {
        let cands = vec![
            NmsCandidate { class_id: 0, score: 0.9, mask: block(4, 4, 0, 0, 2, 2) },
            NmsCandidate { class_id: 0, score: 0.7, mask: block(4, 4, 2, 2, 4, 4) },
            NmsCandidate { class_id: 1, score: 0.6, mask: block(4, 4, 0, 0, 2, 2) },
        ];
        assert_eq!(matrix_nms(&cands, NmsKernel::Gaussian, 2.0).unwrap(), vec![0.9, 0.7, 0.6]);
    }

    fn grid_fixture(score: [f64; 2]) -> (ReweightedScores, DynamicKernels, MaskFeatureMap) {
        // 1x2 grid, 1 class, 2-channel mask features on a 2x2 map
        let scores = ReweightedScores {
            scores: Tensor::from_vec(&[1, 1, 2], score.to_vec()),
        };
        let kernels = DynamicKernels {
            kernels: Tensor::from_vec(&[2, 1, 2], vec![10.0, 0.0, 0.0, 10.0]),
        };
        let feats = MaskFeatureMap {
            features: Tensor::from_vec(&[2, 2, 2], vec![1.0, 1.0, -1.0, -1.0, -1.0, -1.0, 1.0, 1.0]),
        };
        (scores, kernels, feats)
    }

    #[test]
    fn below_threshold_gives_nothing() {
        let (s, k, f) = grid_fixture([0.05, 0.1]);
        assert!(decode_frame(&s, &k, &f, &DecoderConfig::default(), [4, 4]).unwrap().is_empty());
    }

    #[test]
    fn decodes_sorted_upsampled_instances() {
        let (s, k, f) = grid_fixture([0.6, 0.9]);
        let out = decode_frame(&s, &k, &f, &DecoderConfig::default(), [4, 4]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].grid_index, (0, 1));
        assert_eq!(out[0].score, 0.9);
        assert_eq!(out[1].score, 0.6);
        assert_eq!(out[0].mask, block(4, 4, 2, 0, 4, 4));
        assert_eq!(out[1].mask, block(4, 4, 0, 0, 2, 4));
    }

    #[test]
    fn config_validation() {
        assert!(DecoderConfig::default().validate().is_ok());
        let bad = DecoderConfig {
            score_thresh: 1.0,
            ..DecoderConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
