use std::path::PathBuf;

use image::RgbImage;
use log::{info, warn};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{
    flip_clip, paste_instance, synthesize_clip, warp_clip, AffineRanges, AffineTransform, InstancePatch, TrainClip, CLIP_LEN,
};
use super::labels::{assign_labels, downsample_mask, sim_target, InstanceAnnotation, LabelAssignment, CENTER_SCALE};
use super::losses::{LossReport, FOCAL_ALPHA, FOCAL_GAMMA, MASK_WEIGHT};
use crate::autograd::{Tape, Var};
use crate::data::{PixelNorm, VideoDataset};
use crate::error::{Error, Result};
use crate::model::VisoloModel;
use crate::nn::{Adam, GradBuffer, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub center_scale: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub mask_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            center_scale: CENTER_SCALE,
            focal_alpha: FOCAL_ALPHA,
            focal_gamma: FOCAL_GAMMA,
            mask_weight: MASK_WEIGHT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub clips_per_step: usize,
    pub lr: f64,
    /// Fractions of `steps` at which the learning rate is multiplied by
    /// `lr_gamma`.
    pub lr_milestones: Vec<f64>,
    pub lr_gamma: f64,
    pub weight_decay: f64,
    /// Gradients with a larger global norm are rescaled to it.
    pub max_grad_norm: Option<f64>,
    /// Share of clips synthesized from a single frame by affine warps.
    pub synthetic_fraction: f64,
    pub affine: AffineRanges,
    /// Probability of mirroring a clip.
    pub flip_prob: f64,
    /// Probability of warping a real clip by one shared random transform.
    pub clip_warp_prob: f64,
    /// Half-width of uniform noise added to every pixel channel.
    pub pixel_noise: f64,
    /// Up to this many instances from other frames are pasted into a clip.
    pub max_pastes: usize,
    /// Probability of pasting into a clip at all.
    pub paste_prob: f64,
    pub loss: LossConfig,
    pub log_every: usize,
    /// Where a diagnostic dump is written if the loss stops being finite.
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            clips_per_step: 2,
            lr: 1e-3,
            lr_milestones: vec![30.0 / 68.0, 52.0 / 68.0],
            lr_gamma: 0.1,
            weight_decay: 0.0,
            max_grad_norm: Some(10.0),
            synthetic_fraction: 0.25,
            affine: AffineRanges::default(),
            flip_prob: 0.5,
            clip_warp_prob: 0.5,
            pixel_noise: 0.0,
            max_pastes: 2,
            paste_prob: 0.5,
            loss: LossConfig::default(),
            log_every: 100,
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    /// Schedule and augmentation tuned for the toy preset on moving shapes.
    pub fn toy() -> Self {
        Self {
            clips_per_step: 4,
            lr_milestones: vec![0.75, 0.9],
            affine: AffineRanges {
                max_rotation_deg: 15.0,
                scale: [0.8, 1.2],
                max_translate: 0.15,
                max_shear_deg: 5.0,
            },
            clip_warp_prob: 0.8,
            max_pastes: 3,
            paste_prob: 0.8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clips_per_step == 0 {
            return Err(Error::Config("train.clips_per_step must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        for (name, p) in [
            ("synthetic_fraction", self.synthetic_fraction),
            ("flip_prob", self.flip_prob),
            ("clip_warp_prob", self.clip_warp_prob),
            ("paste_prob", self.paste_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("train.{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| step as f64 >= m * self.steps as f64)
            .count();
        self.lr * self.lr_gamma.powi(passed as i32)
    }
}

/// A clip converted to network inputs and targets.
#[derive(Clone, Debug)]
pub struct PreparedClip {
    pub images: Vec<Tensor>,
    pub labels: Vec<LabelAssignment>,
    /// Per frame, the mask targets of its positive cells (in cell order)
    /// at mask-feature resolution, concatenated.
    pub mask_targets: Vec<Vec<f64>>,
    /// Human-readable origin, used in diagnostics.
    pub source: String,
}

pub fn prepare_clip(model: &VisoloModel, clip: &TrainClip, norm: &PixelNorm, eps: f64, source: String) -> Result<PreparedClip> {
    let cfg = model.network_config();
    let grid = cfg.grid_shape;
    let [hm, wm] = cfg.mask_feature_size();
    let labels = assign_labels(&clip.annotations, grid, eps)?;
    let mask_targets = labels
        .iter()
        .map(|l| {
            l.mask_targets
                .values()
                .flat_map(|m| downsample_mask(m, hm, wm))
                .collect()
        })
        .collect();
    Ok(PreparedClip {
        images: clip.frames.iter().map(|f| norm.apply(f)).collect(),
        labels,
        mask_targets,
        source,
    })
}

/// Builds the clip loss on `tape`. Frame `k` reads frames `0..k` as memory.
pub fn clip_loss(model: &VisoloModel, tape: &mut Tape, clip: &PreparedClip, cfg: &LossConfig) -> (Var, LossReport) {
    let net_cfg = model.network_config();
    let num_classes = net_cfg.num_classes;
    let n = clip.images.len();
    let mut readouts = Vec::with_capacity(n);
    let mut outs = Vec::with_capacity(n);
    for (f, img) in clip.images.iter().enumerate() {
        let x = tape.constant(img.clone());
        let o = model.forward_frame(tape, x, &readouts);
        if f + 1 < n {
            let r = model.readout(tape, f, o.key, o.category, o.mask);
            readouts.push(r);
        }
        outs.push(o);
    }

    let positives: usize = clip.labels.iter().map(LabelAssignment::num_positive).sum();
    let norm = positives.max(1) as f64;
    let (alpha, gamma) = (cfg.focal_alpha, cfg.focal_gamma);

    let mut class_terms = Vec::new();
    let mut mask_terms = Vec::new();
    for (f, o) in outs.iter().enumerate() {
        let labels = &clip.labels[f];
        class_terms.push(tape.focal_loss_sum(o.scores, &labels.class_targets(num_classes), alpha, gamma));
        let cells = labels.positive_cells();
        if !cells.is_empty() {
            let logits = model.network.mask_logits(tape, o.kernels, o.mask_features, &cells);
            let probs = tape.sigmoid(logits);
            let dice = tape.dice_rows(probs, &clip.mask_targets[f]);
            mask_terms.push(tape.sum(dice));
        }
    }

    let mut grid_terms = Vec::new();
    let mut grid_ones = 0.0;
    for b in 1..n {
        let rows = clip.labels[b].positive_cells();
        if rows.is_empty() {
            continue;
        }
        for a in 0..b {
            let full = sim_target(&clip.labels[b], &clip.labels[a]);
            let cols = clip.labels[a].instance_of.len();
            let target: Vec<f64> = rows.iter().flat_map(|&r| full[r * cols..(r + 1) * cols].to_vec()).collect();
            grid_ones += target.iter().sum::<f64>();
            let sel = tape.select_rows(outs[b].sim_probs[a], &rows);
            grid_terms.push(tape.focal_loss_sum(sel, &target, alpha, gamma));
        }
    }

    let sum_terms = |tape: &mut Tape, terms: &[Var], norm: f64| -> Option<Var> {
        let mut it = terms.iter().copied();
        let first = it.next()?;
        let total = it.fold(first, |acc, t| tape.add(acc, t));
        Some(tape.scale(total, 1.0 / norm))
    };
    let l_class = sum_terms(tape, &class_terms, norm).expect("at least one frame");
    let l_mask = sum_terms(tape, &mask_terms, norm);
    let l_grid = sum_terms(tape, &grid_terms, grid_ones.max(1.0));

    let mut total = l_class;
    if let Some(m) = l_mask {
        let weighted = tape.scale(m, cfg.mask_weight);
        total = tape.add(total, weighted);
    }
    if let Some(g) = l_grid {
        total = tape.add(total, g);
    }
    let val = |tape: &Tape, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let report = LossReport::new(
        tape.value(l_class).item(),
        val(tape, l_mask),
        val(tape, l_grid),
        cfg.mask_weight,
    );
    (total, report)
}

/// Identities given to pasted instances, above any dataset id.
const PASTE_ID_BASE: u64 = u64::MAX - 64;

/// Frames and annotations of the training videos, decoded once.
struct ClipPool {
    videos: Vec<(u64, Vec<RgbImage>, Vec<Vec<InstanceAnnotation>>)>,
}

impl ClipPool {
    fn new(ds: &VideoDataset, input_size: [usize; 2]) -> Result<Self> {
        let mut videos = Vec::new();
        for v in &ds.videos {
            if [v.height, v.width] != input_size {
                return Err(Error::Config(format!(
                    "video {} is {}x{} but the network expects {}x{}",
                    v.id, v.height, v.width, input_size[0], input_size[1]
                )));
            }
            let frames = (0..v.num_frames()).map(|t| v.frame(t)).collect::<Result<Vec<_>>>()?;
            let anns = (0..v.num_frames())
                .map(|t| {
                    v.instances_at(t)
                        .into_iter()
                        .map(|(id, class_id, mask)| InstanceAnnotation {
                            id,
                            class_id,
                            mask: mask.clone(),
                        })
                        .collect()
                })
                .collect();
            if !frames.is_empty() {
                videos.push((v.id, frames, anns));
            }
        }
        if videos.is_empty() {
            return Err(Error::Config("training set has no frames".into()));
        }
        Ok(Self { videos })
    }

    fn sample(&self, cfg: &TrainConfig, rng: &mut impl Rng) -> (TrainClip, String) {
        let (id, frames, anns) = &self.videos[rng.random_range(0..self.videos.len())];
        let synthetic = frames.len() < CLIP_LEN || rng.random_bool(cfg.synthetic_fraction);
        let (mut clip, mut source) = if synthetic {
            let t = rng.random_range(0..frames.len());
            let clip = synthesize_clip(&frames[t], &anns[t], &cfg.affine, rng);
            (clip, format!("video {id} frame {t} (synthetic)"))
        } else {
            let s = rng.random_range(0..=frames.len() - CLIP_LEN);
            let mut clip = TrainClip {
                frames: frames[s..s + CLIP_LEN].to_vec(),
                annotations: anns[s..s + CLIP_LEN].to_vec(),
            };
            let mut source = format!("video {id} frames {s}..{}", s + CLIP_LEN);
            if rng.random_bool(cfg.clip_warp_prob) {
                let [h, w] = [frames[s].height() as usize, frames[s].width() as usize];
                let t = AffineTransform::sample(&cfg.affine, h, w, rng);
                clip = warp_clip(&clip, &t);
                source.push_str(" warped");
            }
            (clip, source)
        };
        if rng.random_bool(cfg.flip_prob) {
            clip = flip_clip(&clip);
            source.push_str(" flipped");
        }
        if cfg.max_pastes > 0 && rng.random_bool(cfg.paste_prob) {
            let n = rng.random_range(1..=cfg.max_pastes);
            for k in 0..n {
                let (vid, frames, anns) = &self.videos[rng.random_range(0..self.videos.len())];
                let t = rng.random_range(0..frames.len());
                if anns[t].is_empty() {
                    continue;
                }
                let inst = &anns[t][rng.random_range(0..anns[t].len())];
                let patch = InstancePatch {
                    class_id: inst.class_id,
                    image: frames[t].clone(),
                    mask: inst.mask.clone(),
                };
                let (h, w) = (frames[t].height() as f64, frames[t].width() as f64);
                let start = (rng.random_range(-h / 2.0..h / 2.0), rng.random_range(-w / 2.0..w / 2.0));
                let vel = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                let offsets: Vec<(i64, i64)> = (0..clip.frames.len())
                    .map(|f| {
                        let f = f as f64;
                        ((start.0 + vel.0 * f).round() as i64, (start.1 + vel.1 * f).round() as i64)
                    })
                    .collect();
                paste_instance(&mut clip, &patch, PASTE_ID_BASE + k as u64, &offsets);
                source.push_str(&format!(" +paste(video {vid} frame {t} id {})", inst.id));
            }
        }
        if cfg.pixel_noise > 0.0 {
            for f in &mut clip.frames {
                for v in f.iter_mut() {
                    let n = rng.random_range(-cfg.pixel_noise..=cfg.pixel_noise);
                    *v = (*v as f64 + n).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        (clip, source)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    /// Mean loss over the clips of each step.
    pub history: Vec<LossReport>,
}

/// Optimizes the model parameters in `store`. `on_step` runs after every
/// update with the step index (1-based) and its loss.
pub fn train(
    model: &VisoloModel,
    store: &mut ParamStore,
    dataset: &VideoDataset,
    cfg: &TrainConfig,
    norm: &PixelNorm,
    seed: u64,
    mut on_step: impl FnMut(usize, &LossReport, &ParamStore) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pool = ClipPool::new(dataset, model.network_config().input_size)?;
    let mut opt = Adam::new(store);
    opt.weight_decay = cfg.weight_decay;
    let mut outcome = TrainOutcome::default();
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step as u64);
        let mut grads = GradBuffer::new(store);
        let mut reports = Vec::with_capacity(cfg.clips_per_step);
        for _ in 0..cfg.clips_per_step {
            let (clip, source) = pool.sample(cfg, &mut rng);
            let prepared = prepare_clip(model, &clip, norm, cfg.loss.center_scale, source)?;
            let mut tape = Tape::training(store);
            let (loss, report) = clip_loss(model, &mut tape, &prepared, &cfg.loss);
            if !report.is_finite() {
                return Err(diverged(cfg, step, &report, &prepared));
            }
            grads.accumulate(&tape.backward(loss));
            reports.push(report);
        }
        grads.scale(1.0 / cfg.clips_per_step as f64);
        if !grads.is_finite() {
            let mean = LossReport::mean(&reports);
            return Err(Error::Diverged(format!("step {step}: non-finite gradient (loss {mean:?})")));
        }
        if let Some(max) = cfg.max_grad_norm {
            let g = grads.norm();
            if g > max {
                grads.scale(max / g);
            }
        }
        opt.step(store, &grads, cfg.lr_at(step));
        let mean = LossReport::mean(&reports);
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            info!(
                "step {} loss {:.4} (class {:.4} mask {:.4} grid {:.4}) lr {:.2e}",
                step + 1,
                mean.total,
                mean.class,
                mean.mask,
                mean.grid,
                cfg.lr_at(step)
            );
        }
        outcome.history.push(mean);
        on_step(step + 1, &mean, store)?;
    }
    Ok(outcome)
}

fn diverged(cfg: &TrainConfig, step: usize, report: &LossReport, clip: &PreparedClip) -> Error {
    let msg = format!("step {step}: loss {report:?} on {}", clip.source);
    if let Some(dir) = &cfg.dump_dir {
        let dump = serde_json::json!({
            "step": step,
            "loss": report,
            "clip": clip.source,
            "positives": clip.labels.iter().map(|l| l.positive_cells()).collect::<Vec<_>>(),
            "image_finite": clip.images.iter().map(Tensor::is_finite).collect::<Vec<_>>(),
        });
        let path = dir.join(format!("diverged_step{step}.json"));
        let written = std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, dump.to_string()));
        if let Err(e) = written {
            warn!("could not write divergence dump {}: {e}", path.display());
        }
    }
    Error::Diverged(msg)
}
