//! The online per-video loop: encode, match against memory, aggregate,
//! decode, track, then store the frame.

use std::collections::BTreeMap;
use std::time::Instant;

use image::imageops::{resize, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregation_weights, GridSimilarity, ReweightedScores};
use crate::autograd::Tape;
use crate::data::{PixelNorm, Video, VideoDataset};
use crate::decoder::{decode_frame, DecoderConfig, InstancePrediction};
use crate::error::{Error, Result};
use crate::memory::{FeatureMemory, GridFeatureSet, ProjectedFeatures, RetentionPolicy};
use crate::model::VisoloModel;
use crate::network::{DynamicKernels, MaskFeatureMap};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::tracker::{finalize_video, MatchResult, TrackState, TrackerConfig, VideoResult};

/// Sequential access to the frames of one video.
pub trait FrameSource {
    fn video_id(&self) -> u64;
    fn num_frames(&self) -> usize;
    /// `[height, width]`.
    fn size(&self) -> [usize; 2];
    fn frame(&mut self, t: usize) -> Result<RgbImage>;
}

pub struct VideoFrames<'a>(pub &'a Video);

impl FrameSource for VideoFrames<'_> {
    fn video_id(&self) -> u64 {
        self.0.id
    }

    fn num_frames(&self) -> usize {
        self.0.num_frames()
    }

    fn size(&self) -> [usize; 2] {
        [self.0.height, self.0.width]
    }

    fn frame(&mut self, t: usize) -> Result<RgbImage> {
        self.0.frame(t)
    }
}

/// Wraps a source and records every frame index requested from it.
pub struct AccessRecorder<S> {
    inner: S,
    accesses: Vec<usize>,
}

impl<S: FrameSource> AccessRecorder<S> {
    pub fn new(inner: S) -> Self {
        Self { inner, accesses: Vec::new() }
    }

    pub fn accesses(&self) -> &[usize] {
        &self.accesses
    }

    /// True when frames were read exactly once each, as `0, 1, 2, ...`.
    pub fn is_sequential(&self) -> bool {
        self.accesses.iter().enumerate().all(|(k, &t)| k == t)
    }
}

impl<S: FrameSource> FrameSource for AccessRecorder<S> {
    fn video_id(&self) -> u64 {
        self.inner.video_id()
    }

    fn num_frames(&self) -> usize {
        self.inner.num_frames()
    }

    fn size(&self) -> [usize; 2] {
        self.inner.size()
    }

    fn frame(&mut self, t: usize) -> Result<RgbImage> {
        self.accesses.push(t);
        self.inner.frame(t)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    #[serde(with = "policy_string")]
    pub memory_policy: RetentionPolicy,
    pub decoder: DecoderConfig,
    pub tracker: TrackerConfig,
    /// Keep per-frame reweighting factors and aggregation weights.
    pub record_weights: bool,
}

pub(crate) mod policy_string {
    use super::RetentionPolicy;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &RetentionPolicy, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(p)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RetentionPolicy, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameTiming {
    pub frame_index: usize,
    /// Wall time of the frame, excluding reading it.
    pub seconds: f64,
    /// Memory entries available to the frame.
    pub memory_len: usize,
}

#[derive(Clone, Debug)]
pub struct FrameWeights {
    pub frame_index: usize,
    /// Memory frames in column-block order of `aggregation`.
    pub memory_frames: Vec<usize>,
    /// `[S_h, S_w]` reweighting factor.
    pub reweight: Option<Tensor>,
    /// `[S_h·S_w, T·S_h·S_w]` temporal aggregation weights.
    pub aggregation: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct VideoRun {
    pub result: VideoResult,
    pub frames: Vec<(MatchResult, Vec<InstancePrediction>)>,
    pub timings: Vec<FrameTiming>,
    pub weights: Vec<FrameWeights>,
}

impl VideoRun {
    pub fn seconds(&self) -> f64 {
        self.timings.iter().map(|t| t.seconds).sum()
    }
}

fn to_input(img: &RgbImage, input_size: [usize; 2]) -> RgbImage {
    let [h, w] = input_size;
    if (img.height() as usize, img.width() as usize) == (h, w) {
        img.clone()
    } else {
        resize(img, w as u32, h as u32, FilterType::Triangle)
    }
}

/// Processes one video online. Frames are read in order, each exactly once.
pub fn run_video(model: &VisoloModel, store: &ParamStore, source: &mut impl FrameSource, norm: &PixelNorm, cfg: &InferenceConfig) -> Result<VideoRun> {
    cfg.decoder.validate()?;
    let net_cfg = model.network_config();
    let grid = net_cfg.grid_shape;
    let size = source.size();
    let mut memory = FeatureMemory::new(cfg.memory_policy)?;
    let mut tracks = TrackState::new();
    let mut frames = Vec::with_capacity(source.num_frames());
    let mut timings = Vec::with_capacity(source.num_frames());
    let mut weights = Vec::new();
    for t in 0..source.num_frames() {
        let img = source.frame(t)?;
        let start = Instant::now();
        let input = norm.apply(&to_input(&img, net_cfg.input_size));
        let mut tape = Tape::inference(store);
        let memory_frames = memory.frame_indices();
        let readouts: Vec<_> = memory
            .entries()
            .iter()
            .map(|e| {
                let p = e.projected.as_ref().expect("entries are stored with projections");
                model.readout_cached(&mut tape, e.features.frame_index, p)
            })
            .collect();
        let x = tape.constant(input);
        let out = model.forward_frame(&mut tape, x, &readouts);

        let sims: BTreeMap<usize, GridSimilarity> = memory_frames
            .iter()
            .zip(&out.sim_probs)
            .map(|(&f, &s)| {
                let sim = GridSimilarity {
                    sim: tape.value(s).clone(),
                    as_probability: true,
                };
                (f, sim)
            })
            .collect();
        let scores = ReweightedScores {
            scores: tape.value(out.scores).clone(),
        };
        let kernels = DynamicKernels {
            kernels: tape.value(out.kernels).clone(),
        };
        let mask_feats = MaskFeatureMap {
            features: tape.value(out.mask_features).clone(),
        };
        let preds = decode_frame(&scores, &kernels, &mask_feats, &cfg.decoder, size)?;
        let matched = tracks.track_frame(t, &preds, &sims, grid[1], &cfg.tracker)?;

        if cfg.record_weights {
            let logits: Vec<GridSimilarity> = out
                .sim_logits
                .iter()
                .map(|&s| GridSimilarity {
                    sim: tape.value(s).clone(),
                    as_probability: false,
                })
                .collect();
            let aggregation = if logits.is_empty() {
                None
            } else {
                Some(aggregation_weights(&logits)?.weights)
            };
            let reweight = match out.reweight_factor {
                Some(f) => Some(tape.value(f).clone().reshape(&grid)?),
                None => None,
            };
            weights.push(FrameWeights {
                frame_index: t,
                memory_frames: memory_frames.clone(),
                reweight,
                aggregation,
            });
        }

        let readout = model.readout(&mut tape, t, out.key, out.category, out.mask);
        let projected = ProjectedFeatures {
            key_embed: tape.value(readout.key_embed).clone(),
            category_value: tape.value(readout.category_value).clone(),
            mask_value: tape.value(readout.mask_value).clone(),
        };
        let features = GridFeatureSet::new(
            tape.value(out.key).clone(),
            tape.value(out.category).clone(),
            tape.value(out.mask).clone(),
            t,
        )?;
        memory.set_pinned(tracks.pinned_frames());
        memory.insert_projected(features, Some(projected))?;
        let missing: Vec<usize> = tracks
            .pinned_frames()
            .into_iter()
            .filter(|f| memory.get(*f).is_none())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Tracking(format!("backlog frames {missing:?} are no longer in memory")));
        }
        timings.push(FrameTiming {
            frame_index: t,
            seconds: start.elapsed().as_secs_f64(),
            memory_len: memory_frames.len(),
        });
        frames.push((matched, preds));
    }
    let result = finalize_video(source.video_id(), size, &frames);
    Ok(VideoRun {
        result,
        frames,
        timings,
        weights,
    })
}

#[derive(Clone, Debug)]
pub struct InferenceReport {
    pub results: Vec<VideoResult>,
    pub frames: usize,
    pub seconds: f64,
}

impl InferenceReport {
    /// Frames per second over the whole set, excluding frame reading.
    pub fn fps(&self) -> f64 {
        if self.seconds > 0.0 {
            self.frames as f64 / self.seconds
        } else {
            0.0
        }
    }
}

pub fn run_inference(model: &VisoloModel, store: &ParamStore, dataset: &VideoDataset, norm: &PixelNorm, cfg: &InferenceConfig) -> Result<InferenceReport> {
    let mut report = InferenceReport {
        results: Vec::with_capacity(dataset.videos.len()),
        frames: 0,
        seconds: 0.0,
    };
    for v in &dataset.videos {
        let run = run_video(model, store, &mut VideoFrames(v), norm, cfg)?;
        report.frames += run.timings.len();
        report.seconds += run.seconds();
        report.results.push(run.result);
    }
    Ok(report)
}
