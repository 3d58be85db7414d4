//! Identity assignment across frames from grid similarities, with a backlog
//! of unmatched instances for occlusion and reappearance.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::aggregation::GridSimilarity;
use crate::decoder::InstancePrediction;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub threshold: f64,
    /// Backlog entries older than this many frames are dropped.
    pub backlog_horizon: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            threshold: 0.1,
            backlog_horizon: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActiveTrack {
    pub last_frame: usize,
    pub last_grid: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BacklogEntry {
    pub frame_index: usize,
    pub identity: u64,
    pub grid_index: (usize, usize),
}

#[derive(Clone, Debug, Default)]
pub struct TrackState {
    pub next_id: u64,
    pub active: BTreeMap<u64, ActiveTrack>,
    pub backlog: Vec<BacklogEntry>,
    last_frame: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchResult {
    pub frame_index: usize,
    pub assignments: BTreeMap<(usize, usize), u64>,
    pub new_ids: Vec<u64>,
}

impl MatchResult {
    pub fn identity_of(&self, grid: (usize, usize)) -> Option<u64> {
        self.assignments.get(&grid).copied()
    }
}

impl TrackState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.last_frame
    }

    /// Frames whose features the backlog still refers to.
    pub fn pinned_frames(&self) -> BTreeSet<usize> {
        self.backlog.iter().map(|b| b.frame_index).collect()
    }

    /// Assigns identities to the instances of frame `frame_index`.
    ///
    /// `sims` maps a past frame index to the probability-form similarity
    /// between the current frame (rows) and that frame (columns); it must
    /// cover the previous frame whenever tracks are active and every frame
    /// in the backlog. Grid `(i, j)` maps to row/column `i * grid_w + j`.
    pub fn track_frame(
        &mut self,
        frame_index: usize,
        preds: &[InstancePrediction],
        sims: &BTreeMap<usize, GridSimilarity>,
        grid_w: usize,
        cfg: &TrackerConfig,
    ) -> Result<MatchResult> {
        if let Some(last) = self.last_frame {
            if frame_index <= last {
                return Err(Error::Sequencing { last, got: frame_index });
            }
        }
        let flat = |(i, j): (usize, usize)| i * grid_w + j;
        self.backlog
            .retain(|b| frame_index - b.frame_index <= cfg.backlog_horizon);

        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&a, &b| {
            preds[b]
                .score
                .total_cmp(&preds[a].score)
                .then(preds[a].grid_index.cmp(&preds[b].grid_index))
        });
        let grids: BTreeSet<_> = preds.iter().map(|p| p.grid_index).collect();
        if grids.len() != preds.len() {
            return Err(Error::Tracking("two predictions share one grid cell".into()));
        }

        let mut assigned: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        let mut taken: BTreeSet<u64> = BTreeSet::new();

        if !self.active.is_empty() {
            let prev = self.last_frame.expect("active tracks imply a previous frame");
            let sim = sims.get(&prev).ok_or_else(|| {
                Error::Tracking(format!("no similarity to the previous frame {prev}"))
            })?;
            for &p in &order {
                let row = flat(preds[p].grid_index);
                let best = self
                    .active
                    .iter()
                    .filter(|(id, _)| !taken.contains(id))
                    .map(|(&id, t)| (sim.get(row, flat(t.last_grid)), id))
                    .filter(|&(s, _)| s >= cfg.threshold)
                    .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
                if let Some((_, id)) = best {
                    assigned.insert(preds[p].grid_index, id);
                    taken.insert(id);
                }
            }
        }

        let mut backlog_frames: Vec<usize> = self.pinned_frames().into_iter().collect();
        backlog_frames.reverse();
        for &f in &backlog_frames {
            if !sims.contains_key(&f) {
                return Err(Error::Tracking(format!("backlog frame {f} has no similarity; it must stay pinned in memory")));
            }
        }
        let mut recovered: BTreeSet<u64> = BTreeSet::new();
        for &p in &order {
            if assigned.contains_key(&preds[p].grid_index) {
                continue;
            }
            let row = flat(preds[p].grid_index);
            for &f in &backlog_frames {
                let sim = &sims[&f];
                let best = self
                    .backlog
                    .iter()
                    .filter(|b| b.frame_index == f && !recovered.contains(&b.identity))
                    .map(|b| (sim.get(row, flat(b.grid_index)), b.identity))
                    .filter(|&(s, _)| s >= cfg.threshold)
                    .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
                if let Some((_, id)) = best {
                    assigned.insert(preds[p].grid_index, id);
                    recovered.insert(id);
                    break;
                }
            }
        }
        self.backlog.retain(|b| !recovered.contains(&b.identity));

        let mut new_ids = Vec::new();
        for &p in &order {
            let g = preds[p].grid_index;
            if let std::collections::btree_map::Entry::Vacant(e) = assigned.entry(g) {
                e.insert(self.next_id);
                new_ids.push(self.next_id);
                self.next_id += 1;
            }
        }

        for (&id, t) in &self.active {
            if !taken.contains(&id) {
                self.backlog.push(BacklogEntry {
                    frame_index: t.last_frame,
                    identity: id,
                    grid_index: t.last_grid,
                });
            }
        }
        self.active = assigned
            .iter()
            .map(|(&g, &id)| {
                (
                    id,
                    ActiveTrack {
                        last_frame: frame_index,
                        last_grid: g,
                    },
                )
            })
            .collect();
        self.last_frame = Some(frame_index);
        Ok(MatchResult {
            frame_index,
            assignments: assigned,
            new_ids,
        })
    }
}

/// One identity's output over a whole video.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackResult {
    pub identity: u64,
    pub class_id: usize,
    pub confidence: f64,
    /// One mask per video frame, empty where the identity is absent.
    pub masks: Vec<BinaryMask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoResult {
    pub video_id: u64,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub tracks: Vec<TrackResult>,
}

/// Collects per-frame matches into per-identity mask sequences. The class is
/// the score-weighted vote over frames (ties to the lower class id), the
/// confidence the mean per-frame score.
pub fn finalize_video(video_id: u64, size: [usize; 2], frames: &[(MatchResult, Vec<InstancePrediction>)]) -> VideoResult {
    let [h, w] = size;
    let n = frames.len();
    struct Acc {
        votes: BTreeMap<usize, f64>,
        score_sum: f64,
        present: usize,
        masks: Vec<BinaryMask>,
    }
    let mut accs: BTreeMap<u64, Acc> = BTreeMap::new();
    for (t, (m, preds)) in frames.iter().enumerate() {
        for p in preds {
            let Some(id) = m.identity_of(p.grid_index) else { continue };
            let acc = accs.entry(id).or_insert_with(|| Acc {
                votes: BTreeMap::new(),
                score_sum: 0.0,
                present: 0,
                masks: vec![BinaryMask::empty(h, w); n],
            });
            *acc.votes.entry(p.class_id).or_insert(0.0) += p.score;
            acc.score_sum += p.score;
            acc.present += 1;
            acc.masks[t] = p.mask.clone();
        }
    }
    let tracks = accs
        .into_iter()
        .map(|(identity, a)| {
            let class_id = a
                .votes
                .iter()
                .max_by(|x, y| x.1.total_cmp(y.1).then(y.0.cmp(x.0)))
                .map(|(&c, _)| c)
                .unwrap_or(0);
            TrackResult {
                identity,
                class_id,
                confidence: a.score_sum / a.present as f64,
                masks: a.masks,
            }
        })
        .collect();
    VideoResult {
        video_id,
        num_frames: n,
        height: h,
        width: w,
        tracks,
    }
}
