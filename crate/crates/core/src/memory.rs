//! The per-video feature memory and its retention policy.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Grid-resolution features of one frame, each `[E, S_h, S_w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFeatureSet {
    pub key: Tensor,
    pub category: Tensor,
    pub mask: Tensor,
    pub frame_index: usize,
}

impl GridFeatureSet {
    pub fn new(key: Tensor, category: Tensor, mask: Tensor, frame_index: usize) -> Result<Self> {
        if key.shape().len() != 3 || key.shape() != category.shape() || key.shape() != mask.shape() {
            return Err(shape_err(format!(
                "K {:?}, C {:?} and M {:?} must share one [E, S_h, S_w] shape",
                key.shape(),
                category.shape(),
                mask.shape()
            )));
        }
        Ok(Self {
            key,
            category,
            mask,
            frame_index,
        })
    }

    pub fn get(&self, which: FeatureKind) -> &Tensor {
        match which {
            FeatureKind::Key => &self.key,
            FeatureKind::Category => &self.category,
            FeatureKind::Mask => &self.mask,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Key,
    Category,
    Mask,
}

/// Memory-side projections of a stored frame, computed once at insertion so
/// later frames do not recompute them.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedFeatures {
    /// Memory-path key embedding, `[E', S_h·S_w]`.
    pub key_embed: Tensor,
    /// Value-projected category features, `[E, S_h·S_w]`.
    pub category_value: Tensor,
    /// Value-projected mask features, `[E, S_h·S_w]`.
    pub mask_value: Tensor,
}

#[derive(Clone, Debug)]
pub struct MemoryEntry {
    pub features: GridFeatureSet,
    pub projected: Option<ProjectedFeatures>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetentionPolicy {
    /// The `k` most recent frames.
    LastK(usize),
    /// Frames whose index is a multiple of `n`, nothing else.
    EveryN(usize),
    /// The first frame, every multiple of `n`, and the two most recent
    /// frames.
    FirstPlusEveryNPlusLast2(usize),
}

impl Default for RetentionPolicy {
    fn default() -> Self {
        RetentionPolicy::FirstPlusEveryNPlusLast2(5)
    }
}

impl RetentionPolicy {
    pub fn validate(&self) -> Result<()> {
        let (RetentionPolicy::LastK(v) | RetentionPolicy::EveryN(v) | RetentionPolicy::FirstPlusEveryNPlusLast2(v)) = *self;
        if v == 0 {
            return Err(Error::Config(format!("retention policy {self} needs a positive parameter")));
        }
        Ok(())
    }

    /// Whether a frame is kept. `rank` counts back from the newest inserted
    /// frame (0 = newest).
    fn keeps(&self, frame: usize, rank: usize, first: usize) -> bool {
        match *self {
            RetentionPolicy::LastK(k) => rank < k,
            RetentionPolicy::EveryN(n) => frame.is_multiple_of(n),
            RetentionPolicy::FirstPlusEveryNPlusLast2(n) => frame == first || frame.is_multiple_of(n) || rank < 2,
        }
    }

    /// Frames retained after inserting `frames` in order, without pins.
    pub fn enumerate_retained(&self, frames: &[usize]) -> Vec<usize> {
        let Some(&first) = frames.first() else {
            return Vec::new();
        };
        let n = frames.len();
        frames
            .iter()
            .enumerate()
            .filter(|&(pos, &f)| self.keeps(f, n - 1 - pos, first))
            .map(|(_, &f)| f)
            .collect()
    }

    /// Retained count after inserting frames `0..=t` with no pins.
    pub fn retained_count(&self, t: usize) -> usize {
        match *self {
            RetentionPolicy::LastK(k) => (t + 1).min(k),
            RetentionPolicy::EveryN(n) => t / n + 1,
            RetentionPolicy::FirstPlusEveryNPlusLast2(n) => {
                let recent = [Some(t), t.checked_sub(1)];
                t / n + 1 + recent.iter().flatten().filter(|&&f| f % n != 0).count()
            }
        }
    }
}

impl fmt::Display for RetentionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RetentionPolicy::LastK(k) => write!(f, "last{k}"),
            RetentionPolicy::EveryN(n) => write!(f, "only_every{n}"),
            RetentionPolicy::FirstPlusEveryNPlusLast2(n) => write!(f, "every{n}"),
        }
    }
}

impl FromStr for RetentionPolicy {
    type Err = Error;

    /// Accepts `lastK`, `everyN` (first + multiples of N + last two) and
    /// `only_everyN`.
    fn from_str(s: &str) -> Result<Self> {
        let num = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| Error::Config(format!("unknown memory policy {s:?}; expected last2, last10, last20 or every5")))
        };
        let p = if let Some(rest) = s.strip_prefix("only_every") {
            RetentionPolicy::EveryN(num(rest)?)
        } else if let Some(rest) = s.strip_prefix("every") {
            RetentionPolicy::FirstPlusEveryNPlusLast2(num(rest)?)
        } else if let Some(rest) = s.strip_prefix("last") {
            RetentionPolicy::LastK(num(rest)?)
        } else {
            return Err(Error::Config(format!(
                "unknown memory policy {s:?}; expected last2, last10, last20 or every5"
            )));
        };
        p.validate()?;
        Ok(p)
    }
}

/// Retained frames in ascending index order. Frames pinned by the tracker
/// are exempt from eviction.
#[derive(Clone, Debug)]
pub struct FeatureMemory {
    policy: RetentionPolicy,
    entries: Vec<MemoryEntry>,
    /// Every inserted index that the policy ranks against, i.e. the last
    /// few insertions (older ones only matter through their index).
    recent: Vec<usize>,
    first: Option<usize>,
    pinned: BTreeSet<usize>,
}

impl FeatureMemory {
    pub fn new(policy: RetentionPolicy) -> Result<Self> {
        policy.validate()?;
        Ok(Self {
            policy,
            entries: Vec::new(),
            recent: Vec::new(),
            first: None,
            pinned: BTreeSet::new(),
        })
    }

    pub fn policy(&self) -> RetentionPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.features.frame_index).collect()
    }

    pub fn get(&self, frame_index: usize) -> Option<&MemoryEntry> {
        self.entries.iter().find(|e| e.features.frame_index == frame_index)
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.recent.last().copied()
    }

    pub fn insert(&mut self, features: GridFeatureSet) -> Result<()> {
        self.insert_projected(features, None)
    }

    pub fn insert_projected(&mut self, features: GridFeatureSet, projected: Option<ProjectedFeatures>) -> Result<()> {
        let got = features.frame_index;
        if let Some(last) = self.last_frame() {
            if got <= last {
                return Err(Error::Sequencing { last, got });
            }
        }
        if let Some(e) = self.entries.first() {
            if e.features.key.shape() != features.key.shape() {
                return Err(shape_err(format!(
                    "memory holds {:?} maps, got {:?}",
                    e.features.key.shape(),
                    features.key.shape()
                )));
            }
        }
        self.first.get_or_insert(got);
        self.recent.push(got);
        let window = match self.policy {
            RetentionPolicy::LastK(k) => k,
            _ => 2,
        };
        if self.recent.len() > window {
            self.recent.drain(..self.recent.len() - window);
        }
        self.entries.push(MemoryEntry { features, projected });
        self.evict();
        Ok(())
    }

    /// Replaces the set of frames the tracker needs kept, then evicts
    /// anything no longer protected.
    pub fn set_pinned(&mut self, pinned: BTreeSet<usize>) {
        self.pinned = pinned;
        self.evict();
    }

    pub fn pinned(&self) -> &BTreeSet<usize> {
        &self.pinned
    }

    fn evict(&mut self) {
        let first = self.first.unwrap_or(0);
        let recent = &self.recent;
        let policy = self.policy;
        let pinned = &self.pinned;
        self.entries.retain(|e| {
            let f = e.features.frame_index;
            let rank = recent.iter().rev().position(|&r| r == f).unwrap_or(usize::MAX);
            pinned.contains(&f) || policy.keeps(f, rank, first)
        });
    }

    /// `[T, E, S_h, S_w]` stack of one feature kind in ascending frame order.
    pub fn stack(&self, which: FeatureKind) -> Result<Tensor> {
        let first = self.entries.first().ok_or(Error::EmptyMemory)?;
        let shape = first.features.get(which).shape().to_vec();
        let mut data = Vec::with_capacity(self.entries.len() * first.features.get(which).len());
        for e in &self.entries {
            data.extend_from_slice(e.features.get(which).data());
        }
        let mut full = vec![self.entries.len()];
        full.extend(shape);
        Ok(Tensor::from_vec(&full, data))
    }
}
