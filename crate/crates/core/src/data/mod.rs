//! Video datasets: in-memory representation, the synthetic generator, the
//! YouTube-VIS style annotation format and result files.

pub mod results;
pub mod shapes;
pub mod ytvis;

use std::path::PathBuf;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

pub use shapes::{generate_moving_shapes, SyntheticConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    /// Identifier used in annotation files.
    pub id: u64,
    pub name: String,
}

/// One persistent instance with a mask per frame (`None` where absent).
#[derive(Clone, Debug, PartialEq)]
pub struct TrackAnnotation {
    pub id: u64,
    /// Index into [`VideoDataset::categories`].
    pub class_id: usize,
    pub masks: Vec<Option<BinaryMask>>,
}

#[derive(Clone, Debug)]
pub enum FrameSourceKind {
    InMemory(Vec<RgbImage>),
    Files(Vec<PathBuf>),
}

#[derive(Clone, Debug)]
pub struct Video {
    pub id: u64,
    pub height: usize,
    pub width: usize,
    pub frames: FrameSourceKind,
    pub tracks: Vec<TrackAnnotation>,
}

impl Video {
    pub fn num_frames(&self) -> usize {
        match &self.frames {
            FrameSourceKind::InMemory(v) => v.len(),
            FrameSourceKind::Files(v) => v.len(),
        }
    }

    pub fn frame(&self, t: usize) -> Result<RgbImage> {
        let img = match &self.frames {
            FrameSourceKind::InMemory(v) => v
                .get(t)
                .cloned()
                .ok_or_else(|| Error::Index(format!("video {} has no frame {t}", self.id)))?,
            FrameSourceKind::Files(v) => {
                let p = v
                    .get(t)
                    .ok_or_else(|| Error::Index(format!("video {} has no frame {t}", self.id)))?;
                image::open(p)?.to_rgb8()
            }
        };
        if (img.height() as usize, img.width() as usize) != (self.height, self.width) {
            return Err(Error::Annotation(format!(
                "video {} frame {t} is {}x{}, expected {}x{}",
                self.id,
                img.height(),
                img.width(),
                self.height,
                self.width
            )));
        }
        Ok(img)
    }

    /// Instances visible in frame `t` as `(id, class_id, mask)`.
    pub fn instances_at(&self, t: usize) -> Vec<(u64, usize, &BinaryMask)> {
        self.tracks
            .iter()
            .filter_map(|tr| tr.masks.get(t).and_then(|m| m.as_ref()).map(|m| (tr.id, tr.class_id, m)))
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct VideoDataset {
    pub categories: Vec<Category>,
    pub videos: Vec<Video>,
}

impl VideoDataset {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    /// Splits off the last `n` videos.
    pub fn split_tail(mut self, n: usize) -> (VideoDataset, VideoDataset) {
        let at = self.videos.len().saturating_sub(n);
        let tail = self.videos.split_off(at);
        let cats = self.categories.clone();
        (
            self,
            VideoDataset {
                categories: cats,
                videos: tail,
            },
        )
    }
}

/// Per-channel pixel normalisation applied before the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for PixelNorm {
    /// ImageNet statistics on a 0..1 scale.
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl PixelNorm {
    /// `[3, H, W]` normalised tensor of an RGB image.
    pub fn apply(&self, img: &RgbImage) -> Tensor {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            let (x, y) = (x as usize, y as usize);
            for c in 0..3 {
                data[(c * h + y) * w + x] = (px[c] as f64 / 255.0 - self.mean[c]) / self.std[c];
            }
        }
        Tensor::from_vec(&[3, h, w], data)
    }
}
