//! Reading and writing annotation files in the YouTube-VIS layout.
//!
//! A dataset directory holds `annotations.json` and the frame images it
//! references by relative path. Segmentations may be uncompressed RLE,
//! compressed RLE strings or polygons; `null` marks an absent frame.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Category, FrameSourceKind, TrackAnnotation, Video, VideoDataset};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, Rle};

pub const ANNOTATION_FILE: &str = "annotations.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct YtvisFile {
    pub videos: Vec<YtvisVideo>,
    pub annotations: Vec<YtvisAnnotation>,
    pub categories: Vec<Category>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct YtvisVideo {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub length: usize,
    pub file_names: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct YtvisAnnotation {
    pub id: u64,
    pub video_id: u64,
    pub category_id: u64,
    pub segmentations: Vec<Option<Segmentation>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub areas: Option<Vec<Option<u64>>>,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Rle(Rle),
    Polygons(Vec<Vec<f64>>),
}

impl Segmentation {
    pub fn decode(&self, height: usize, width: usize) -> Result<BinaryMask> {
        match self {
            Segmentation::Rle(r) => {
                if r.size != [height, width] {
                    return Err(Error::Annotation(format!(
                        "RLE size {:?} does not match frame {height}x{width}",
                        r.size
                    )));
                }
                r.decode()
            }
            Segmentation::Polygons(polys) => rasterize_polygons(polys, height, width),
        }
    }
}

/// Even-odd fill of `[x0, y0, x1, y1, ...]` polygons sampled at pixel
/// centers.
pub fn rasterize_polygons(polys: &[Vec<f64>], height: usize, width: usize) -> Result<BinaryMask> {
    for p in polys {
        if p.len() < 6 || p.len() % 2 != 0 {
            return Err(Error::Annotation(format!(
                "polygon needs an even number of at least 6 coordinates, got {}",
                p.len()
            )));
        }
    }
    let mut mask = BinaryMask::empty(height, width);
    for poly in polys {
        let pts: Vec<(f64, f64)> = poly.chunks(2).map(|c| (c[0], c[1])).collect();
        for y in 0..height {
            let py = y as f64 + 0.5;
            for x in 0..width {
                let px = x as f64 + 0.5;
                let mut inside = false;
                let mut j = pts.len() - 1;
                for i in 0..pts.len() {
                    let (xi, yi) = pts[i];
                    let (xj, yj) = pts[j];
                    if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                if inside {
                    mask.set(y, x, !mask.get(y, x));
                }
            }
        }
    }
    Ok(mask)
}

/// Loads `annotations.json` (or the given JSON file); frame paths resolve
/// relative to the file's directory.
pub fn load_ytvis(path: &Path) -> Result<VideoDataset> {
    let file = if path.is_dir() { path.join(ANNOTATION_FILE) } else { path.to_path_buf() };
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(&file)?;
    let parsed: YtvisFile = serde_json::from_str(&text)?;
    from_ytvis(parsed, &root)
}

pub fn from_ytvis(file: YtvisFile, root: &Path) -> Result<VideoDataset> {
    let class_of: HashMap<u64, usize> = file.categories.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    let mut videos: Vec<Video> = Vec::with_capacity(file.videos.len());
    let mut index: HashMap<u64, usize> = HashMap::new();
    for v in &file.videos {
        if v.file_names.len() != v.length {
            return Err(Error::Annotation(format!(
                "video {}: length {} but {} file names",
                v.id,
                v.length,
                v.file_names.len()
            )));
        }
        if index.insert(v.id, videos.len()).is_some() {
            return Err(Error::Annotation(format!("duplicate video id {}", v.id)));
        }
        videos.push(Video {
            id: v.id,
            height: v.height,
            width: v.width,
            frames: FrameSourceKind::Files(v.file_names.iter().map(|f| root.join(f)).collect::<Vec<PathBuf>>()),
            tracks: Vec::new(),
        });
    }
    for a in &file.annotations {
        let &vi = index
            .get(&a.video_id)
            .ok_or_else(|| Error::Annotation(format!("annotation {}: unknown video {}", a.id, a.video_id)))?;
        let video = &mut videos[vi];
        let &class_id = class_of.get(&a.category_id).ok_or_else(|| {
            Error::Annotation(format!(
                "video {} instance {}: unknown category {}",
                a.video_id, a.id, a.category_id
            ))
        })?;
        if a.segmentations.len() != video.num_frames() {
            return Err(Error::Annotation(format!(
                "video {} instance {}: {} segmentations for {} frames",
                a.video_id,
                a.id,
                a.segmentations.len(),
                video.num_frames()
            )));
        }
        let masks = a
            .segmentations
            .iter()
            .enumerate()
            .map(|(t, s)| {
                s.as_ref()
                    .map(|s| {
                        s.decode(video.height, video.width).map_err(|e| {
                            Error::Annotation(format!("video {} frame {t} instance {}: {e}", a.video_id, a.id))
                        })
                    })
                    .transpose()
                    .map(|m| m.filter(|m| !m.is_empty()))
            })
            .collect::<Result<Vec<_>>>()?;
        video.tracks.push(TrackAnnotation {
            id: a.id,
            class_id,
            masks,
        });
    }
    Ok(VideoDataset {
        categories: file.categories,
        videos,
    })
}

/// Writes frames as PNG under `dir/frames/<video>/` plus `annotations.json`
/// with compressed RLE segmentations.
pub fn write_ytvis(ds: &VideoDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut videos = Vec::new();
    let mut annotations = Vec::new();
    for v in &ds.videos {
        let rel = PathBuf::from("frames").join(v.id.to_string());
        fs::create_dir_all(dir.join(&rel))?;
        let mut names = Vec::new();
        for t in 0..v.num_frames() {
            let name = rel.join(format!("{t:05}.png"));
            v.frame(t)?.save(dir.join(&name))?;
            names.push(name.to_string_lossy().replace('\\', "/"));
        }
        videos.push(YtvisVideo {
            id: v.id,
            width: v.width,
            height: v.height,
            length: v.num_frames(),
            file_names: names,
        });
        for tr in &v.tracks {
            let segmentations = tr
                .masks
                .iter()
                .map(|m| m.as_ref().map(|m| m.to_rle().compressed().map(Segmentation::Rle)).transpose())
                .collect::<Result<Vec<_>>>()?;
            annotations.push(YtvisAnnotation {
                id: tr.id,
                video_id: v.id,
                category_id: ds.categories[tr.class_id].id,
                areas: Some(tr.masks.iter().map(|m| m.as_ref().map(|m| m.area() as u64)).collect()),
                segmentations,
                iscrowd: 0,
            });
        }
    }
    let file = YtvisFile {
        videos,
        annotations,
        categories: ds.categories.clone(),
    };
    fs::write(dir.join(ANNOTATION_FILE), serde_json::to_string(&file)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rle_area_equals_run_sum() {
        let json = r#"{
            "videos": [{"id": 1, "width": 3, "height": 2, "length": 1, "file_names": ["a.png"]}],
            "annotations": [{"id": 5, "video_id": 1, "category_id": 7,
                             "segmentations": [{"size": [2, 3], "counts": [1, 3, 2]}]}],
            "categories": [{"id": 7, "name": "thing"}]
        }"#;
        let ds = from_ytvis(serde_json::from_str(json).unwrap(), Path::new(".")).unwrap();
        let m = ds.videos[0].tracks[0].masks[0].as_ref().unwrap();
        assert_eq!(m.area(), 3);
        assert!(m.get(1, 0) && m.get(0, 1) && m.get(1, 1) && !m.get(0, 0));
    }

    #[test]
    fn malformed_annotation_names_coordinates() {
        let json = r#"{
            "videos": [{"id": 1, "width": 3, "height": 2, "length": 2, "file_names": ["a.png", "b.png"]}],
            "annotations": [{"id": 5, "video_id": 1, "category_id": 7,
                             "segmentations": [null, {"size": [2, 3], "counts": [1, 3]}]}],
            "categories": [{"id": 7, "name": "thing"}]
        }"#;
        let err = from_ytvis(serde_json::from_str(json).unwrap(), Path::new(".")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("video 1") && msg.contains("frame 1") && msg.contains("instance 5"), "{msg}");
    }

    #[test]
    fn polygon_square() {
        let m = rasterize_polygons(&[vec![1.0, 1.0, 3.0, 1.0, 3.0, 3.0, 1.0, 3.0]], 4, 4).unwrap();
        assert_eq!(m, BinaryMask::from_fn(4, 4, |y, x| (1..3).contains(&y) && (1..3).contains(&x)));
        assert!(rasterize_polygons(&[vec![1.0, 2.0]], 4, 4).is_err());
    }

    #[test]
    fn empty_dataset_loads() {
        let json = r#"{"videos": [], "annotations": [], "categories": []}"#;
        let ds = from_ytvis(serde_json::from_str(json).unwrap(), Path::new(".")).unwrap();
        assert!(ds.videos.is_empty());
    }
}
