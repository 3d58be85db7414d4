//! Prediction files: one JSON document per video, `video_<id>.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Category;
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, Rle};
use crate::tracker::{TrackResult, VideoResult};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultFile {
    pub video_id: u64,
    pub height: usize,
    pub width: usize,
    pub length: usize,
    pub instances: Vec<ResultInstance>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultInstance {
    pub identity: u64,
    pub category_id: u64,
    pub score: f64,
    /// Compressed RLE per frame, `null` where the identity is absent.
    pub segmentations: Vec<Option<Rle>>,
}

pub fn result_file_name(video_id: u64) -> String {
    format!("video_{video_id}.json")
}

pub fn to_result_file(r: &VideoResult, categories: &[Category]) -> Result<ResultFile> {
    let instances = r
        .tracks
        .iter()
        .map(|t| {
            let category_id = categories
                .get(t.class_id)
                .ok_or_else(|| Error::Config(format!("class index {} has no category", t.class_id)))?
                .id;
            let segmentations = t
                .masks
                .iter()
                .map(|m| if m.is_empty() { Ok(None) } else { m.to_rle().compressed().map(Some) })
                .collect::<Result<Vec<_>>>()?;
            Ok(ResultInstance {
                identity: t.identity,
                category_id,
                score: t.confidence,
                segmentations,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResultFile {
        video_id: r.video_id,
        height: r.height,
        width: r.width,
        length: r.num_frames,
        instances,
    })
}

pub fn from_result_file(f: &ResultFile, categories: &[Category]) -> Result<VideoResult> {
    let tracks = f
        .instances
        .iter()
        .map(|inst| {
            let class_id = categories
                .iter()
                .position(|c| c.id == inst.category_id)
                .ok_or_else(|| {
                    Error::Annotation(format!(
                        "video {} identity {}: unknown category {}",
                        f.video_id, inst.identity, inst.category_id
                    ))
                })?;
            if inst.segmentations.len() != f.length {
                return Err(Error::Annotation(format!(
                    "video {} identity {}: {} masks for {} frames",
                    f.video_id,
                    inst.identity,
                    inst.segmentations.len(),
                    f.length
                )));
            }
            let masks = inst
                .segmentations
                .iter()
                .map(|s| match s {
                    Some(r) => r.decode(),
                    None => Ok(BinaryMask::empty(f.height, f.width)),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TrackResult {
                identity: inst.identity,
                class_id,
                confidence: inst.score,
                masks,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VideoResult {
        video_id: f.video_id,
        num_frames: f.length,
        height: f.height,
        width: f.width,
        tracks,
    })
}

pub fn write_results(dir: &Path, results: &[VideoResult], categories: &[Category]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in results {
        let f = to_result_file(r, categories)?;
        fs::write(dir.join(result_file_name(r.video_id)), serde_json::to_string(&f)?)?;
    }
    Ok(())
}

/// Reads every `video_*.json` in `dir`, sorted by video id.
pub fn read_results(dir: &Path, categories: &[Category]) -> Result<Vec<VideoResult>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if !(name.starts_with("video_") && name.ends_with(".json")) {
            continue;
        }
        let f: ResultFile = serde_json::from_str(&fs::read_to_string(&path)?)?;
        out.push(from_result_file(&f, categories)?);
    }
    out.sort_by_key(|r| r.video_id);
    Ok(out)
}
