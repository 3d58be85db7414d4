//! PNG renderings: identity-colored mask overlays and grid weight heatmaps.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::data::Video;
use crate::error::{shape_err, Result};
use crate::inference::FrameWeights;
use crate::mask::BinaryMask;
use crate::tensor::Tensor;
use crate::tracker::VideoResult;

/// A saturated color that depends only on the identity.
pub fn identity_color(identity: u64) -> Rgb<u8> {
    // Golden-ratio hue steps keep consecutive ids far apart.
    let hue = (identity as f64 * 0.618_033_988_749_895).fract();
    hsv_to_rgb(hue, 0.85, 1.0)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Rgb<u8> {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    Rgb([(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8])
}

fn on_boundary(m: &BinaryMask, y: usize, x: usize) -> bool {
    let (h, w) = m.shape();
    y == 0 || x == 0 || y + 1 == h || x + 1 == w || !m.get(y - 1, x) || !m.get(y + 1, x) || !m.get(y, x - 1) || !m.get(y, x + 1)
}

/// Blends each mask's identity color into `frame` and outlines the mask.
pub fn overlay_frame(frame: &RgbImage, masks: &[(u64, &BinaryMask)], alpha: f64) -> Result<RgbImage> {
    let mut out = frame.clone();
    let (w, h) = (frame.width() as usize, frame.height() as usize);
    for &(id, m) in masks {
        if m.shape() != (h, w) {
            return Err(shape_err(format!("mask {:?} does not match frame {h}x{w}", m.shape())));
        }
        let c = identity_color(id);
        for y in 0..h {
            for x in 0..w {
                if !m.get(y, x) {
                    continue;
                }
                let px = out.get_pixel_mut(x as u32, y as u32);
                if on_boundary(m, y, x) {
                    *px = c;
                } else {
                    for k in 0..3 {
                        px[k] = ((1.0 - alpha) * px[k] as f64 + alpha * c[k] as f64).round() as u8;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Writes `<out_dir>/<video id>/frame_NNNN.png` for every frame.
pub fn render_video(video: &Video, result: &VideoResult, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if result.num_frames != video.num_frames() {
        return Err(shape_err(format!(
            "result for video {} has {} frames, the video has {}",
            video.id,
            result.num_frames,
            video.num_frames()
        )));
    }
    let dir = out_dir.join(video.id.to_string());
    std::fs::create_dir_all(&dir)?;
    let mut paths = Vec::with_capacity(video.num_frames());
    for t in 0..video.num_frames() {
        let frame = video.frame(t)?;
        let masks: Vec<(u64, &BinaryMask)> = result
            .tracks
            .iter()
            .filter(|tr| !tr.masks[t].is_empty())
            .map(|tr| (tr.identity, &tr.masks[t]))
            .collect();
        let img = overlay_frame(&frame, &masks, 0.5)?;
        let p = dir.join(format!("frame_{t:04}.png"));
        img.save(&p)?;
        paths.push(p);
    }
    Ok(paths)
}

fn heat_color(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let r = (v * 3.0).min(1.0);
    let g = (v * 3.0 - 1.0).clamp(0.0, 1.0);
    let b = (v * 3.0 - 2.0).clamp(0.0, 1.0);
    Rgb([(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8])
}

/// Renders a `[rows, cols]` map with each value drawn as a `cell`-pixel
/// square, scaled so the maximum is brightest.
pub fn heatmap(values: &Tensor, cell: usize) -> Result<RgbImage> {
    let &[rows, cols] = values.shape() else {
        return Err(shape_err(format!("heatmap expects a 2-d map, got {:?}", values.shape())));
    };
    let max = values.data().iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let cell = cell.max(1);
    Ok(RgbImage::from_fn((cols * cell) as u32, (rows * cell) as u32, |x, y| {
        let (i, j) = (y as usize / cell, x as usize / cell);
        heat_color(values.data()[i * cols + j] * scale)
    }))
}

/// Aggregation weights of one query grid, `[T, S_h, S_w]`, in memory order.
/// Before any display scaling these sum to 1.
pub fn aggregation_for_query(weights: &Tensor, query: usize, grid: [usize; 2]) -> Result<Tensor> {
    let n = grid[0] * grid[1];
    let &[rows, cols] = weights.shape() else {
        return Err(shape_err(format!("aggregation weights must be 2-d, got {:?}", weights.shape())));
    };
    if rows != n || cols % n != 0 || query >= n {
        return Err(shape_err(format!(
            "aggregation weights {:?} and query {query} do not fit grid {grid:?}",
            weights.shape()
        )));
    }
    let row = weights.data()[query * cols..(query + 1) * cols].to_vec();
    Ok(Tensor::from_vec(&[cols / n, grid[0], grid[1]], row))
}

/// Writes `reweight_NNNN.png` and `aggregation_NNNN.png` per recorded
/// frame. The aggregation image places one heatmap per memory frame side by
/// side, for the query grid `query`.
pub fn write_weight_heatmaps(weights: &[FrameWeights], grid: [usize; 2], query: usize, cell: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::new();
    for fw in weights {
        if let Some(r) = &fw.reweight {
            let p = out_dir.join(format!("reweight_{:04}.png", fw.frame_index));
            heatmap(r, cell)?.save(&p)?;
            paths.push(p);
        }
        if let Some(a) = &fw.aggregation {
            let per_frame = aggregation_for_query(a, query, grid)?;
            let t = per_frame.shape()[0];
            // Shared scale across memory frames so blocks stay comparable.
            let strip = Tensor::from_vec(&[grid[0], t * grid[1]], {
                let mut v = vec![0.0; grid[0] * t * grid[1]];
                for k in 0..t {
                    for i in 0..grid[0] {
                        for j in 0..grid[1] {
                            v[i * t * grid[1] + k * grid[1] + j] = per_frame.data()[(k * grid[0] + i) * grid[1] + j];
                        }
                    }
                }
                v
            });
            let p = out_dir.join(format!("aggregation_{:04}.png", fw.frame_index));
            heatmap(&strip, cell)?.save(&p)?;
            paths.push(p);
        }
    }
    Ok(paths)
}
