//! Grid label assignment from instance masks.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::{resize_bilinear, Tensor};

/// Default scale of the center region relative to the instance box.
pub const CENTER_SCALE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceAnnotation {
    pub id: u64,
    pub class_id: usize,
    /// At input resolution.
    pub mask: BinaryMask,
}

/// Targets of one frame over the grid. Cells are flattened as `i·S_w + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelAssignment {
    pub grid_shape: [usize; 2],
    /// Class per cell, `None` for background.
    pub cat_target: Vec<Option<usize>>,
    /// Instance id per positive cell.
    pub instance_of: Vec<Option<u64>>,
    /// Target mask per positive cell, at input resolution.
    pub mask_targets: BTreeMap<usize, BinaryMask>,
}

impl LabelAssignment {
    pub fn positive_cells(&self) -> Vec<usize> {
        self.mask_targets.keys().copied().collect()
    }

    pub fn num_positive(&self) -> usize {
        self.mask_targets.len()
    }

    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        self.cat_target[i * self.grid_shape[1] + j].is_some()
    }

    /// Flattened one-hot class targets, `[C_cls, S_h·S_w]` row-major.
    pub fn class_targets(&self, num_classes: usize) -> Vec<f64> {
        let n = self.cat_target.len();
        let mut t = vec![0.0; num_classes * n];
        for (cell, c) in self.cat_target.iter().enumerate() {
            if let Some(c) = c {
                t[c * n + cell] = 1.0;
            }
        }
        t
    }
}

/// Grid cells positive for one mask: those intersecting the center region
/// (the bounding box scaled by `eps` around the mask centroid), limited to
/// the centroid cell and its 8 neighbours.
pub fn center_cells(mask: &BinaryMask, grid: [usize; 2], eps: f64) -> Option<Vec<(usize, usize)>> {
    let (cy, cx) = mask.centroid()?;
    let (cy, cx) = (cy + 0.5, cx + 0.5);
    let (y0, x0, y1, x1) = mask.bbox()?;
    let half_h = eps * (y1 - y0 + 1) as f64 / 2.0;
    let half_w = eps * (x1 - x0 + 1) as f64 / 2.0;
    let cell_h = mask.height() as f64 / grid[0] as f64;
    let cell_w = mask.width() as f64 / grid[1] as f64;
    let idx = |v: f64, cell: f64, n: usize| ((v / cell).floor().max(0.0) as usize).min(n - 1);
    let (ci, cj) = (idx(cy, cell_h, grid[0]), idx(cx, cell_w, grid[1]));
    let top = idx(cy - half_h, cell_h, grid[0]).max(ci.saturating_sub(1));
    let bottom = idx(cy + half_h, cell_h, grid[0]).min(ci + 1);
    let left = idx(cx - half_w, cell_w, grid[1]).max(cj.saturating_sub(1));
    let right = idx(cx + half_w, cell_w, grid[1]).min(cj + 1);
    let mut cells = Vec::new();
    for i in top..=bottom {
        for j in left..=right {
            cells.push((i, j));
        }
    }
    Some(cells)
}

/// Labels for one frame. Larger instances are assigned first so that a
/// smaller instance wins any contested cell.
pub fn assign_frame(instances: &[InstanceAnnotation], grid: [usize; 2], eps: f64) -> Result<LabelAssignment> {
    let n = grid[0] * grid[1];
    let mut out = LabelAssignment {
        grid_shape: grid,
        cat_target: vec![None; n],
        instance_of: vec![None; n],
        mask_targets: BTreeMap::new(),
    };
    let mut order: Vec<&InstanceAnnotation> = instances.iter().collect();
    order.sort_by(|a, b| b.mask.area().cmp(&a.mask.area()).then(a.id.cmp(&b.id)));
    for inst in order {
        let cells = center_cells(&inst.mask, grid, eps)
            .ok_or_else(|| Error::Annotation(format!("instance {} has an empty mask", inst.id)))?;
        for (i, j) in cells {
            let cell = i * grid[1] + j;
            out.cat_target[cell] = Some(inst.class_id);
            out.instance_of[cell] = Some(inst.id);
            out.mask_targets.insert(cell, inst.mask.clone());
        }
    }
    Ok(out)
}

/// Labels for every frame of a clip.
pub fn assign_labels(frames: &[Vec<InstanceAnnotation>], grid: [usize; 2], eps: f64) -> Result<Vec<LabelAssignment>> {
    frames.iter().map(|f| assign_frame(f, grid, eps)).collect()
}

/// `[S_h·S_w, S_h·S_w]` similarity targets between frame `a` (rows) and
/// frame `b` (columns): 1 where both cells are positive for the same id.
pub fn sim_target(a: &LabelAssignment, b: &LabelAssignment) -> Vec<f64> {
    let n = a.instance_of.len();
    let m = b.instance_of.len();
    let mut t = vec![0.0; n * m];
    for (r, ia) in a.instance_of.iter().enumerate() {
        let Some(ia) = ia else { continue };
        for (c, ib) in b.instance_of.iter().enumerate() {
            if ib.as_ref() == Some(ia) {
                t[r * m + c] = 1.0;
            }
        }
    }
    t
}

/// Binary mask at `[h, w]`: block average when the size divides evenly,
/// bilinear otherwise, thresholded at 0.5.
pub fn downsample_mask(mask: &BinaryMask, h: usize, w: usize) -> Vec<f64> {
    let (mh, mw) = mask.shape();
    if mh % h == 0 && mw % w == 0 {
        let (fy, fx) = (mh / h, mw / w);
        let area = (fy * fx) as f64;
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0usize;
                for dy in 0..fy {
                    for dx in 0..fx {
                        s += mask.get(y * fy + dy, x * fx + dx) as usize;
                    }
                }
                out[y * w + x] = if s as f64 / area >= 0.5 { 1.0 } else { 0.0 };
            }
        }
        return out;
    }
    let t: Tensor = resize_bilinear(&mask.to_tensor(), h, w);
    t.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, y: usize, x: usize, s: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |yy, xx| (y..y + s).contains(&yy) && (x..x + s).contains(&xx))
    }

    #[test]
    fn small_region_hits_one_cell() {
        let inst = InstanceAnnotation {
            id: 1,
            class_id: 2,
            mask: square(64, 112, 20, 36, 8),
        };
        let l = assign_frame(&[inst], [4, 7], 0.2).unwrap();
        assert_eq!(l.positive_cells(), vec![7 + 2]);
        assert_eq!(l.cat_target[9], Some(2));
    }

    #[test]
    fn sim_target_pairs_same_ids() {
        let mut a = assign_frame(&[], [2, 4], 0.2).unwrap();
        let mut b = a.clone();
        a.instance_of[5] = Some(3);
        b.instance_of[7] = Some(3);
        b.instance_of[1] = Some(4);
        let t = sim_target(&a, &b);
        let ones: Vec<usize> = (0..64).filter(|&k| t[k] == 1.0).collect();
        assert_eq!(ones, vec![5 * 8 + 7]);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let inst = InstanceAnnotation {
            id: 4,
            class_id: 0,
            mask: BinaryMask::empty(8, 8),
        };
        assert!(matches!(assign_frame(&[inst], [2, 2], 0.2), Err(Error::Annotation(_))));
    }

    #[test]
    fn downsample_block_average() {
        let m = square(4, 4, 0, 0, 2);
        assert_eq!(downsample_mask(&m, 2, 2), vec![1.0, 0.0, 0.0, 0.0]);
    }
}
