//! Binary masks and their run-length encodings.
//!
//! Run lengths follow the COCO convention: pixels are visited column by
//! column (column-major), runs alternate starting with background, and the
//! compressed string form packs each run into 5-bit groups offset by 48.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    /// Row-major.
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err(format!(
                "{height}x{width} mask given {} pixels",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    /// Pixels of `probs` (`[H, W]`) at or above `thresh`.
    pub fn threshold(probs: &Tensor, thresh: f64) -> Self {
        let s = probs.shape();
        assert_eq!(s.len(), 2, "threshold expects an [H, W] map");
        Self {
            height: s[0],
            width: s[1],
            data: probs.data().iter().map(|&p| p >= thresh).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// `(intersection, union)` pixel counts.
    pub fn overlap(&self, other: &BinaryMask) -> Result<(usize, usize)> {
        if self.shape() != other.shape() {
            return Err(shape_err(format!(
                "mask shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            )));
        }
        let mut inter = 0;
        let mut union = 0;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok((inter, union))
    }

    /// Mask as a `[H, W]` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[self.height, self.width],
            self.data.iter().map(|&v| v as u8 as f64).collect(),
        )
    }

    /// Pixel centroid `(y, x)`, or `None` for an empty mask.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    sy += y as f64;
                    sx += x as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sy / n as f64, sx / n as f64))
    }

    /// Inclusive bounding box `(y0, x0, y1, x1)`.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    b = Some(match b {
                        None => (y, x, y, x),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                    });
                }
            }
        }
        b
    }

    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for x in 0..self.width {
            for y in 0..self.height {
                let v = self.get(y, x);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Rle {
            size: [self.height, self.width],
            counts: RleCounts::Runs(counts),
        }
    }
}

/// Intersection over union; 0 when both masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, union) = a.overlap(b)?;
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RleCounts {
    Runs(Vec<u64>),
    Compressed(String),
}

/// A run-length encoded mask, `size = [height, width]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub size: [usize; 2],
    pub counts: RleCounts,
}

impl Rle {
    pub fn runs(&self) -> Result<Vec<u64>> {
        match &self.counts {
            RleCounts::Runs(r) => Ok(r.clone()),
            RleCounts::Compressed(s) => decode_counts(s),
        }
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        let [h, w] = self.size;
        let runs = self.runs()?;
        let total: u64 = runs.iter().sum();
        if total != (h * w) as u64 {
            return Err(Error::Annotation(format!(
                "run lengths sum to {total}, expected {h}x{w} = {}",
                h * w
            )));
        }
        let mut mask = BinaryMask::empty(h, w);
        let mut pos = 0usize;
        for (k, &r) in runs.iter().enumerate() {
            if k % 2 == 1 {
                for p in pos..pos + r as usize {
                    mask.set(p % h, p / h, true);
                }
            }
            pos += r as usize;
        }
        Ok(mask)
    }

    /// The same encoding with counts in compressed string form.
    pub fn compressed(&self) -> Result<Rle> {
        Ok(Rle {
            size: self.size,
            counts: RleCounts::Compressed(encode_counts(&self.runs()?)),
        })
    }
}

/// COCO's compressed run-length string.
pub fn encode_counts(runs: &[u64]) -> String {
    let mut out = String::new();
    for (i, &r) in runs.iter().enumerate() {
        let mut x = r as i64;
        if i > 2 {
            x -= runs[i - 2] as i64;
        }
        loop {
            let mut c = x & 0x1f;
            x >>= 5;
            let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                c |= 0x20;
            }
            out.push((c as u8 + 48) as char);
            if !more {
                break;
            }
        }
    }
    out
}

pub fn decode_counts(s: &str) -> Result<Vec<u64>> {
    let bytes = s.as_bytes();
    let mut runs: Vec<u64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let b = *bytes
                .get(p)
                .ok_or_else(|| Error::Annotation("truncated compressed RLE".into()))?;
            if !(48..48 + 64).contains(&b) {
                return Err(Error::Annotation(format!("invalid RLE character {:?}", b as char)));
            }
            let c = (b - 48) as i64;
            x |= (c & 0x1f) << (5 * k);
            p += 1;
            k += 1;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
            if k > 12 {
                return Err(Error::Annotation("RLE count overflow".into()));
            }
        }
        let i = runs.len();
        if i > 2 {
            x += runs[i - 2] as i64;
        }
        if x < 0 {
            return Err(Error::Annotation("negative RLE run".into()));
        }
        runs.push(x as u64);
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = BinaryMask::new(2, 2, vec![true, true, false, false]).unwrap();
        let b = BinaryMask::new(2, 2, vec![false, true, false, true]).unwrap();
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &b).unwrap(), 1.0 / 3.0);
        let c = BinaryMask::new(2, 2, vec![false, false, true, true]).unwrap();
        assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);
        let e = BinaryMask::empty(2, 2);
        assert_eq!(mask_iou(&e, &e).unwrap(), 0.0);
        assert!(mask_iou(&a, &BinaryMask::empty(1, 4)).is_err());
    }

    #[test]
    fn rle_is_column_major() {
        // 2x3, pixels set at (0,1) and (1,1): column 1 full
        let m = BinaryMask::from_fn(2, 3, |_, x| x == 1);
        assert_eq!(m.to_rle().counts, RleCounts::Runs(vec![2, 2, 2]));
        assert_eq!(m.to_rle().decode().unwrap(), m);
    }

    #[test]
    fn known_compressed_string() {
        // runs after the third are stored as deltas to the run two back
        let runs = vec![1, 2, 3, 4];
        assert_eq!(encode_counts(&runs), "1232");
        assert_eq!(decode_counts("1232").unwrap(), runs);
        let big = vec![0, 1000, 3, 70000, 1];
        assert_eq!(decode_counts(&encode_counts(&big)).unwrap(), big);
    }

    #[test]
    fn bad_rle_is_reported() {
        let r = Rle {
            size: [2, 2],
            counts: RleCounts::Runs(vec![1, 1]),
        };
        assert!(matches!(r.decode(), Err(Error::Annotation(_))));
        assert!(decode_counts("2\u{7f}").is_err());
    }
}
