//! Three-frame clips synthesized from one still image by random affine
//! warps.

use image::{Rgb, RgbImage};
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use super::labels::InstanceAnnotation;
use crate::data::Video;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub const CLIP_LEN: usize = 3;

/// Sampling ranges for the random warps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffineRanges {
    pub max_rotation_deg: f64,
    pub scale: [f64; 2],
    /// Fraction of the image size.
    pub max_translate: f64,
    pub max_shear_deg: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self {
            max_rotation_deg: 10.0,
            scale: [0.9, 1.1],
            max_translate: 0.05,
            max_shear_deg: 5.0,
        }
    }
}

/// Rotation, isotropic scale and shear about the image center, followed by
/// a translation in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform {
    pub rotation_deg: f64,
    pub scale: f64,
    pub shear_deg: f64,
    /// `(dy, dx)`.
    pub translate: (f64, f64),
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: 1.0,
            shear_deg: 0.0,
            translate: (0.0, 0.0),
        }
    }

    pub fn sample(ranges: &AffineRanges, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let mut uni = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let rotation_deg = uni(ranges.max_rotation_deg);
        let shear_deg = uni(ranges.max_shear_deg);
        let dy = uni(ranges.max_translate * h as f64);
        let dx = uni(ranges.max_translate * w as f64);
        let [lo, hi] = ranges.scale;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Self {
            rotation_deg,
            scale,
            shear_deg,
            translate: (dy, dx),
        }
    }

    /// Forward 2×2 matrix acting on `(y, x)` offsets from the center:
    /// scale · rotation · shear, the shear moving `x` by `tan(shear)·y`.
    fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let k = self.shear_deg.to_radians().tan();
        let r = [[c, -s], [s, c]];
        let sh = [[1.0, 0.0], [k, 1.0]];
        let mut m = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] = self.scale * (r[i][0] * sh[0][j] + r[i][1] * sh[1][j]);
            }
        }
        m
    }

    /// Source position `(y, x)` of the output pixel center at `(y, x)`.
    fn source(&self, inv: &[[f64; 2]; 2], center: (f64, f64), y: usize, x: usize) -> (f64, f64) {
        let oy = y as f64 + 0.5 - center.0 - self.translate.0;
        let ox = x as f64 + 0.5 - center.1 - self.translate.1;
        (
            inv[0][0] * oy + inv[0][1] * ox + center.0 - 0.5,
            inv[1][0] * oy + inv[1][1] * ox + center.1 - 0.5,
        )
    }

    fn inverse(&self) -> [[f64; 2]; 2] {
        let m = self.matrix();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]]
    }

    /// Bilinear warp; pixels mapped from outside the image are black.
    pub fn warp_image(&self, img: &RgbImage) -> RgbImage {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let inv = self.inverse();
        let center = (h as f64 / 2.0, w as f64 / 2.0);
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (sy, sx) = self.source(&inv, center, y as usize, x as usize);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let mut acc = [0.0; 3];
            for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                    let (yy, xx) = (y0 as i64 + dy, x0 as i64 + dx);
                    if wy * wx == 0.0 || yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    let p = img.get_pixel(xx as u32, yy as u32);
                    for c in 0..3 {
                        acc[c] += wy * wx * p[c] as f64;
                    }
                }
            }
            Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8))
        })
    }

    /// Nearest-neighbour warp of a mask.
    pub fn warp_mask(&self, mask: &BinaryMask) -> BinaryMask {
        let (h, w) = mask.shape();
        let inv = self.inverse();
        let center = (h as f64 / 2.0, w as f64 / 2.0);
        BinaryMask::from_fn(h, w, |y, x| {
            let (sy, sx) = self.source(&inv, center, y, x);
            let (yy, xx) = (sy.round(), sx.round());
            yy >= 0.0 && xx >= 0.0 && (yy as usize) < h && (xx as usize) < w && mask.get(yy as usize, xx as usize)
        })
    }
}

/// Frames and per-frame annotations of a training clip.
#[derive(Clone, Debug)]
pub struct TrainClip {
    pub frames: Vec<RgbImage>,
    pub annotations: Vec<Vec<InstanceAnnotation>>,
}

impl TrainClip {
    /// Frames `start..start + CLIP_LEN` of a video with their annotations.
    pub fn from_video(v: &Video, start: usize) -> Result<Self> {
        if start + CLIP_LEN > v.num_frames() {
            return Err(Error::Index(format!(
                "video {} has {} frames, no clip starts at {start}",
                v.id,
                v.num_frames()
            )));
        }
        let range = start..start + CLIP_LEN;
        Ok(Self {
            frames: range.clone().map(|t| v.frame(t)).collect::<Result<_>>()?,
            annotations: range
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
                .collect(),
        })
    }
}

/// Warps one image and its masks independently three times. Instances that
/// leave the frame entirely are dropped from that frame.
pub fn synthesize_clip(image: &RgbImage, instances: &[InstanceAnnotation], ranges: &AffineRanges, rng: &mut impl Rng) -> TrainClip {
    let (h, w) = (image.height() as usize, image.width() as usize);
    let transforms: Vec<AffineTransform> = (0..CLIP_LEN).map(|_| AffineTransform::sample(ranges, h, w, rng)).collect();
    clip_from_transforms(image, instances, &transforms)
}

pub fn clip_from_transforms(image: &RgbImage, instances: &[InstanceAnnotation], transforms: &[AffineTransform]) -> TrainClip {
    let mut frames = Vec::with_capacity(transforms.len());
    let mut annotations = Vec::with_capacity(transforms.len());
    for t in transforms {
        frames.push(t.warp_image(image));
        annotations.push(
            instances
                .iter()
                .filter_map(|inst| {
                    let mask = t.warp_mask(&inst.mask);
                    (!mask.is_empty()).then(|| InstanceAnnotation { mask, ..inst.clone() })
                })
                .collect(),
        );
    }
    TrainClip { frames, annotations }
}

/// Applies one transform to every frame of a clip.
pub fn warp_clip(clip: &TrainClip, t: &AffineTransform) -> TrainClip {
    TrainClip {
        frames: clip.frames.iter().map(|f| t.warp_image(f)).collect(),
        annotations: clip
            .annotations
            .iter()
            .map(|anns| {
                anns.iter()
                    .filter_map(|inst| {
                        let mask = t.warp_mask(&inst.mask);
                        (!mask.is_empty()).then(|| InstanceAnnotation { mask, ..inst.clone() })
                    })
                    .collect()
            })
            .collect(),
    }
}

/// Mirrors every frame left to right.
pub fn flip_clip(clip: &TrainClip) -> TrainClip {
    TrainClip {
        frames: clip.frames.iter().map(image::imageops::flip_horizontal).collect(),
        annotations: clip
            .annotations
            .iter()
            .map(|anns| {
                anns.iter()
                    .map(|inst| {
                        let (h, w) = inst.mask.shape();
                        let mask = BinaryMask::from_fn(h, w, |y, x| inst.mask.get(y, w - 1 - x));
                        InstanceAnnotation { mask, ..inst.clone() }
                    })
                    .collect()
            })
            .collect(),
    }
}

/// Pixels and mask of one instance cut from a frame.
#[derive(Clone, Debug)]
pub struct InstancePatch {
    pub class_id: usize,
    pub image: RgbImage,
    pub mask: BinaryMask,
}

/// Pastes `patch` into every frame of `clip`, moved by `offsets[t]` (rows,
/// columns) relative to where it was cut, under identity `id`. Instances
/// beneath it lose the covered pixels and are dropped if nothing is left.
pub fn paste_instance(clip: &mut TrainClip, patch: &InstancePatch, id: u64, offsets: &[(i64, i64)]) {
    let (h, w) = patch.mask.shape();
    for ((frame, anns), &(dy, dx)) in clip.frames.iter_mut().zip(clip.annotations.iter_mut()).zip(offsets) {
        let mut placed = BinaryMask::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                if !patch.mask.get(y, x) {
                    continue;
                }
                let (ty, tx) = (y as i64 + dy, x as i64 + dx);
                if ty < 0 || tx < 0 || ty >= h as i64 || tx >= w as i64 {
                    continue;
                }
                let (ty, tx) = (ty as usize, tx as usize);
                placed.set(ty, tx, true);
                frame.put_pixel(tx as u32, ty as u32, *patch.image.get_pixel(x as u32, y as u32));
            }
        }
        if placed.is_empty() {
            continue;
        }
        anns.retain_mut(|a| {
            a.mask = BinaryMask::from_fn(h, w, |y, x| a.mask.get(y, x) && !placed.get(y, x));
            !a.mask.is_empty()
        });
        anns.push(InstanceAnnotation {
            id,
            class_id: patch.class_id,
            mask: placed,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (RgbImage, Vec<InstanceAnnotation>) {
        let img = RgbImage::from_fn(40, 30, |x, y| Rgb([(x * 6) as u8, (y * 8) as u8, 77]));
        let mask = BinaryMask::from_fn(30, 40, |y, x| (10..16).contains(&y) && (12..20).contains(&x));
        (img, vec![InstanceAnnotation { id: 1, class_id: 0, mask }])
    }

    #[test]
    fn identity_gives_identical_frames() {
        let (img, inst) = fixture();
        let clip = clip_from_transforms(&img, &inst, &[AffineTransform::identity(); 3]);
        for t in 0..3 {
            assert_eq!(clip.frames[t], img);
            assert_eq!(clip.annotations[t], inst);
        }
    }

    #[test]
    fn translation_shifts_centroid() {
        let (img, inst) = fixture();
        let t = AffineTransform {
            translate: (10.0, 0.0),
            ..AffineTransform::identity()
        };
        let clip = clip_from_transforms(&img, &inst, &[t]);
        let (y0, x0) = inst[0].mask.centroid().unwrap();
        let (y1, x1) = clip.annotations[0][0].mask.centroid().unwrap();
        assert_eq!((y1 - y0, x1 - x0), (10.0, 0.0));
    }

    #[test]
    fn rotation_by_small_angle_preserves_area_roughly() {
        let (img, inst) = fixture();
        let t = AffineTransform {
            rotation_deg: 10.0,
            ..AffineTransform::identity()
        };
        let m = t.warp_mask(&inst[0].mask);
        let a = m.area() as f64;
        assert!((a - 48.0).abs() < 10.0, "{a}");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clip = synthesize_clip(&img, &inst, &AffineRanges::default(), &mut rng);
        assert_eq!(clip.frames.len(), 3);
    }

    #[test]
    fn instance_pushed_out_is_dropped() {
        let (img, inst) = fixture();
        let t = AffineTransform {
            translate: (0.0, 100.0),
            ..AffineTransform::identity()
        };
        let clip = clip_from_transforms(&img, &inst, &[t]);
        assert!(clip.annotations[0].is_empty());
    }

    #[test]
    fn pasted_instance_occludes_and_moves() {
        let (img, inst) = fixture();
        let mut clip = clip_from_transforms(&img, &inst, &[AffineTransform::identity(); 3]);
        let patch = InstancePatch {
            class_id: 2,
            image: RgbImage::from_pixel(40, 30, Rgb([255, 0, 0])),
            mask: BinaryMask::from_fn(30, 40, |y, x| (10..16).contains(&y) && (12..16).contains(&x)),
        };
        paste_instance(&mut clip, &patch, 99, &[(0, 0), (0, 4), (0, 100)]);
        let full = BinaryMask::from_fn(30, 40, |_, _| true);
        let mut covered = clip.clone();
        let cover = InstancePatch {
            class_id: 0,
            image: img.clone(),
            mask: full,
        };
        paste_instance(&mut covered, &cover, 7, &[(0, 0)]);
        assert!(covered.annotations[0].iter().all(|a| a.id == 7));
        assert_eq!(clip.annotations[0][0].mask.area(), 6 * 4);
        assert_eq!(clip.annotations[0][1].id, 99);
        assert_eq!(clip.annotations[1][0].mask.area(), 6 * 4);
        assert!(!clip.annotations[1][0].mask.get(10, 16));
        assert_eq!(clip.annotations[2], inst);
        assert_eq!(*clip.frames[1].get_pixel(17, 10), Rgb([255, 0, 0]));
    }

    #[test]
    fn flip_twice_is_identity() {
        let (img, inst) = fixture();
        let clip = clip_from_transforms(&img, &inst, &[AffineTransform::identity(); 3]);
        let once = flip_clip(&clip);
        let (_, x) = once.annotations[0][0].mask.centroid().unwrap();
        assert_eq!(x, 40.0 - 1.0 - 15.5);
        let twice = flip_clip(&once);
        assert_eq!(twice.frames, clip.frames);
        assert_eq!(twice.annotations, clip.annotations);
    }
}
