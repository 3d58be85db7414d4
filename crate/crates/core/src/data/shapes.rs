//! Procedural videos of colored shapes moving over a noisy background.

use image::{Rgb, RgbImage};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Category, FrameSourceKind, TrackAnnotation, Video, VideoDataset};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub const MAX_SHAPES: usize = 6;
pub const CLASS_NAMES: [&str; 3] = ["circle", "rectangle", "triangle"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_videos: usize,
    pub n_frames: usize,
    /// Maximum shapes per video.
    pub n_shapes: usize,
    /// Minimum shapes per video; defaults to `n_shapes`.
    pub min_shapes: Option<usize>,
    /// `[height, width]`.
    pub canvas: [usize; 2],
    /// Range of the shape radius in pixels.
    pub size_range: [f64; 2],
    /// Range of the per-frame displacement in pixels.
    pub speed_range: [f64; 2],
    /// Uniform per-frame position noise in pixels.
    pub jitter: f64,
    /// Probability that a shape is hidden for `occlusion_frames` frames.
    pub occlusion_prob: f64,
    pub occlusion_frames: usize,
    /// Probability that a shape's trajectory leaves the canvas and returns.
    pub exit_prob: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_videos: 1,
            n_frames: 8,
            n_shapes: 2,
            min_shapes: None,
            canvas: [64, 112],
            size_range: [7.0, 11.0],
            speed_range: [1.0, 3.0],
            jitter: 0.5,
            occlusion_prob: 0.0,
            occlusion_frames: 3,
            exit_prob: 0.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_shapes == 0 || self.n_shapes > MAX_SHAPES {
            return bad(format!("n_shapes must be in 1..={MAX_SHAPES}, got {}", self.n_shapes));
        }
        let min = self.min_shapes.unwrap_or(self.n_shapes);
        if min == 0 || min > self.n_shapes {
            return bad(format!("min_shapes must be in 1..={}, got {min}", self.n_shapes));
        }
        let [lo, hi] = self.size_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("invalid size_range {:?}", self.size_range));
        }
        let short = self.canvas[0].min(self.canvas[1]) as f64;
        if 2.0 * hi >= short {
            return bad(format!(
                "shapes of radius {hi} do not fit a {}x{} canvas",
                self.canvas[0], self.canvas[1]
            ));
        }
        if !(self.speed_range[0] >= 0.0 && self.speed_range[0] <= self.speed_range[1]) {
            return bad(format!("invalid speed_range {:?}", self.speed_range));
        }
        for (name, p) in [("occlusion_prob", self.occlusion_prob), ("exit_prob", self.exit_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
}

impl ShapeKind {
    pub fn class_id(self) -> usize {
        self as usize
    }

    fn from_class(c: usize) -> Self {
        [ShapeKind::Circle, ShapeKind::Rectangle, ShapeKind::Triangle][c]
    }
}

/// Geometry of one shape at one position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
    /// Height-to-width ratio of rectangles.
    pub aspect: f64,
}

impl Shape {
    /// Whether the pixel with center `(y + 0.5, x + 0.5)` lies inside.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 + 0.5 - self.cy;
        let dx = x as f64 + 0.5 - self.cx;
        let r = self.radius;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Rectangle => dx.abs() <= r && dy.abs() <= r * self.aspect,
            ShapeKind::Triangle => {
                // apex up, base at +0.8r
                let (ay, ax) = (-r, 0.0);
                let (by, bx) = (0.8 * r, -r);
                let (cy, cx) = (0.8 * r, r);
                let side = |py: f64, px: f64, qy: f64, qx: f64| (qx - px) * (dy - py) - (qy - py) * (dx - px);
                let s1 = side(ay, ax, by, bx);
                let s2 = side(by, bx, cy, cx);
                let s3 = side(cy, cx, ay, ax);
                (s1 <= 0.0 && s2 <= 0.0 && s3 <= 0.0) || (s1 >= 0.0 && s2 >= 0.0 && s3 >= 0.0)
            }
        }
    }

    pub fn rasterize(&self, h: usize, w: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| self.contains(y, x))
    }
}

/// Base colors per class; each shape jitters its class color.
const CLASS_COLORS: [[f64; 3]; 3] = [[220.0, 70.0, 60.0], [60.0, 190.0, 80.0], [70.0, 110.0, 230.0]];

struct Mover {
    id: u64,
    kind: ShapeKind,
    radius: f64,
    aspect: f64,
    color: Rgb<u8>,
    pos: (f64, f64),
    vel: (f64, f64),
    /// Extra margin beyond the canvas the trajectory may reach.
    margin: f64,
    hidden: Option<(usize, usize)>,
}

fn bounce(p: &mut f64, v: &mut f64, lo: f64, hi: f64) {
    if *p < lo {
        *p = 2.0 * lo - *p;
        *v = v.abs();
    } else if *p > hi {
        *p = 2.0 * hi - *p;
        *v = -v.abs();
    }
}

/// Generates `n_videos` videos deterministically from `cfg.seed`.
pub fn generate_moving_shapes(cfg: &SyntheticConfig) -> Result<VideoDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut next_id = 1u64;
    let videos = (0..cfg.n_videos)
        .map(|v| generate_video(cfg, &mut rng, v as u64 + 1, &mut next_id))
        .collect();
    Ok(VideoDataset {
        categories: CLASS_NAMES
            .iter()
            .enumerate()
            .map(|(i, n)| Category {
                id: i as u64 + 1,
                name: n.to_string(),
            })
            .collect(),
        videos,
    })
}

fn generate_video(cfg: &SyntheticConfig, rng: &mut impl Rng, video_id: u64, next_id: &mut u64) -> Video {
    let [h, w] = cfg.canvas;
    let (hf, wf) = (h as f64, w as f64);
    let min = cfg.min_shapes.unwrap_or(cfg.n_shapes);
    let n = rng.random_range(min..=cfg.n_shapes);
    let mut movers: Vec<Mover> = (0..n)
        .map(|_| {
            let class = rng.random_range(0..CLASS_NAMES.len());
            let radius = rng.random_range(cfg.size_range[0]..=cfg.size_range[1]);
            let base = CLASS_COLORS[class];
            let jitter = |c: f64, rng: &mut dyn FnMut() -> f64| (c + rng()).clamp(0.0, 255.0) as u8;
            let mut noise = || rng.random_range(-25.0..25.0);
            let color = Rgb([jitter(base[0], &mut noise), jitter(base[1], &mut noise), jitter(base[2], &mut noise)]);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let speed = rng.random_range(cfg.speed_range[0]..=cfg.speed_range[1]);
            let exits = rng.random_bool(cfg.exit_prob);
            let hidden = (rng.random_bool(cfg.occlusion_prob) && cfg.n_frames > cfg.occlusion_frames + 2).then(|| {
                let start = rng.random_range(1..cfg.n_frames - cfg.occlusion_frames);
                (start, start + cfg.occlusion_frames)
            });
            let id = *next_id;
            *next_id += 1;
            Mover {
                id,
                kind: ShapeKind::from_class(class),
                radius,
                aspect: rng.random_range(0.6..=1.0),
                color,
                pos: (rng.random_range(radius..hf - radius), rng.random_range(radius..wf - radius)),
                vel: (speed * angle.sin(), speed * angle.cos()),
                margin: if exits { 3.0 * radius } else { 0.0 },
                hidden,
            }
        })
        .collect();

    let background: Vec<u8> = (0..h * w * 3).map(|_| rng.random_range(20..45)).collect();
    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut masks: Vec<Vec<Option<BinaryMask>>> = vec![Vec::with_capacity(cfg.n_frames); n];
    for t in 0..cfg.n_frames {
        if t > 0 {
            for m in movers.iter_mut() {
                m.pos.0 += m.vel.0 + rng.random_range(-cfg.jitter..=cfg.jitter);
                m.pos.1 += m.vel.1 + rng.random_range(-cfg.jitter..=cfg.jitter);
                let r = m.radius;
                bounce(&mut m.pos.0, &mut m.vel.0, r - m.margin, hf - r + m.margin);
                bounce(&mut m.pos.1, &mut m.vel.1, r - m.margin, wf - r + m.margin);
            }
        }
        let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let o = (y as usize * w + x as usize) * 3;
            Rgb([background[o], background[o + 1], background[o + 2]])
        });
        // z-order: higher id drawn later, i.e. on top
        let full: Vec<Option<BinaryMask>> = movers
            .iter()
            .map(|m| {
                let visible = !m.hidden.is_some_and(|(a, b)| (a..b).contains(&t));
                visible.then(|| {
                    Shape {
                        kind: m.kind,
                        cy: m.pos.0,
                        cx: m.pos.1,
                        radius: m.radius,
                        aspect: m.aspect,
                    }
                    .rasterize(h, w)
                })
            })
            .collect();
        for (k, m) in movers.iter().enumerate() {
            let Some(full_k) = &full[k] else {
                masks[k].push(None);
                continue;
            };
            let mut vis = full_k.clone();
            for above in full[k + 1..].iter().flatten() {
                for y in 0..h {
                    for x in 0..w {
                        if above.get(y, x) {
                            vis.set(y, x, false);
                        }
                    }
                }
            }
            for y in 0..h {
                for x in 0..w {
                    if full_k.get(y, x) {
                        img.put_pixel(x as u32, y as u32, m.color);
                    }
                }
            }
            masks[k].push((!vis.is_empty()).then_some(vis));
        }
        frames.push(img);
    }
    let tracks = movers
        .iter()
        .zip(masks)
        .filter(|(_, ms)| ms.iter().any(Option::is_some))
        .map(|(m, ms)| TrackAnnotation {
            id: m.id,
            class_id: m.kind.class_id(),
            masks: ms,
        })
        .collect();
    Video {
        id: video_id,
        height: h,
        width: w,
        frames: FrameSourceKind::InMemory(frames),
        tracks,
    }
}
