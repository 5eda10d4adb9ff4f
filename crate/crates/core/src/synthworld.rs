//! Deterministic synthetic street scenes with analytic ground truth.
//!
//! Pedestrians are articulated silhouettes (head, torso, one or two legs and
//! an optional arm). Hard negatives are single poles or capsules drawn from
//! the same height and colour distributions, so only shape separates them
//! from people. Cyclists are riders on a two-wheel frame. Every object carries
//! an amodal mask, a depth and an integer velocity, from which the
//! segmentation, edge, heatmap, disparity and flow channels are rendered
//! exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, Box};
use crate::channels::{self, ChannelKind, ChannelMap, ChannelName};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Segmentation label codes.
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_PEDESTRIAN: u8 = 1;
pub const LABEL_CYCLIST: u8 = 2;
pub const LABEL_DISTRACTOR: u8 = 3;
pub const SEGMENTATION_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

impl CountRange {
    pub const fn new(min: usize, max: usize) -> Self {
        CountRange { min, max }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub pedestrian_count_range: CountRange,
    pub cyclist_count_range: CountRange,
    pub hard_negative_count_range: CountRange,
    pub crowding_probability: f64,
    pub unannotated_fraction: f64,
    pub frame_pair: bool,
    pub seed: u64,
    /// Object heights in pixels, sampled uniformly in inverse height so small
    /// (distant) objects are more common.
    pub object_height_range: (f64, f64),
    /// Disparity of an object pixel is `disparity_constant / depth`.
    pub disparity_constant: f64,
    /// Heatmap blur σ; `None` scales 4 px per 128 px of image height.
    pub heatmap_sigma: Option<f64>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_height: 128,
            image_width: 128,
            pedestrian_count_range: CountRange::new(1, 4),
            cyclist_count_range: CountRange::new(0, 1),
            hard_negative_count_range: CountRange::new(1, 3),
            crowding_probability: 0.3,
            unannotated_fraction: 0.0,
            frame_pair: false,
            seed: 0,
            object_height_range: (18.0, 72.0),
            disparity_constant: 8.0,
            heatmap_sigma: None,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.image_height < 32 || self.image_width < 32 {
            return bad("image dimensions must be at least 32");
        }
        for (name, r) in [
            ("pedestrian", self.pedestrian_count_range),
            ("cyclist", self.cyclist_count_range),
            ("hard negative", self.hard_negative_count_range),
        ] {
            if r.min > r.max {
                return Err(Error::Config(format!("{} count range is empty", name)));
            }
        }
        for (name, p) in [
            ("crowding_probability", self.crowding_probability),
            ("unannotated_fraction", self.unannotated_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{} must lie in [0,1]", name)));
            }
        }
        let (lo, hi) = self.object_height_range;
        if !(lo >= 4.0 && hi >= lo) {
            return bad("object_height_range must satisfy 4 ≤ min ≤ max");
        }
        if self.disparity_constant <= 0.0 {
            return bad("disparity_constant must be positive");
        }
        if matches!(self.heatmap_sigma, Some(s) if s <= 0.0) {
            return bad("heatmap_sigma must be positive");
        }
        let mean_h = 0.5 * (lo + hi);
        let per_object = (mean_h * mean_h * 0.4).ceil() as usize;
        let max_objects = self.pedestrian_count_range.max
            + self.cyclist_count_range.max
            + self.hard_negative_count_range.max;
        let demand = per_object * max_objects;
        let area = self.image_height * self.image_width;
        if demand > area {
            return Err(Error::ImpossiblePacking { demand, area });
        }
        Ok(())
    }

    pub fn heatmap_sigma(&self) -> f64 {
        self.heatmap_sigma
            .unwrap_or(4.0 * self.image_height as f64 / 128.0)
    }

    /// Same configuration with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        SceneConfig {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectClass {
    Pedestrian,
    Cyclist,
    Distractor,
}

impl ObjectClass {
    pub fn label(self) -> u8 {
        match self {
            ObjectClass::Pedestrian => LABEL_PEDESTRIAN,
            ObjectClass::Cyclist => LABEL_CYCLIST,
            ObjectClass::Distractor => LABEL_DISTRACTOR,
        }
    }
}

/// Binary mask over the full image grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Tight pixel bounding box `(x1, y1, x2, y2)` with exclusive max edges.
    pub fn bounding_box(&self) -> Option<Box> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        (x1 != usize::MAX).then(|| Box::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64))
    }

    /// Translate by an integer offset, dropping pixels that leave the grid.
    pub fn shifted(&self, dx: i64, dy: i64) -> Mask {
        let mut out = Mask::empty(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < self.width && (ny as usize) < self.height {
                    out.bits[ny as usize * self.width + nx as usize] = true;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class: ObjectClass,
    pub bbox: Box,
    /// Fraction of the amodal shape lying outside the image.
    pub truncation: f64,
    /// Fraction of in-image mask pixels hidden by nearer objects.
    pub occlusion: f64,
    pub occlusion_level: u8,
    /// `false` for ground truth withheld from the label file.
    pub annotated: bool,
    /// Index into [`Scene::objects`].
    pub object: usize,
}

#[derive(Clone, Debug)]
pub struct SceneObject {
    pub class: ObjectClass,
    pub mask: Mask,
    pub depth: f64,
    pub velocity: [f64; 2],
    pub second_mask: Option<Mask>,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub config: SceneConfig,
    /// 3×H×W RGB in [0,1], quantized to multiples of 1/255.
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
    pub objects: Vec<SceneObject>,
    pub second_image: Option<Tensor>,
    /// Visible segmentation labels (row-major H×W) for each frame.
    labels: Vec<u8>,
    /// Index of the visible object per pixel, `usize::MAX` for background.
    owners: Vec<usize>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.config.image_height
    }

    pub fn width(&self) -> usize {
        self.config.image_width
    }

    pub fn object_masks(&self) -> impl Iterator<Item = &Mask> {
        self.objects.iter().map(|o| &o.mask)
    }

    pub fn object_depths(&self) -> impl Iterator<Item = f64> + '_ {
        self.objects.iter().map(|o| o.depth)
    }

    pub fn object_velocities(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.objects.iter().map(|o| o.velocity)
    }

    /// Visible segmentation label per pixel.
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Visible object index per pixel (`None` for background).
    pub fn owner(&self, x: usize, y: usize) -> Option<usize> {
        let o = self.owners[y * self.width() + x];
        (o != usize::MAX).then_some(o)
    }

    /// Annotations visible in the label file.
    pub fn labelled(&self) -> impl Iterator<Item = &Annotation> {
        self.annotations.iter().filter(|a| a.annotated)
    }
}

/// Occlusion fraction to integer level at thresholds 0.2 / 0.5.
pub fn occlusion_level(fraction: f64) -> u8 {
    if fraction < 0.2 {
        0
    } else if fraction < 0.5 {
        1
    } else {
        2
    }
}

// ---------------------------------------------------------------------------
// Shapes

#[derive(Clone, Copy, Debug)]
enum Primitive {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Capsule { x0: f64, y0: f64, x1: f64, y1: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ring { cx: f64, cy: f64, outer: f64, inner: f64 },
}

impl Primitive {
    fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Primitive::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((px - cx) / rx, (py - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
            Primitive::Capsule { x0, y0, x1, y1, r } => {
                let (vx, vy) = (x1 - x0, y1 - y0);
                let len2 = vx * vx + vy * vy;
                let t = if len2 == 0.0 {
                    0.0
                } else {
                    (((px - x0) * vx + (py - y0) * vy) / len2).clamp(0.0, 1.0)
                };
                let (dx, dy) = (px - (x0 + t * vx), py - (y0 + t * vy));
                dx * dx + dy * dy <= r * r
            }
            Primitive::Rect { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
            Primitive::Ring {
                cx,
                cy,
                outer,
                inner,
            } => {
                let d2 = (px - cx).powi(2) + (py - cy).powi(2);
                d2 <= outer * outer && d2 >= inner * inner
            }
        }
    }

    fn translated(&self, dx: f64, dy: f64) -> Primitive {
        match *self {
            Primitive::Ellipse { cx, cy, rx, ry } => Primitive::Ellipse {
                cx: cx + dx,
                cy: cy + dy,
                rx,
                ry,
            },
            Primitive::Capsule { x0, y0, x1, y1, r } => Primitive::Capsule {
                x0: x0 + dx,
                y0: y0 + dy,
                x1: x1 + dx,
                y1: y1 + dy,
                r,
            },
            Primitive::Rect { x0, y0, x1, y1 } => Primitive::Rect {
                x0: x0 + dx,
                y0: y0 + dy,
                x1: x1 + dx,
                y1: y1 + dy,
            },
            Primitive::Ring {
                cx,
                cy,
                outer,
                inner,
            } => Primitive::Ring {
                cx: cx + dx,
                cy: cy + dy,
                outer,
                inner,
            },
        }
    }
}

#[derive(Clone, Debug)]
struct Shape {
    parts: Vec<Primitive>,
    /// Conservative extent in pixels (may extend past the image).
    extent: (i64, i64, i64, i64),
    /// Integer anchor that texture coordinates are relative to.
    origin: (i64, i64),
    top_colour: [f64; 3],
    bottom_colour: [f64; 3],
    split_y: f64,
    texture_seed: u64,
}

impl Shape {
    fn contains(&self, px: f64, py: f64) -> bool {
        self.parts.iter().any(|p| p.contains(px, py))
    }

    fn translated(&self, dx: i64, dy: i64) -> Shape {
        let (fx, fy) = (dx as f64, dy as f64);
        Shape {
            parts: self.parts.iter().map(|p| p.translated(fx, fy)).collect(),
            extent: (
                self.extent.0 + dx,
                self.extent.1 + dy,
                self.extent.2 + dx,
                self.extent.3 + dy,
            ),
            origin: (self.origin.0 + dx, self.origin.1 + dy),
            split_y: self.split_y + fy,
            ..self.clone()
        }
    }

    /// In-image mask plus the fraction of the amodal shape falling outside.
    fn rasterize(&self, width: usize, height: usize) -> (Mask, f64) {
        let mut mask = Mask::empty(width, height);
        let (mut inside, mut outside) = (0usize, 0usize);
        let (x0, y0, x1, y1) = self.extent;
        for y in y0..=y1 {
            for x in x0..=x1 {
                if !self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    continue;
                }
                if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                    mask.bits[y as usize * width + x as usize] = true;
                    inside += 1;
                } else {
                    outside += 1;
                }
            }
        }
        let total = inside + outside;
        let trunc = if total == 0 {
            1.0
        } else {
            outside as f64 / total as f64
        };
        (mask, trunc)
    }

    fn colour_at(&self, x: i64, y: i64) -> [f64; 3] {
        let base = if (y as f64 + 0.5) < self.split_y {
            self.top_colour
        } else {
            self.bottom_colour
        };
        let n = hash_noise(
            (x - self.origin.0) as u64,
            (y - self.origin.1) as u64,
            self.texture_seed,
        );
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = (base[k] + 0.08 * n).clamp(0.0, 1.0);
        }
        c
    }
}

fn extent_of(parts: &[Primitive]) -> (i64, i64, i64, i64) {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in parts {
        let (a, b, c, d) = match *p {
            Primitive::Ellipse { cx, cy, rx, ry } => (cx - rx, cy - ry, cx + rx, cy + ry),
            Primitive::Capsule { x0, y0, x1, y1, r } => {
                (x0.min(x1) - r, y0.min(y1) - r, x0.max(x1) + r, y0.max(y1) + r)
            }
            Primitive::Rect { x0, y0, x1, y1 } => (x0, y0, x1, y1),
            Primitive::Ring { cx, cy, outer, .. } => (cx - outer, cy - outer, cx + outer, cy + outer),
        };
        x0 = x0.min(a);
        y0 = y0.min(b);
        x1 = x1.max(c);
        y1 = y1.max(d);
    }
    (
        x0.floor() as i64 - 1,
        y0.floor() as i64 - 1,
        x1.ceil() as i64 + 1,
        y1.ceil() as i64 + 1,
    )
}

/// Deterministic value noise in [-1, 1].
fn hash_noise(x: u64, y: u64, seed: u64) -> f64 {
    let mut h = seed ^ x.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ y.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    h = h.wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn random_colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let lum: f64 = rng.random_range(0.15..0.85);
    let mut c = [0.0; 3];
    for v in &mut c {
        *v = (lum + rng.random_range(-0.2..0.2f64)).clamp(0.0, 1.0);
    }
    c
}

struct Placement {
    cx: f64,
    bottom: f64,
    height: f64,
}

fn pedestrian_parts(p: &Placement, rng: &mut ChaCha8Rng) -> Vec<Primitive> {
    let h = p.height;
    let (cx, by) = (p.cx, p.bottom);
    let lean = rng.random_range(-0.04..0.04) * h;
    let head_r = 0.075 * h;
    let head = Primitive::Ellipse {
        cx: cx + lean,
        cy: by - h + head_r,
        rx: head_r * 0.9,
        ry: head_r,
    };
    let shoulder_y = by - h + 2.0 * head_r + 0.02 * h;
    let hip_y = by - 0.47 * h;
    let torso_w = rng.random_range(0.10..0.13) * h;
    let torso = Primitive::Capsule {
        x0: cx + lean,
        y0: shoulder_y + torso_w * 0.6,
        x1: cx,
        y1: hip_y,
        r: torso_w,
    };
    let leg_r = rng.random_range(0.040..0.055) * h;
    let stride = rng.random_range(0.0..0.16) * h;
    let mut parts = vec![head, torso];
    if stride < 0.03 * h {
        // standing: legs drawn as one part
        parts.push(Primitive::Capsule {
            x0: cx,
            y0: hip_y,
            x1: cx,
            y1: by - leg_r,
            r: leg_r * 1.6,
        });
    } else {
        for s in [-1.0, 1.0] {
            parts.push(Primitive::Capsule {
                x0: cx + s * 0.3 * leg_r,
                y0: hip_y,
                x1: cx + s * stride,
                y1: by - leg_r,
                r: leg_r,
            });
        }
    }
    if rng.random_bool(0.6) {
        let swing = rng.random_range(-0.12..0.12) * h;
        parts.push(Primitive::Capsule {
            x0: cx + lean,
            y0: shoulder_y + 0.03 * h,
            x1: cx + swing,
            y1: hip_y + 0.05 * h,
            r: 0.035 * h,
        });
    }
    parts
}

fn cyclist_parts(p: &Placement, rng: &mut ChaCha8Rng) -> Vec<Primitive> {
    let h = p.height;
    let (cx, by) = (p.cx, p.bottom);
    let wheel_r = 0.22 * h;
    let span = rng.random_range(0.30..0.38) * h;
    let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let wheel_y = by - wheel_r;
    let thick = 0.035 * h;
    let mut parts = Vec::new();
    for s in [-1.0, 1.0] {
        parts.push(Primitive::Ring {
            cx: cx + s * span,
            cy: wheel_y,
            outer: wheel_r,
            inner: wheel_r - thick * 1.4,
        });
    }
    let seat = (cx - dir * 0.1 * h, by - 0.55 * h);
    parts.push(Primitive::Capsule {
        x0: cx - span,
        y0: wheel_y,
        x1: cx + span,
        y1: wheel_y - 0.05 * h,
        r: thick,
    });
    let shoulder = (cx + dir * 0.08 * h, by - 0.82 * h);
    parts.push(Primitive::Capsule {
        x0: seat.0,
        y0: seat.1,
        x1: shoulder.0,
        y1: shoulder.1,
        r: 0.09 * h,
    });
    parts.push(Primitive::Ellipse {
        cx: shoulder.0 + dir * 0.04 * h,
        cy: by - h + 0.075 * h,
        rx: 0.068 * h,
        ry: 0.075 * h,
    });
    parts.push(Primitive::Capsule {
        x0: seat.0,
        y0: seat.1,
        x1: cx,
        y1: wheel_y,
        r: 0.045 * h,
    });
    parts
}

fn distractor_parts(p: &Placement, rng: &mut ChaCha8Rng) -> Vec<Primitive> {
    let h = p.height;
    let w = rng.random_range(0.12..0.38) * h;
    let top = p.bottom - h;
    if rng.random_bool(0.5) {
        vec![Primitive::Rect {
            x0: p.cx - 0.5 * w,
            y0: top,
            x1: p.cx + 0.5 * w,
            y1: p.bottom,
        }]
    } else {
        let r = 0.5 * w;
        vec![Primitive::Capsule {
            x0: p.cx,
            y0: top + r,
            x1: p.cx,
            y1: p.bottom - r,
            r,
        }]
    }
}

fn sample_height(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> f64 {
    let (lo, hi) = cfg.object_height_range;
    if hi <= lo {
        return lo;
    }
    // uniform in 1/h: distant (small) objects dominate
    let inv = rng.random_range(1.0 / hi..=1.0 / lo);
    1.0 / inv
}

fn sample_placement(cfg: &SceneConfig, height: f64, rng: &mut ChaCha8Rng) -> Placement {
    let (w, h) = (cfg.image_width as f64, cfg.image_height as f64);
    let margin = 0.1 * height;
    Placement {
        cx: rng.random_range(-margin..w + margin),
        bottom: rng.random_range((0.75 * height).min(h)..h + 0.15 * height),
        height,
    }
}

fn build_shape(
    class: ObjectClass,
    placement: &Placement,
    rng: &mut ChaCha8Rng,
) -> Shape {
    let parts = match class {
        ObjectClass::Pedestrian => pedestrian_parts(placement, rng),
        ObjectClass::Cyclist => cyclist_parts(placement, rng),
        ObjectClass::Distractor => distractor_parts(placement, rng),
    };
    let extent = extent_of(&parts);
    let split = rng.random_range(0.40..0.60);
    Shape {
        extent,
        origin: (extent.0, extent.1),
        parts,
        top_colour: random_colour(rng),
        bottom_colour: random_colour(rng),
        split_y: placement.bottom - split * placement.height,
        texture_seed: rng.random(),
    }
}

/// Render one scene; a pure function of `config` (including its seed).
pub fn generate_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (w, h) = (config.image_width, config.image_height);

    let sample_count = |r: CountRange, rng: &mut ChaCha8Rng| rng.random_range(r.min..=r.max);
    let n_ped = sample_count(config.pedestrian_count_range, &mut rng);
    let n_cyc = sample_count(config.cyclist_count_range, &mut rng);
    let n_neg = sample_count(config.hard_negative_count_range, &mut rng);

    let mut classes = vec![ObjectClass::Pedestrian; n_ped];
    classes.extend(std::iter::repeat_n(ObjectClass::Cyclist, n_cyc));
    classes.extend(std::iter::repeat_n(ObjectClass::Distractor, n_neg));

    struct Draft {
        class: ObjectClass,
        shape: Shape,
        mask: Mask,
        truncation: f64,
        depth: f64,
        velocity: [f64; 2],
    }

    let depth_scale = 8.0 * config.image_height as f64;
    let mut drafts: Vec<Draft> = Vec::with_capacity(classes.len());
    for &class in &classes {
        // resample until the object is mostly inside the frame
        let mut attempt = 0;
        let draft = loop {
            let height = sample_height(config, &mut rng);
            let placement = sample_placement(config, height, &mut rng);
            let shape = build_shape(class, &placement, &mut rng);
            let (mask, truncation) = shape.rasterize(w, h);
            attempt += 1;
            if (truncation <= 0.5 && mask.area() > 0) || attempt > 50 && mask.area() > 0 {
                let depth = depth_scale / height * rng.random_range(0.9..1.1);
                let velocity = [
                    rng.random_range(-3i32..=3) as f64,
                    rng.random_range(-1i32..=1) as f64,
                ];
                break Draft {
                    class,
                    shape,
                    mask,
                    truncation,
                    depth,
                    velocity,
                };
            }
        };
        drafts.push(draft);
    }

    // Crowding: move the second pedestrian next to the first.
    if n_ped >= 2 && rng.random_bool(config.crowding_probability) {
        let anchor_box = drafts[0].mask.bounding_box().expect("non-empty mask");
        let partner_height = drafts[0].shape.extent.3 as f64 - drafts[0].shape.extent.1 as f64 - 2.0;
        let (acx, _) = anchor_box.center();
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let mut offset = rng.random_range(0.25..0.45) * anchor_box.width();
        loop {
            let placement = Placement {
                cx: acx + side * offset,
                bottom: anchor_box.y2 + rng.random_range(-0.05..0.05) * anchor_box.height(),
                height: partner_height.max(4.0),
            };
            let shape = build_shape(ObjectClass::Pedestrian, &placement, &mut rng);
            let (mask, truncation) = shape.rasterize(w, h);
            let ok = mask
                .bounding_box()
                .map(|b| iou(&b, &anchor_box) >= 0.3)
                .unwrap_or(false);
            if ok || offset < 0.5 {
                if ok {
                    let depth = drafts[0].depth * rng.random_range(0.95..1.05);
                    drafts[1] = Draft {
                        class: ObjectClass::Pedestrian,
                        shape,
                        mask,
                        truncation,
                        depth,
                        velocity: drafts[0].velocity,
                    };
                    break;
                }
                offset = 0.0;
                continue;
            }
            offset *= 0.7;
        }
    }

    // Background: vertical gradient plus hashed texture and a few facades.
    let bg_seed: u64 = rng.random();
    let sky = random_colour(&mut rng);
    let ground = random_colour(&mut rng);
    let horizon = rng.random_range(0.3..0.6) * h as f64;
    let mut facades = Vec::new();
    for _ in 0..rng.random_range(1..=4) {
        let fw = rng.random_range(0.1..0.4) * w as f64;
        let fx = rng.random_range(0.0..w as f64);
        let fh = rng.random_range(0.15..0.45) * h as f64;
        let shade = rng.random_range(-0.12..0.12);
        facades.push((fx, fx + fw, horizon - fh, horizon, shade));
    }
    let background = |x: usize, y: usize| -> [f64; 3] {
        let fy = y as f64 + 0.5;
        let t = (fy / h as f64).clamp(0.0, 1.0);
        let base = if fy < horizon { sky } else { ground };
        let mut c = [0.0; 3];
        let n = hash_noise(x as u64, y as u64, bg_seed);
        for k in 0..3 {
            c[k] = base[k] * (0.85 + 0.3 * t) + 0.06 * n;
        }
        for &(x0, x1, y0, y1, shade) in &facades {
            let fx = x as f64 + 0.5;
            if fx >= x0 && fx < x1 && fy >= y0 && fy < y1 {
                c.iter_mut().for_each(|v| *v += shade);
            }
        }
        c
    };

    // Painter's order: far to near. Ties broken by index for determinism.
    let mut order: Vec<usize> = (0..drafts.len()).collect();
    order.sort_by(|&a, &b| {
        drafts[b]
            .depth
            .partial_cmp(&drafts[a].depth)
            .unwrap()
            .then(a.cmp(&b))
    });

    let render = |shapes: &[(&Shape, &Mask)]| -> (Tensor, Vec<u8>, Vec<usize>) {
        let mut img = Tensor::zeros(&[3, h, w]);
        let mut labels = vec![LABEL_BACKGROUND; w * h];
        let mut owners = vec![usize::MAX; w * h];
        for y in 0..h {
            for x in 0..w {
                let c = background(x, y);
                for k in 0..3 {
                    img.data_mut()[(k * h + y) * w + x] = c[k];
                }
            }
        }
        for &i in &order {
            let (shape, mask) = shapes[i];
            for y in 0..h {
                for x in 0..w {
                    if !mask.get(x, y) {
                        continue;
                    }
                    let c = shape.colour_at(x as i64, y as i64);
                    for k in 0..3 {
                        img.data_mut()[(k * h + y) * w + x] = c[k];
                    }
                    labels[y * w + x] = drafts[i].class.label();
                    owners[y * w + x] = i;
                }
            }
        }
        let img = img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        (img, labels, owners)
    };

    let first: Vec<(&Shape, &Mask)> = drafts.iter().map(|d| (&d.shape, &d.mask)).collect();
    let (image, labels, owners) = render(&first);

    let (second_image, second_masks) = if config.frame_pair {
        let moved: Vec<(Shape, Mask)> = drafts
            .iter()
            .map(|d| {
                let s = d
                    .shape
                    .translated(d.velocity[0] as i64, d.velocity[1] as i64);
                let (m, _) = s.rasterize(w, h);
                (s, m)
            })
            .collect();
        let refs: Vec<(&Shape, &Mask)> = moved.iter().map(|(s, m)| (s, m)).collect();
        let (img2, _, _) = render(&refs);
        (Some(img2), Some(moved.into_iter().map(|(_, m)| m).collect::<Vec<_>>()))
    } else {
        (None, None)
    };

    let mut annotations = Vec::new();
    for (i, d) in drafts.iter().enumerate() {
        if d.class == ObjectClass::Distractor {
            continue;
        }
        let area = d.mask.area();
        let visible = d
            .mask
            .bits
            .iter()
            .zip(&owners)
            .filter(|(&b, &o)| b && o == i)
            .count();
        let occlusion = 1.0 - visible as f64 / area as f64;
        annotations.push(Annotation {
            class: match d.class {
                ObjectClass::Cyclist => ObjectClass::Cyclist,
                _ => ObjectClass::Pedestrian,
            },
            bbox: d.mask.bounding_box().expect("non-empty"),
            truncation: d.truncation,
            occlusion,
            occlusion_level: occlusion_level(occlusion),
            annotated: true,
            object: i,
        });
    }
    // Separate stream so the withheld subset does not perturb geometry.
    let mut label_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xA11E_0000_0000_0001);
    for a in &mut annotations {
        a.annotated = !label_rng.random_bool(config.unannotated_fraction);
    }

    let mut second_masks = second_masks.map(|v| v.into_iter());
    let objects = drafts
        .into_iter()
        .map(|d| SceneObject {
            class: d.class,
            mask: d.mask,
            depth: d.depth,
            velocity: d.velocity,
            second_mask: second_masks.as_mut().and_then(|it| it.next()),
        })
        .collect();

    Ok(Scene {
        config: config.clone(),
        image,
        annotations,
        objects,
        second_image,
        labels,
        owners,
    })
}

/// Ground-truth channel kinds rendered from a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundTruthKind {
    Edge,
    Segmentation,
    Heatmap,
    Disparity,
    Flow,
}

impl GroundTruthKind {
    pub const ALL: [GroundTruthKind; 5] = [
        GroundTruthKind::Edge,
        GroundTruthKind::Segmentation,
        GroundTruthKind::Heatmap,
        GroundTruthKind::Disparity,
        GroundTruthKind::Flow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GroundTruthKind::Edge => "edge",
            GroundTruthKind::Segmentation => "segmentation",
            GroundTruthKind::Heatmap => "heatmap",
            GroundTruthKind::Disparity => "disparity",
            GroundTruthKind::Flow => "flow",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Render an analytic channel map for `scene`.
pub fn render_ground_truth_channel(scene: &Scene, kind: GroundTruthKind) -> Result<ChannelMap> {
    let (h, w) = (scene.height(), scene.width());
    let labels = &scene.labels;
    match kind {
        GroundTruthKind::Segmentation => {
            let data = labels.iter().map(|&l| l as f64).collect();
            ChannelMap::new(
                Tensor::new(&[1, h, w], data)?,
                ChannelKind::Multiclass {
                    class_count: SEGMENTATION_CLASSES,
                },
                ChannelName::Segmentation,
            )
        }
        GroundTruthKind::Edge => {
            let mut data = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let l = labels[y * w + x];
                    let differs = (x > 0 && labels[y * w + x - 1] != l)
                        || (x + 1 < w && labels[y * w + x + 1] != l)
                        || (y > 0 && labels[(y - 1) * w + x] != l)
                        || (y + 1 < h && labels[(y + 1) * w + x] != l);
                    if differs {
                        data[y * w + x] = 1.0;
                    }
                }
            }
            ChannelMap::new(Tensor::new(&[1, h, w], data)?, ChannelKind::Binary, ChannelName::Edge)
        }
        GroundTruthKind::Heatmap => {
            let person = labels
                .iter()
                .map(|&l| if l == LABEL_PEDESTRIAN { 1.0 } else { 0.0 })
                .collect();
            let plane = ChannelMap::new(
                Tensor::new(&[1, h, w], person)?,
                ChannelKind::Binary,
                ChannelName::Heatmap,
            )?;
            channels::blur_heatmap(&plane, scene.config.heatmap_sigma())
        }
        GroundTruthKind::Disparity => {
            let k = scene.config.disparity_constant;
            // Ground plane: disparity grows linearly towards the bottom edge.
            let floor_far = k / (16.0 * h as f64);
            let floor_near = k / (2.0 * h as f64);
            let mut data = vec![0.0; h * w];
            for y in 0..h {
                let t = (y as f64 + 0.5) / h as f64;
                for x in 0..w {
                    data[y * w + x] = match scene.owner(x, y) {
                        Some(o) => k / scene.objects[o].depth,
                        None => floor_far + t * (floor_near - floor_far),
                    };
                }
            }
            ChannelMap::new(
                Tensor::new(&[1, h, w], data)?,
                ChannelKind::Regression,
                ChannelName::Disparity,
            )
        }
        GroundTruthKind::Flow => {
            if !scene.config.frame_pair {
                return Err(Error::FlowWithoutFramePair);
            }
            let mut data = vec![0.0; 2 * h * w];
            for y in 0..h {
                for x in 0..w {
                    if let Some(o) = scene.owner(x, y) {
                        let v = scene.objects[o].velocity;
                        data[y * w + x] = v[0];
                        data[h * w + y * w + x] = v[1];
                    }
                }
            }
            ChannelMap::new(
                Tensor::new(&[2, h, w], data)?,
                ChannelKind::Regression,
                ChannelName::Flow,
            )
        }
    }
}
