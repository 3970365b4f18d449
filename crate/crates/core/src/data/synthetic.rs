//! Procedural few-shot shape scenes.
//!
//! A class is a (shape, texture) pair. Every scene holds one target object
//! drawn last, over a few distractors of other classes and a procedural
//! background. Scenes are parametric, so a scene can be re-rendered under a
//! small global similarity transform to produce video-like frames with exact
//! masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

use super::image::RgbImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
    Ellipse,
    Frame,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Diamond,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Ellipse,
        ShapeKind::Frame,
    ];

    /// Point test in object-normalized coordinates (radius 1).
    pub fn contains(self, u: f64, v: f64) -> bool {
        let (au, av) = (u.abs(), v.abs());
        match self {
            ShapeKind::Circle => u * u + v * v <= 1.0,
            ShapeKind::Square => au.max(av) <= 0.8,
            ShapeKind::Triangle => (-0.9..=0.8).contains(&v) && au <= 0.95 * (v + 0.9) / 1.7,
            ShapeKind::Diamond => au + av <= 1.0,
            ShapeKind::Cross => (au <= 0.36 && av <= 0.95) || (av <= 0.36 && au <= 0.95),
            ShapeKind::Ring => (0.16..=1.0).contains(&(u * u + v * v)),
            ShapeKind::Ellipse => u * u + (v / 0.55) * (v / 0.55) <= 1.0,
            ShapeKind::Frame => (0.35..=0.85).contains(&au.max(av)),
        }
    }

    fn hue(self) -> f64 {
        let i = ShapeKind::ALL
            .iter()
            .position(|&s| s == self)
            .expect("listed");
        i as f64 * 45.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Solid,
    Stripes,
}

impl Texture {
    pub const ALL: [Texture; 2] = [Texture::Solid, Texture::Stripes];
}

/// How support frames relate to the query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// Supports are jittered re-renderings of the query scene.
    VideoLike,
    /// Supports are fresh scenes of the same class.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub shapes: Vec<ShapeKind>,
    pub textures: Vec<Texture>,
    pub image_size: usize,
    /// Maximum number of distractor objects per scene.
    pub clutter: usize,
    /// Background distribution id (0 or 1); swapping it emulates domain shift.
    pub background: u32,
    /// Half-width in degrees of the per-instance hue spread around the
    /// class hue. Classes sit 45° apart.
    pub hue_jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            shapes: ShapeKind::ALL.to_vec(),
            textures: Texture::ALL.to_vec(),
            image_size: 32,
            clutter: 2,
            background: 0,
            hue_jitter: 25.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn n_classes(&self) -> usize {
        self.shapes.len() * self.textures.len()
    }

    /// Class ids `1..=n_classes`, shape-major.
    pub fn class_ids(&self) -> Vec<u32> {
        (1..=self.n_classes() as u32).collect()
    }

    pub fn class(&self, id: u32) -> Result<(ShapeKind, Texture)> {
        let n_tex = self.textures.len();
        let i = (id as usize).wrapping_sub(1);
        if id == 0 || i >= self.n_classes() {
            return Err(Error::Config(format!(
                "class {id} not in vocabulary 1..={}",
                self.n_classes()
            )));
        }
        Ok((self.shapes[i / n_tex], self.textures[i % n_tex]))
    }

    pub fn class_name(&self, id: u32) -> Result<String> {
        let (s, t) = self.class(id)?;
        Ok(format!("{s:?}-{t:?}").to_lowercase())
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.textures.is_empty() {
            return Err(Error::Config("synthetic vocabulary is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !self.shapes.iter().all(|s| seen.insert(format!("{s:?}")))
            || !self.textures.iter().all(|t| seen.insert(format!("{t:?}")))
        {
            return Err(Error::Config("synthetic vocabulary has duplicates".into()));
        }
        if self.n_classes() < 8 {
            return Err(Error::Config(format!(
                "synthetic vocabulary has {} classes; at least 8 are needed",
                self.n_classes()
            )));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!(
                "image size {} too small",
                self.image_size
            )));
        }
        if !(0.0..=180.0).contains(&self.hue_jitter) {
            return Err(Error::Config(format!(
                "hue jitter {} outside [0, 180]",
                self.hue_jitter
            )));
        }
        if self.background > 1 {
            return Err(Error::Config(format!(
                "unknown background distribution {}",
                self.background
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Object {
    pub class_id: u32,
    pub shape: ShapeKind,
    pub texture: Texture,
    /// Center in pixels.
    pub center: (f64, f64),
    pub radius: f64,
    pub color: [f64; 3],
    pub stripe_angle: f64,
}

impl Object {
    fn contains(&self, y: f64, x: f64) -> bool {
        let u = (x - self.center.1) / self.radius;
        let v = (y - self.center.0) / self.radius;
        self.shape.contains(u, v)
    }

    fn color_at(&self, y: f64, x: f64) -> [f64; 3] {
        match self.texture {
            Texture::Solid => self.color,
            Texture::Stripes => {
                let (s, c) = self.stripe_angle.sin_cos();
                let t = ((x - self.center.1) * c + (y - self.center.0) * s) / 2.5;
                if t.floor().rem_euclid(2.0) == 0.0 {
                    self.color
                } else {
                    self.color.map(|v| v * 0.3)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Background {
    pub kind: u32,
    pub base: [f64; 3],
    pub gradient: [f64; 2],
    pub phase: f64,
}

impl Background {
    fn color_at(&self, y: f64, x: f64, size: f64) -> [f64; 3] {
        let (ny, nx) = (y / size - 0.5, x / size - 0.5);
        let shade = self.gradient[0] * ny + self.gradient[1] * nx;
        match self.kind {
            0 => self.base.map(|b| b + shade),
            _ => {
                // Tinted diagonal waves with a blue cast.
                let wave = 0.12 * ((nx + ny) * 18.0 + self.phase).sin();
                [
                    self.base[0] * 0.6 + shade,
                    self.base[1] * 0.8 + shade + wave,
                    self.base[2] + 0.15 + wave,
                ]
            }
        }
    }
}

/// Parametric scene; the target object is the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub size: usize,
    pub background: Background,
    pub objects: Vec<Object>,
}

/// Global similarity transform about the image center: `p' = c + s·(p − c) + d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub dy: f64,
    pub dx: f64,
    pub scale: f64,
}

impl Jitter {
    pub const IDENTITY: Jitter = Jitter {
        dy: 0.0,
        dx: 0.0,
        scale: 1.0,
    };

    /// Translation up to 10% of the image size and scale in [0.9, 1.1].
    pub fn random(rng: &mut impl Rng, size: usize) -> Self {
        let t = 0.1 * size as f64;
        Self {
            dy: rng.gen_range(-t..=t),
            dx: rng.gen_range(-t..=t),
            scale: rng.gen_range(0.9..=1.1),
        }
    }

    /// Maps an output pixel coordinate back into scene coordinates.
    pub fn inverse(&self, y: f64, x: f64, size: usize) -> (f64, f64) {
        let c = size as f64 / 2.0;
        (
            (y - c - self.dy) / self.scale + c,
            (x - c - self.dx) / self.scale + c,
        )
    }

    pub fn forward(&self, y: f64, x: f64, size: usize) -> (f64, f64) {
        let c = size as f64 / 2.0;
        (
            c + self.scale * (y - c) + self.dy,
            c + self.scale * (x - c) + self.dx,
        )
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn random_object(
    cfg: &SyntheticConfig,
    class_id: u32,
    rng: &mut impl Rng,
    target: bool,
) -> Result<Object> {
    let (shape, texture) = cfg.class(class_id)?;
    let size = cfg.image_size as f64;
    let radius = size * rng.gen_range(0.2..0.3);
    // Targets stay inside the frame so jittered copies keep most of the mask.
    let margin = if target { radius * 0.9 } else { 0.0 };
    let center = (
        rng.gen_range(margin..size - margin),
        rng.gen_range(margin..size - margin),
    );
    let color = hsv(
        shape.hue() + rng.gen_range(-1.0..=1.0) * cfg.hue_jitter,
        rng.gen_range(0.55..1.0),
        rng.gen_range(0.6..1.0),
    );
    Ok(Object {
        class_id,
        shape,
        texture,
        center,
        radius,
        color,
        stripe_angle: rng.gen_range(0.0..std::f64::consts::PI),
    })
}

/// A fresh scene whose target (last object) belongs to `class_id`.
pub fn random_scene(cfg: &SyntheticConfig, class_id: u32, rng: &mut impl Rng) -> Result<Scene> {
    cfg.validate()?;
    cfg.class(class_id)?;
    let grey = rng.gen_range(0.2..0.45);
    let tint = [
        rng.gen_range(-0.04..0.04),
        rng.gen_range(-0.04..0.04),
        rng.gen_range(-0.04..0.04),
    ];
    let background = Background {
        kind: cfg.background,
        base: tint.map(|t| grey + t),
        gradient: [rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)],
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
    };
    let n_distractors = if cfg.clutter == 0 {
        0
    } else {
        rng.gen_range(1..=cfg.clutter)
    };
    let n = cfg.n_classes() as u32;
    let mut objects = Vec::with_capacity(n_distractors + 1);
    for _ in 0..n_distractors {
        // Uniform over the other classes.
        let mut c = rng.gen_range(1..n);
        if c >= class_id {
            c += 1;
        }
        objects.push(random_object(cfg, c, rng, false)?);
    }
    objects.push(random_object(cfg, class_id, rng, true)?);
    Ok(Scene {
        size: cfg.image_size,
        background,
        objects,
    })
}

/// Rendered frame plus the visible mask of every object, in scene order.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub image: RgbImage,
    pub masks: Vec<(u32, BinaryMask)>,
}

impl Rendered {
    /// Union of the visible masks of `class_id` objects.
    pub fn class_mask(&self, class_id: u32) -> BinaryMask {
        let (h, w) = (self.image.height(), self.image.width());
        let mut out = BinaryMask::empty(h, w);
        for (c, m) in &self.masks {
            if *c == class_id {
                for y in 0..h {
                    for x in 0..w {
                        if m.get(y, x) {
                            out.set(y, x, true);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn target_mask(&self) -> &BinaryMask {
        &self.masks.last().expect("scene has a target").1
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rasterizes `scene` under `jitter`, sampling at pixel centers.
pub fn render(scene: &Scene, jitter: Jitter) -> Rendered {
    let s = scene.size;
    let n = scene.objects.len();
    let mut bits = vec![vec![false; s * s]; n];
    let mut data = Vec::with_capacity(3 * s * s);
    for py in 0..s {
        for px in 0..s {
            let (y, x) = jitter.inverse(py as f64 + 0.5, px as f64 + 0.5, s);
            let top = (0..n).rev().find(|&i| scene.objects[i].contains(y, x));
            let rgb = match top {
                Some(i) => {
                    bits[i][py * s + px] = true;
                    scene.objects[i].color_at(y, x)
                }
                None => scene.background.color_at(y, x, s as f64),
            };
            data.extend(rgb.map(to_byte));
        }
    }
    let masks = scene
        .objects
        .iter()
        .zip(bits)
        .map(|(o, b)| (o.class_id, BinaryMask::new(s, s, b).expect("sized")))
        .collect();
    Rendered {
        image: RgbImage::new(s, s, data).expect("sized"),
        masks,
    }
}

/// Episode of `class_id` with `k` supports.
pub fn generate_synthetic_episode(
    cfg: &SyntheticConfig,
    class_id: u32,
    k: usize,
    similarity: Similarity,
    rng: &mut impl Rng,
) -> Result<super::Episode> {
    if k == 0 {
        return Err(Error::Contract("episodes need K ≥ 1 supports".into()));
    }
    let query_scene = random_scene(cfg, class_id, rng)?;
    let query = render(&query_scene, Jitter::IDENTITY);
    let mut support = Vec::with_capacity(k);
    for _ in 0..k {
        let frame = match similarity {
            Similarity::VideoLike => render(&query_scene, Jitter::random(rng, cfg.image_size)),
            Similarity::Independent => render(&random_scene(cfg, class_id, rng)?, Jitter::IDENTITY),
        };
        let mask = frame.target_mask().clone();
        support.push((frame.image, mask));
    }
    let query_mask = query.target_mask().clone();
    Ok(super::Episode {
        class_id,
        query: query.image,
        query_mask,
        support,
        query_index: None,
        support_indices: Vec::new(),
    })
}
