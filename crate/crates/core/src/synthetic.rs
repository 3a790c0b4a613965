//! Deterministic soccer-like synthetic scenes with exact ground truth.
//!
//! A textured green field carries many medium "players", occasional
//! "referees" and rare small "balls", plus unannotated distractor blobs that
//! reuse the class colors at reduced saturation.
//!
//! Images are stored in a minimal raster format:
//!
//! ```text
//! offset  size  content
//! 0       4     magic b"SRB1"
//! 4       4     width,  u32 little-endian
//! 8       4     height, u32 little-endian
//! 12      w*h*3 RGB bytes, row-major, 8 bits per channel
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::annotations::{
    save_manifest, Annotation, ClassCatalog, Dataset, DatasetKind, ImageRecord,
};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Corners};

pub const RASTER_MAGIC: [u8; 4] = *b"SRB1";
pub const RASTER_HEADER_LEN: usize = 12;
/// Consecutive images sharing one game id.
pub const GAME_BLOCK: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    /// RGB, row-major.
    pub data: Vec<u8>,
}

impl Raster {
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for _ in 0..width as usize * height as usize {
            data.extend_from_slice(&rgb);
        }
        Raster {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn flip_horizontal(&self) -> Raster {
        let w = self.width as usize;
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(w * 3) {
            for px in row.chunks_exact(3).rev() {
                data.extend_from_slice(px);
            }
        }
        Raster {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RASTER_HEADER_LEN + self.data.len());
        out.extend_from_slice(&RASTER_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Raster> {
        if bytes.len() < RASTER_HEADER_LEN || bytes[..4] != RASTER_MAGIC {
            return Err(Error::validation("not a raster file (bad magic)"));
        }
        let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let want = width as usize * height as usize * 3;
        if width == 0 || height == 0 || bytes.len() - RASTER_HEADER_LEN != want {
            return Err(Error::validation(format!(
                "raster {width}x{height} expects {want} payload bytes, found {}",
                bytes.len() - RASTER_HEADER_LEN
            )));
        }
        Ok(Raster {
            width,
            height,
            data: bytes[RASTER_HEADER_LEN..].to_vec(),
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Raster> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Raster::from_bytes(&bytes).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// Expected objects per image (Poisson mean).
    pub frequency: f64,
    /// Inclusive integer width range in pixels.
    pub width: (u32, u32),
    pub height: (u32, u32),
    pub color: [f64; 3],
    /// Per-instance uniform jitter applied to each channel.
    pub color_jitter: f64,
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub width: u32,
    pub height: u32,
    pub classes: Vec<ClassSpec>,
    pub field_color: [f64; 3],
    /// Amplitude of the mowing stripes and pixel noise on the field.
    pub texture_amplitude: f64,
    /// Per-pixel noise on objects.
    pub object_noise: f64,
    /// Maximum IoU between any two placed objects.
    pub occlusion_allowance: f64,
    /// Expected unannotated distractor blobs per image.
    pub clutter_rate: f64,
    /// Saturation of distractor colors relative to the class colors, in [0, 1].
    pub distractor_saturation: f64,
    /// Strength of per-game appearance changes (lighting, field and kit colors); 0 disables.
    #[serde(default)]
    pub game_variation: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            width: 128,
            height: 128,
            classes: vec![
                ClassSpec {
                    name: "player".into(),
                    frequency: 6.0,
                    width: (8, 14),
                    height: (16, 28),
                    color: [200.0, 40.0, 50.0],
                    color_jitter: 25.0,
                    shape: Shape::Rectangle,
                },
                ClassSpec {
                    name: "referee".into(),
                    frequency: 0.8,
                    width: (8, 13),
                    height: (16, 26),
                    color: [225.0, 215.0, 40.0],
                    color_jitter: 20.0,
                    shape: Shape::Rectangle,
                },
                ClassSpec {
                    name: "ball".into(),
                    frequency: 0.7,
                    width: (5, 8),
                    height: (5, 8),
                    color: [245.0, 245.0, 245.0],
                    color_jitter: 8.0,
                    shape: Shape::Ellipse,
                },
            ],
            field_color: [50.0, 130.0, 60.0],
            texture_amplitude: 12.0,
            object_noise: 10.0,
            occlusion_allowance: 0.3,
            clutter_rate: 1.5,
            distractor_saturation: 0.45,
            game_variation: 0.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation("world image size must be positive"));
        }
        if !(0.0..1.0).contains(&self.occlusion_allowance) {
            return Err(Error::validation("occlusion allowance must lie in [0, 1)"));
        }
        if !(self.game_variation >= 0.0 && self.game_variation <= 2.0) {
            return Err(Error::validation("game variation must lie in [0, 2]"));
        }
        if !(self.clutter_rate >= 0.0) || !(0.0..=1.0).contains(&self.distractor_saturation) {
            return Err(Error::validation("invalid clutter settings"));
        }
        for c in &self.classes {
            if !(c.frequency >= 0.0) {
                return Err(Error::validation(format!("class {}: negative frequency", c.name)));
            }
            let ok = c.width.0 >= 1
                && c.height.0 >= 1
                && c.width.0 <= c.width.1
                && c.height.0 <= c.height.1
                && c.width.1 <= self.width
                && c.height.1 <= self.height;
            if !ok {
                return Err(Error::validation(format!("class {}: invalid size range", c.name)));
            }
        }
        Ok(())
    }

    pub fn catalog(&self) -> Result<ClassCatalog> {
        let names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        ClassCatalog::from_names(&names)
    }
}

/// SplitMix64 finalizer, used to derive independent per-image streams.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Raster,
    /// Ground truth with `image_id` 0 and ids `1..`.
    pub annotations: Vec<Annotation>,
}

fn poisson_count(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as usize
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn paint(
    img: &mut Raster,
    rng: &mut ChaCha8Rng,
    b: &BoundingBox,
    shape: Shape,
    color: [f64; 3],
    noise: f64,
) {
    let (x0, y0) = (b.x as u32, b.y as u32);
    let (w, h) = (b.w as u32, b.h as u32);
    let (cx, cy) = (b.w / 2.0, b.h / 2.0);
    for dy in 0..h {
        for dx in 0..w {
            if shape == Shape::Ellipse {
                let u = (dx as f64 + 0.5 - cx) / cx;
                let v = (dy as f64 + 0.5 - cy) / cy;
                if u * u + v * v > 1.0 {
                    continue;
                }
            }
            let n = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
            img.set_pixel(
                x0 + dx,
                y0 + dy,
                [to_u8(color[0] + n), to_u8(color[1] + n), to_u8(color[2] + n)],
            );
        }
    }
}

fn field(cfg: &WorldConfig, style: &GameStyle, rng: &mut ChaCha8Rng) -> Raster {
    let mut img = Raster::filled(cfg.width, cfg.height, [0, 0, 0]);
    let amp = cfg.texture_amplitude;
    let stripe = rng.random_range(10.0..24.0f64);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let s = (x as f64 / stripe * std::f64::consts::PI + phase).sin().signum() * 0.5 * amp;
            let n = if amp > 0.0 { rng.random_range(-0.5 * amp..=0.5 * amp) } else { 0.0 };
            let c = style.field(cfg.field_color);
            img.set_pixel(x, y, [to_u8(c[0] + n), to_u8(c[1] + s + n), to_u8(c[2] + n)]);
        }
    }
    img
}

fn jittered(rng: &mut ChaCha8Rng, color: [f64; 3], jitter: f64) -> [f64; 3] {
    if jitter <= 0.0 {
        return color;
    }
    color.map(|c| c + rng.random_range(-jitter..=jitter))
}

fn try_place(
    rng: &mut ChaCha8Rng,
    cfg: &WorldConfig,
    spec: &ClassSpec,
    placed: &[Corners],
) -> Option<BoundingBox> {
    for _ in 0..50 {
        let w = rng.random_range(spec.width.0..=spec.width.1);
        let h = rng.random_range(spec.height.0..=spec.height.1);
        let x = rng.random_range(0..=cfg.width - w);
        let y = rng.random_range(0..=cfg.height - h);
        let b = BoundingBox::new(x as f64, y as f64, w as f64, h as f64);
        let c = b.corners();
        if placed.iter().all(|p| p.iou(&c) <= cfg.occlusion_allowance) {
            return Some(b);
        }
    }
    None
}

/// Appearance shared by all images of one game.
#[derive(Debug, Clone, PartialEq)]
pub struct GameStyle {
    /// Multiplicative lighting gain.
    pub gain: f64,
    pub field_shift: [f64; 3],
    /// Per-class color offsets, in class order.
    pub class_shift: Vec<[f64; 3]>,
}

const LIGHTING_SPREAD: f64 = 0.2;
const FIELD_SPREAD: f64 = 25.0;
const KIT_SPREAD: f64 = 45.0;

impl GameStyle {
    pub fn neutral(cfg: &WorldConfig) -> GameStyle {
        GameStyle { gain: 1.0, field_shift: [0.0; 3], class_shift: vec![[0.0; 3]; cfg.classes.len()] }
    }

    pub fn sample(cfg: &WorldConfig, seed: u64) -> GameStyle {
        let v = cfg.game_variation;
        if v == 0.0 {
            return GameStyle::neutral(cfg);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shift = |spread: f64| [0; 3].map(|_| rng.random_range(-spread * v..=spread * v));
        let field_shift = shift(FIELD_SPREAD);
        let class_shift = cfg.classes.iter().map(|_| shift(KIT_SPREAD)).collect();
        let gain = 1.0 + rng.random_range(-LIGHTING_SPREAD * v..=LIGHTING_SPREAD * v);
        GameStyle { gain, field_shift, class_shift }
    }

    fn field(&self, c: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|i| (c[i] + self.field_shift[i]) * self.gain)
    }

    fn object(&self, class: usize, c: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|i| (c[i] + self.class_shift[class][i]) * self.gain)
    }
}

/// Style of game `game` in a dataset generated with `seed`.
pub fn game_style(cfg: &WorldConfig, seed: u64, game: u64) -> GameStyle {
    GameStyle::sample(cfg, derive_seed(mix64(seed ^ 0x6761_6d65), game))
}

/// Render one scene with neutral game style. Identical `(cfg, seed)` give
/// bit-identical output.
pub fn generate_scene(cfg: &WorldConfig, seed: u64) -> Scene {
    generate_styled_scene(cfg, &GameStyle::neutral(cfg), seed)
}

pub fn generate_styled_scene(cfg: &WorldConfig, style: &GameStyle, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = field(cfg, style, &mut rng);
    let mut placed: Vec<Corners> = Vec::new();
    let mut annotations = Vec::new();

    let mut objects: Vec<(usize, BoundingBox)> = Vec::new();
    for (ci, spec) in cfg.classes.iter().enumerate() {
        for _ in 0..poisson_count(&mut rng, spec.frequency) {
            if let Some(b) = try_place(&mut rng, cfg, spec, &placed) {
                placed.push(b.corners());
                objects.push((ci, b));
            }
        }
    }
    let mut distractors: Vec<(usize, BoundingBox)> = Vec::new();
    if !cfg.classes.is_empty() {
        for _ in 0..poisson_count(&mut rng, cfg.clutter_rate) {
            let ci = rng.random_range(0..cfg.classes.len());
            if let Some(b) = try_place(&mut rng, cfg, &cfg.classes[ci], &placed) {
                placed.push(b.corners());
                distractors.push((ci, b));
            }
        }
    }
    for &(ci, b) in &distractors {
        let spec = &cfg.classes[ci];
        let base = style.object(ci, jittered(&mut rng, spec.color, spec.color_jitter));
        let gray = (base[0] + base[1] + base[2]) / 3.0;
        let color = base.map(|c| gray + cfg.distractor_saturation * (c - gray));
        paint(&mut img, &mut rng, &b, spec.shape, color, cfg.object_noise);
    }
    for (k, &(ci, b)) in objects.iter().enumerate() {
        let spec = &cfg.classes[ci];
        let color = style.object(ci, jittered(&mut rng, spec.color, spec.color_jitter));
        paint(&mut img, &mut rng, &b, spec.shape, color, cfg.object_noise);
        annotations.push(Annotation::ground_truth(k as u64 + 1, 0, ci as u32 + 1, b));
    }
    Scene {
        image: img,
        annotations,
    }
}

/// Generate `n_images` scenes under `dir`, writing `dir/images/*.rgb` and
/// `dir/manifest.json`. Image `i` uses seed `derive_seed(seed, i)` and belongs to
/// game `i / GAME_BLOCK`, whose style is `game_style(cfg, seed, game)`.
pub fn generate_dataset(cfg: &WorldConfig, n_images: usize, seed: u64, dir: &Path) -> Result<Dataset> {
    cfg.validate()?;
    if n_images == 0 {
        return Err(Error::validation("generate_dataset needs at least one image"));
    }
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut d = Dataset::new(DatasetKind::Labeled, cfg.catalog()?).with_root(dir);
    let mut style = None;
    for i in 0..n_images {
        let game = (i / GAME_BLOCK) as u64;
        if i % GAME_BLOCK == 0 {
            style = Some(game_style(cfg, seed, game));
        }
        let scene = generate_styled_scene(cfg, style.as_ref().expect("set at block start"), derive_seed(seed, i as u64));
        let file = format!("images/img_{i:06}.rgb");
        scene.image.write(dir.join(&file))?;
        let image_id = i as u64 + 1;
        d.images.push(ImageRecord {
            id: image_id,
            file,
            width: cfg.width,
            height: cfg.height,
            game_id: format!("s{seed:016x}_game_{:04}", i / GAME_BLOCK),
        });
        for a in scene.annotations {
            let id = d.annotations.len() as u64 + 1;
            d.annotations.push(Annotation { id, image_id, ..a });
        }
    }
    save_manifest(&d, dir.join("manifest.json"))?;
    Ok(d)
}
