//! Synthetic panel scenes: stroked glyph strings laid along smooth
//! centerlines, with exact annotations.

mod dataset;
pub mod glyphs;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fscrs::{
    curve_bounds, curve_derivative, curve_point, ControlPointSet, Point, DEFAULT_TENSION,
};
use crate::raster::GrayImage;

pub use dataset::{load_dataset, write_dataset, Dataset, DatasetManifest, DatasetStats};
pub use glyphs::{alphabet, class_of, encode_text, glyph_strokes, ALPHABET_SIZE};

/// Longest transcription the generator will emit.
pub const MAX_TEXT_LEN: usize = 11;

/// Glyph box width and pen advance, as fractions of the glyph height.
const GLYPH_WIDTH: f64 = 0.6;
const GLYPH_ADVANCE: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of instances per scene.
    pub instances: [usize; 2],
    /// Inclusive range of glyph heights in pixels; heights are log-stratified.
    pub glyph_height: [f64; 2],
    pub text_len: [usize; 2],
    /// Minimum gap between instance boxes, in pixels.
    pub spacing: f64,
    /// Background gray level range.
    pub brightness: [f64; 2],
    /// Text-to-background intensity difference range.
    pub contrast: [f64; 2],
    pub invert_probability: f64,
    /// Peak uniform pixel noise.
    pub noise: f64,
    pub max_rotation_deg: f64,
    /// Largest total turning of a centerline.
    pub max_bend_deg: f64,
    /// Symbols drawn for transcriptions; each must be in the alphabet.
    pub charset: String,
    pub placement_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self::dense()
    }
}

impl SceneConfig {
    /// Crowded 256×256 panels with 12–22 instances of mixed scale.
    pub fn dense() -> Self {
        Self {
            width: 256,
            height: 256,
            instances: [12, 22],
            glyph_height: [6.0, 24.0],
            text_len: [2, 8],
            spacing: 2.0,
            brightness: [150.0, 235.0],
            contrast: [90.0, 150.0],
            invert_probability: 0.3,
            noise: 6.0,
            max_rotation_deg: 25.0,
            max_bend_deg: 40.0,
            charset: alphabet().iter().collect(),
            placement_attempts: 400,
        }
    }

    /// Small 128×128 scenes with a few large instances, for memorization runs.
    pub fn overfit() -> Self {
        Self {
            width: 128,
            height: 128,
            instances: [2, 4],
            glyph_height: [14.0, 24.0],
            text_len: [2, 4],
            spacing: 4.0,
            noise: 4.0,
            max_rotation_deg: 20.0,
            max_bend_deg: 30.0,
            ..Self::dense()
        }
    }

    /// 128×128 scenes with a handful of instances over a 2× scale range.
    pub fn compact() -> Self {
        Self {
            instances: [3, 5],
            glyph_height: [10.0, 20.0],
            text_len: [2, 4],
            ..Self::overfit()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "dense" => Ok(Self::dense()),
            "overfit" => Ok(Self::overfit()),
            "compact" => Ok(Self::compact()),
            other => Err(Error::InvalidArgument(format!(
                "unknown scene preset `{other}` (expected dense, overfit or compact)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.width < 8 || self.height < 8 {
            return bad(format!("image {}x{} is too small", self.width, self.height));
        }
        if self.instances[0] > self.instances[1] {
            return bad(format!("instance range {:?} is reversed", self.instances));
        }
        let [h0, h1] = self.glyph_height;
        if !(h0 > 0.0 && h0 <= h1 && h1.is_finite()) {
            return bad(format!(
                "glyph height range {:?} is invalid",
                self.glyph_height
            ));
        }
        if self.text_len[0] == 0
            || self.text_len[0] > self.text_len[1]
            || self.text_len[1] > MAX_TEXT_LEN
        {
            return bad(format!(
                "text length range {:?} must lie in [1, {MAX_TEXT_LEN}]",
                self.text_len
            ));
        }
        for (name, r) in [("brightness", self.brightness), ("contrast", self.contrast)] {
            if !(r[0] <= r[1] && r[0] >= 0.0 && r[1] <= 255.0) {
                return bad(format!("{name} range {r:?} must lie in [0, 255]"));
            }
        }
        if !(0.0..=1.0).contains(&self.invert_probability) || self.noise < 0.0 || self.spacing < 0.0
        {
            return bad("invert probability, noise and spacing must be non-negative".into());
        }
        if self.charset.is_empty() {
            return bad("charset is empty".into());
        }
        encode_text(&self.charset)?;
        if self.placement_attempts == 0 {
            return bad("placement_attempts must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextInstance {
    /// Centerline control points, normalized by image width and height.
    pub control_points: ControlPointSet,
    pub text: String,
    /// Normalized `(cx, cy, w, h)` covering every glyph stroke and the centerline.
    pub bbox: [f64; 4],
    pub glyph_height_px: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub image_id: String,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub instances: Vec<TextInstance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: GrayImage,
    pub annotation: SceneAnnotation,
}

/// Pixel-space layout of one instance before it is committed.
struct Layout {
    control_points: ControlPointSet,
    strokes: Vec<[Point; 2]>,
    thickness: f64,
    height: f64,
    bounds: [f64; 4],
}

fn glyph_layout(text: &[usize], height: f64, rotation: f64, bend: f64) -> Layout {
    let len = text.len() as f64 * GLYPH_ADVANCE * height;
    // Circular arc of length `len` centered on the origin, sampled at four
    // equally spaced arc positions.
    let start = rotation - bend / 2.0;
    let at = |s: f64| -> Point {
        if bend.abs() < 1e-9 {
            [s * start.cos(), s * start.sin()]
        } else {
            let r = len / bend;
            let a = start + bend * s / len;
            [r * (a.sin() - start.sin()), -r * (a.cos() - start.cos())]
        }
    };
    let mid = at(len / 2.0);
    let ctrl = ControlPointSet(std::array::from_fn(|i| {
        let p = at(len * i as f64 / 3.0);
        [p[0] - mid[0], p[1] - mid[1]]
    }));
    let thickness = (0.12 * height).max(1.0);
    let gw = GLYPH_WIDTH * height;
    let mut strokes = Vec::new();
    for (i, &class) in text.iter().enumerate() {
        let t = (i as f64 + 0.5) / text.len() as f64;
        let c = curve_point(&ctrl, t, DEFAULT_TENSION);
        let d = curve_derivative(&ctrl, t, DEFAULT_TENSION, false);
        let norm = (d[0] * d[0] + d[1] * d[1]).sqrt().max(1e-12);
        let (tx, ty) = (d[0] / norm, d[1] / norm);
        // Glyph x runs along the tangent, glyph y (downwards) along the normal.
        let (nx, ny) = (-ty, tx);
        let place = |p: Point| -> Point {
            let (lx, ly) = ((p[0] - 0.5) * gw, (p[1] - 0.5) * height);
            [c[0] + lx * tx + ly * nx, c[1] + lx * ty + ly * ny]
        };
        for seg in glyph_strokes(class) {
            strokes.push([place(seg[0]), place(seg[1])]);
        }
    }
    let pad = thickness / 2.0 + 1.0;
    let mut b = curve_bounds(&ctrl, DEFAULT_TENSION);
    for s in &strokes {
        for p in s {
            b[0] = b[0].min(p[0] - pad);
            b[1] = b[1].min(p[1] - pad);
            b[2] = b[2].max(p[0] + pad);
            b[3] = b[3].max(p[1] + pad);
        }
    }
    Layout {
        control_points: ctrl,
        strokes,
        thickness,
        height,
        bounds: b,
    }
}

fn overlaps(a: &[f64; 4], b: &[f64; 4], gap: f64) -> bool {
    a[0] < b[2] + gap && b[0] < a[2] + gap && a[1] < b[3] + gap && b[1] < a[3] + gap
}

const PLACEMENT_ROUNDS: usize = 8;

/// Renders one scene. Identical `(config, seed)` pairs give identical output.
pub fn generate_scene(config: &SceneConfig, seed: u64, image_id: &str) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (config.width as f64, config.height as f64);
    let charset = encode_text(&config.charset)?;
    let count = rng.gen_range(config.instances[0]..=config.instances[1]);

    // Log-stratified glyph heights: one draw per stratum, then shuffled.
    let [h0, h1] = config.glyph_height;
    let mut heights: Vec<f64> = (0..count)
        .map(|i| h0 * (h1 / h0).powf((i as f64 + rng.gen::<f64>()) / count as f64))
        .collect();
    heights.shuffle(&mut rng);
    // Place large instances first; they are the hardest to fit.
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| heights[b].total_cmp(&heights[a]));

    let mut placed: Vec<(usize, Layout, Vec<usize>)> = Vec::with_capacity(count);
    let margin = 1.0;
    let mut most_placed = 0;
    // Greedy placement can box itself in; start over a few times before giving up.
    'round: for round in 0..PLACEMENT_ROUNDS {
        placed.clear();
        for &slot in &order {
            let height = heights[slot];
            let mut done = false;
            for _ in 0..config.placement_attempts {
                let max_len =
                    ((w.min(h) - 2.0 * margin) / (GLYPH_ADVANCE * height)).floor() as usize;
                let hi = config.text_len[1].min(max_len);
                if hi < config.text_len[0] {
                    break;
                }
                let n = rng.gen_range(config.text_len[0]..=hi);
                let text: Vec<usize> = (0..n)
                    .map(|_| charset[rng.gen_range(0..charset.len())])
                    .collect();
                let rotation = rng.gen_range(-1.0..=1.0) * config.max_rotation_deg.to_radians();
                let bend = rng.gen_range(-1.0..=1.0) * config.max_bend_deg.to_radians();
                let mut layout = glyph_layout(&text, height, rotation, bend);
                let b = layout.bounds;
                let (x_lo, x_hi) = (margin - b[0], w - margin - b[2]);
                let (y_lo, y_hi) = (margin - b[1], h - margin - b[3]);
                if x_lo > x_hi || y_lo > y_hi {
                    continue;
                }
                let dx = rng.gen_range(x_lo..=x_hi);
                let dy = rng.gen_range(y_lo..=y_hi);
                let moved = [b[0] + dx, b[1] + dy, b[2] + dx, b[3] + dy];
                if placed
                    .iter()
                    .any(|(_, other, _)| overlaps(&moved, &other.bounds, config.spacing))
                {
                    continue;
                }
                layout.bounds = moved;
                layout.control_points = layout.control_points.map(|p| [p[0] + dx, p[1] + dy]);
                for s in &mut layout.strokes {
                    *s = s.map(|p| [p[0] + dx, p[1] + dy]);
                }
                placed.push((slot, layout, text));
                done = true;
                break;
            }
            if !done {
                most_placed = most_placed.max(placed.len());
                if round + 1 == PLACEMENT_ROUNDS {
                    return Err(Error::Infeasible(format!(
                    "could only place {most_placed} of {count} instances in a {}x{} image (seed {seed})",
                    config.width,
                    config.height
                )));
                }
                continue 'round;
            }
        }
        break;
    }
    placed.sort_by_key(|(slot, _, _)| *slot);

    let mut image = GrayImage::filled(config.width, config.height, 0);
    let base = rng.gen_range(config.brightness[0]..=config.brightness[1]);
    let invert = rng.gen_bool(config.invert_probability);
    let background = if invert { 255.0 - base } else { base };
    let (gx, gy) = (rng.gen_range(-20.0..=20.0), rng.gen_range(-20.0..=20.0));
    for y in 0..config.height {
        for x in 0..config.width {
            let v = background + gx * (x as f64 / w - 0.5) + gy * (y as f64 / h - 0.5);
            image.pixels[y * config.width + x] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    let mut instances = Vec::with_capacity(placed.len());
    for (_, layout, text) in &placed {
        let contrast = rng.gen_range(config.contrast[0]..=config.contrast[1]);
        let ink = if invert {
            background + contrast
        } else {
            background - contrast
        }
        .clamp(0.0, 255.0);
        for s in &layout.strokes {
            image.draw_segment(s[0], s[1], layout.thickness, ink);
        }
        let b = layout.bounds;
        instances.push(TextInstance {
            control_points: layout.control_points.map(|p| [p[0] / w, p[1] / h]),
            text: text.iter().map(|&c| alphabet()[c]).collect(),
            bbox: [
                (b[0] + b[2]) / 2.0 / w,
                (b[1] + b[3]) / 2.0 / h,
                (b[2] - b[0]) / w,
                (b[3] - b[1]) / h,
            ],
            glyph_height_px: layout.height,
        });
    }
    if config.noise > 0.0 {
        for p in &mut image.pixels {
            let v = *p as f64 + rng.gen_range(-config.noise..=config.noise);
            *p = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    let annotation = SceneAnnotation {
        image_id: image_id.to_string(),
        seed,
        width: config.width,
        height: config.height,
        instances,
    };
    Ok(Scene { image, annotation })
}

/// Seed used for scene `index` of a dataset generated from `base_seed`.
pub fn scene_seed(base_seed: u64, index: usize) -> u64 {
    base_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
}

/// `count` scenes with ids `00000`, `00001`, ...
pub fn generate_scenes(config: &SceneConfig, base_seed: u64, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| generate_scene(config, scene_seed(base_seed, i), &format!("{i:05}")))
        .collect()
}
