use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::SemanticLayout;
use crate::seed::rng_for;
use crate::tensor::Tensor;

/// Largest class count representable in an 8-bit label map.
pub const MAX_CLASSES: usize = 256;

/// Integer class-id grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || ids.len() != height * width {
            return Err(Error::Shape {
                op: "label_map",
                detail: format!("{} ids for a {height}×{width} grid", ids.len()),
            });
        }
        Ok(Self { height, width, ids })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> Self {
        Self {
            height,
            width,
            ids: vec![id; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    pub fn max_id(&self) -> u8 {
        self.ids.iter().copied().max().unwrap_or(0)
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        let max = self.max_id() as usize;
        if max >= num_classes {
            return Err(Error::Invalid(format!("label id {max} is not below class count {num_classes}")));
        }
        Ok(())
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<u64> {
        let mut counts = vec![0u64; num_classes];
        for &id in &self.ids {
            if (id as usize) < num_classes {
                counts[id as usize] += 1;
            }
        }
        counts
    }
}

/// One-hot layout (`1×C×H×W`) of a label map.
pub fn one_hot(lm: &LabelMap, num_classes: usize) -> Result<SemanticLayout> {
    one_hot_batch(&[lm], num_classes)
}

pub fn one_hot_batch(maps: &[&LabelMap], num_classes: usize) -> Result<SemanticLayout> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Invalid("one-hot of an empty batch".into()))?;
    for m in maps {
        if (m.height, m.width) != (first.height, first.width) {
            return Err(Error::Shape {
                op: "one_hot",
                detail: format!("{}×{} vs {}×{}", m.height, m.width, first.height, first.width),
            });
        }
        m.check_classes(num_classes)?;
    }
    let ids: Vec<&[u8]> = maps.iter().map(|m| m.ids()).collect();
    SemanticLayout::from_ids(&ids, num_classes, first.height, first.width)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Circle,
    Stripes,
}

impl ShapeKind {
    /// Shape used by foreground class `class` (≥ 1).
    pub fn for_class(class: usize) -> Self {
        match (class - 1) % 3 {
            0 => ShapeKind::Rect,
            1 => ShapeKind::Circle,
            _ => ShapeKind::Stripes,
        }
    }
}

/// Appearance of one class: base color plus a zero-mean sinusoid whose phase
/// is redrawn per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAppearance {
    /// RGB in `[−1, 1]`.
    pub color: [f32; 3],
    /// Cycles per pixel along x and y.
    pub frequency: [f32; 2],
    pub amplitude: f32,
}

const PALETTE: [[u8; 3]; 8] = [
    [70, 90, 110],
    [220, 60, 50],
    [60, 180, 80],
    [240, 210, 60],
    [80, 90, 220],
    [200, 80, 200],
    [60, 200, 210],
    [150, 110, 60],
];

fn palette_color(k: usize) -> [f32; 3] {
    let rgb = if k < PALETTE.len() {
        PALETTE[k].map(|v| v as f32 / 255.0)
    } else {
        // golden-angle hues, alternating lightness
        let hue = (k as f32 * 0.618_034).fract();
        let light = if k % 2 == 0 { 0.35 } else { 0.65 };
        hsl(hue, 0.7, light)
    };
    rgb.map(|v| v * 2.0 - 1.0)
}

fn hsl(h: f32, s: f32, l: f32) -> [f32; 3] {
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let hp = h * 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    [r + m, g + m, b + m]
}

/// Generator of the textured-shapes world.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapesWorldSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub appearance: Vec<ClassAppearance>,
    /// Target mean area fraction per class; entry 0 (background) is the remainder.
    pub area_fractions: Vec<f64>,
    /// Shapes per foreground class per image, inclusive range.
    pub shapes_per_class: (usize, usize),
    pub seed: u64,
}

/// Total foreground coverage targeted by the default spec.
const FOREGROUND_FRACTION: f64 = 0.6;
const TEXTURE_AMPLITUDE: f32 = 0.08;

impl ShapesWorldSpec {
    /// Default appearance and area targets for `num_classes` classes.
    ///
    /// Foreground class `k` targets an area proportional to `C − k`, so
    /// every class has its own color, texture, shape and frequency.
    pub fn new(num_classes: usize, height: usize, width: usize, seed: u64) -> Result<Self> {
        let appearance = (0..num_classes)
            .map(|k| {
                let angle = k as f32 * std::f32::consts::FRAC_PI_4;
                let f = 0.04 + 0.03 * k as f32;
                ClassAppearance {
                    color: palette_color(k),
                    frequency: [f * angle.cos(), f * angle.sin()],
                    amplitude: TEXTURE_AMPLITUDE,
                }
            })
            .collect();
        let mut area_fractions = vec![0.0; num_classes];
        if num_classes >= 2 {
            let total: f64 = (1..num_classes).map(|k| (num_classes - k) as f64).sum();
            for (k, a) in area_fractions.iter_mut().enumerate().skip(1) {
                *a = FOREGROUND_FRACTION * (num_classes - k) as f64 / total;
            }
            area_fractions[0] = 1.0 - FOREGROUND_FRACTION;
        }
        let spec = Self {
            num_classes,
            height,
            width,
            appearance,
            area_fractions,
            shapes_per_class: (1, 3),
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > MAX_CLASSES {
            return Err(Error::Config(format!(
                "class count {} outside [2, {MAX_CLASSES}]",
                self.num_classes
            )));
        }
        if self.height == 0 || self.width == 0 || self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be positive multiples of 16",
                self.height, self.width
            )));
        }
        if self.appearance.len() != self.num_classes || self.area_fractions.len() != self.num_classes {
            return Err(Error::Config("one appearance and area target per class".into()));
        }
        let (lo, hi) = self.shapes_per_class;
        if lo == 0 || hi < lo {
            return Err(Error::Config(format!("bad shape count range {lo}..={hi}")));
        }
        let fg: f64 = self.area_fractions[1..].iter().sum();
        if self.area_fractions.iter().any(|&a| !(0.0..=1.0).contains(&a)) || fg >= 1.0 {
            return Err(Error::Config("area targets must lie in [0, 1] with foreground below 1".into()));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Sample `index` of the world, independent of every other index.
    pub fn sample(&self, index: u64) -> (LabelMap, Tensor<f32>) {
        let mut rng = rng_for(self.seed, &[0x5741_5645, index]);
        let mask = self.paint_mask(&mut rng);
        let image = self.render(&mask, &mut rng);
        (mask, image)
    }

    fn paint_mask<R: Rng>(&self, rng: &mut R) -> LabelMap {
        let (h, w) = (self.height, self.width);
        let n = self.pixels() as f64;
        let mut ids = vec![0u8; h * w];
        let mut coverage = vec![0usize; self.num_classes];

        // jitter targets per image; the mean stays at the spec value
        let targets: Vec<f64> = self
            .area_fractions
            .iter()
            .map(|&a| a * n * rng.random_range(0.7..1.3))
            .collect();
        let mut queue: Vec<usize> = Vec::new();
        for class in 1..self.num_classes {
            let count = rng.random_range(self.shapes_per_class.0..=self.shapes_per_class.1);
            queue.extend(std::iter::repeat_n(class, count));
        }
        // shuffle so no class always paints first
        for i in (1..queue.len()).rev() {
            queue.swap(i, rng.random_range(0..=i));
        }
        let mut remaining = vec![0usize; self.num_classes];
        for &c in &queue {
            remaining[c] += 1;
        }
        let attempt = |class: usize, shapes_left: usize, ids: &mut Vec<u8>, coverage: &mut Vec<usize>, rng: &mut R| {
            let deficit = targets[class] - coverage[class] as f64;
            if deficit <= 0.0 {
                return;
            }
            let area = (deficit / shapes_left.max(1) as f64 * rng.random_range(0.7..1.4)).max(4.0);
            let cover = shape_pixels(ShapeKind::for_class(class), area, h, w, rng);
            let gain = cover.iter().filter(|&&p| ids[p] == 0).count() as f64;
            // accept only if it moves this class closer to its target
            if (deficit - gain).abs() < deficit {
                for p in cover {
                    if ids[p] == 0 {
                        ids[p] = class as u8;
                    }
                }
                coverage[class] += gain as usize;
            }
        };
        for &class in &queue {
            attempt(class, remaining[class], &mut ids, &mut coverage, rng);
            remaining[class] -= 1;
        }
        // top-up passes for classes still well short (occlusion, rejections)
        for _ in 0..4 {
            for class in 1..self.num_classes {
                if (coverage[class] as f64) < 0.85 * targets[class] {
                    attempt(class, 1, &mut ids, &mut coverage, rng);
                }
            }
        }
        LabelMap {
            height: h,
            width: w,
            ids,
        }
    }

    fn render<R: Rng>(&self, mask: &LabelMap, rng: &mut R) -> Tensor<f32> {
        let (h, w) = (self.height, self.width);
        let phases: Vec<f32> = (0..self.num_classes)
            .map(|_| rng.random_range(0.0..std::f32::consts::TAU))
            .collect();
        let mut data = vec![0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let k = mask.get(y, x) as usize;
                let a = &self.appearance[k];
                let t = a.amplitude
                    * (std::f32::consts::TAU * (a.frequency[0] * x as f32 + a.frequency[1] * y as f32) + phases[k]).sin();
                for ch in 0..3 {
                    data[(ch * h + y) * w + x] = (a.color[ch] + t).clamp(-1.0, 1.0);
                }
            }
        }
        Tensor::new(&[3, h, w], data).expect("shape matches buffer")
    }
}

/// Pixel indices covered by one shape of roughly `area` pixels.
fn shape_pixels<R: Rng>(kind: ShapeKind, area: f64, h: usize, w: usize, rng: &mut R) -> Vec<usize> {
    let area = area.min((h * w) as f64 * 0.9);
    let mut out = Vec::new();
    match kind {
        ShapeKind::Rect | ShapeKind::Stripes => {
            let stripes = kind == ShapeKind::Stripes;
            // bars cover half of a stripe region
            let region = if stripes { 2.0 * area } else { area };
            let aspect: f64 = rng.random_range(0.5..2.0);
            let rw = ((region * aspect).sqrt().round() as usize).clamp(2, w);
            let rh = ((region / rw as f64).round() as usize).clamp(2, h);
            let x0 = rng.random_range(0..=w - rw);
            let y0 = rng.random_range(0..=h - rh);
            let vertical = rng.random_bool(0.5);
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    let along = if vertical { x - x0 } else { y - y0 };
                    if !stripes || (along / 3) % 2 == 0 {
                        out.push(y * w + x);
                    }
                }
            }
        }
        ShapeKind::Circle => {
            let r = (area / std::f64::consts::PI).sqrt().max(1.0);
            let cx = rng.random_range(0.0..w as f64);
            let cy = rng.random_range(0.0..h as f64);
            let (ylo, yhi) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(h));
            let (xlo, xhi) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(w));
            for y in ylo..yhi {
                for x in xlo..xhi {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if dx * dx + dy * dy <= r * r {
                        out.push(y * w + x);
                    }
                }
            }
        }
    }
    out
}

/// Samples `start..start + n` of the world, generated in parallel.
pub fn generate_range(spec: &ShapesWorldSpec, start: u64, n: usize) -> Vec<(LabelMap, Tensor<f32>)> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| spec.sample(start + i))
        .collect()
}

pub fn generate_world(spec: &ShapesWorldSpec, n: usize) -> Result<Vec<(LabelMap, Tensor<f32>)>> {
    if n == 0 {
        return Err(Error::Invalid("generate_world needs n ≥ 1".into()));
    }
    spec.validate()?;
    Ok(generate_range(spec, 0, n))
}

/// Per-pixel nearest base color; the appearance oracle of the world.
pub fn nearest_color_labels(spec: &ShapesWorldSpec, image: &Tensor<f32>) -> Result<LabelMap> {
    let shape = image.shape();
    let (h, w) = match shape {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        _ => {
            return Err(Error::Shape {
                op: "nearest_color",
                detail: format!("expected 3×H×W, got {shape:?}"),
            })
        }
    };
    let d = image.data();
    let ids = (0..h * w)
        .map(|p| {
            let px = [d[p], d[h * w + p], d[2 * h * w + p]];
            let mut best = (f32::INFINITY, 0u8);
            for (k, a) in spec.appearance.iter().enumerate() {
                let dist: f32 = (0..3).map(|c| (px[c] - a.color[c]).powi(2)).sum();
                if dist < best.0 {
                    best = (dist, k as u8);
                }
            }
            best.1
        })
        .collect();
    LabelMap::new(h, w, ids)
}
