use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::world::{generate_range, ClassAppearance, LabelMap, ShapesWorldSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `[−1, 1]` to 8-bit: `round((v + 1) · 127.5)`, clamped.
pub fn to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn from_u8(s: u8) -> f32 {
    s as f32 / 127.5 - 1.0
}

fn image_dims(t: &Tensor<f32>) -> Result<(usize, usize)> {
    match t.shape() {
        [3, h, w] | [1, 3, h, w] => Ok((*h, *w)),
        s => Err(Error::Shape {
            op: "write_png",
            detail: format!("expected 3×H×W image, got {s:?}"),
        }),
    }
}

fn write_raw(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    writer
        .finish()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

fn read_raw(path: &Path, expected: png::ColorType) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path)?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let bad = |e: png::DecodingError| Error::Image(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(bad)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    if info.bit_depth != png::BitDepth::Eight || info.color_type != expected {
        return Err(Error::Image(format!(
            "{}: expected 8-bit {expected:?}, found {:?} {:?}",
            path.display(),
            info.bit_depth,
            info.color_type
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, buf))
}

/// Writes a `3×H×W` (or `1×3×H×W`) image with values in `[−1, 1]`.
pub fn write_image_png(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    let (h, w) = image_dims(image)?;
    let d = image.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            bytes.push(to_u8(d[c * h * w + p]));
        }
    }
    write_raw(path.as_ref(), w, h, png::ColorType::Rgb, &bytes)
}

/// Reads an 8-bit RGB PNG as a `3×H×W` tensor in `[−1, 1]`.
pub fn read_image_png(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let (h, w, bytes) = read_raw(path.as_ref(), png::ColorType::Rgb)?;
    Tensor::new(&[3, h, w], (0..3 * h * w).map(|i| from_u8(bytes[(i % (h * w)) * 3 + i / (h * w)])).collect())
}

/// Label maps are 8-bit grayscale with pixel value = class id.
pub fn write_label_png(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    write_raw(path.as_ref(), labels.width(), labels.height(), png::ColorType::Grayscale, labels.ids())
}

pub fn read_label_png(path: impl AsRef<Path>) -> Result<LabelMap> {
    let (h, w, bytes) = read_raw(path.as_ref(), png::ColorType::Grayscale)?;
    LabelMap::new(h, w, bytes)
}

/// Renders labels with each class's base color.
pub fn colorize_labels(labels: &LabelMap, spec: &ShapesWorldSpec) -> Result<Tensor<f32>> {
    labels.check_classes(spec.num_classes)?;
    let (h, w) = (labels.height(), labels.width());
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        spec.appearance[labels.ids()[p] as usize].color[c]
    }))
}

/// Tiles equally sized `3×H×W` images row-major into one PNG, `cols` per row.
pub fn write_grid_png(path: impl AsRef<Path>, tiles: &[Tensor<f32>], cols: usize) -> Result<()> {
    let first = tiles
        .first()
        .ok_or_else(|| Error::Invalid("image grid needs at least one tile".into()))?;
    let (h, w) = image_dims(first)?;
    let cols = cols.clamp(1, tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut grid = Tensor::full(&[3, gh, gw], -1.0f32);
    for (i, t) in tiles.iter().enumerate() {
        if image_dims(t)? != (h, w) {
            return Err(Error::Shape {
                op: "write_grid_png",
                detail: "tiles differ in size".into(),
            });
        }
        let (oy, ox) = ((i / cols) * h, (i % cols) * w);
        for c in 0..3 {
            for y in 0..h {
                let src = &t.data()[(c * h + y) * w..(c * h + y + 1) * w];
                let dst = (c * gh + oy + y) * gw + ox;
                grid.data_mut()[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    write_image_png(path, &grid)
}

/// Parses flat `key = value` text; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn format_key_values<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn get_parsed<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = map.get(key).ok_or_else(|| Error::Config(format!("missing key `{key}`")))?;
    raw.parse()
        .map_err(|_| Error::Config(format!("cannot parse `{key} = {raw}`")))
}

fn parse_floats<const N: usize>(map: &BTreeMap<String, String>, key: &str) -> Result<[f32; N]> {
    let raw = map.get(key).ok_or_else(|| Error::Config(format!("missing key `{key}`")))?;
    let vals: Vec<f32> = raw
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("cannot parse `{key} = {raw}`")))?;
    vals.try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs {N} numbers")))
}

/// A generated world on disk; the last `test_count` pairs form the test split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: ShapesWorldSpec,
    pub masks: Vec<LabelMap>,
    pub images: Vec<Tensor<f32>>,
    pub test_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn train_count(&self) -> usize {
        self.len() - self.test_count
    }

    pub fn train_masks(&self) -> &[LabelMap] {
        &self.masks[..self.train_count()]
    }

    pub fn train_images(&self) -> &[Tensor<f32>] {
        &self.images[..self.train_count()]
    }

    pub fn test_masks(&self) -> &[LabelMap] {
        &self.masks[self.train_count()..]
    }

    pub fn test_images(&self) -> &[Tensor<f32>] {
        &self.images[self.train_count()..]
    }
}

pub const WORLD_FILE: &str = "world.cfg";

fn sample_path(dir: &Path, sub: &str, i: usize) -> PathBuf {
    dir.join(sub).join(format!("{i:05}.png"))
}

pub fn world_config_text(spec: &ShapesWorldSpec, count: usize, test_count: usize) -> String {
    let mut pairs: Vec<(String, String)> = vec![
        ("classes".into(), spec.num_classes.to_string()),
        ("height".into(), spec.height.to_string()),
        ("width".into(), spec.width.to_string()),
        ("seed".into(), spec.seed.to_string()),
        ("count".into(), count.to_string()),
        ("test_count".into(), test_count.to_string()),
        ("shapes_min".into(), spec.shapes_per_class.0.to_string()),
        ("shapes_max".into(), spec.shapes_per_class.1.to_string()),
    ];
    for (k, a) in spec.appearance.iter().enumerate() {
        let c = a.color;
        pairs.push((format!("class.{k}.color"), format!("{} {} {}", c[0], c[1], c[2])));
        pairs.push((format!("class.{k}.frequency"), format!("{} {}", a.frequency[0], a.frequency[1])));
        pairs.push((format!("class.{k}.amplitude"), a.amplitude.to_string()));
        pairs.push((format!("class.{k}.area"), spec.area_fractions[k].to_string()));
    }
    format_key_values(pairs.iter().map(|(k, v)| (k.as_str(), v.clone())))
}

/// Reads `world.cfg`: the spec plus `(count, test_count)`.
pub fn read_world_config(dir: impl AsRef<Path>) -> Result<(ShapesWorldSpec, usize, usize)> {
    let path = dir.as_ref().join(WORLD_FILE);
    let map = parse_key_values(&fs::read_to_string(&path)?)?;
    let num_classes: usize = get_parsed(&map, "classes")?;
    let mut appearance = Vec::new();
    let mut area_fractions = Vec::new();
    for k in 0..num_classes {
        let [fx, fy] = parse_floats::<2>(&map, &format!("class.{k}.frequency"))?;
        appearance.push(ClassAppearance {
            color: parse_floats::<3>(&map, &format!("class.{k}.color"))?,
            frequency: [fx, fy],
            amplitude: get_parsed(&map, &format!("class.{k}.amplitude"))?,
        });
        area_fractions.push(get_parsed(&map, &format!("class.{k}.area"))?);
    }
    let spec = ShapesWorldSpec {
        num_classes,
        height: get_parsed(&map, "height")?,
        width: get_parsed(&map, "width")?,
        appearance,
        area_fractions,
        shapes_per_class: (get_parsed(&map, "shapes_min")?, get_parsed(&map, "shapes_max")?),
        seed: get_parsed(&map, "seed")?,
    };
    spec.validate()?;
    let count: usize = get_parsed(&map, "count")?;
    let test_count: usize = get_parsed(&map, "test_count")?;
    if test_count >= count {
        return Err(Error::Config(format!("test_count {test_count} must be below count {count}")));
    }
    Ok((spec, count, test_count))
}

/// Generates `count` pairs and writes `masks/`, `images/` and `world.cfg`.
pub fn write_dataset(dir: impl AsRef<Path>, spec: &ShapesWorldSpec, count: usize, test_count: usize) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 || test_count >= count {
        return Err(Error::Config(format!(
            "need count ≥ 1 and test_count < count, got {count} and {test_count}"
        )));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("masks"))?;
    fs::create_dir_all(dir.join("images"))?;
    let pairs = generate_range(spec, 0, count);
    pairs
        .par_iter()
        .enumerate()
        .try_for_each(|(i, (m, img))| -> Result<()> {
            write_label_png(sample_path(dir, "masks", i), m)?;
            write_image_png(sample_path(dir, "images", i), img)
        })?;
    fs::write(dir.join(WORLD_FILE), world_config_text(spec, count, test_count))?;
    let (masks, images) = pairs.into_iter().unzip();
    Ok(Dataset {
        spec: spec.clone(),
        masks,
        images,
        test_count,
    })
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let (spec, count, test_count) = read_world_config(dir)?;
    let loaded: Vec<(LabelMap, Tensor<f32>)> = (0..count)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let m = read_label_png(sample_path(dir, "masks", i))?;
            let img = read_image_png(sample_path(dir, "images", i))?;
            if (m.height(), m.width()) != (spec.height, spec.width) || img.shape() != [3, spec.height, spec.width] {
                return Err(Error::Shape {
                    op: "load_dataset",
                    detail: format!("sample {i} does not match the {}×{} world", spec.height, spec.width),
                });
            }
            m.check_classes(spec.num_classes)?;
            Ok((m, img))
        })
        .collect::<Result<_>>()?;
    let (masks, images) = loaded.into_iter().unzip();
    Ok(Dataset {
        spec,
        masks,
        images,
        test_count,
    })
}
