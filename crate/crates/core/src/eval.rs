//! Desk-scale evaluation: oracle-segmenter mIoU against the input layouts and
//! a radially averaged power-spectrum distance to the real images.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::data::{generate_range, nearest_color_labels, one_hot_batch, LabelMap, ShapesWorldSpec};
use crate::error::{Error, Result};
use crate::losses::{seg_loss, ClassWeights};
use crate::nn::{UNet, UNetConfig};
use crate::seed::derive_seed;
use crate::tensor::{Adam, AdamConfig, Tape, Tensor};
use crate::train::{stack_images, ModelBundle};

/// `C×C` pixel counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::Shape {
                op: "miou",
                detail: format!(
                    "prediction {}×{} vs ground truth {}×{}",
                    pred.height(),
                    pred.width(),
                    gt.height(),
                    gt.width()
                ),
            });
        }
        pred.check_classes(self.num_classes)?;
        gt.check_classes(self.num_classes)?;
        for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
            self.counts[g as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    /// IoU of class `c`, `None` when it is absent from both maps.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let diag = self.get(c, c);
        let row: u64 = (0..self.num_classes).map(|j| self.get(c, j)).sum();
        let col: u64 = (0..self.num_classes).map(|i| self.get(i, c)).sum();
        let union = row + col - diag;
        (union > 0).then(|| diag as f64 / union as f64)
    }

    /// Mean IoU over classes present in ground truth or prediction.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = (0..self.num_classes).filter_map(|c| self.iou(c)).collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let diag: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        diag as f64 / self.total().max(1) as f64
    }
}

pub fn miou(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<(f64, ConfusionMatrix)> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, gt)?;
    Ok((cm.miou(), cm))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleMode {
    Color,
    UNet,
}

impl std::str::FromStr for OracleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "color" => Ok(Self::Color),
            "unet" => Ok(Self::UNet),
            other => Err(Error::Config(format!("unknown oracle `{other}` (expected color or unet)"))),
        }
    }
}

/// Segmenter standing in for a pretrained model.
#[derive(Clone, Debug)]
pub enum Oracle {
    Color(ShapesWorldSpec),
    UNet(ShapesWorldSpec, UNet),
}

/// Training schedule of the UNet oracle. It sees freshly rendered *paired*
/// samples, which is fine because it is used for evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleTrainConfig {
    pub unet: UNetConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl OracleTrainConfig {
    pub fn for_spec(spec: &ShapesWorldSpec) -> Self {
        Self {
            unet: UNetConfig {
                num_classes: spec.num_classes,
                depth: 3,
                base_channels: 8,
            },
            steps: 400,
            batch: 8,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Offset keeping oracle training renders disjoint from dataset indices.
const ORACLE_INDEX_BASE: u64 = 1 << 40;

pub fn train_unet_oracle(spec: &ShapesWorldSpec, cfg: &OracleTrainConfig) -> Result<UNet> {
    let net = UNet::new(cfg.unet.clone(), derive_seed(cfg.seed, &[0x4f52]))?;
    let mut net = net;
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        net.params.tensors().iter().map(|t| t.shape()),
    );
    let pool = generate_range(spec, ORACLE_INDEX_BASE + cfg.seed * 1_000_000, cfg.batch * 32);
    let weights = ClassWeights::from_id_grids(pool.iter().map(|(m, _)| m.ids()), spec.num_classes, spec.pixels())?;
    // plain per-pixel cross-entropy scale keeps the learning rate meaningful
    let weights = weights.scaled(1.0 / spec.pixels() as f64);
    for step in 0..cfg.steps {
        let start = (step * cfg.batch) % pool.len();
        let idx: Vec<usize> = (start..start + cfg.batch).map(|i| i % pool.len()).collect();
        let layout = one_hot_batch(&idx.iter().map(|&i| &pool[i].0).collect::<Vec<_>>(), spec.num_classes)?;
        let images = stack_images(&idx.iter().map(|&i| &pool[i].1).collect::<Vec<_>>())?;
        let mut tape = Tape::new();
        let bound = net.params.bind(&mut tape, true);
        let x = tape.constant(images);
        let m = tape.constant(layout.mask().clone());
        let logits = net.forward(&mut tape, &bound, x)?;
        let loss = seg_loss(&mut tape, logits, m, &weights)?;
        tape.backward(loss)?;
        let grads: Vec<_> = net.params.grads(&mut tape, &bound);
        opt.step(net.params.tensors_mut(), &grads)?;
    }
    Ok(net)
}

impl Oracle {
    pub fn new(mode: OracleMode, spec: &ShapesWorldSpec, seed: u64) -> Result<Self> {
        Ok(match mode {
            OracleMode::Color => Oracle::Color(spec.clone()),
            OracleMode::UNet => {
                let cfg = OracleTrainConfig {
                    seed,
                    ..OracleTrainConfig::for_spec(spec)
                };
                Oracle::UNet(spec.clone(), train_unet_oracle(spec, &cfg)?)
            }
        })
    }

    /// Label maps for an `N×3×H×W` batch.
    pub fn segment_batch(&self, images: &Tensor) -> Result<Vec<LabelMap>> {
        let (n, _, h, w) = images.dims4()?;
        match self {
            Oracle::Color(spec) => (0..n)
                .map(|i| nearest_color_labels(spec, &images.slice_batch(i, 1)?))
                .collect(),
            Oracle::UNet(_, net) => net
                .predict(images)?
                .into_iter()
                .map(|ids| LabelMap::new(h, w, ids))
                .collect(),
        }
    }
}

/// Segments one `3×H×W` image.
pub fn oracle_segment(image: &Tensor, oracle: &Oracle) -> Result<LabelMap> {
    let shape = image.shape().to_vec();
    let batch = match shape.as_slice() {
        [3, h, w] => image.clone().reshape(&[1, 3, *h, *w])?,
        _ => image.clone(),
    };
    Ok(oracle.segment_batch(&batch)?.remove(0))
}

fn fft2_power(plane: &[f64], h: usize, w: usize, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let row = planner.plan_fft_forward(w);
    for r in buf.chunks_exact_mut(w) {
        row.process(r);
    }
    let col = planner.plan_fft_forward(h);
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
    buf.iter().map(|c| c.norm_sqr()).collect()
}

/// Radius bin of every frequency of an `h×w` spectrum.
fn radial_bins(h: usize, w: usize) -> (Vec<usize>, usize) {
    let mut bins = Vec::with_capacity(h * w);
    let mut max = 0;
    for y in 0..h {
        let fy = if y <= h / 2 { y } else { h - y } as f64;
        for x in 0..w {
            let fx = if x <= w / 2 { x } else { w - x } as f64;
            let r = (fy * fy + fx * fx).sqrt().round() as usize;
            max = max.max(r);
            bins.push(r);
        }
    }
    (bins, max + 1)
}

/// Log10 of the power spectrum averaged over images, channels and each
/// radius bin. Images are `3×H×W` or `N×3×H×W` tensors.
pub fn radial_profile(images: &[Tensor]) -> Result<Vec<f64>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Invalid("spectrum of an empty image set".into()))?;
    let (h, w) = match first.shape() {
        [.., h, w] if first.shape().len() >= 3 => (*h, *w),
        s => return Err(Error::Shape { op: "spectrum", detail: format!("{s:?}") }),
    };
    let (bins, nbins) = radial_bins(h, w);
    let mut planes: Vec<Vec<f64>> = Vec::new();
    for img in images {
        let s = img.shape();
        if s.len() < 3 || s[s.len() - 2..] != [h, w] {
            return Err(Error::Shape {
                op: "spectrum",
                detail: format!("image {s:?} vs {h}×{w}"),
            });
        }
        planes.extend(img.data().chunks_exact(h * w).map(|p| p.iter().map(|&v| v as f64).collect()));
    }
    let sums = planes
        .par_iter()
        .map(|p| {
            let power = fft2_power(p, h, w, &mut FftPlanner::new());
            let mut acc = vec![0f64; nbins];
            for (v, &b) in power.iter().zip(&bins) {
                acc[b] += v;
            }
            acc
        })
        .reduce(|| vec![0f64; nbins], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect());
    let mut per_bin = vec![0usize; nbins];
    for &b in &bins {
        per_bin[b] += 1;
    }
    let denom = planes.len() as f64;
    Ok(sums
        .iter()
        .zip(&per_bin)
        .map(|(s, &c)| (s / (denom * c as f64) + 1e-12).log10())
        .collect())
}

/// Mean squared difference of the two sets' log radial power profiles.
pub fn spectrum_distance(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    let (pa, pb) = (radial_profile(a)?, radial_profile(b)?);
    if pa.len() != pb.len() {
        return Err(Error::Shape {
            op: "spectrum_distance",
            detail: "image sets differ in resolution".into(),
        });
    }
    Ok(pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / pa.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub miou: f64,
    pub spectrum_distance: f64,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        format!("metric,value\nmiou,{}\nspectrum_distance,{}\n", self.miou, self.spectrum_distance)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Generated images for `masks`, batched like training, latents keyed by `seed`.
pub fn generate_for_masks(bundle: &ModelBundle, masks: &[LabelMap], seed: u64, batch: usize) -> Result<Vec<Tensor>> {
    let c = bundle.generator.config.num_classes;
    let layout = one_hot_batch(&masks.iter().collect::<Vec<_>>(), c)?;
    let z = bundle.generator.config.z_dim;
    let latent = crate::nn::sample_latent(masks.len(), z, &mut crate::seed::rng_for(seed, &[0x4556_414c]));
    let out = bundle.generate(&layout, &latent, batch)?;
    let (_, _, h, w) = out.dims4()?;
    (0..masks.len())
        .map(|i| out.slice_batch(i, 1)?.reshape(&[3, h, w]))
        .collect()
}

/// Oracle mIoU of generations for `masks` and their spectrum distance to `real`.
pub fn evaluate(
    bundle: &ModelBundle,
    masks: &[LabelMap],
    real: &[Tensor],
    oracle: &Oracle,
    seed: u64,
    batch: usize,
) -> Result<(EvalReport, Vec<Tensor>)> {
    let generated = generate_for_masks(bundle, masks, seed, batch)?;
    let mut cm = ConfusionMatrix::new(bundle.generator.config.num_classes);
    for (img, gt) in generated.iter().zip(masks) {
        cm.add(&oracle_segment(img, oracle)?, gt)?;
    }
    let report = EvalReport {
        miou: cm.miou(),
        spectrum_distance: spectrum_distance(&generated, real)?,
        confusion: cm,
    };
    Ok((report, generated))
}
