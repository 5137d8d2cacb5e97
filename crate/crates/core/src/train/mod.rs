//! The unsupervised training loop: adversarial G↔D training plus cooperative
//! G↔S training, checkpointing and deterministic resumption.

mod checkpoint;
mod config;

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::{colorize_labels, one_hot_batch, write_grid_png, Dataset, LabelMap, UnpairedSampler};
use crate::error::{Error, Result};
use crate::losses::{discriminator_loss, generator_adv_loss, generator_objective, seg_loss, ClassWeights};
use crate::nn::{broadcast_latent, sample_latent, Discriminator, Generator, ParamStore, SemanticLayout, UNet};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::TrainConfig;

const NOISE_STREAM: u64 = 0x4e4f_4953;
const SAMPLER_STREAM: u64 = 0x5341_4d50;
const GRID_STREAM: u64 = 0x4752_4944;

pub const METRICS_HEADER: &str = "step,loss_seg,loss_G_adv,loss_D,r1";

/// Networks, their optimizers, and the position in the run.
///
/// All randomness after construction is derived from `(seed, step)`, so
/// `step` and `seed` are the whole RNG state.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub segmenter: UNet,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub opt_s: Adam,
    pub step: u64,
    pub seed: u64,
}

fn adam_for(store: &ParamStore, lr: f64, betas: (f64, f64)) -> Adam {
    Adam::new(
        AdamConfig {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
        },
        store.tensors().iter().map(|t| t.shape()),
    )
}

impl ModelBundle {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let generator = Generator::new(cfg.generator.clone(), derive_seed(cfg.seed, &[1]))?;
        let discriminator = Discriminator::new(cfg.discriminator.clone(), derive_seed(cfg.seed, &[2]))?;
        let segmenter = UNet::new(cfg.segmenter.clone(), derive_seed(cfg.seed, &[3]))?;
        Ok(Self {
            opt_g: adam_for(&generator.params, cfg.lr_g, cfg.betas_gd),
            opt_d: adam_for(&discriminator.params, cfg.lr_d, cfg.betas_gd),
            opt_s: adam_for(&segmenter.params, cfg.lr_s, cfg.betas_s),
            generator,
            discriminator,
            segmenter,
            step: 0,
            seed: cfg.seed,
        })
    }

    /// `(prefix, params, optimizer)` per network, in checkpoint order.
    pub(crate) fn parts(&self) -> [(&'static str, &ParamStore, &Adam); 3] {
        [
            ("g", &self.generator.params, &self.opt_g),
            ("d", &self.discriminator.params, &self.opt_d),
            ("s", &self.segmenter.params, &self.opt_s),
        ]
    }

    pub(crate) fn parts_mut(&mut self) -> [(&'static str, &mut ParamStore, &mut Adam); 3] {
        [
            ("g", &mut self.generator.params, &mut self.opt_g),
            ("d", &mut self.discriminator.params, &mut self.opt_d),
            ("s", &mut self.segmenter.params, &mut self.opt_s),
        ]
    }

    /// Per-sample latents used at `step`.
    pub fn latents(&self, step: u64, batch: usize) -> Vec<f32> {
        sample_latent(batch, self.generator.config.z_dim, &mut rng_for(self.seed, &[NOISE_STREAM, step]))
    }

    /// Generated images for `layout` in chunks of at most `chunk` layouts.
    pub fn generate(&self, layout: &SemanticLayout, latent: &[f32], chunk: usize) -> Result<Tensor> {
        let (n, z) = (layout.batch(), self.generator.config.z_dim);
        let chunk = chunk.max(1);
        let mut parts = Vec::new();
        for start in (0..n).step_by(chunk) {
            let len = chunk.min(n - start);
            let sub = SemanticLayout::new(layout.mask().slice_batch(start, len)?)?;
            parts.push(self.generator.generate(&sub, &latent[start * z..(start + len) * z])?);
        }
        Tensor::concat_batch(&parts.iter().collect::<Vec<_>>())
    }
}

/// Loss scalars of one step. `step` counts completed steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss_seg: f32,
    pub loss_g_adv: f32,
    /// Logistic discriminator loss without the penalty.
    pub loss_d: f32,
    pub r1: f32,
    /// Fraction of real images with positive logit.
    pub d_real_acc: f32,
    /// Fraction of generated images with negative logit.
    pub d_fake_acc: f32,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.loss_seg, self.loss_g_adv, self.loss_d, self.r1
        )
    }
}

fn scalar(tape: &Tape<f32>, v: Var) -> f32 {
    tape.value(v).data()[0]
}

fn grads_or_zero(store: &ParamStore, tape: &mut Tape<f32>, bound: &crate::nn::Bound) -> Vec<Option<Tensor>> {
    store
        .grads(tape, bound)
        .into_iter()
        .zip(store.tensors())
        .map(|(g, p)| Some(g.unwrap_or_else(|| Tensor::zeros(p.shape()))))
        .collect()
}

struct DiscriminatorStep {
    loss_d: f32,
    r1: f32,
    real_acc: f32,
    fake_acc: f32,
}

/// Updates D on real images (with R1) and detached generated images.
///
/// The R1 parameter gradient `γ/N Σ_n H_θx(x_n) g_n` is evaluated as a
/// central difference of D along the fixed input gradient `g_n`, which
/// keeps the tape first-order.
fn discriminator_step(bundle: &mut ModelBundle, real: &Tensor, fake: &Tensor, cfg: &TrainConfig) -> Result<DiscriminatorStep> {
    let n = real.shape()[0];
    let d = &bundle.discriminator;
    let gamma = cfg.loss.r1_gamma;

    // input gradient at the real samples
    let mut gt = Tape::new();
    let bound = d.params.bind(&mut gt, false);
    let x = gt.param(real.clone());
    gt.mark_real(x);
    let logits = d.forward(&mut gt, &bound, x)?;
    let total = gt.sum(logits)?;
    gt.backward(total)?;
    let g = gt.take_grad(x).unwrap_or_else(|| Tensor::zeros(real.shape()));
    drop(gt);
    let per = g.numel() / n;
    let norms: Vec<f64> = (0..n)
        .map(|i| g.data()[i * per..(i + 1) * per].iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt())
        .collect();
    let r1 = (0.5 * gamma * norms.iter().map(|v| v * v).sum::<f64>() / n as f64) as f32;

    let eps = cfg.r1_epsilon;
    let probe = |sign: f64| {
        Tensor::from_fn(real.shape(), |i| {
            let s = i / per;
            let u = if norms[s] > 0.0 { g.data()[i] as f64 / norms[s] } else { 0.0 };
            real.data()[i] + (sign * eps * u) as f32
        })
    };
    let use_r1 = gamma > 0.0;
    let mut parts = vec![real, fake];
    let (plus, minus) = (probe(1.0), probe(-1.0));
    if use_r1 {
        parts.push(&plus);
        parts.push(&minus);
    }
    let batch = Tensor::concat_batch(&parts)?;

    let mut tape = Tape::new();
    let bound = d.params.bind(&mut tape, !cfg.freeze_d);
    let x = tape.constant(batch);
    tape.mark_real(x);
    let logits = d.forward(&mut tape, &bound, x)?;
    let lr = tape.slice_batch(logits, 0, n)?;
    let lf = tape.slice_batch(logits, n, n)?;
    let loss = discriminator_loss(&mut tape, lr, lf)?;
    let loss_d = scalar(&tape, loss);
    let real_acc = tape.value(lr).data().iter().filter(|&&v| v > 0.0).count() as f32 / n as f32;
    let fake_acc = tape.value(lf).data().iter().filter(|&&v| v < 0.0).count() as f32 / n as f32;
    if !cfg.freeze_d {
        let objective = if use_r1 {
            let lp = tape.slice_batch(logits, 2 * n, n)?;
            let lm = tape.slice_batch(logits, 3 * n, n)?;
            let diff = tape.sub(lp, lm)?;
            let coeff = Tensor::from_fn(&[n], |i| (gamma * norms[i] / (2.0 * eps * n as f64)) as f32);
            let coeff = tape.constant(coeff);
            let weighted = tape.mul(diff, coeff)?;
            let surrogate = tape.sum(weighted)?;
            tape.add(loss, surrogate)?
        } else {
            loss
        };
        tape.backward(objective)?;
        let grads = grads_or_zero(&bundle.discriminator.params, &mut tape, &bound);
        bundle.opt_d.step(bundle.discriminator.params.tensors_mut(), &grads)?;
    }
    Ok(DiscriminatorStep {
        loss_d,
        r1,
        real_acc,
        fake_acc,
    })
}

fn param_summary(bundle: &ModelBundle) -> String {
    bundle
        .parts()
        .iter()
        .map(|(name, store, _)| {
            let max = store
                .tensors()
                .iter()
                .flat_map(|t| t.data())
                .fold(0f32, |m, v| if v.is_finite() { m.max(v.abs()) } else { f32::NAN });
            format!("{name}: max |w| = {max}")
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// One D update followed by one joint G+S update.
///
/// `masks` is fed to G and is also the segmentation target; `images` only
/// ever reaches D. On a non-finite loss the bundle may be partially updated
/// and the error carries a diagnostic summary.
pub fn train_step(
    bundle: &mut ModelBundle,
    masks: &SemanticLayout,
    images: &Tensor,
    weights: &ClassWeights,
    cfg: &TrainConfig,
) -> Result<MetricsRecord> {
    let step = bundle.step;
    let result = train_step_inner(bundle, masks, images, weights, cfg);
    match result {
        Err(Error::NonFinite { op }) => Err(Error::Diverged {
            step: step + 1,
            detail: format!("non-finite value in `{op}`; {}", param_summary(bundle)),
        }),
        Ok(rec) if ![rec.loss_seg, rec.loss_g_adv, rec.loss_d, rec.r1].iter().all(|v| v.is_finite()) => {
            Err(Error::Diverged {
                step: step + 1,
                detail: format!("losses {}; {}", rec.csv_row(), param_summary(bundle)),
            })
        }
        other => other,
    }
}

fn train_step_inner(
    bundle: &mut ModelBundle,
    masks: &SemanticLayout,
    images: &Tensor,
    weights: &ClassWeights,
    cfg: &TrainConfig,
) -> Result<MetricsRecord> {
    let n = masks.batch();
    let gcfg = &bundle.generator.config;
    if images.shape() != [n, 3, gcfg.height, gcfg.width] {
        return Err(Error::Shape {
            op: "train_step",
            detail: format!("{n} masks but image batch {:?}", images.shape()),
        });
    }
    let train_gs = !cfg.freeze_g;
    let latent = bundle.latents(bundle.step, n);

    let mut tape = Tape::new();
    let gb = bundle.generator.params.bind(&mut tape, train_gs);
    let sb = bundle.segmenter.params.bind(&mut tape, train_gs);
    let m = tape.constant(masks.mask().clone());
    let z = if gcfg.z_dim > 0 {
        Some(tape.constant(broadcast_latent(&latent, n, gcfg.height, gcfg.width)?))
    } else {
        None
    };
    let fake = bundle.generator.forward(&mut tape, &gb, m, z)?;
    let fake_value = tape.value(fake).clone();

    // G is untouched by the D update, so this fake batch is exactly what a
    // separate generator pass would produce.
    let d_out = discriminator_step(bundle, images, &fake_value, cfg)?;

    let db = bundle.discriminator.params.bind(&mut tape, false);
    let s_logits = bundle.segmenter.forward(&mut tape, &sb, fake)?;
    let seg = seg_loss(&mut tape, s_logits, m, weights)?;
    let d_fake = bundle.discriminator.forward(&mut tape, &db, fake)?;
    let adv = generator_adv_loss(&mut tape, d_fake)?;
    let total = generator_objective(&mut tape, seg, adv, cfg.loss.lambda)?;
    let (loss_seg, loss_g_adv) = (scalar(&tape, seg), scalar(&tape, adv));
    if train_gs {
        tape.backward(total)?;
        let g_grads = grads_or_zero(&bundle.generator.params, &mut tape, &gb);
        let s_grads = grads_or_zero(&bundle.segmenter.params, &mut tape, &sb);
        bundle.opt_g.step(bundle.generator.params.tensors_mut(), &g_grads)?;
        bundle.opt_s.step(bundle.segmenter.params.tensors_mut(), &s_grads)?;
    }
    bundle.step += 1;
    Ok(MetricsRecord {
        step: bundle.step,
        loss_seg,
        loss_g_adv,
        loss_d: d_out.loss_d,
        r1: d_out.r1,
        d_real_acc: d_out.real_acc,
        d_fake_acc: d_out.fake_acc,
    })
}

/// Stacks `3×H×W` images into one `N×3×H×W` batch.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Invalid("empty image batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "stack_images",
                detail: format!("{:?} vs {shape:?}", img.shape()),
            });
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(&full, data)
}

/// Class weights over the training masks of `data`.
pub fn dataset_class_weights(data: &Dataset) -> Result<ClassWeights> {
    ClassWeights::from_id_grids(data.train_masks().iter().map(LabelMap::ids), data.spec.num_classes, data.spec.pixels())
}

/// Output files written by [`fit`].
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.usis";
pub const DIVERGENCE_FILE: &str = "divergence.txt";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.usis")
}

/// Writes a grid whose rows are `mask | three generations` for up to four
/// masks, using a fixed latent stream so grids are comparable across steps.
pub fn write_sample_grid(path: &Path, bundle: &ModelBundle, masks: &[LabelMap], spec: &crate::data::ShapesWorldSpec) -> Result<()> {
    let rows: Vec<&LabelMap> = masks.iter().take(4).collect();
    let layout = one_hot_batch(&rows, spec.num_classes)?;
    let z = bundle.generator.config.z_dim;
    let draws: Vec<Tensor> = (0..3)
        .map(|j| {
            let latent = sample_latent(rows.len(), z, &mut rng_for(bundle.seed, &[GRID_STREAM, j]));
            bundle.generate(&layout, &latent, rows.len())
        })
        .collect::<Result<_>>()?;
    let mut tiles = Vec::new();
    for (i, m) in rows.iter().enumerate() {
        tiles.push(colorize_labels(m, spec)?);
        for d in &draws {
            tiles.push(d.slice_batch(i, 1)?.reshape(&[3, spec.height, spec.width])?);
        }
    }
    write_grid_png(path, &tiles, 4)
}

/// Runs training from `resume` (or a fresh bundle) up to `cfg.steps`.
///
/// With `out` set, writes `metrics.csv` (rows before the resume step are
/// kept), periodic and final checkpoints, and sample grids.
pub fn fit(
    cfg: &TrainConfig,
    data: &Dataset,
    out: Option<&Path>,
    resume: Option<ModelBundle>,
) -> Result<(ModelBundle, Vec<MetricsRecord>)> {
    cfg.validate()?;
    let g = &cfg.generator;
    if (g.num_classes, g.height, g.width) != (data.spec.num_classes, data.spec.height, data.spec.width) {
        return Err(Error::Config(format!(
            "model expects {} classes at {}×{}, dataset has {} at {}×{}",
            g.num_classes, g.height, g.width, data.spec.num_classes, data.spec.height, data.spec.width
        )));
    }
    let mut bundle = match resume {
        Some(b) => b,
        None => ModelBundle::new(cfg)?,
    };
    let weights = dataset_class_weights(data)?;
    let (masks, images) = (data.train_masks(), data.train_images());
    let mut sampler = UnpairedSampler::new(masks.len(), images.len(), cfg.batch, derive_seed(bundle.seed, &[SAMPLER_STREAM]))?;

    let mut csv = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(METRICS_FILE);
            let mut kept = vec![METRICS_HEADER.to_string()];
            if bundle.step > 0 {
                if let Ok(text) = fs::read_to_string(&path) {
                    kept.extend(text.lines().skip(1).filter(|l| {
                        l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= bundle.step)
                    }).map(str::to_string));
                }
            }
            let mut f = fs::File::create(&path)?;
            for line in kept {
                writeln!(f, "{line}")?;
            }
            Some(f)
        }
        None => None,
    };

    let mut history = Vec::new();
    while bundle.step < cfg.steps {
        let (mi, ii) = sampler.batch_at(bundle.step);
        let layout = one_hot_batch(&mi.iter().map(|&i| &masks[i]).collect::<Vec<_>>(), data.spec.num_classes)?;
        let batch = stack_images(&ii.iter().map(|&i| &images[i]).collect::<Vec<_>>())?;
        let rec = match train_step(&mut bundle, &layout, &batch, &weights, cfg) {
            Ok(r) => r,
            Err(e) => {
                if let (Some(dir), Error::Diverged { step, detail }) = (out, &e) {
                    let dump = format!(
                        "step = {step}\n{detail}\nmask indices = {mi:?}\nimage indices = {ii:?}\n"
                    );
                    fs::write(dir.join(DIVERGENCE_FILE), dump)?;
                }
                return Err(e);
            }
        };
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", rec.csv_row())?;
        }
        if rec.step % 50 == 0 || rec.step == cfg.steps {
            log::info!(
                "step {} seg {:.4} adv {:.4} d {:.4} r1 {:.4} acc {:.2}/{:.2}",
                rec.step,
                rec.loss_seg,
                rec.loss_g_adv,
                rec.loss_d,
                rec.r1,
                rec.d_real_acc,
                rec.d_fake_acc
            );
        }
        history.push(rec);
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && rec.step % cfg.checkpoint_every == 0 {
                save_checkpoint(dir.join(checkpoint_name(rec.step)), &bundle, cfg)?;
            }
            if cfg.sample_every > 0 && rec.step % cfg.sample_every == 0 {
                write_sample_grid(&dir.join(format!("samples_{:06}.png", rec.step)), &bundle, data.test_masks_or_train(), &data.spec)?;
            }
        }
    }
    if let Some(dir) = out {
        save_checkpoint(dir.join(FINAL_CHECKPOINT), &bundle, cfg)?;
    }
    Ok((bundle, history))
}

impl Dataset {
    /// Test masks, or training masks when the test split is empty.
    pub fn test_masks_or_train(&self) -> &[LabelMap] {
        if self.test_count > 0 {
            self.test_masks()
        } else {
            self.train_masks()
        }
    }
}
