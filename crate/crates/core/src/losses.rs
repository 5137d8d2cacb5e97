//! Class-balanced self-supervised segmentation loss, the non-saturating
//! adversarial objective with R1 penalty, and their combination.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Inverse per-pixel class frequencies over a set of layouts:
/// `α_c = H·W / mean_count_c`, and `α_c = 0` for classes never seen.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub alpha: Vec<f64>,
    /// Mean number of class-`c` pixels per layout.
    pub pixel_counts: Vec<f64>,
    /// Pixels per layout (`H·W`).
    pub total_pixels: usize,
    /// Classes absent from every layout.
    pub absent: Vec<usize>,
}

impl ClassWeights {
    /// `grids` holds one class-id grid of `total_pixels` entries per layout.
    pub fn from_id_grids<'a>(
        grids: impl IntoIterator<Item = &'a [u8]>,
        num_classes: usize,
        total_pixels: usize,
    ) -> Result<Self> {
        let mut counts = vec![0u64; num_classes];
        let mut layouts = 0usize;
        for grid in grids {
            if grid.len() != total_pixels {
                return shape_err(
                    "class_weights",
                    format!("layout has {} pixels, expected {total_pixels}", grid.len()),
                );
            }
            for &id in grid {
                let id = id as usize;
                if id >= num_classes {
                    return Err(Error::Invalid(format!("class id {id} ≥ {num_classes}")));
                }
                counts[id] += 1;
            }
            layouts += 1;
        }
        if layouts == 0 {
            return Err(Error::Invalid("class weights need at least one layout".into()));
        }
        let pixel_counts: Vec<f64> = counts.iter().map(|&c| c as f64 / layouts as f64).collect();
        let mut absent = Vec::new();
        let alpha = pixel_counts
            .iter()
            .enumerate()
            .map(|(c, &count)| {
                if count > 0.0 {
                    total_pixels as f64 / count
                } else {
                    absent.push(c);
                    0.0
                }
            })
            .collect();
        if !absent.is_empty() {
            log::warn!("classes {absent:?} never occur; their segmentation weight is 0");
        }
        Ok(Self {
            alpha,
            pixel_counts,
            total_pixels,
            absent,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.alpha.len()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            alpha: self.alpha.iter().map(|a| a * factor).collect(),
            ..self.clone()
        }
    }
}

/// `−(1/N) Σ_n Σ_c α_c Σ_ij m_cij · log softmax(logits)_cij`.
///
/// `mask` must be the one-hot layout (`N×C×H×W`) that produced the images
/// being segmented.
pub fn seg_loss<T: Float>(tape: &mut Tape<T>, logits: Var, mask: Var, weights: &ClassWeights) -> Result<Var> {
    let (n, c, h, w) = tape.value(logits).dims4()?;
    if tape.shape(mask) != tape.shape(logits) {
        return shape_err(
            "seg_loss",
            format!("logits {:?} vs mask {:?}", tape.shape(logits), tape.shape(mask)),
        );
    }
    if weights.num_classes() != c {
        return shape_err("seg_loss", format!("{} class weights for {c} classes", weights.num_classes()));
    }
    let hw = h * w;
    let scale = -1.0 / n as f64;
    let m = tape.value(mask);
    let coeff = Tensor::from_fn(&[n, c, h, w], |i| {
        let ci = (i / hw) % c;
        m.data()[i] * T::lit(weights.alpha[ci] * scale)
    });
    let coeff = tape.constant(coeff);
    let lp = tape.log_softmax(logits)?;
    let weighted = tape.mul(lp, coeff)?;
    tape.sum(weighted)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdversarialForm {
    NonSaturating,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub adversarial_form: AdversarialForm,
    pub r1_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            adversarial_form: AdversarialForm::NonSaturating,
            r1_gamma: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !(self.r1_gamma >= 0.0) {
            return Err(Error::Config(format!(
                "need λ > 0 and r1_gamma ≥ 0, got λ = {}, γ = {}",
                self.lambda, self.r1_gamma
            )));
        }
        Ok(())
    }
}

fn check_logits<T: Float>(tape: &Tape<T>, v: Var, what: &str) -> Result<()> {
    if !tape.value(v).is_finite() {
        return Err(Error::Invalid(format!("non-finite {what} logits")));
    }
    Ok(())
}

/// `mean softplus(−D(real)) + mean softplus(D(fake))`.
pub fn discriminator_loss<T: Float>(tape: &mut Tape<T>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    check_logits(tape, real_logits, "real")?;
    check_logits(tape, fake_logits, "fake")?;
    let neg = tape.scale(real_logits, -T::one())?;
    let r = tape.softplus(neg)?;
    let r = tape.mean(r)?;
    let f = tape.softplus(fake_logits)?;
    let f = tape.mean(f)?;
    tape.add(r, f)
}

/// Non-saturating generator loss `mean softplus(−D(fake))`.
pub fn generator_adv_loss<T: Float>(tape: &mut Tape<T>, fake_logits: Var) -> Result<Var> {
    check_logits(tape, fake_logits, "fake")?;
    let neg = tape.scale(fake_logits, -T::one())?;
    let l = tape.softplus(neg)?;
    tape.mean(l)
}

/// Per-sample input gradients `∂D(x_n)/∂x_n` and the penalty
/// `(γ/2) · mean_n ‖∂D(x_n)/∂x_n‖²`.
///
/// `d` maps an `N×…` image batch to `N` logits with no cross-sample mixing.
pub fn r1_penalty<T: Float, F>(d: F, real: &Tensor<T>, gamma: f64) -> Result<(f64, Tensor<T>)>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(real.clone());
    let logits = d(&mut tape, x)?;
    check_logits(&tape, logits, "real")?;
    let total = tape.sum(logits)?;
    tape.backward(total)?;
    let grad = tape.take_grad(x).unwrap_or_else(|| Tensor::zeros(real.shape()));
    let n = real.shape()[0] as f64;
    let sq: f64 = grad.data().iter().map(|g| g.to_f64().unwrap().powi(2)).sum();
    Ok((0.5 * gamma * sq / n, grad))
}

/// Scalar values of the adversarial terms for one real/fake pair of batches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversarialLosses {
    /// Logistic discriminator loss, without the penalty.
    pub loss_d: f64,
    pub loss_g: f64,
    pub r1: f64,
}

impl AdversarialLosses {
    /// What the discriminator minimizes: `loss_d + r1`.
    pub fn d_objective(&self) -> f64 {
        self.loss_d + self.r1
    }
}

pub fn adversarial_losses<T: Float, F>(d: F, real: &Tensor<T>, fake: &Tensor<T>, gamma: f64) -> Result<AdversarialLosses>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if real.shape() != fake.shape() {
        return shape_err("adversarial_losses", format!("real {:?} vs fake {:?}", real.shape(), fake.shape()));
    }
    let mut tape = Tape::new();
    let r = tape.constant(real.clone());
    let f = tape.constant(fake.clone());
    let rl = d(&mut tape, r)?;
    let fl = d(&mut tape, f)?;
    let ld = discriminator_loss(&mut tape, rl, fl)?;
    let lg = generator_adv_loss(&mut tape, fl)?;
    let (r1, _) = r1_penalty(&d, real, gamma)?;
    let val = |v: Var| tape.value(v).data()[0].to_f64().unwrap();
    Ok(AdversarialLosses {
        loss_d: val(ld),
        loss_g: val(lg),
        r1,
    })
}

/// `seg + λ · adv`.
pub fn generator_objective<T: Float>(tape: &mut Tape<T>, seg: Var, adv: Var, lambda: f64) -> Result<Var> {
    let weighted = tape.scale(adv, T::lit(lambda))?;
    tape.add(seg, weighted)
}
