//! Central finite-difference oracle for tape gradients.
//!
//! The numeric side only ever runs forward passes on fresh tapes, so it is
//! independent of every backward rule it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Perturbation `h` of the central difference `(f(x+h) − f(x−h)) / 2h`.
    pub step: f64,
    /// Check at most this many coordinates per input (chosen at random).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl GradCheckOptions {
    pub fn new(step: f64) -> Self {
        Self {
            step,
            max_coords: None,
            seed: 0,
        }
    }

    pub fn sampled(step: f64, max_coords: usize, seed: u64) -> Self {
        Self {
            step,
            max_coords: Some(max_coords),
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`
    /// per input, over the checked coordinates.
    pub rel_errors: Vec<f64>,
    /// `‖analytic‖₂` over the checked coordinates, per input.
    pub analytic_norms: Vec<f64>,
    pub numeric_norms: Vec<f64>,
    pub checked_coords: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn eval<T: Float, F>(f: &F, inputs: &[Tensor<T>]) -> Result<f64>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.data()[0].to_f64().unwrap_or(f64::NAN))
}

/// Compares the tape's gradient of the scalar `f(inputs)` with central
/// finite differences, input by input.
pub fn check<T: Float, F>(f: F, inputs: &[Tensor<T>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    check_against(&f, &f, inputs, opts)
}

/// Like [`check`], but the finite differences run on `reference`, the same
/// function at precision `U`, evaluated on the inputs cast to `U`. Checking a
/// 32-bit gradient against 64-bit differences keeps round-off out of the
/// numeric side.
pub fn check_against<T: Float, U: Float, F, G>(
    f: F,
    reference: G,
    inputs: &[Tensor<T>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    G: Fn(&mut Tape<U>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut analytic_norms = Vec::with_capacity(inputs.len());
    let mut numeric_norms = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    let mut work: Vec<Tensor<U>> = inputs.iter().map(Tensor::cast).collect();
    for (i, (&v, input)) in vars.iter().zip(inputs).enumerate() {
        let analytic = tape
            .grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < input.numel() => sample(&mut rng, input.numel(), m).into_vec(),
            _ => (0..input.numel()).collect(),
        };
        let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        for &j in &coords {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + U::lit(opts.step);
            let plus = eval(&reference, &work)?;
            work[i].data_mut()[j] = orig - U::lit(opts.step);
            let minus = eval(&reference, &work)?;
            work[i].data_mut()[j] = orig;
            // Divide by the perturbation actually applied at this precision.
            let h = (orig + U::lit(opts.step)).to_f64().unwrap() - (orig - U::lit(opts.step)).to_f64().unwrap();
            let numeric = (plus - minus) / h;
            let a = analytic.data()[j].to_f64().unwrap();
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        checked += coords.len();
        analytic_norms.push(a2.sqrt());
        numeric_norms.push(n2.sqrt());
        let denom = a2.sqrt().max(n2.sqrt());
        rel_errors.push(if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom });
    }
    Ok(GradCheckReport {
        rel_errors,
        analytic_norms,
        numeric_norms,
        checked_coords: checked,
    })
}
