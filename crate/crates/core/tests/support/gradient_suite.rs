//! Tape gradients against central finite differences. The 64-bit path is
//! differenced at 64 bits; 32-bit gradients are checked against 64-bit
//! differences of the same function so round-off stays out of the oracle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wavegen::gradcheck::{check_against, GradCheckOptions, GradCheckReport};
use wavegen::nn::{pixel_spade, wavelet_upsample, Bound, GeneratorConfig, ParamStore, SemanticLayout, Spade, WaveletResBlock};
use wavegen::tensor::NormMode;
use wavegen::wavelet::{Arrangement, WaveletFeatures};
use wavegen::{Float, Result, Tape, Tensor, Var};

const PROBES: usize = 24;
const STEP: f64 = 1e-6;
const TOL_F32: f64 = 1e-3;
const TOL_F64: f64 = 1e-6;

/// Contracts `y` with a fixed pseudo-random weight so every output element
/// contributes to the scalar with a distinct coefficient.
fn scalarize<T: Float>(tape: &mut Tape<T>, y: Var) -> Result<Var> {
    if tape.value(y).numel() == 1 {
        return Ok(y);
    }
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = tape.constant(Tensor::<f64>::randn(&shape, 1.0, &mut rng).cast());
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn random_inputs(shapes: &[Vec<usize>], seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect()
}

/// Pushes values away from zero so kinks are never straddled by the stencil.
fn away_from_zero(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| if v >= 0.0 { v + 0.25 } else { v - 0.25 })
}

fn assert_report(name: &str, bits: u32, report: GradCheckReport, inputs: &[Tensor<f64>], tol: f64) {
    // Relative size below which an analytic gradient is round-off around zero.
    let zero_below = if bits == 64 { 1e-9 } else { 1e-5 };
    let smallest = inputs.iter().map(Tensor::numel).min().unwrap_or(0);
    assert!(report.checked_coords >= inputs.len() * PROBES.min(smallest));
    let largest = report.analytic_norms.iter().copied().fold(0.0, f64::max);
    for (i, &rel) in report.rel_errors.iter().enumerate() {
        // An identically zero gradient (e.g. a bias cancelled by a following
        // normalization) has no meaningful relative error; the differences
        // must then be negligible against the largest gradient instead.
        let err = if report.analytic_norms[i] < zero_below * largest {
            report.numeric_norms[i] / largest
        } else {
            rel
        };
        assert!(
            err < tol,
            "{name} ({bits}-bit) input {i}: error {err:e} exceeds {tol} (all: {:?}, gradient norms {:?})",
            report.rel_errors,
            report.analytic_norms
        );
    }
}

/// Runs both precision checks of `f32_fn` / `f64_fn` (the same function).
fn run_both<F, G>(name: &str, f32_fn: F, f64_fn: G, inputs: &[Tensor<f64>])
where
    F: Fn(&mut Tape<f32>, &[Var]) -> Result<Var>,
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let opts = GradCheckOptions::sampled(STEP, PROBES, 5);
    let f64_wrapped = |t: &mut Tape<f64>, v: &[Var]| {
        let y = f64_fn(t, v)?;
        scalarize(t, y)
    };
    let r = check_against(&f64_wrapped, &f64_wrapped, inputs, opts).unwrap_or_else(|e| panic!("{name}: {e}"));
    assert_report(name, 64, r, inputs, TOL_F64);

    let inputs32: Vec<Tensor<f32>> = inputs.iter().map(Tensor::cast).collect();
    // Round the reference inputs too, so both sides see identical values.
    let rounded: Vec<Tensor<f64>> = inputs32.iter().map(Tensor::cast).collect();
    let f32_wrapped = |t: &mut Tape<f32>, v: &[Var]| {
        let y = f32_fn(t, v)?;
        scalarize(t, y)
    };
    let r = check_against(f32_wrapped, &f64_wrapped, &inputs32, opts).unwrap_or_else(|e| panic!("{name}: {e}"));
    assert_report(name, 32, r, &rounded, TOL_F32);
}

/// One gradient test over inputs of the given shapes, at both precisions.
macro_rules! grad_case {
    ($name:ident, [$($shape:expr),* $(,)?], $prep:expr, |$tape:ident, $v:ident| $body:expr) => {
        pub fn $name() {
            fn body<T: Float>($tape: &mut Tape<T>, $v: &[Var]) -> Result<Var> {
                $body
            }
            let shapes: Vec<Vec<usize>> = vec![$($shape.to_vec()),*];
            let prep: fn(Tensor<f64>) -> Tensor<f64> = $prep;
            let inputs: Vec<Tensor<f64>> = random_inputs(&shapes, 1).into_iter().map(prep).collect();
            run_both(stringify!($name), body::<f32>, body::<f64>, &inputs);
        }
    };
}

fn id(t: Tensor<f64>) -> Tensor<f64> {
    t
}

grad_case!(add, [[2, 3, 4, 4], [2, 3, 4, 4]], id, |t, v| t.add(v[0], v[1]));
grad_case!(sub, [[2, 3, 4, 4], [2, 3, 4, 4]], id, |t, v| t.sub(v[0], v[1]));
grad_case!(mul, [[2, 3, 4, 4], [2, 3, 4, 4]], id, |t, v| t.mul(v[0], v[1]));
grad_case!(scale, [[2, 3, 4, 4]], id, |t, v| t.scale(v[0], T::lit(-1.7)));
grad_case!(add_scalar, [[2, 3, 4, 4]], id, |t, v| {
    let y = t.add_scalar(v[0], T::lit(0.3))?;
    t.mul(y, y)
});
grad_case!(leaky_relu, [[2, 3, 4, 4]], away_from_zero, |t, v| t.leaky_relu(v[0], T::lit(0.2)));
grad_case!(tanh, [[2, 3, 4, 4]], id, |t, v| t.tanh(v[0]));
grad_case!(softplus, [[2, 3, 4, 4]], id, |t, v| t.softplus(v[0]));
grad_case!(sum, [[2, 3, 4, 4]], id, |t, v| {
    let y = t.mul(v[0], v[0])?;
    t.sum(y)
});
grad_case!(mean, [[2, 3, 4, 4]], id, |t, v| {
    let y = t.mul(v[0], v[0])?;
    t.mean(y)
});
grad_case!(spatial_mean, [[2, 3, 4, 4]], id, |t, v| {
    let y = t.tanh(v[0])?;
    t.spatial_mean(y)
});
grad_case!(conv2d_same, [[2, 3, 6, 6], [4, 3, 3, 3], [4]], id, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1));
grad_case!(conv2d_strided, [[2, 3, 7, 6], [4, 3, 3, 3], [4]], id, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1));
grad_case!(conv2d_pointwise, [[2, 5, 3, 3], [2, 5, 1, 1]], id, |t, v| t.conv2d(v[0], v[1], None, 1, 0));
grad_case!(bilinear_up, [[2, 2, 3, 4]], id, |t, v| t.bilinear_resize(v[0], 6, 8));
grad_case!(bilinear_down, [[2, 2, 8, 6]], id, |t, v| t.bilinear_resize(v[0], 3, 5));
grad_case!(nearest_up, [[2, 2, 3, 4]], id, |t, v| t.nearest_resize(v[0], 6, 8));
grad_case!(nearest_down, [[2, 2, 8, 6]], id, |t, v| t.nearest_resize(v[0], 4, 3));
grad_case!(log_softmax, [[2, 4, 3, 3]], id, |t, v| t.log_softmax(v[0]));
grad_case!(normalize_batch, [[3, 2, 4, 4]], id, |t, v| t.normalize(v[0], NormMode::Batch, T::lit(1e-5)));
grad_case!(normalize_instance, [[3, 2, 4, 4]], id, |t, v| t.normalize(v[0], NormMode::Instance, T::lit(1e-5)));
grad_case!(concat_channels, [[2, 1, 4, 4], [2, 3, 4, 4]], id, |t, v| t.concat_channels(&[v[0], v[1]]));
grad_case!(concat_batch, [[1, 3, 4, 4], [2, 3, 4, 4]], id, |t, v| t.concat_batch(&[v[0], v[1]]));
grad_case!(slice_batch, [[4, 2, 3, 3]], id, |t, v| t.slice_batch(v[0], 1, 2));
grad_case!(reshape, [[2, 3, 4, 4]], id, |t, v| t.reshape(v[0], &[2, 12, 2, 2]));
grad_case!(dwt_channelwise, [[2, 3, 4, 6]], id, |t, v| t.dwt(v[0], Arrangement::Channelwise));
grad_case!(dwt_spatial, [[2, 3, 4, 6]], id, |t, v| t.dwt(v[0], Arrangement::Spatial));
grad_case!(iwt_channelwise, [[2, 12, 2, 3]], id, |t, v| t.iwt(v[0], Arrangement::Channelwise));
grad_case!(iwt_spatial, [[2, 3, 4, 6]], id, |t, v| t.iwt(v[0], Arrangement::Spatial));
grad_case!(arrange_to_spatial, [[2, 12, 2, 3]], id, |t, v| t.arrange(v[0], Arrangement::Channelwise, Arrangement::Spatial));
grad_case!(arrange_to_channelwise, [[2, 3, 4, 6]], id, |t, v| t.arrange(v[0], Arrangement::Spatial, Arrangement::Channelwise));

fn layout(batch: usize, classes: usize, h: usize, w: usize) -> SemanticLayout {
    let ids: Vec<Vec<u8>> = (0..batch)
        .map(|n| (0..h * w).map(|i| ((i / w + i % w + n) % classes) as u8).collect())
        .collect();
    let refs: Vec<&[u8]> = ids.iter().map(Vec::as_slice).collect();
    SemanticLayout::from_ids(&refs, classes, h, w).unwrap()
}

/// Gradient check over a block's input and all of its parameters; `f`
/// receives the bound parameters, the input and the mask.
macro_rules! block_check {
    ($name:expr, $store:expr, $x:expr, $mask:expr, |$tape:ident, $bound:ident, $xv:ident, $m:ident| $body:expr) => {{
        let mut inputs = vec![$x];
        inputs.extend($store.tensors().iter().cloned());
        let mask: Tensor<f32> = $mask;
        fn go<T: Float>(
            $tape: &mut Tape<T>,
            v: &[Var],
            mask: &Tensor<f32>,
            body: &dyn Fn(&mut Tape<T>, &Bound, Var, Var) -> Result<Var>,
        ) -> Result<Var> {
            let bound = Bound::from_vars(v[1..].to_vec());
            let m = $tape.constant(mask.cast());
            body($tape, &bound, v[0], m)
        }
        run_both(
            $name,
            |t: &mut Tape<f32>, v: &[Var]| go(t, v, &mask, &|$tape, $bound, $xv, $m| $body),
            |t: &mut Tape<f64>, v: &[Var]| go(t, v, &mask, &|$tape, $bound, $xv, $m| $body),
            &inputs,
        );
    }};
}

pub fn pixel_spade_block() {
    for arr in [Arrangement::Channelwise, Arrangement::Spatial] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let spade = Spade::new(&mut store, "s", 3, 2, 4, NormMode::Batch, &mut rng);
        let shape = match arr {
            Arrangement::Channelwise => [2, 8, 3, 3],
            Arrangement::Spatial => [2, 2, 6, 6],
        };
        let x = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
        block_check!("pixel_spade", store, x, layout(2, 3, 6, 6).mask().clone(), |tape, bound, x, m| {
            let wf = WaveletFeatures::wrap(tape, x, arr)?;
            Ok(pixel_spade(tape, bound, &spade, wf, m)?.var)
        });
    }
}

pub fn wavelet_upsample_block() {
    for arr in [Arrangement::Channelwise, Arrangement::Spatial] {
        fn go<T: Float>(tape: &mut Tape<T>, v: &[Var], arr: Arrangement) -> Result<Var> {
            let wf = WaveletFeatures::wrap(tape, v[0], arr)?;
            Ok(wavelet_upsample(tape, wf)?.var)
        }
        let shape = match arr {
            Arrangement::Channelwise => [2, 8, 3, 2],
            Arrangement::Spatial => [2, 2, 6, 4],
        };
        let inputs = random_inputs(&[shape.to_vec()], 4);
        run_both("wavelet_upsample", |t, v| go(t, v, arr), |t, v| go(t, v, arr), &inputs);
    }
}

pub fn spade_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let spade = Spade::new(&mut store, "s", 3, 2, 4, NormMode::Instance, &mut rng);
    let x = Tensor::<f64>::randn(&[2, 2, 4, 4], 1.0, &mut rng);
    block_check!("spade", store, x, layout(2, 3, 8, 8).mask().clone(), |tape, bound, x, m| spade
        .forward(tape, bound, x, m));
}

pub fn wavelet_res_block() {
    for (wu, ps) in [(true, true), (false, false)] {
        let cfg = GeneratorConfig {
            num_classes: 3,
            z_dim: 0,
            height: 8,
            width: 8,
            channels: vec![8, 4],
            spade_hidden: 3,
            use_wavelet_upsample: wu,
            use_pixel_spade: ps,
            arrangement: Arrangement::Channelwise,
            final_iwt: true,
            norm: NormMode::Batch,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let block = WaveletResBlock::new(&mut store, "b", &cfg, 8, 4, &mut rng);
        let x = Tensor::<f64>::randn(&[2, 8, 2, 2], 1.0, &mut rng);
        block_check!("res_block", store, x, layout(2, 3, 8, 8).mask().clone(), |tape, bound, x, m| block
            .forward_var(tape, bound, x, m));
    }
}

/// Every case by name, for runners that report each one.
pub const CASES: &[(&str, fn())] = &[
    ("add", add),
    ("sub", sub),
    ("mul", mul),
    ("scale", scale),
    ("add_scalar", add_scalar),
    ("leaky_relu", leaky_relu),
    ("tanh", tanh),
    ("softplus", softplus),
    ("sum", sum),
    ("mean", mean),
    ("spatial_mean", spatial_mean),
    ("conv2d_same", conv2d_same),
    ("conv2d_strided", conv2d_strided),
    ("conv2d_pointwise", conv2d_pointwise),
    ("bilinear_up", bilinear_up),
    ("bilinear_down", bilinear_down),
    ("nearest_up", nearest_up),
    ("nearest_down", nearest_down),
    ("log_softmax", log_softmax),
    ("normalize_batch", normalize_batch),
    ("normalize_instance", normalize_instance),
    ("concat_channels", concat_channels),
    ("concat_batch", concat_batch),
    ("slice_batch", slice_batch),
    ("reshape", reshape),
    ("dwt_channelwise", dwt_channelwise),
    ("dwt_spatial", dwt_spatial),
    ("iwt_channelwise", iwt_channelwise),
    ("iwt_spatial", iwt_spatial),
    ("arrange_to_spatial", arrange_to_spatial),
    ("arrange_to_channelwise", arrange_to_channelwise),
    ("pixel_spade_block", pixel_spade_block),
    ("wavelet_upsample_block", wavelet_upsample_block),
    ("spade_layer", spade_layer),
    ("wavelet_res_block", wavelet_res_block),
];
