use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Bound, Conv2d, ParamStore, SemanticLayout};
use crate::error::{shape_err, Result};
use crate::tensor::{Float, NormMode, Tape, Tensor, Var};
use crate::wavelet::WaveletFeatures;

/// Spatially-adaptive denormalization:
/// `y = norm(x) ⊙ (1 + γ(m)) + β(m)`, where `γ` and `β` are conv heads on a
/// shared conv trunk over the mask resized to the feature resolution.
#[derive(Clone, Debug)]
pub struct Spade {
    pub trunk: Conv2d,
    pub gamma: Conv2d,
    pub beta: Conv2d,
    pub channels: usize,
    pub norm: NormMode,
    pub eps: f64,
}

impl Spade {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        num_classes: usize,
        channels: usize,
        hidden: usize,
        norm: NormMode,
        rng: &mut R,
    ) -> Self {
        Self {
            trunk: Conv2d::new(store, &format!("{name}.trunk"), num_classes, hidden, 3, rng),
            gamma: Conv2d::new(store, &format!("{name}.gamma"), hidden, channels, 3, rng),
            beta: Conv2d::new(store, &format!("{name}.beta"), hidden, channels, 3, rng),
            channels,
            norm,
            eps: 1e-5,
        }
    }

    /// Zeroes both modulation heads so the layer reduces to normalization.
    pub fn zero_heads<T: Float>(&self, store: &mut ParamStore<T>) {
        self.gamma.zero(store);
        self.beta.zero(store);
    }

    /// `mask` is the full-resolution one-hot layout; it is resized to `x`'s
    /// spatial extent with nearest-neighbour sampling.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, mask: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        if c != self.channels {
            return shape_err("spade", format!("layer built for {} channels, got {c}", self.channels));
        }
        let m = tape.nearest_resize(mask, h, w)?;
        let a = self.trunk.forward(tape, bound, m)?;
        let a = tape.leaky_relu(a, T::zero())?;
        let gamma = self.gamma.forward(tape, bound, a)?;
        let beta = self.beta.forward(tape, bound, a)?;
        let normed = tape.normalize(x, self.norm, T::lit(self.eps))?;
        let modulated = tape.mul(normed, gamma)?;
        let y = tape.add(normed, modulated)?;
        tape.add(y, beta)
    }
}

/// SPADE applied in the spatial domain of wavelet features:
/// `DWT(SPADE(IWT(w), m))`, in the features' own arrangement.
pub fn pixel_spade<T: Float>(
    tape: &mut Tape<T>,
    bound: &Bound,
    spade: &Spade,
    features: WaveletFeatures,
    mask: Var,
) -> Result<WaveletFeatures> {
    let spatial = features.synthesize(tape)?;
    let styled = spade.forward(tape, bound, spatial, mask)?;
    WaveletFeatures::analyze(tape, styled, features.arrangement)
}

/// Doubles the resolution of wavelet features: `DWT(bilinear×2(IWT(w)))`.
pub fn wavelet_upsample<T: Float>(tape: &mut Tape<T>, features: WaveletFeatures) -> Result<WaveletFeatures> {
    let spatial = features.synthesize(tape)?;
    let (h, w) = features.source_size(tape);
    let up = tape.bilinear_resize(spatial, 2 * h, 2 * w)?;
    WaveletFeatures::analyze(tape, up, features.arrangement)
}

/// `N×Z` standard-normal latents, one row per sample.
pub fn sample_latent<R: Rng + ?Sized>(batch: usize, z_dim: usize, rng: &mut R) -> Vec<f32> {
    (0..batch * z_dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Broadcasts `N×Z` latents to every pixel: `N×Z×H×W`.
pub fn broadcast_latent(latent: &[f32], batch: usize, height: usize, width: usize) -> Result<Tensor<f32>> {
    if batch == 0 || latent.len() % batch != 0 {
        return shape_err("broadcast_latent", format!("{} values for batch {batch}", latent.len()));
    }
    let z = latent.len() / batch;
    let hw = height * width;
    let mut data = Vec::with_capacity(batch * z * hw);
    for &v in latent {
        data.extend(std::iter::repeat_n(v, hw));
    }
    Tensor::new(&[batch, z, height, width], data)
}

/// Concatenates the one-hot layout with spatially constant Gaussian noise:
/// `N×(C+Z)×H×W`. Deterministic given `seed`.
pub fn make_3d_noise(layout: &SemanticLayout, z_dim: usize, seed: u64) -> Result<Tensor<f32>> {
    let (n, c, h, w) = layout.mask().dims4()?;
    if z_dim == 0 {
        return Ok(layout.mask().clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = sample_latent(n, z_dim, &mut rng);
    let noise = broadcast_latent(&latent, n, h, w)?;
    let hw = h * w;
    let mut data = Vec::with_capacity(n * (c + z_dim) * hw);
    for ni in 0..n {
        data.extend_from_slice(&layout.mask().data()[ni * c * hw..(ni + 1) * c * hw]);
        data.extend_from_slice(&noise.data()[ni * z_dim * hw..(ni + 1) * z_dim * hw]);
    }
    Tensor::new(&[n, c + z_dim, h, w], data)
}
