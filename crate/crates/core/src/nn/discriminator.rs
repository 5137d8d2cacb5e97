use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{lrelu, Bound, Conv2d, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Var};
use crate::wavelet::Arrangement;

/// Whole-image discriminator on the channelwise DWT of its input.
///
/// Each stage is a residual conv block whose downsampling mirrors the
/// generator's wavelet upsample: IWT, bilinear half-size, DWT.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub height: usize,
    pub width: usize,
    /// Wavelet-domain channels per stage; each a multiple of 4.
    pub channels: Vec<usize>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: vec![32, 64, 128, 256],
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("discriminator needs at least one stage".into()));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0 || c % 4 != 0) {
            return Err(Error::Config(format!("stage channel count {c} is not a positive multiple of 4")));
        }
        let div = 1usize << (self.channels.len() + 1);
        if self.height % div != 0 || self.width % div != 0 {
            return Err(Error::Config(format!(
                "input {}×{} must be divisible by {div} for {} stages",
                self.height,
                self.width,
                self.channels.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Stage {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Discriminator<T: Float = f32> {
    pub config: DiscriminatorConfig,
    pub params: ParamStore<T>,
    stem: Conv2d,
    stages: Vec<Stage>,
    head: Conv2d,
}

/// Halves the coefficient grid of channelwise wavelet features.
fn wavelet_downsample<T: Float>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let spatial = tape.iwt(x, Arrangement::Channelwise)?;
    let (_, _, h, w) = tape.value(spatial).dims4()?;
    let down = tape.bilinear_resize(spatial, h / 2, w / 2)?;
    tape.dwt(down, Arrangement::Channelwise)
}

impl<T: Float> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let stem = Conv2d::new(&mut params, "d.stem", 12, config.channels[0], 3, &mut rng);
        let mut stages = Vec::new();
        let mut cin = config.channels[0];
        for (i, &cout) in config.channels.iter().enumerate() {
            stages.push(Stage {
                conv1: Conv2d::new(&mut params, &format!("d.stage{i}.conv1"), cin, cout, 3, &mut rng),
                conv2: Conv2d::new(&mut params, &format!("d.stage{i}.conv2"), cout, cout, 3, &mut rng),
                skip: Conv2d::new(&mut params, &format!("d.stage{i}.skip"), cin, cout, 1, &mut rng),
            });
            cin = cout;
        }
        let head = Conv2d::new(&mut params, "d.head", cin, 1, 1, &mut rng);
        Ok(Self {
            config,
            params,
            stem,
            stages,
            head,
        })
    }

    /// `N×3×H×W` images to `N` realness logits. Samples never interact, so
    /// the logit of image `i` depends on image `i` alone.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let (n, c, h, w) = tape.value(x).dims4()?;
        if c != 3 || h != self.config.height || w != self.config.width {
            return Err(Error::Shape {
                op: "discriminator",
                detail: format!(
                    "expected N×3×{}×{}, got {:?}",
                    self.config.height,
                    self.config.width,
                    tape.shape(x)
                ),
            });
        }
        let coeffs = tape.dwt(x, Arrangement::Channelwise)?;
        let mut h = self.stem.forward(tape, bound, coeffs)?;
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        for stage in &self.stages {
            let r = lrelu(tape, h)?;
            let r = stage.conv1.forward(tape, bound, r)?;
            let r = lrelu(tape, r)?;
            let r = stage.conv2.forward(tape, bound, r)?;
            let r = wavelet_downsample(tape, r)?;
            let s = stage.skip.forward(tape, bound, h)?;
            let s = wavelet_downsample(tape, s)?;
            let sum = tape.add(r, s)?;
            h = tape.scale(sum, inv_sqrt2)?;
        }
        let h = lrelu(tape, h)?;
        let pooled = tape.spatial_mean(h)?;
        let logit = self.head.forward(tape, bound, pooled)?;
        tape.reshape(logit, &[n])
    }

    /// Gradient-free logits.
    pub fn logits(&self, images: &crate::tensor::Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(out).data().to_vec())
    }
}
