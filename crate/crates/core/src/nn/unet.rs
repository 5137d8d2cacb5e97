use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{lrelu, Bound, Conv2d, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub num_classes: usize,
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            depth: 3,
            base_channels: 16,
        }
    }
}

#[derive(Clone, Debug)]
struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

impl DoubleConv {
    fn new<T: Float>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: Conv2d::new(store, &format!("{name}.a"), cin, cout, 3, rng),
            b: Conv2d::new(store, &format!("{name}.b"), cout, cout, 3, rng),
        }
    }

    fn forward<T: Float>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let x = self.a.forward(tape, bound, x)?;
        let x = lrelu(tape, x)?;
        let x = self.b.forward(tape, bound, x)?;
        lrelu(tape, x)
    }
}

/// Encoder-decoder segmenter with skip connections: `N×3×H×W` images to
/// `N×C×H×W` class logits.
#[derive(Clone, Debug)]
pub struct UNet<T: Float = f32> {
    pub config: UNetConfig,
    pub params: ParamStore<T>,
    encoder: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    decoder: Vec<DoubleConv>,
    head: Conv2d,
}

impl<T: Float> UNet<T> {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        if config.depth == 0 || config.base_channels == 0 || config.num_classes < 2 {
            return Err(Error::Config(format!("invalid segmenter config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let width = |level: usize| config.base_channels << level;
        let mut encoder = Vec::new();
        let mut cin = 3;
        for l in 0..config.depth {
            encoder.push(DoubleConv::new(&mut params, &format!("s.enc{l}"), cin, width(l), &mut rng));
            cin = width(l);
        }
        let bottleneck = DoubleConv::new(&mut params, "s.mid", cin, width(config.depth), &mut rng);
        let mut decoder = Vec::new();
        for l in (0..config.depth).rev() {
            decoder.push(DoubleConv::new(
                &mut params,
                &format!("s.dec{l}"),
                width(l + 1) + width(l),
                width(l),
                &mut rng,
            ));
        }
        let head = Conv2d::new(&mut params, "s.head", width(0), config.num_classes, 1, &mut rng);
        Ok(Self {
            config,
            params,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    /// Refuses any input derived from a tensor flagged with
    /// [`Tape::mark_real`]: the segmenter only ever sees generated images.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        if tape.is_tainted(x) {
            return Err(Error::Unpaired("segmenter input depends on a real image".into()));
        }
        let (_, c, h, w) = tape.value(x).dims4()?;
        let div = 1 << self.config.depth;
        if c != 3 || h % div != 0 || w % div != 0 {
            return Err(Error::Shape {
                op: "unet",
                detail: format!("expected N×3×H×W with H, W divisible by {div}, got {:?}", tape.shape(x)),
            });
        }
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h_ = x;
        for block in &self.encoder {
            h_ = block.forward(tape, bound, h_)?;
            skips.push(h_);
            let (_, _, hh, ww) = tape.value(h_).dims4()?;
            h_ = tape.bilinear_resize(h_, hh / 2, ww / 2)?;
        }
        h_ = self.bottleneck.forward(tape, bound, h_)?;
        for block in &self.decoder {
            let skip = skips.pop().expect("one skip per level");
            let (_, _, hh, ww) = tape.value(skip).dims4()?;
            let up = tape.nearest_resize(h_, hh, ww)?;
            let cat = tape.concat_channels(&[up, skip])?;
            h_ = block.forward(tape, bound, cat)?;
        }
        self.head.forward(tape, bound, h_)
    }

    /// Gradient-free logits.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(out).clone())
    }

    /// Per-pixel argmax class ids, one grid per image.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<Vec<u8>>> {
        Ok(super::layout::argmax_channels(&self.logits(images)?))
    }
}
