use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spade::{pixel_spade, wavelet_upsample, Spade};
use super::{lrelu, Bound, Conv2d, ParamStore, SemanticLayout};
use crate::error::{Error, Result};
use crate::tensor::{Float, NormMode, Tape, Tensor, Var};
use crate::wavelet::{Arrangement, WaveletFeatures};

/// Architecture of the wavelet-domain generator.
///
/// `channels[i]` is the wavelet-domain channel count produced by block `i`
/// (a multiple of 4: four subbands per spatial channel). Block 0 keeps
/// `channels[0]`. With the spatial arrangement or without the final IWT the
/// same data is stored as `channels[i] / 4` channels at twice the resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub z_dim: usize,
    pub height: usize,
    pub width: usize,
    pub channels: Vec<usize>,
    pub spade_hidden: usize,
    pub use_wavelet_upsample: bool,
    pub use_pixel_spade: bool,
    pub arrangement: Arrangement,
    /// Emit wavelet coefficients and invert them into RGB. When off the whole
    /// network runs in the pixel domain and WU/PS must be off too.
    pub final_iwt: bool,
    pub norm: NormMode,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            z_dim: 16,
            height: 64,
            width: 64,
            channels: vec![128, 128, 64, 32],
            spade_hidden: 32,
            use_wavelet_upsample: true,
            use_pixel_spade: true,
            arrangement: Arrangement::Channelwise,
            final_iwt: true,
            norm: NormMode::Batch,
        }
    }
}

impl GeneratorConfig {
    pub fn num_blocks(&self) -> usize {
        self.channels.len()
    }

    /// Subband arrangement of the hidden features, `None` in pixel mode.
    pub fn domain(&self) -> Option<Arrangement> {
        self.final_iwt.then_some(self.arrangement)
    }

    /// Spatial resolution the input layout is sampled down to.
    pub fn initial_size(&self) -> (usize, usize) {
        let nb = self.num_blocks();
        (self.height >> nb, self.width >> nb)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels.is_empty() {
            return bad("generator needs at least one block".into());
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0 || c % 4 != 0) {
            return bad(format!("block channel count {c} is not a positive multiple of 4"));
        }
        if self.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        let div = 1usize << (self.num_blocks() + 1);
        if self.height % div != 0 || self.width % div != 0 || self.height == 0 || self.width == 0 {
            return bad(format!(
                "output {}×{} must be divisible by {div} for {} blocks",
                self.height,
                self.width,
                self.num_blocks()
            ));
        }
        if !self.final_iwt && (self.use_wavelet_upsample || self.use_pixel_spade) {
            return bad("wavelet upsample and pixelSPADE need the final IWT".into());
        }
        if self.spade_hidden == 0 {
            return bad("spade_hidden must be positive".into());
        }
        Ok(())
    }

    fn stored_channels(&self, wavelet_channels: usize) -> usize {
        match self.domain() {
            Some(Arrangement::Channelwise) => wavelet_channels,
            _ => wavelet_channels / 4,
        }
    }

    fn output_channels(&self) -> usize {
        match self.domain() {
            Some(Arrangement::Channelwise) => 12,
            _ => 3,
        }
    }
}

/// Residual block that doubles resolution: wavelet upsampling on the identity
/// branch, nearest-neighbour upsampling on the residual branch.
#[derive(Clone, Debug)]
pub struct WaveletResBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    domain: Option<Arrangement>,
    use_wavelet_upsample: bool,
    use_pixel_spade: bool,
    pub norm1: Spade,
    pub conv1: Conv2d,
    pub norm2: Spade,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
}

impl WaveletResBlock {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &GeneratorConfig,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let (cin, cout) = (cfg.stored_channels(in_channels), cfg.stored_channels(out_channels));
        let domain = cfg.domain();
        let use_pixel_spade = cfg.use_pixel_spade && domain.is_some();
        // pixelSPADE styles the synthesized signal, which has a quarter of
        // the wavelet channels.
        let spade_ch = |wavelet: usize, stored: usize| if use_pixel_spade { wavelet / 4 } else { stored };
        let c = cfg.num_classes;
        let h = cfg.spade_hidden;
        Self {
            in_channels,
            out_channels,
            domain,
            use_wavelet_upsample: cfg.use_wavelet_upsample && domain.is_some(),
            use_pixel_spade,
            norm1: Spade::new(store, &format!("{name}.norm1"), c, spade_ch(in_channels, cin), h, cfg.norm, rng),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, rng),
            norm2: Spade::new(store, &format!("{name}.norm2"), c, spade_ch(out_channels, cout), h, cfg.norm, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, rng),
            shortcut: (in_channels != out_channels)
                .then(|| Conv2d::new(store, &format!("{name}.shortcut"), cin, cout, 1, rng)),
        }
    }

    fn modulate<T: Float>(&self, tape: &mut Tape<T>, bound: &Bound, spade: &Spade, x: Var, mask: Var) -> Result<Var> {
        match self.domain {
            Some(arr) if self.use_pixel_spade => {
                let wf = WaveletFeatures::wrap(tape, x, arr)?;
                Ok(pixel_spade(tape, bound, spade, wf, mask)?.var)
            }
            _ => spade.forward(tape, bound, x, mask),
        }
    }

    fn upsample_identity<T: Float>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self.domain {
            Some(arr) if self.use_wavelet_upsample => {
                let wf = WaveletFeatures::wrap(tape, x, arr)?;
                Ok(wavelet_upsample(tape, wf)?.var)
            }
            _ => {
                let (_, _, h, w) = tape.value(x).dims4()?;
                tape.nearest_resize(x, 2 * h, 2 * w)
            }
        }
    }

    /// Block on raw stored features (any domain).
    pub fn forward_var<T: Float>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, mask: Var) -> Result<Var> {
        let mut identity = self.upsample_identity(tape, x)?;
        if let Some(sc) = &self.shortcut {
            identity = sc.forward(tape, bound, identity)?;
        }

        let (_, _, h, w) = tape.value(x).dims4()?;
        let r = self.modulate(tape, bound, &self.norm1, x, mask)?;
        let r = lrelu(tape, r)?;
        let r = tape.nearest_resize(r, 2 * h, 2 * w)?;
        let r = self.conv1.forward(tape, bound, r)?;
        let r = self.modulate(tape, bound, &self.norm2, r, mask)?;
        let r = lrelu(tape, r)?;
        let r = self.conv2.forward(tape, bound, r)?;

        tape.add(identity, r)
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        features: WaveletFeatures,
        mask: Var,
    ) -> Result<WaveletFeatures> {
        let expected = self
            .domain
            .ok_or_else(|| Error::Config("block runs in the pixel domain".into()))?;
        if features.arrangement != expected {
            return Err(Error::Arrangement {
                expected,
                got: features.arrangement,
            });
        }
        let out = self.forward_var(tape, bound, features.var, mask)?;
        WaveletFeatures::wrap(tape, out, expected)
    }
}

/// Wavelet-domain SPADE generator: layout + 3-D noise in, RGB in `[−1, 1]` out.
#[derive(Clone, Debug)]
pub struct Generator<T: Float = f32> {
    pub config: GeneratorConfig,
    pub params: ParamStore<T>,
    head: Conv2d,
    pub blocks: Vec<WaveletResBlock>,
    tail: Conv2d,
}

impl<T: Float> Generator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let first = config.channels[0];
        let head = Conv2d::new(
            &mut params,
            "g.head",
            config.num_classes + config.z_dim,
            first / 4,
            3,
            &mut rng,
        );
        let mut blocks = Vec::with_capacity(config.num_blocks());
        let mut cin = first;
        for (i, &cout) in config.channels.iter().enumerate() {
            blocks.push(WaveletResBlock::new(&mut params, &format!("g.block{i}"), &config, cin, cout, &mut rng));
            cin = cout;
        }
        let tail = Conv2d::new(
            &mut params,
            "g.tail",
            config.stored_channels(cin),
            config.output_channels(),
            3,
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            head,
            blocks,
            tail,
        })
    }

    /// `mask`: `N×C×H×W` one-hot; `noise`: `N×Z×H×W` (ignored when `Z = 0`).
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, mask: Var, noise: Option<Var>) -> Result<Var> {
        let cfg = &self.config;
        let (n, c, h, w) = tape.value(mask).dims4()?;
        if (c, h, w) != (cfg.num_classes, cfg.height, cfg.width) {
            return Err(Error::Shape {
                op: "generator",
                detail: format!(
                    "layout {c}×{h}×{w} does not match generator {}×{}×{}",
                    cfg.num_classes, cfg.height, cfg.width
                ),
            });
        }
        let input = match noise {
            Some(z) if cfg.z_dim > 0 => {
                if tape.shape(z) != [n, cfg.z_dim, h, w] {
                    return Err(Error::Shape {
                        op: "generator",
                        detail: format!("noise {:?}, expected [{n}, {}, {h}, {w}]", tape.shape(z), cfg.z_dim),
                    });
                }
                tape.concat_channels(&[mask, z])?
            }
            _ if cfg.z_dim > 0 => return Err(Error::Invalid("generator expects a noise tensor".into())),
            _ => mask,
        };
        let (h0, w0) = cfg.initial_size();
        let x = tape.nearest_resize(input, h0, w0)?;
        let mut x = self.head.forward(tape, bound, x)?;
        if let Some(arr) = cfg.domain() {
            x = tape.dwt(x, arr)?;
        }
        for block in &self.blocks {
            x = block.forward_var(tape, bound, x, mask)?;
        }
        let x = lrelu(tape, x)?;
        let mut x = self.tail.forward(tape, bound, x)?;
        if let Some(arr) = cfg.domain() {
            x = tape.iwt(x, arr)?;
        }
        tape.tanh(x)
    }

    /// Gradient-free forward pass from a layout and per-sample latents.
    pub fn generate(&self, layout: &SemanticLayout, latent: &[f32]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let m = tape.constant(layout.mask().cast());
        let z = if self.config.z_dim > 0 {
            let noise = super::broadcast_latent(latent, layout.batch(), layout.height(), layout.width())?;
            Some(tape.constant(noise.cast()))
        } else {
            None
        };
        let out = self.forward(&mut tape, &bound, m, z)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(arrangement: Arrangement, wu: bool, ps: bool) -> GeneratorConfig {
        GeneratorConfig {
            num_classes: 3,
            z_dim: 2,
            height: 16,
            width: 16,
            channels: vec![8, 8, 4],
            spade_hidden: 4,
            use_wavelet_upsample: wu,
            use_pixel_spade: ps,
            arrangement,
            final_iwt: true,
            norm: NormMode::Batch,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small(Arrangement::Channelwise, true, true);
        assert!(c.validate().is_ok());
        c.height = 24;
        assert!(c.validate().is_err());
        let mut c = small(Arrangement::Channelwise, true, true);
        c.channels = vec![6];
        assert!(c.validate().is_err());
        let mut c = small(Arrangement::Channelwise, true, false);
        c.final_iwt = false;
        assert!(c.validate().is_err());
        c.use_wavelet_upsample = false;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn block_rejects_wrong_arrangement() {
        let cfg = small(Arrangement::Channelwise, true, true);
        let g = Generator::<f32>::new(cfg, 0).unwrap();
        let mut tape = Tape::new();
        let bound = g.params.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let wf = WaveletFeatures::wrap(&tape, x, Arrangement::Spatial).unwrap();
        let m = tape.constant(Tensor::zeros(&[1, 3, 16, 16]));
        assert!(matches!(
            g.blocks[0].forward(&mut tape, &bound, wf, m),
            Err(Error::Arrangement { .. })
        ));
    }

    #[test]
    fn all_variants_forward() {
        let ids: Vec<u8> = (0..256).map(|i| ((i / 16 + i % 16) / 6 % 3) as u8).collect();
        let layout = SemanticLayout::from_ids(&[&ids, &ids], 3, 16, 16).unwrap();
        let latent = [0.1, -0.3, 0.5, 0.2];
        let mut variants = vec![
            small(Arrangement::Channelwise, false, false),
            small(Arrangement::Channelwise, true, false),
            small(Arrangement::Channelwise, true, true),
            small(Arrangement::Spatial, true, false),
            small(Arrangement::Spatial, true, true),
        ];
        let mut pixel = small(Arrangement::Channelwise, false, false);
        pixel.final_iwt = false;
        variants.push(pixel);
        for cfg in variants {
            let g = Generator::<f32>::new(cfg.clone(), 3).unwrap();
            let out = g.generate(&layout, &latent).unwrap();
            assert_eq!(out.shape(), &[2, 3, 16, 16], "{cfg:?}");
            assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
