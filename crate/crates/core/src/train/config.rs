use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::nn::{DiscriminatorConfig, GeneratorConfig, UNetConfig};
use crate::tensor::NormMode;
use crate::wavelet::Arrangement;

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub segmenter: UNetConfig,
    pub loss: LossConfig,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_s: f64,
    /// Adam betas shared by G and D.
    pub betas_gd: (f64, f64),
    pub betas_s: (f64, f64),
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    /// Checkpoint period in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    /// Sample-grid period in steps; 0 disables grids.
    pub sample_every: u64,
    /// Probe distance of the finite-difference R1 parameter gradient.
    pub r1_epsilon: f64,
    pub freeze_g: bool,
    pub freeze_d: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_world(4, 64, 64)
    }
}

impl TrainConfig {
    /// Default architecture and optimizer settings for a `C`-class `H×W` world.
    pub fn for_world(num_classes: usize, height: usize, width: usize) -> Self {
        Self {
            generator: GeneratorConfig {
                num_classes,
                height,
                width,
                ..GeneratorConfig::default()
            },
            discriminator: DiscriminatorConfig {
                height,
                width,
                ..DiscriminatorConfig::default()
            },
            segmenter: UNetConfig {
                num_classes,
                ..UNetConfig::default()
            },
            loss: LossConfig::default(),
            lr_g: 1e-4,
            lr_d: 4e-4,
            lr_s: 1e-4,
            betas_gd: (0.0, 0.99),
            betas_s: (0.9, 0.999),
            batch: 8,
            steps: 1000,
            seed: 0,
            checkpoint_every: 0,
            sample_every: 0,
            r1_epsilon: 1e-2,
            freeze_g: false,
            freeze_d: false,
        }
    }

    /// Narrower networks sized for single-core CPU runs.
    pub fn desk(num_classes: usize, height: usize, width: usize) -> Self {
        let mut cfg = Self::for_world(num_classes, height, width);
        cfg.generator.channels = vec![64, 64, 32, 16];
        cfg.generator.spade_hidden = 16;
        cfg.discriminator.channels = vec![16, 32, 64, 64];
        cfg.segmenter.base_channels = 8;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.loss.validate()?;
        let g = &self.generator;
        if (self.discriminator.height, self.discriminator.width) != (g.height, g.width) {
            return Err(Error::Config("generator and discriminator resolutions differ".into()));
        }
        if self.segmenter.num_classes != g.num_classes {
            return Err(Error::Config("generator and segmenter class counts differ".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be ≥ 1".into()));
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_d", self.lr_d), ("lr_s", self.lr_s)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.r1_epsilon > 0.0) {
            return Err(Error::Config("r1_epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Flat `key = value` form; [`TrainConfig::apply`] reads it back.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let g = &self.generator;
        [
            ("classes", g.num_classes.to_string()),
            ("height", g.height.to_string()),
            ("width", g.width.to_string()),
            ("z_dim", g.z_dim.to_string()),
            ("g_channels", list(&g.channels)),
            ("spade_hidden", g.spade_hidden.to_string()),
            ("wu", g.use_wavelet_upsample.to_string()),
            ("ps", g.use_pixel_spade.to_string()),
            ("arrangement", g.arrangement.to_string()),
            ("final_iwt", g.final_iwt.to_string()),
            ("norm", norm_name(g.norm).to_string()),
            ("d_channels", list(&self.discriminator.channels)),
            ("s_depth", self.segmenter.depth.to_string()),
            ("s_base", self.segmenter.base_channels.to_string()),
            ("lambda", self.loss.lambda.to_string()),
            ("r1_gamma", self.loss.r1_gamma.to_string()),
            ("r1_epsilon", self.r1_epsilon.to_string()),
            ("lr_g", self.lr_g.to_string()),
            ("lr_d", self.lr_d.to_string()),
            ("lr_s", self.lr_s.to_string()),
            ("beta1_gd", self.betas_gd.0.to_string()),
            ("beta2_gd", self.betas_gd.1.to_string()),
            ("beta1_s", self.betas_s.0.to_string()),
            ("beta2_s", self.betas_s.1.to_string()),
            ("batch", self.batch.to_string()),
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("sample_every", self.sample_every.to_string()),
            ("freeze_g", self.freeze_g.to_string()),
            ("freeze_d", self.freeze_d.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Overrides fields named in `map`; unknown keys are an error.
    /// `classes`, `height` and `width` update every network at once.
    pub fn apply(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        for (key, raw) in map {
            let bad = || Error::Config(format!("cannot parse `{key} = {raw}`"));
            let num = || raw.parse::<usize>().map_err(|_| bad());
            let float = || raw.parse::<f64>().map_err(|_| bad());
            let flag = || raw.parse::<bool>().map_err(|_| bad());
            let list = || -> Result<Vec<usize>> {
                raw.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
            };
            match key.as_str() {
                "classes" => {
                    self.generator.num_classes = num()?;
                    self.segmenter.num_classes = num()?;
                }
                "height" => {
                    self.generator.height = num()?;
                    self.discriminator.height = num()?;
                }
                "width" => {
                    self.generator.width = num()?;
                    self.discriminator.width = num()?;
                }
                "z_dim" => self.generator.z_dim = num()?,
                "g_channels" => self.generator.channels = list()?,
                "spade_hidden" => self.generator.spade_hidden = num()?,
                "wu" => self.generator.use_wavelet_upsample = flag()?,
                "ps" => self.generator.use_pixel_spade = flag()?,
                "arrangement" => self.generator.arrangement = raw.parse::<Arrangement>()?,
                "final_iwt" => self.generator.final_iwt = flag()?,
                "norm" => {
                    self.generator.norm = match raw.as_str() {
                        "batch" => NormMode::Batch,
                        "instance" => NormMode::Instance,
                        _ => return Err(bad()),
                    }
                }
                "d_channels" => self.discriminator.channels = list()?,
                "s_depth" => self.segmenter.depth = num()?,
                "s_base" => self.segmenter.base_channels = num()?,
                "lambda" => self.loss.lambda = float()?,
                "r1_gamma" => self.loss.r1_gamma = float()?,
                "r1_epsilon" => self.r1_epsilon = float()?,
                "lr_g" => self.lr_g = float()?,
                "lr_d" => self.lr_d = float()?,
                "lr_s" => self.lr_s = float()?,
                "beta1_gd" => self.betas_gd.0 = float()?,
                "beta2_gd" => self.betas_gd.1 = float()?,
                "beta1_s" => self.betas_s.0 = float()?,
                "beta2_s" => self.betas_s.1 = float()?,
                "batch" => self.batch = num()?,
                "steps" => self.steps = raw.parse().map_err(|_| bad())?,
                "seed" => self.seed = raw.parse().map_err(|_| bad())?,
                "checkpoint_every" => self.checkpoint_every = raw.parse().map_err(|_| bad())?,
                "sample_every" => self.sample_every = raw.parse().map_err(|_| bad())?,
                "freeze_g" => self.freeze_g = flag()?,
                "freeze_d" => self.freeze_d = flag()?,
                _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
            }
        }
        Ok(())
    }

    pub fn from_pairs(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(map)?;
        Ok(cfg)
    }

    /// Keys whose values fix the parameter layout or forward function.
    pub fn architecture_keys() -> &'static [&'static str] {
        &[
            "classes",
            "height",
            "width",
            "z_dim",
            "g_channels",
            "spade_hidden",
            "wu",
            "ps",
            "arrangement",
            "final_iwt",
            "norm",
            "d_channels",
            "s_depth",
            "s_base",
        ]
    }
}

fn norm_name(mode: NormMode) -> &'static str {
    match mode {
        NormMode::Batch => "batch",
        NormMode::Instance => "instance",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_round_trip() {
        let mut cfg = TrainConfig::desk(5, 32, 32);
        cfg.generator.arrangement = Arrangement::Spatial;
        cfg.generator.use_pixel_spade = false;
        cfg.loss.lambda = 0.37;
        cfg.lr_d = 3.3e-4;
        let map: BTreeMap<_, _> = cfg.to_pairs().into_iter().collect();
        assert_eq!(TrainConfig::from_pairs(&map).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        let mut map = BTreeMap::new();
        map.insert("nope".to_string(), "1".to_string());
        assert!(TrainConfig::from_pairs(&map).is_err());
        let mut cfg = TrainConfig::default();
        cfg.lr_s = 0.0;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::desk(4, 64, 64).validate().is_ok());
    }
}
