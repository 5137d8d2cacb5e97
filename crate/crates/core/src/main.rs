use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use wavegen::data::{
    colorize_labels, format_key_values, load_dataset, one_hot, parse_key_values, read_image_png, read_label_png,
    write_dataset, write_grid_png, write_image_png, ShapesWorldSpec,
};
use wavegen::error::{Error, Result};
use wavegen::eval::{evaluate, Oracle, OracleMode};
use wavegen::nn::sample_latent;
use wavegen::seed::rng_for;
use wavegen::tensor::Tensor;
use wavegen::train::{fit, load_checkpoint, read_checkpoint, write_sample_grid, TrainConfig, FINAL_CHECKPOINT};
use wavegen::wavelet::{dwt, Arrangement, SUBBANDS};

#[derive(Parser)]
#[command(name = "wavegen", version, about = "Unsupervised semantic image synthesis with wavelet-domain networks")]
struct Cli {
    /// Flat `key = value` file supplying defaults for the command's flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic textured-shapes dataset.
    GenerateData(GenerateArgs),
    /// Train generator, discriminator and segmenter without paired data.
    Train(TrainArgs),
    /// Oracle mIoU and spectrum distance of a checkpoint on the test masks.
    Eval(EvalArgs),
    /// Write Haar subband images of a PNG.
    Dwt(DwtArgs),
    /// Several generations from one mask with distinct latents.
    Sample(SampleArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    /// `HxW`, both multiples of 16.
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Trailing pairs held out for evaluation [default: min(64, count/2)].
    #[arg(long)]
    test_count: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    z_dim: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable wavelet upsampling on the identity branch.
    #[arg(long)]
    no_wu: bool,
    /// Use plain SPADE on wavelet coefficients instead of pixelSPADE.
    #[arg(long)]
    no_ps: bool,
    /// Spatial (quadrant) subband arrangement.
    #[arg(long)]
    spatial: bool,
    /// Only the final IWT: same as `--no-wu --no-ps`.
    #[arg(long)]
    final_iwt_only: bool,
    /// `full` (default channel widths) or `desk` (narrow, single-core sized).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    lr_g: Option<f64>,
    #[arg(long)]
    lr_d: Option<f64>,
    #[arg(long)]
    lr_s: Option<f64>,
    #[arg(long)]
    r1_gamma: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    sample_every: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `color` (nearest base color) or `unet` (trained on paired renders).
    #[arg(long)]
    oracle: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DwtArgs {
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    levels: Option<usize>,
    /// Also write the quadrant mosaic of every level.
    #[arg(long)]
    spatial: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Flag values fall back to the `--config` file, then to a default.
struct Settings {
    file: BTreeMap<String, String>,
}

impl Settings {
    fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("cannot parse config `{key} = {raw}`"))),
            None => Ok(None),
        }
    }

    fn require<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T> {
        self.get(flag, key)?
            .ok_or_else(|| Error::Config(format!("missing --{}", key.replace('_', "-"))))
    }

    fn switch(&self, flag: bool, key: &str) -> Result<bool> {
        Ok(flag || self.get(None::<bool>, key)?.unwrap_or(false))
    }
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("size `{s}` is not HxW")))?;
    let p = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("size `{s}` is not HxW")))
    };
    Ok((p(h)?, p(w)?))
}

fn generate_data(a: GenerateArgs, s: &Settings) -> Result<()> {
    let out: PathBuf = s.require(a.out, "out")?;
    let classes = s.get(a.classes, "classes")?.unwrap_or(4);
    let (h, w) = parse_size(&s.get(a.size, "size")?.unwrap_or_else(|| "64x64".into()))?;
    let count = s.get(a.count, "count")?.unwrap_or(512);
    let seed = s.get(a.seed, "seed")?.unwrap_or(0);
    let test_count = s.get(a.test_count, "test_count")?.unwrap_or(64.min(count / 2));
    let spec = ShapesWorldSpec::new(classes, h, w, seed)?;
    let data = write_dataset(&out, &spec, count, test_count)?;
    let mut counts = vec![0u64; classes];
    for m in &data.masks {
        for (c, n) in m.class_counts(classes).iter().enumerate() {
            counts[c] += n;
        }
    }
    let total: u64 = counts.iter().sum();
    println!(
        "wrote {count} pairs ({} train, {test_count} test) to {}",
        count - test_count,
        out.display()
    );
    println!("class,frequency,target");
    for (c, n) in counts.iter().enumerate() {
        println!("{c},{:.4},{:.4}", *n as f64 / total as f64, spec.area_fractions[c]);
    }
    Ok(())
}

fn train(a: TrainArgs, s: &Settings) -> Result<()> {
    let data_dir: PathBuf = s.require(a.data, "data")?;
    let out: PathBuf = s.require(a.out, "out")?;
    let data = load_dataset(&data_dir)?;
    let spec = &data.spec;

    let mut cfg = match s.get(a.preset, "preset")?.as_deref().unwrap_or("full") {
        "full" => TrainConfig::for_world(spec.num_classes, spec.height, spec.width),
        "desk" => TrainConfig::desk(spec.num_classes, spec.height, spec.width),
        other => return Err(Error::Config(format!("unknown preset `{other}`"))),
    };
    // every remaining config-file key is a TrainConfig field
    let skip = ["data", "out", "preset", "resume", "no_wu", "no_ps", "spatial", "final_iwt_only"];
    let file_cfg: BTreeMap<String, String> = s
        .file
        .iter()
        .filter(|(k, _)| !skip.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    cfg.apply(&file_cfg)?;
    let mut flags = BTreeMap::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            flags.insert(k.to_string(), v);
        }
    };
    put("steps", a.steps.map(|v| v.to_string()));
    put("lambda", a.lambda.map(|v| v.to_string()));
    put("z_dim", a.z_dim.map(|v| v.to_string()));
    put("batch", a.batch.map(|v| v.to_string()));
    put("seed", a.seed.map(|v| v.to_string()));
    put("lr_g", a.lr_g.map(|v| v.to_string()));
    put("lr_d", a.lr_d.map(|v| v.to_string()));
    put("lr_s", a.lr_s.map(|v| v.to_string()));
    put("r1_gamma", a.r1_gamma.map(|v| v.to_string()));
    put("checkpoint_every", a.checkpoint_every.map(|v| v.to_string()));
    put("sample_every", a.sample_every.map(|v| v.to_string()));
    cfg.apply(&flags)?;
    let final_only = s.switch(a.final_iwt_only, "final_iwt_only")?;
    if s.switch(a.no_wu, "no_wu")? || final_only {
        cfg.generator.use_wavelet_upsample = false;
    }
    if s.switch(a.no_ps, "no_ps")? || final_only {
        cfg.generator.use_pixel_spade = false;
    }
    if s.switch(a.spatial, "spatial")? {
        cfg.generator.arrangement = Arrangement::Spatial;
    }
    cfg.validate()?;

    fs::create_dir_all(&out)?;
    fs::write(out.join("config.cfg"), format_key_values(cfg.to_pairs().iter().map(|(k, v)| (k.as_str(), v.clone()))))?;
    let resume = match s.get::<PathBuf>(a.resume, "resume")? {
        Some(path) => Some(load_checkpoint(path, &cfg)?),
        None => None,
    };
    let (bundle, history) = fit(&cfg, &data, Some(&out), resume)?;
    write_sample_grid(&out.join("samples_final.png"), &bundle, data.test_masks_or_train(), spec)?;
    if let Some(last) = history.last() {
        println!(
            "step {}: loss_seg {} loss_G_adv {} loss_D {} r1 {}",
            last.step, last.loss_seg, last.loss_g_adv, last.loss_d, last.r1
        );
    }
    println!("checkpoint: {}", out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn eval(a: EvalArgs, s: &Settings) -> Result<()> {
    let data = load_dataset(s.require::<PathBuf>(a.data, "data")?)?;
    let ckpt: PathBuf = s.require(a.ckpt, "ckpt")?;
    let out: PathBuf = s.require(a.out, "out")?;
    let mode: OracleMode = s.get(a.oracle, "oracle")?.unwrap_or_else(|| "color".into()).parse()?;
    let seed = s.get(a.seed, "seed")?.unwrap_or(0);
    let cfg = read_checkpoint(&ckpt)?.config;
    let bundle = load_checkpoint(&ckpt, &cfg)?;
    let g = &cfg.generator;
    if (g.num_classes, g.height, g.width) != (data.spec.num_classes, data.spec.height, data.spec.width) {
        return Err(Error::Checkpoint(format!(
            "checkpoint is for {} classes at {}×{}, dataset has {} at {}×{}",
            g.num_classes, g.height, g.width, data.spec.num_classes, data.spec.height, data.spec.width
        )));
    }
    let oracle = Oracle::new(mode, &data.spec, seed)?;
    let masks = data.test_masks_or_train();
    let (report, generated) = evaluate(&bundle, masks, data.train_images(), &oracle, seed, cfg.batch)?;
    fs::create_dir_all(&out)?;
    report.write_csv(out.join("report.csv"))?;
    let mut tiles = Vec::new();
    for (m, img) in masks.iter().zip(&generated).take(8) {
        tiles.push(colorize_labels(m, &data.spec)?);
        tiles.push(img.clone());
    }
    write_grid_png(out.join("eval_grid.png"), &tiles, 4)?;
    print!("{}", report.to_csv());
    Ok(())
}

/// Maps values to `[−1, 1]` by the largest magnitude; all-zero stays mid-gray.
fn symmetric_scale(t: &Tensor) -> (Tensor, f32) {
    let max = t.data().iter().fold(0f32, |m, v| m.max(v.abs()));
    if max == 0.0 {
        (t.clone(), 0.0)
    } else {
        (t.map(|v| v / max), max)
    }
}

fn dwt_cmd(a: DwtArgs, s: &Settings) -> Result<()> {
    let input: PathBuf = s.require(a.input, "in")?;
    let out: PathBuf = s.require(a.out, "out")?;
    let levels = s.get(a.levels, "levels")?.unwrap_or(1);
    let mosaic = s.switch(a.spatial, "spatial")?;
    if levels == 0 {
        return Err(Error::Config("--levels must be ≥ 1".into()));
    }
    let img = read_image_png(&input)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let div = 1 << levels;
    if h % div != 0 || w % div != 0 {
        return Err(Error::Shape {
            op: "dwt",
            detail: format!("{h}×{w} image is not divisible by {div} for {levels} levels"),
        });
    }
    fs::create_dir_all(&out)?;
    let mut scales = Vec::new();
    let mut ll = img.reshape(&[1, 3, h, w])?;
    for level in 1..=levels {
        let coeffs = dwt(&ll, Arrangement::Channelwise)?;
        if mosaic {
            let (q, _) = symmetric_scale(&dwt(&ll, Arrangement::Spatial)?);
            write_image_png(out.join(format!("level{level}_spatial.png")), &q)?;
        }
        let (_, _, hh, ww) = coeffs.dims4()?;
        let band = |b: usize| -> Result<Tensor> {
            let hw = hh * ww;
            Tensor::new(&[1, 3, hh, ww], coeffs.data()[b * 3 * hw..(b + 1) * 3 * hw].to_vec())
        };
        for (b, name) in SUBBANDS.iter().enumerate().skip(1) {
            let (scaled, max) = symmetric_scale(&band(b)?);
            let file = format!("level{level}_{name}.png");
            write_image_png(out.join(&file), &scaled)?;
            scales.push((file, max.to_string()));
        }
        ll = band(0)?;
    }
    // LL of level L lies in [−2^L, 2^L]
    let ll_scale = (1u32 << levels) as f32;
    let file = format!("level{levels}_LL.png");
    write_image_png(out.join(&file), &ll.map(|v| v / ll_scale))?;
    scales.push((file, ll_scale.to_string()));
    fs::write(out.join("scales.cfg"), format_key_values(scales.iter().map(|(k, v)| (k.as_str(), v.clone()))))?;
    println!("wrote {} subband images to {}", 3 * levels + 1, out.display());
    Ok(())
}

fn sample(a: SampleArgs, s: &Settings) -> Result<()> {
    let ckpt: PathBuf = s.require(a.ckpt, "ckpt")?;
    let mask_path: PathBuf = s.require(a.mask, "mask")?;
    let out: PathBuf = s.require(a.out, "out")?;
    let count = s.get(a.count, "count")?.unwrap_or(4);
    let seed = s.get(a.seed, "seed")?.unwrap_or(0);
    if count == 0 {
        return Err(Error::Config("--count must be ≥ 1".into()));
    }
    let cfg = read_checkpoint(&ckpt)?.config;
    let bundle = load_checkpoint(&ckpt, &cfg)?;
    let mask = read_label_png(&mask_path)?;
    let g = &cfg.generator;
    mask.check_classes(g.num_classes)?;
    if (mask.height(), mask.width()) != (g.height, g.width) {
        return Err(Error::Shape {
            op: "sample",
            detail: format!(
                "mask is {}×{}, model generates {}×{}",
                mask.height(),
                mask.width(),
                g.height,
                g.width
            ),
        });
    }
    let layout = one_hot(&mask, g.num_classes)?;
    fs::create_dir_all(&out)?;
    let mut tiles = Vec::with_capacity(count);
    for k in 0..count {
        let latent = sample_latent(1, g.z_dim, &mut rng_for(seed, &[k as u64]));
        let img = bundle.generate(&layout, &latent, 1)?.reshape(&[3, g.height, g.width])?;
        write_image_png(out.join(format!("sample_{k:03}.png")), &img)?;
        tiles.push(img);
    }
    write_grid_png(out.join("grid.png"), &tiles, count.min(8))?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(raw) = std::env::var("WAVEGEN_THREADS") {
        let n: usize = raw
            .parse()
            .map_err(|_| Error::Config(format!("WAVEGEN_THREADS=`{raw}` is not a number")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let file = match &cli.config {
        Some(p) => parse_key_values(&fs::read_to_string(Path::new(p))?)?,
        None => BTreeMap::new(),
    };
    let s = Settings { file };
    match cli.command {
        Command::GenerateData(a) => generate_data(a, &s),
        Command::Train(a) => train(a, &s),
        Command::Eval(a) => eval(a, &s),
        Command::Dwt(a) => dwt_cmd(a, &s),
        Command::Sample(a) => sample(a, &s),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
