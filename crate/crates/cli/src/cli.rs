//! Subcommands. Every flag overrides the config key named in its help text.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fmdiff_core::attacks::{AttackMethod, AttackSpec};
use fmdiff_core::codecs::{embed, extract, CodecConfig, Scheme, WatermarkBits};
use fmdiff_core::diffusion::NoiseSchedule;
use fmdiff_core::gradcheck;
use fmdiff_core::metrics::ber;
use fmdiff_core::nn::{Arch, DenoiserParams};
use fmdiff_core::training::{moving_average, LossReport, PatchPair, Stage, TrainConfig, TrainState, Trainer};
use fmdiff_core::SeededRng;

use crate::attack::{image_rng, Attack, FmdiffAttack, FmdiffSettings, FMDIFF_TAG, T_MAX};
use crate::bench::{run_bench, write_csv, BenchSpec, PsnrRef};
use crate::config::Config;
use crate::corpus::{ingest_corpus, Corpus};
use crate::io;

#[derive(Debug, Parser)]
#[command(name = "fmdiff", version, about = "Watermark embedding, attacks, training and benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Watermark every image of a directory.
    Embed(EmbedArgs),
    /// Read watermarks back, optionally scoring them against a reference.
    Extract(ExtractArgs),
    /// Attack every image of a directory.
    Attack(AttackArgs),
    /// Train the conditional noise estimator.
    Train(TrainArgs),
    /// Run the diffusion attack over a directory.
    Sample(SampleArgs),
    /// PSNR/BER table over codecs and attacks.
    Bench(BenchArgs),
    /// Finite-difference check of every differentiable primitive.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct CodecArgs {
    /// lsb, dct or dft [bench.codec]
    #[arg(long)]
    pub codec: Option<Scheme>,
    /// Codec key shared by embedder and extractor [bench.key]
    #[arg(long)]
    pub key: Option<u64>,
}

#[derive(Debug, Args)]
pub struct WatermarkArgs {
    /// Watermark file (text or 16x16 PGM/PNG); random from --seed if absent
    #[arg(long)]
    pub wm: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub codec: CodecArgs,
    #[command(flatten)]
    pub wm: WatermarkArgs,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds the random watermark when --wm is absent [bench.seed]
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub codec: CodecArgs,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Directory for the extracted bit files
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reference watermark; prints per-image and mean BER
    #[arg(long)]
    pub wm: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct FmdiffArgs {
    /// Trained checkpoint for the diffusion attack [fwm.checkpoint]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sampling steps S [fwm.steps]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Patch side [fwm.patch]
    #[arg(long)]
    pub patch: Option<usize>,
    /// Grid stride, default patch/2 [fwm.stride]
    #[arg(long)]
    pub stride: Option<usize>,
    /// Fuse intermediate states with the forward-diffused input [fwm.inference]
    #[arg(long)]
    pub fwm_inference: bool,
    /// Mask fraction for --fwm-inference [fwm.beta]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Use raw weights instead of the moving average [fwm.raw_weights]
    #[arg(long)]
    pub raw_weights: bool,
}

impl FmdiffArgs {
    fn settings(&self, cfg: &Config) -> Result<FmdiffSettings> {
        let d = FmdiffSettings::default();
        let stride: usize = cfg.pick("fwm.stride", self.stride, 0)?;
        Ok(FmdiffSettings {
            steps: cfg.pick("fwm.steps", self.steps, d.steps)?,
            patch: cfg.pick("fwm.patch", self.patch, d.patch)?,
            stride: (stride > 0).then_some(stride),
            fwm_inference: cfg.flag("fwm.inference", self.fwm_inference)?,
            beta: cfg.pick("fwm.beta", self.beta, d.beta)?,
            raw_weights: cfg.flag("fwm.raw_weights", self.raw_weights)?,
        })
    }

    fn load(&self, cfg: &Config) -> Result<FmdiffAttack> {
        let path: PathBuf = match cfg.pick("fwm.checkpoint", self.checkpoint.clone(), PathBuf::new())? {
            p if p.as_os_str().is_empty() => bail!("the fmdiff attack needs --checkpoint"),
            p => p,
        };
        FmdiffAttack::from_checkpoint(&path, self.settings(cfg)?)
    }
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// gaussian, speckle, saltpepper, meanfilter, jpeg, identity or fmdiff
    #[arg(long)]
    pub method: String,
    /// Variance, density, window side or quality
    #[arg(long, default_value_t = 0.0)]
    pub param: f64,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Image i is attacked with stream i of this seed [bench.seed]
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub fmdiff: FmdiffArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub fmdiff: FmdiffArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Image directory, center-cropped and resized to --size
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Use N synthetic images instead of a directory
    #[arg(long)]
    pub synth: Option<usize>,
    /// Square side the corpus is brought to
    #[arg(long)]
    pub size: Option<usize>,
    /// Channels of synthetic images (1 or 3)
    #[arg(long)]
    pub channels: Option<usize>,
}

impl CorpusArgs {
    fn resolve(&self, cfg: &Config, section: &str, default_size: usize, seed: u64) -> Result<Corpus> {
        let size: usize = cfg.pick(&format!("{section}.size"), self.size, default_size)?;
        let synth: usize = cfg.pick(&format!("{section}.synth"), self.synth, 0)?;
        let dir: PathBuf = cfg.pick(&format!("{section}.corpus"), self.corpus.clone(), PathBuf::new())?;
        match (synth, dir.as_os_str().is_empty()) {
            (0, true) => bail!("give --corpus DIR or --synth N"),
            (n, true) => Corpus::synth(seed, n, size, cfg.pick(&format!("{section}.channels"), self.channels, 3)?),
            (0, false) => ingest_corpus(&dir, Some(size)),
            _ => bail!("--corpus and --synth are exclusive"),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub codec: CodecArgs,
    #[command(flatten)]
    pub wm: WatermarkArgs,
    /// Checkpoint written at the end (and every --checkpoint-every)
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log (CSV)
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from this checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Total iterations [train.iters]
    #[arg(long)]
    pub iters: Option<usize>,
    /// Last stage-1 iteration [train.transition]
    #[arg(long)]
    pub transition: Option<usize>,
    /// [train.lr]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [train.patch]
    #[arg(long)]
    pub patch: Option<usize>,
    /// [train.seed]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [train.checkpoint_every]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub wm: WatermarkArgs,
    /// Comma-separated codecs [bench.codecs]
    #[arg(long)]
    pub codecs: Option<String>,
    /// Comma-separated attacks, e.g. identity,gaussian:0.002,jpeg:30,fmdiff [bench.attacks]
    #[arg(long)]
    pub attacks: Option<String>,
    /// [bench.key]
    #[arg(long)]
    pub key: Option<u64>,
    /// [bench.seed]
    #[arg(long)]
    pub seed: Option<u64>,
    /// watermarked or original [bench.psnr_ref]
    #[arg(long)]
    pub psnr_ref: Option<PsnrRef>,
    /// PSNR on 8-bit exports [bench.on_bytes]
    #[arg(long)]
    pub on_bytes: bool,
    /// CSV path; stdout if absent
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub fmdiff: FmdiffArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn config(path: &Option<PathBuf>) -> Result<Config> {
    path.as_deref().map(Config::load).transpose().map(Option::unwrap_or_default)
}

fn codec_config(args: &CodecArgs, cfg: &Config) -> Result<CodecConfig> {
    let scheme = cfg.pick("bench.codec", args.codec, Scheme::Lsb)?;
    let mut c = CodecConfig::new(scheme);
    c.key = cfg.pick("bench.key", args.key, c.key)?;
    c.validate()?;
    Ok(c)
}

fn watermark(args: &WatermarkArgs, seed: u64) -> Result<WatermarkBits> {
    match &args.wm {
        Some(p) => io::read_watermark(p),
        None => Ok(WatermarkBits::random(&mut SeededRng::new(seed))),
    }
}

/// Runs a subcommand; `Ok(false)` means it completed but failed its check.
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Embed(a) => cmd_embed(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn cmd_embed(a: EmbedArgs) -> Result<bool> {
    let cfg = config(&a.config)?;
    let codec = codec_config(&a.codec, &cfg)?;
    let wm = watermark(&a.wm, cfg.pick("bench.seed", a.seed, 0)?)?;
    fs::create_dir_all(&a.out)?;
    if a.wm.wm.is_none() {
        io::write_watermark(&a.out.join("watermark.txt"), &wm)?;
    }
    for path in io::list_images(&a.input)? {
        let marked = embed(&io::load_image(&path)?, &wm, &codec).with_context(|| format!("embedding into {}", path.display()))?;
        io::save_image(&io::mirror_path(&path, &a.out), &marked)?;
    }
    Ok(true)
}

fn cmd_extract(a: ExtractArgs) -> Result<bool> {
    let cfg = config(&a.config)?;
    let codec = codec_config(&a.codec, &cfg)?;
    let reference = a.wm.as_deref().map(io::read_watermark).transpose()?;
    let mut total = 0.0;
    let paths = io::list_images(&a.input)?;
    for path in &paths {
        let bits = extract(&io::load_image(path)?, &codec)?;
        let name = path.file_name().unwrap().to_string_lossy();
        if let Some(dir) = &a.out {
            fs::create_dir_all(dir)?;
            io::write_watermark(&dir.join(format!("{name}.txt")), &bits)?;
        }
        if let Some(r) = &reference {
            let b = ber(r, &bits);
            total += b;
            println!("{name}\t{b:.6}");
        }
    }
    if reference.is_some() {
        println!("mean\t{:.6}", total / paths.len() as f64);
    }
    Ok(true)
}

fn attack_dir(attack: &Attack, input: &Path, out: &Path, seed: u64) -> Result<()> {
    fs::create_dir_all(out)?;
    for (i, path) in io::list_images(input)?.iter().enumerate() {
        let img = io::load_image(path)?;
        let attacked = attack.apply(&img, &mut image_rng(seed, i)).with_context(|| format!("attacking {}", path.display()))?;
        io::save_image(&io::mirror_path(path, out), &attacked)?;
    }
    Ok(())
}

fn cmd_attack(a: AttackArgs) -> Result<bool> {
    let cfg = config(&a.config)?;
    let attack = if a.method == FMDIFF_TAG {
        Attack::Fmdiff(Box::new(a.fmdiff.load(&cfg)?))
    } else {
        Attack::Classical(AttackSpec::new(a.method.parse::<AttackMethod>()?, a.param)?)
    };
    attack_dir(&attack, &a.input, &a.out, cfg.pick("bench.seed", a.seed, 0)?)?;
    Ok(true)
}

fn cmd_sample(a: SampleArgs) -> Result<bool> {
    let cfg = config(&a.config)?;
    let attack = Attack::Fmdiff(Box::new(a.fmdiff.load(&cfg)?));
    attack_dir(&attack, &a.input, &a.out, cfg.pick("bench.seed", a.seed, 0)?)?;
    Ok(true)
}

/// Training settings from config and flags; defaults are the desk-scale
/// values of [`TrainConfig`] and a small network.
pub fn train_settings(a: &TrainArgs, cfg: &Config) -> Result<(TrainConfig, Arch)> {
    let d = TrainConfig::default();
    let total: usize = cfg.pick("train.iters", a.iters, d.total_iters)?;
    let tc = TrainConfig {
        total_iters: total,
        transition_iter: cfg.pick("train.transition", a.transition, d.transition_iter.min(total))?,
        batch: cfg.pick("train.batch", None, d.batch)?,
        patches_per_image: cfg.pick("train.patches", None, d.patches_per_image)?,
        patch_size: cfg.pick("train.patch", a.patch, d.patch_size)?,
        s_train: cfg.pick("train.s_train", None, d.s_train)?,
        mask_beta: cfg.pick("train.beta", None, d.mask_beta)?,
        l_min: cfg.pick("train.l_min", None, d.l_min)?,
        l_max: cfg.pick("train.l_max", None, d.l_max)?,
        lr: cfg.pick("train.lr", a.lr, d.lr)?,
        ema_decay: cfg.pick("train.ema_decay", None, d.ema_decay)?,
        seed: cfg.pick("train.seed", a.seed, d.seed)?,
        truncation: cfg.pick("train.truncation", None, d.truncation)?,
        full_unroll: cfg.flag("train.full_unroll", false)?,
        ssim_scales: match cfg.pick("train.ssim_scales", None, 0usize)? {
            0 => None,
            n => Some(n),
        },
        checkpoint_every: cfg.pick("train.checkpoint_every", a.checkpoint_every, d.checkpoint_every)?,
        refine_lr: match cfg.raw("train.refine_lr") {
            Some(_) => Some(cfg.pick("train.refine_lr", None, 0.0)?),
            None => None,
        },
        lr_final: match cfg.raw("train.lr_final") {
            Some(_) => Some(cfg.pick("train.lr_final", None, 0.0)?),
            None => None,
        },
        clip_x0: match cfg.raw("train.clip_x0") {
            Some(_) => cfg.flag("train.clip_x0", false)?,
            None => d.clip_x0,
        },
        ..d
    };
    let da = Arch::default();
    let arch = Arch {
        levels: cfg.pick("train.levels", None, da.levels)?,
        base_width: cfg.pick("train.base_width", None, da.base_width)?,
        time_dim: cfg.pick("train.time_dim", None, da.time_dim)?,
        groups: cfg.pick("train.groups", None, da.groups)?,
        ..da
    };
    Ok((tc, arch))
}

/// Clean images paired with their watermarked copies.
pub fn training_pairs(images: &[fmdiff_core::ImageBuffer], wm: &WatermarkBits, codec: &CodecConfig) -> Result<Vec<PatchPair>> {
    images.iter().map(|img| Ok((img.clone(), embed(img, wm, codec)?))).collect()
}

fn cmd_train(a: TrainArgs) -> Result<bool> {
    let cfg = config(&a.config)?;
    let (tc, mut arch) = train_settings(&a, &cfg)?;
    let codec = codec_config(&a.codec, &cfg)?;
    let corpus = a.corpus.resolve(&cfg, "train", 64, tc.seed)?;
    let wm = watermark(&a.wm, tc.seed)?;
    let images = corpus.load_all()?;
    arch.image_channels = images[0].channels();
    let pairs = training_pairs(&images, &wm, &codec)?;
    let sched = NoiseSchedule::default_linear(T_MAX)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let state = TrainState::from_checkpoint(io::read_checkpoint(p)?);
            let done = state.adam.step as usize;
            Trainer::resume(tc, sched, state, done)?
        }
        None => {
            let params = DenoiserParams::init(arch, &mut SeededRng::new(tc.seed).fork(u64::MAX - 1))?;
            Trainer::new(tc, sched, params)?
        }
    };
    let mut log = match &a.log {
        Some(p) => {
            let mut f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            writeln!(f, "{}", LossReport::HEADER)?;
            Some(f)
        }
        None => None,
    };
    let mut losses: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    while !trainer.finished() {
        let r = trainer.step(&pairs)?;
        if let Some(f) = &mut log {
            writeln!(f, "{r}")?;
        }
        losses[(r.stage == Stage::Refine) as usize].push(r.loss);
        if !a.quiet && r.iter % 100 == 0 {
            let l = &losses[(r.stage == Stage::Refine) as usize];
            eprintln!("iter {} stage {} loss(avg100) {:.6}", r.iter, r.stage.number(), moving_average(l, 100).last().unwrap());
        }
        if trainer.checkpoint_due() {
            io::write_checkpoint(&a.out, &trainer.state.checkpoint())?;
        }
    }
    io::write_checkpoint(&a.out, &trainer.state.checkpoint())?;
    Ok(true)
}

fn parse_list<T, E>(s: &str, f: impl Fn(&str) -> Result<T, E>) -> Result<Vec<T>>
where
    E: Into<anyhow::Error>,
{
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(|x| f(x).map_err(Into::into)).collect()
}

pub fn bench_spec(a: &BenchArgs, cfg: &Config) -> Result<BenchSpec> {
    let seed = cfg.pick("bench.seed", a.seed, 0)?;
    let key = cfg.pick("bench.key", a.key, CodecConfig::new(Scheme::Lsb).key)?;
    let codecs = parse_list(&cfg.pick("bench.codecs", a.codecs.clone(), "lsb,dct,dft".to_string())?, |s| {
        s.parse::<Scheme>().map(|scheme| CodecConfig { key, ..CodecConfig::new(scheme) })
    })?;
    let attack_list = cfg.pick(
        "bench.attacks",
        a.attacks.clone(),
        "identity,gaussian:0.002,speckle:0.005,saltpepper:0.005,meanfilter:3,jpeg:30".to_string(),
    )?;
    let attacks = parse_list(&attack_list, |s| -> Result<Attack> {
        if s == FMDIFF_TAG {
            Ok(Attack::Fmdiff(Box::new(a.fmdiff.load(cfg)?)))
        } else {
            Ok(Attack::Classical(s.parse()?))
        }
    })?;
    Ok(BenchSpec {
        corpus: a.corpus.resolve(cfg, "bench", 128, seed)?,
        codecs,
        attacks,
        watermark: watermark(&a.wm, seed)?,
        seed,
        psnr_ref: cfg.pick("bench.psnr_ref", a.psnr_ref, PsnrRef::Watermarked)?,
        on_bytes: cfg.flag("bench.on_bytes", a.on_bytes)?,
    })
}

fn cmd_bench(a: BenchArgs) -> Result<bool> {
    let cfg = config(&a.config)?;
    let spec = bench_spec(&a, &cfg)?;
    let rows = run_bench(&spec, |r| eprintln!("{} {}:{} {}", r.codec, r.attack, r.param, r.cell()))?;
    match &a.out {
        Some(p) => write_csv(&rows, fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)?,
        None => write_csv(&rows, std::io::stdout().lock())?,
    }
    Ok(true)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let checks = gradcheck::run_all(a.seed)?;
    let mut ok = true;
    for c in &checks {
        println!("{:<12} {:>4} samples  max rel err {:.3e}  {}", c.name, c.checked, c.max_rel_err, if c.passed() { "ok" } else { "FAIL" });
        ok &= c.passed();
    }
    Ok(ok)
}
