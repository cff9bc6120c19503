use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hpac::adapt::AdapterConfig;
use hpac::codec::{decode, encode, load_image, save_image, EncodeOptions, FineTune, ImageBuffer, DEFAULT_RANGE};
use hpac::harness::bench::{finetune_bench, parse_strategy, sweep, write_csv, SweepGrid, FT_HEADER, SWEEP_HEADER};
use hpac::harness::corpus::{ood_set, training_set};
use hpac::harness::train::{train, LrSchedule, TrainConfig};
use hpac::harness::verify::run_checks;
use hpac::harness::init_threads;
use hpac::model::{ModelConfig, ModelWeights};
use hpac::sarpft::{FtOptions, Schedule};

/// Environment variable naming the default weight file.
const WEIGHTS_ENV: &str = "HPAC_WEIGHTS";

#[derive(Parser)]
#[command(name = "hpac", version, about = "Learned lossless image codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compress a PGM/PPM or .raw image.
    Encode(EncodeArgs),
    /// Reconstruct an image from a stream.
    Decode {
        input: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        weights: WeightsArg,
    },
    /// Pre-train a model on the synthetic corpus or a directory of images.
    Train(TrainArgs),
    /// Compare fine-tuning strategies on out-of-distribution images.
    FinetuneBench(BenchArgs),
    /// Bits and latency over a grid of delta, patch and window settings.
    Sweep(SweepArgs),
    /// Run the built-in property checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct WeightsArg {
    /// Weight file; defaults to $HPAC_WEIGHTS.
    #[arg(long, short)]
    weights: Option<PathBuf>,
}

impl WeightsArg {
    fn load(&self) -> Result<ModelWeights<f32>> {
        let path = match &self.weights {
            Some(p) => p.clone(),
            None => match std::env::var_os(WEIGHTS_ENV) {
                Some(p) => PathBuf::from(p),
                None => bail!("no weights given; pass --weights or set {}", WEIGHTS_ENV),
            },
        };
        ModelWeights::load(&path).with_context(|| format!("loading weights from {}", path.display()))
    }
}

#[derive(Args)]
struct FtArgs {
    /// Fine-tuning steps.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    rank: usize,
    #[arg(long, default_value_t = 1e-2)]
    ft_lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl FtArgs {
    fn options(&self) -> FtOptions {
        FtOptions {
            schedule: Schedule { steps: self.steps, ..Schedule::default() },
            lr: self.ft_lr,
            seed: self.seed,
            ..FtOptions::default()
        }
    }

    fn adapters(&self) -> AdapterConfig {
        AdapterConfig { rank: self.rank, ..AdapterConfig::default() }
    }
}

#[derive(Args)]
struct EncodeArgs {
    input: PathBuf,
    output: PathBuf,
    #[command(flatten)]
    weights: WeightsArg,
    /// Nominal coding window size.
    #[arg(long, default_value_t = DEFAULT_RANGE)]
    range: usize,
    /// Fine-tune adapters on this image before coding.
    #[arg(long)]
    ft: bool,
    /// Store adapters even when they cost more than they save.
    #[arg(long)]
    keep_adapters: bool,
    #[command(flatten)]
    ft_args: FtArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Fast,
    Tiny,
}

impl Preset {
    fn config(self, channels: usize) -> ModelConfig {
        match self {
            Preset::Default => ModelConfig::default(),
            Preset::Fast => ModelConfig::fast(),
            Preset::Tiny => ModelConfig::tiny(),
        }
        .with_channels_in(channels)
    }
}

#[derive(Args)]
struct CorpusArgs {
    /// Directory of PGM/PPM images; the synthetic corpus when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 48)]
    images: usize,
    #[arg(long, default_value_t = 96)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 1)]
    corpus_seed: u64,
}

impl CorpusArgs {
    fn load(&self) -> Result<Vec<ImageBuffer>> {
        match &self.data {
            Some(dir) => load_dir(dir),
            None => Ok(training_set(self.images, self.size, self.channels, 8, self.corpus_seed)?),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Where to write the weight file.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Tiny)]
    config: Preset,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 64)]
    crop: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 500)]
    warmup: usize,
    /// Hold the learning rate after warmup instead of cosine decay.
    #[arg(long)]
    constant_lr: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    corpus: CorpusArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    weights: WeightsArg,
    #[arg(long, default_value_t = 20)]
    images: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Comma-separated: rate-guided, random, full-image.
    #[arg(long, default_value = "rate-guided,full-image")]
    strategies: String,
    #[command(flatten)]
    ft_args: FtArgs,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "1")]
    delta: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "16")]
    patch: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1024")]
    range: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Preset::Tiny)]
    config: Preset,
    /// Training steps per (patch, delta) model; 0 codes with the seeded init.
    #[arg(long, default_value_t = 0)]
    train_steps: usize,
    #[arg(long, default_value_t = 32)]
    crop: usize,
    #[arg(long, default_value_t = 2)]
    eval_images: usize,
    #[arg(long, default_value_t = 48)]
    eval_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_dir(dir: &Path) -> Result<Vec<ImageBuffer>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pgm" || e == "ppm" || e == "pnm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no PGM/PPM images in {}", dir.display());
    }
    paths.iter().map(|p| load_image(p).with_context(|| format!("loading {}", p.display()))).collect()
}

fn csv_sink(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run_encode(a: &EncodeArgs) -> Result<()> {
    let weights = a.weights.load()?;
    let img = load_image(&a.input).with_context(|| format!("loading {}", a.input.display()))?;
    let fine_tune = a.ft.then(|| FineTune {
        adapters: a.ft_args.adapters(),
        options: a.ft_args.options(),
        keep_if_worse: a.keep_adapters,
    });
    let e = encode(&img, &weights, &EncodeOptions { range: a.range, fine_tune })?;
    fs::write(&a.output, &e.bytes).with_context(|| format!("writing {}", a.output.display()))?;
    let s = &e.stats;
    eprintln!(
        "{}x{}x{} {}-bit: {} bytes, {:.4} bpsp ({} adapter bytes, {} escapes)",
        img.width,
        img.height,
        img.channels,
        img.bit_depth,
        e.bytes.len(),
        s.bpsp(),
        s.adapter_bytes,
        s.escapes
    );
    if let Some(ft) = &s.fine_tune {
        eprintln!(
            "fine-tuning: {:.0} -> {:.0} image bits + {:.0} parameter bits in {:.2}s; adapters {}",
            ft.base_bits,
            ft.image_bits,
            ft.param_bits,
            ft.elapsed.as_secs_f64(),
            if ft.kept { "kept" } else { "dropped" }
        );
    }
    Ok(())
}

fn run_decode(input: &Path, output: &Path, w: &WeightsArg) -> Result<()> {
    let weights = w.load()?;
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let img = decode(&bytes, &weights)?;
    save_image(output, &img).with_context(|| format!("writing {}", output.display()))?;
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let corpus = a.corpus.load()?;
    let channels = corpus[0].channels;
    let model = a.config.config(channels);
    let held = match &a.corpus.data {
        Some(_) => Vec::new(),
        None => training_set(6, 64, channels, 8, a.corpus.corpus_seed.wrapping_add(1))?,
    };
    let cfg = TrainConfig {
        steps: a.steps,
        batch: a.batch,
        crop: a.crop,
        peak_lr: a.lr,
        warmup: a.warmup,
        schedule: if a.constant_lr { LrSchedule::Constant } else { LrSchedule::Cosine },
        seed: a.seed,
    };
    let every = (a.steps / 20).max(1);
    let r = train(&model, &corpus, &held, &cfg, |s| {
        if s.step % every == 0 || s.step + 1 == a.steps {
            eprintln!("step {:>6}  lr {:.2e}  loss {:.4} bpsp", s.step, s.lr, s.bpsp);
        }
    })?;
    r.weights.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if !held.is_empty() {
        eprintln!("held-out: {:.4} -> {:.4} bpsp", r.initial_heldout, r.final_heldout);
    }
    eprintln!("wrote {} (hash {:016x}) after {:.1}s", a.out.display(), r.weights.hash(), r.elapsed.as_secs_f64());
    Ok(())
}

fn run_bench(a: &BenchArgs) -> Result<()> {
    let weights = a.weights.load()?;
    let strategies = a.strategies.split(',').map(|s| parse_strategy(s.trim())).collect::<hpac::Result<Vec<_>>>()?;
    let images = ood_set(a.images, a.size, weights.config.channels_in, 8, a.ft_args.seed)?;
    let mut lines = Vec::new();
    let rows = finetune_bench(&weights, &images, &a.ft_args.adapters(), &a.ft_args.options(), &strategies, |r| {
        eprintln!("{}", r.csv());
    })?;
    lines.extend(rows.iter().map(|r| r.csv()));
    write_csv(csv_sink(&a.out)?, FT_HEADER, lines.iter().map(String::as_str))?;
    for &s in &strategies {
        let sel: Vec<_> = rows.iter().filter(|r| r.strategy == s).collect();
        let won = sel.iter().filter(|r| r.improved()).count();
        let secs: f64 = sel.iter().map(|r| r.seconds).sum();
        eprintln!(
            "{}: improved {}/{} images, {:.2}s total",
            hpac::harness::bench::strategy_name(s),
            won,
            sel.len(),
            secs
        );
    }
    Ok(())
}

fn run_sweep(a: &SweepArgs) -> Result<()> {
    let channels = a.corpus.channels;
    let base = a.config.config(channels);
    let corpus = if a.train_steps > 0 { a.corpus.load()? } else { Vec::new() };
    let eval = training_set(a.eval_images, a.eval_size, channels, 8, a.seed.wrapping_add(7))?;
    let grid = SweepGrid { deltas: a.delta.clone(), patches: a.patch.clone(), ranges: a.range.clone() };
    let tc = TrainConfig { steps: a.train_steps, crop: a.crop, seed: a.seed, ..TrainConfig::default() };
    let rows = sweep(&base, &grid, &corpus, &eval, &tc, |r| eprintln!("{}", r.csv()))?;
    let lines: Vec<String> = rows.iter().map(|r| r.csv()).collect();
    write_csv(csv_sink(&a.out)?, SWEEP_HEADER, lines.iter().map(String::as_str))?;
    Ok(())
}

fn run_verify(seed: u64) -> Result<bool> {
    let checks = run_checks(seed);
    for c in &checks {
        println!("{} {:<10} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = init_threads().map_err(anyhow::Error::from).and_then(|_| match &cli.cmd {
        Cmd::Encode(a) => run_encode(a).map(|_| true),
        Cmd::Decode { input, output, weights } => run_decode(input, output, weights).map(|_| true),
        Cmd::Train(a) => run_train(a).map(|_| true),
        Cmd::FinetuneBench(a) => run_bench(a).map(|_| true),
        Cmd::Sweep(a) => run_sweep(a).map(|_| true),
        Cmd::Verify { seed } => run_verify(*seed),
    });
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}
