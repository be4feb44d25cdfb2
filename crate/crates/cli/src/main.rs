//! `stoken`: complexity reports, self-checks, training, inference and
//! visualizations for super token attention models.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 malformed or
//! unreadable data, 4 verification failure, 1 training divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stoken::blocks::{read_checkpoint, write_checkpoint, ArchConfig, ConfigFile, Model, PRESETS};
use stoken::flops::count_model;
use stoken::image::Image;
use stoken::train::{train_loop, Dataset, GeneratorKind, OptimizerConfig, SyntheticDatasetSpec};
use stoken::verify::{self, Suite};
use stoken::viz::{self, FeatureSource};
use stoken::Error;

#[derive(Parser)]
#[command(name = "stoken", version, about = "Super token attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-component parameter and MAC counts.
    Flops(FlopsArgs),
    /// Run the numerical self-check suites.
    Verify {
        /// oracle, gradcheck, invariants or all.
        #[arg(long, value_parser = parse_suite)]
        suite: Suite,
    },
    /// Write a synthetic classification dataset.
    GenData(GenDataArgs),
    /// Export one dataset sample as a PPM image.
    ExportImage {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes best.stwt, metrics.log and config.txt.
    Train {
        /// Architecture and optimizer keys (`key = value`).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Optional evaluation split.
        #[arg(long)]
        held_out: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify one PPM image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Defaults to config.txt beside the checkpoint, then the tiny preset.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Super-token segmentation (PPM) and anchor-attention heatmap (PGM).
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// 1-based stage index.
        #[arg(long, default_value_t = 1)]
        stage: usize,
        /// Anchor pixel `y,x`; defaults to the image center.
        #[arg(long, value_parser = parse_anchor)]
        anchor: Option<(usize, usize)>,
        /// `model` (the stage's attention input) or `pixels` (raw colors).
        #[arg(long, default_value = "model", value_parser = parse_features)]
        features: FeatureSource,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ArchSource {
    /// svit-s, svit-b, svit-l or tiny.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    #[command(flatten)]
    source: ArchSource,
    /// Input resolution; defaults to the architecture's own.
    #[arg(long)]
    res: Option<usize>,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 256)]
    per_class: usize,
    /// Square image side.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// quadrant-blobs or striped-textures.
    #[arg(long, default_value = "quadrant-blobs", value_parser = parse_kind)]
    kind: GeneratorKind,
    /// Draw from the held-out stream derived from `seed` instead.
    #[arg(long)]
    held_out: bool,
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_features(s: &str) -> Result<FeatureSource, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<GeneratorKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_anchor(s: &str) -> Result<(usize, usize), String> {
    let (y, x) = s.split_once(',').ok_or("expected `y,x`")?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("`{v}` is not a pixel index"));
    Ok((num(y)?, num(x)?))
}

enum Failure {
    Lib(Error),
    Verify(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Dimension(_) => 2,
        Error::Data { .. } | Error::Io { .. } => 3,
        Error::NonFinite { .. } | Error::Diverged { .. } => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Verify(summary)) => {
            eprintln!("verification failed: {summary}");
            ExitCode::from(4)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Flops(args) => flops(args)?,
        Command::Verify { suite } => {
            let checks = verify::run(suite)?;
            for c in &checks {
                println!("{c}");
            }
            let summary = verify::summary(&checks);
            println!("{summary}");
            if checks.iter().any(|c| !c.passed) {
                return Err(Failure::Verify(summary));
            }
        }
        Command::GenData(args) => gen_data(args)?,
        Command::ExportImage { data, index, out } => {
            let data = Dataset::read(&data)?;
            if index >= data.len() {
                return Err(Error::Usage(format!("index {index} outside 0..{}", data.len())).into());
            }
            let img = Image::new(data.width, data.height, data.channels, data.image(index).to_vec())?;
            img.write(&out)?;
            println!("label {}", data.labels[index]);
        }
        Command::Train { config, data, held_out, out } => train(config.as_deref(), &data, held_out.as_deref(), &out)?,
        Command::Infer { ckpt, image, config } => {
            let model = load_model(&ckpt, config.as_deref())?;
            let res = model.cfg.res;
            let img = rgb(Image::read(&image)?)?.resize_exact(res, res)?;
            let probs = model.predict(img.to_tensor())?;
            let probs = probs.data();
            let label = (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
            println!("label {label}");
            for (i, p) in probs.iter().enumerate() {
                println!("p[{i}] = {p:.6}");
            }
        }
        Command::Viz { ckpt, image, stage, anchor, features, config, out } => {
            let model = load_model(&ckpt, config.as_deref())?;
            let res = model.cfg.res;
            let img = rgb(Image::read(&image)?)?.resize_exact(res, res)?;
            if stage == 0 {
                return Err(Error::Usage("stages are numbered from 1".into()).into());
            }
            let anchor = anchor.unwrap_or((res / 2, res / 2));
            let v = viz::visualize(&model, &img, stage - 1, anchor, features)?;
            fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
            let seg = out.join(format!("segmentation_stage{stage}.ppm"));
            let heat = out.join(format!("heatmap_stage{stage}_{}_{}.pgm", anchor.0, anchor.1));
            v.segmentation.write(&seg)?;
            v.heatmap.write(&heat)?;
            println!(
                "stage {stage}: {}×{} tokens, {} of {} super tokens used",
                v.token_h,
                v.token_w,
                v.region_count(),
                v.m()
            );
            println!("wrote {}", seg.display());
            println!("wrote {}", heat.display());
        }
    }
    Ok(())
}

fn io_error(path: impl AsRef<Path>, source: std::io::Error) -> Error {
    Error::Io { path: path.as_ref().to_path_buf(), source }
}

fn rgb(img: Image) -> Result<Image, Error> {
    if img.channels != 3 {
        return Err(Error::Config("expected an RGB (P6) image".into()));
    }
    Ok(img)
}

fn flops(args: FlopsArgs) -> Result<(), Error> {
    let cfg = match (&args.source.arch, &args.source.config) {
        (Some(name), _) => ArchConfig::preset(name)?,
        (None, Some(path)) => ArchConfig::from_config(&ConfigFile::load(path)?)?,
        (None, None) => unreachable!("clap enforces one architecture source"),
    };
    let report = count_model(&cfg, args.res.unwrap_or(cfg.res))?;
    print!("{}", report.to_table());
    if let Some(path) = args.csv {
        fs::write(&path, report.to_csv()).map_err(|e| io_error(&path, e))?;
    }
    Ok(())
}

fn gen_data(args: GenDataArgs) -> Result<(), Error> {
    let mut spec = SyntheticDatasetSpec {
        n_classes: args.classes,
        height: args.size,
        width: args.size,
        per_class: args.per_class,
        seed: args.seed,
        kind: args.kind,
    };
    if args.held_out {
        spec = spec.held_out(args.per_class * args.classes);
    }
    let data = Dataset::generate(&spec)?;
    data.write(&args.out)?;
    println!(
        "{} {} samples, {} classes, {}×{} → {}",
        data.len(),
        spec.kind,
        spec.n_classes,
        spec.height,
        spec.width,
        args.out.display()
    );
    Ok(())
}

fn train(config: Option<&Path>, data: &Path, held_out: Option<&Path>, out: &Path) -> Result<(), Error> {
    let file = match config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let data = Dataset::read(data)?;
    let held_out = held_out.map(Dataset::read).transpose()?;
    let mut arch = ArchConfig::from_config(&file)?;
    if file.raw("n_classes").is_none() {
        arch.n_classes = data.n_classes;
    }
    if file.raw("res").is_none() {
        arch.res = data.height;
    }
    arch.validate()?;
    let opt = OptimizerConfig::from_config(&file)?;
    let mut model = Model::new(arch, opt.seed)?;
    let report = train_loop(&mut model, &data, held_out.as_ref(), &opt)?;

    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    write_checkpoint(&out.join("best.stwt"), &model.params)?;
    let log = out.join("metrics.log");
    fs::write(&log, report.metrics_log()).map_err(|e| io_error(&log, e))?;
    let cfg_path = out.join("config.txt");
    let clip = opt.clip.unwrap_or(0.0);
    let text = format!(
        "{}lr = {}\nwd = {}\nsteps = {}\nbatch = {}\nseed = {}\noptimizer = {}\nclip = {clip}\n",
        model.cfg.to_config_text(),
        opt.lr,
        opt.weight_decay,
        opt.steps,
        opt.batch,
        opt.seed,
        opt.kind
    );
    fs::write(&cfg_path, text).map_err(|e| io_error(&cfg_path, e))?;

    let last = report.records.last().map_or(f64::NAN, |r| r.loss);
    println!("final loss {last:.4}, best step {}", report.best_step);
    println!("train accuracy {:.4}", report.train_accuracy);
    if let Some(h) = report.held_out_accuracy {
        println!("held-out accuracy {h:.4}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn load_model(ckpt: &Path, config: Option<&Path>) -> Result<Model, Error> {
    let sibling = ckpt.parent().map(|d| d.join("config.txt"));
    let file = match (config, sibling) {
        (Some(p), _) => Some(ConfigFile::load(p)?),
        (None, Some(s)) if s.is_file() => Some(ConfigFile::load(&s)?),
        _ => None,
    };
    let tensors = read_checkpoint(ckpt)?;
    let mut cfg = match &file {
        Some(f) => ArchConfig::from_config(f)?,
        None => ArchConfig::preset("tiny")?,
    };
    if let Some((_, bias)) = tensors.iter().find(|(n, _)| n == "head.fc.bias") {
        cfg.n_classes = bias.len();
    }
    let mut model = Model::new(cfg, 0)?;
    model.params.load(tensors).map_err(|e| match e {
        Error::Config(msg) | Error::Dimension(msg) => Error::Config(format!(
            "checkpoint does not fit the architecture ({msg}); known presets: {}",
            PRESETS.join(", ")
        )),
        other => other,
    })?;
    Ok(model)
}
