use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use bbsnet::bench::{self, BenchConfig, Corpus};
use bbsnet::config::Config;
use bbsnet::data_io::{self, LoadOptions, SaliencyMap, Stage};
use bbsnet::metrics::{self, EvalOptions};
use bbsnet::model::{BbsNet, ModelConfig, VariantTag};
use bbsnet::postproc::{self, Method};
use bbsnet::synth::{self, DepthMode, Style, SynthConfig};
use bbsnet::trainer::{self, TrainConfig};

/// Exit status for malformed invocations: bad flags, unknown variants or
/// config keys, missing inputs.
const EXIT_USAGE: u8 = 2;
/// Exit status for failures after the inputs were accepted.
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "bbsnet", version, about = "Bifurcated-backbone RGB-D salient object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a CSV log.
    Train(TrainArgs),
    /// Predict saliency maps for every RGB/depth pair in a directory.
    Infer(InferArgs),
    /// Score saved maps against ground-truth masks.
    Eval(EvalArgs),
    /// Binarize saved maps with the adaptive or Otsu threshold.
    Postproc(PostprocArgs),
    /// Train-on-one, test-on-all cross-dataset grid.
    Generalize(GeneralizeArgs),
    /// Build each ablation variant and run a few training steps.
    Ablate(AblateArgs),
    /// Write a procedurally generated RGB-D corpus to disk.
    Synth(SynthArgs),
    /// Print every configuration key with its default value.
    Config,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `section.key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Variant tag, e.g. BBS_RL, Low3, Efficient.
    #[arg(long)]
    variant: Option<String>,
    /// Output directory for checkpoints, log and final model.
    #[arg(long)]
    out: PathBuf,
    /// Extra `key=value` overrides applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory with `RGB/` and `depth/` (and optionally `GT/`).
    #[arg(long)]
    input_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Network input side; defaults to the side the checkpoint was trained at.
    #[arg(long)]
    side: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    gt_dir: PathBuf,
    /// Directory for `metrics.json`, `metrics.csv` and `curves.csv`;
    /// the JSON report goes to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip per-image min-max normalisation of the predictions.
    #[arg(long)]
    no_normalize: bool,
    #[arg(long, default_value_t = metrics::DEFAULT_SMEASURE_ALPHA)]
    smeasure_alpha: f64,
}

#[derive(Args)]
struct PostprocArgs {
    /// `adp` or `otsu`.
    #[arg(long)]
    method: String,
    #[arg(long)]
    input_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GeneralizeArgs {
    /// Use two generated corpora with different styles.
    #[arg(long)]
    toy: bool,
    /// On-disk dataset as `NAME=ROOT`; repeat for each column.
    #[arg(long = "dataset", value_name = "NAME=ROOT")]
    datasets: Vec<String>,
    /// Training images drawn from each dataset.
    #[arg(long, default_value_t = 16)]
    train_count: usize,
    /// Images generated per toy corpus.
    #[arg(long, default_value_t = 48)]
    toy_size: usize,
    #[arg(long, default_value_t = 32)]
    side: usize,
    #[arg(long, default_value_t = 300)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "generalize")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Run every variant tag.
    #[arg(long)]
    all: bool,
    #[arg(long = "variant")]
    variants: Vec<String>,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    side: usize,
    /// Optional CSV with one row per variant.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// `a` or `b`.
    #[arg(long, default_value = "a")]
    style: String,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    side: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace the depth map by noise.
    #[arg(long)]
    random_depth: bool,
    /// Give the salient object the distractor colours.
    #[arg(long)]
    no_rgb_cue: bool,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type CmdResult = Result<(), Failure>;

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

/// Library errors caused by what the user typed count as usage errors.
fn classify(e: bbsnet::Error) -> Failure {
    match e {
        bbsnet::Error::UnknownConfigKey(_)
        | bbsnet::Error::ConfigValue { .. }
        | bbsnet::Error::InvalidArgument(_) => usage(e),
        other => runtime(other),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Postproc(a) => postprocess(a),
        Command::Generalize(a) => generalize(a),
        Command::Ablate(a) => ablate(a),
        Command::Synth(a) => write_synth(a),
        Command::Config => {
            print!("{}", Config::default().to_text());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(runtime)
}

fn resolve_config(args: &TrainArgs) -> Result<Config, Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            if !path.is_file() {
                return Err(usage(anyhow!("config file {} not found", path.display())));
            }
            Config::load(path).map_err(classify)?
        }
        None => Config::default(),
    };
    cfg.apply_env(std::env::vars()).map_err(classify)?;
    if let Some(v) = &args.variant {
        cfg.set("model.variant", v).map_err(classify)?;
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(anyhow!("override `{kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim()).map_err(classify)?;
    }
    cfg.validate().map_err(classify)?;
    Ok(cfg)
}

fn training_samples(cfg: &Config) -> Result<Vec<data_io::RgbdSample>, Failure> {
    let d = &cfg.data;
    if d.synthetic {
        let style = match d.synth_style.to_ascii_lowercase().as_str() {
            "a" => Style::a(),
            "b" => Style::b(),
            other => return Err(usage(anyhow!("unknown synthetic style `{other}` (expected a or b)"))),
        };
        let mut sc = SynthConfig::new(style, d.synth_count, cfg.train.side, d.synth_seed);
        sc.depth_mode = d.synth_depth;
        sc.rgb_cue = d.synth_rgb_cue;
        return synth::generate(&sc).map_err(runtime);
    }
    let root = d
        .root
        .as_ref()
        .ok_or_else(|| usage(anyhow!("data.root is not set and data.synthetic is false")))?;
    if !root.is_dir() {
        return Err(usage(anyhow!("dataset root {} does not exist", root.display())));
    }
    let manifest = data_io::load_dataset(root, &d.name).map_err(usage)?;
    for id in &manifest.unmatched {
        log::warn!("unmatched file skipped: {id}");
    }
    let opts = LoadOptions {
        side: cfg.train.side,
        invert_depth: d.invert_depth,
    };
    manifest
        .entries
        .iter()
        .map(|e| data_io::load_sample(e, &opts))
        .collect::<bbsnet::Result<Vec<_>>>()
        .map_err(runtime)
}

fn train(args: TrainArgs) -> CmdResult {
    let cfg = resolve_config(&args)?;
    let samples = training_samples(&cfg)?;
    create_dir(&args.out)?;
    fs::write(args.out.join("config.txt"), cfg.to_text())
        .context("cannot write config.txt")
        .map_err(runtime)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.loss_alpha = cfg.train.loss_alpha;
    let net = BbsNet::new(model_cfg).map_err(classify)?;
    log::info!(
        "training {} ({} parameters) on {} samples",
        net.config().variant,
        net.num_parameters(),
        samples.len()
    );
    let started = Instant::now();
    let report = trainer::train(&net, &samples, &cfg.train, Some(&args.out)).map_err(runtime)?;
    let final_path = args.out.join("model.ckpt");
    net.save(&final_path, serde_json::json!({ "train": { "config": cfg.train } }))
        .map_err(runtime)?;
    let last = report.log.last();
    println!(
        "trained {} iterations over {} epochs in {:.1}s; last loss_s1 {:.4} loss_s2 {:.4}; model at {}",
        report.iters,
        report.epochs_completed,
        started.elapsed().as_secs_f64(),
        last.map_or(f64::NAN, |r| r.loss_s1),
        last.map_or(f64::NAN, |r| r.loss_s2),
        final_path.display()
    );
    Ok(())
}

/// Training settings recorded in checkpoint metadata, if any.
fn checkpoint_train_config(meta: &serde_json::Value) -> Option<TrainConfig> {
    let cfg = meta.get("train")?.get("config")?.clone();
    serde_json::from_value(cfg).ok()
}

fn infer(args: InferArgs) -> CmdResult {
    if !args.ckpt.is_file() {
        return Err(usage(anyhow!("checkpoint {} not found", args.ckpt.display())));
    }
    let pairs = data_io::scan_pairs(&args.input_dir).map_err(usage)?;
    let (net, meta) = BbsNet::load(&args.ckpt).map_err(runtime)?;
    let train_cfg = checkpoint_train_config(&meta);
    let side = args
        .side
        .or(train_cfg.as_ref().map(|c| c.side))
        .unwrap_or(data_io::DEFAULT_SIDE);
    let norm = train_cfg.map(|c| c.normalization).unwrap_or_default();
    create_dir(&args.out_dir)?;
    let opts = LoadOptions {
        side,
        invert_depth: false,
    };
    for pair in &pairs {
        let sample = pair.load(&opts).map_err(runtime)?;
        let (h, w) = pair.output_size().map_err(runtime)?;
        let map = net
            .predict(&[&sample], &norm)
            .map_err(runtime)?
            .pop()
            .expect("one map per sample");
        // upsample to the mask resolution, then rescale to [0, 1]
        let map = SaliencyMap::new(map, Stage::Final).resized(h, w).min_max_normalized();
        let path = args.out_dir.join(format!("{}.png", pair.id));
        data_io::save_saliency(&map, &path, None).map_err(runtime)?;
    }
    println!("wrote {} maps to {}", pairs.len(), args.out_dir.display());
    Ok(())
}

fn eval(args: EvalArgs) -> CmdResult {
    for dir in [&args.pred_dir, &args.gt_dir] {
        if !dir.is_dir() {
            return Err(usage(anyhow!("directory {} not found", dir.display())));
        }
    }
    let opts = EvalOptions {
        normalize: !args.no_normalize,
        smeasure_alpha: args.smeasure_alpha,
    };
    let result = metrics::evaluate_directories(&args.pred_dir, &args.gt_dir, &opts).map_err(runtime)?;
    for stem in &result.skipped {
        eprintln!("skipped (no counterpart): {stem}");
    }
    let json = result.report.to_json().map_err(runtime)?;
    match &args.out {
        Some(dir) => {
            create_dir(dir)?;
            fs::write(dir.join("metrics.json"), &json)
                .context("cannot write metrics.json")
                .map_err(runtime)?;
            result.report.write_summary_csv(dir.join("metrics.csv")).map_err(runtime)?;
            result.report.write_curves_csv(dir.join("curves.csv")).map_err(runtime)?;
            let r = &result.report;
            println!(
                "{} images: S {:.4}  maxF {:.4}  maxE {:.4}  MAE {:.4}",
                r.n_samples, r.s_alpha, r.max_f, r.max_e, r.mae
            );
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn postprocess(args: PostprocArgs) -> CmdResult {
    let method: Method = args.method.parse().map_err(classify)?;
    if !args.input_dir.is_dir() {
        return Err(usage(anyhow!("directory {} not found", args.input_dir.display())));
    }
    let mut inputs: Vec<PathBuf> = fs::read_dir(&args.input_dir)
        .and_then(|rd| rd.map(|e| e.map(|e| e.path())).collect())
        .with_context(|| format!("cannot list {}", args.input_dir.display()))
        .map_err(runtime)?;
    inputs.retain(|p| p.is_file());
    inputs.sort();
    create_dir(&args.out_dir)?;
    let mut elapsed = 0.0;
    let mut done = 0usize;
    for path in &inputs {
        let map = match data_io::read_saliency(path) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let started = Instant::now();
        let bin = postproc::apply(method, map.map.view());
        elapsed += started.elapsed().as_secs_f64();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("map");
        let out = SaliencyMap::new(bin.map, Stage::Final);
        data_io::save_saliency(&out, args.out_dir.join(format!("{stem}.png")), None).map_err(runtime)?;
        done += 1;
    }
    if done == 0 {
        return Err(usage(anyhow!("no readable maps in {}", args.input_dir.display())));
    }
    println!(
        "{done} maps binarised with {}; {:.3} ms/image",
        method.name(),
        1e3 * elapsed / done as f64
    );
    Ok(())
}

fn parse_dataset_arg(arg: &str) -> Result<(String, PathBuf), Failure> {
    let (name, root) = arg
        .split_once('=')
        .ok_or_else(|| usage(anyhow!("dataset `{arg}` is not NAME=ROOT")))?;
    Ok((name.to_string(), PathBuf::from(root)))
}

fn generalize(args: GeneralizeArgs) -> CmdResult {
    let corpora = if args.toy {
        bench::toy_corpora(args.toy_size, args.side, args.seed).map_err(runtime)?
    } else {
        if args.datasets.len() < 2 {
            return Err(usage(anyhow!("pass --toy or at least two --dataset NAME=ROOT")));
        }
        let opts = LoadOptions {
            side: args.side,
            invert_depth: false,
        };
        let mut corpora = Vec::new();
        for arg in &args.datasets {
            let (name, root) = parse_dataset_arg(arg)?;
            if !root.is_dir() {
                return Err(usage(anyhow!("dataset root {} does not exist", root.display())));
            }
            let manifest = data_io::load_dataset(&root, &name).map_err(usage)?;
            let samples = manifest
                .entries
                .iter()
                .map(|e| data_io::load_sample(e, &opts))
                .collect::<bbsnet::Result<Vec<_>>>()
                .map_err(runtime)?;
            corpora.push(Corpus { name, samples });
        }
        corpora
    };
    let cfg = BenchConfig {
        model: ModelConfig::default(),
        train: TrainConfig::toy(args.side, args.iters, args.seed),
        eval: EvalOptions::default(),
    };
    let specs = bench::single_dataset_specs(&corpora, args.train_count, args.seed);
    let grid = bench::run_grid(&corpora, &specs, &cfg).map_err(classify)?;
    create_dir(&args.out)?;
    grid.write_csv(args.out.join("grid.csv")).map_err(runtime)?;
    fs::write(args.out.join("grid.json"), grid.to_json().map_err(runtime)?)
        .context("cannot write grid.json")
        .map_err(runtime)?;
    print!("{grid}");
    println!("grid written to {}", args.out.join("grid.csv").display());
    Ok(())
}

fn ablate(args: AblateArgs) -> CmdResult {
    let tags: Vec<VariantTag> = if args.all {
        VariantTag::ALL.to_vec()
    } else if args.variants.is_empty() {
        return Err(usage(anyhow!("pass --all or at least one --variant")));
    } else {
        args.variants
            .iter()
            .map(|v| v.parse::<VariantTag>())
            .collect::<bbsnet::Result<_>>()
            .map_err(classify)?
    };
    let samples = synth::generate(&SynthConfig::new(Style::a(), 2, args.side, 0)).map_err(runtime)?;
    let mut tc = TrainConfig::toy(args.side, args.steps, 0);
    tc.batch = samples.len();
    let mut rows = Vec::new();
    println!("{:<12} {:>12} {:>10} {:>10} {:>9}", "variant", "parameters", "loss_s1", "loss_s2", "seconds");
    for tag in tags {
        let net = bbsnet::model::build_variant(tag, &ModelConfig::default()).map_err(classify)?;
        let started = Instant::now();
        let report = trainer::train(&net, &samples, &tc, None)
            .with_context(|| format!("variant {tag}"))
            .map_err(runtime)?;
        let secs = started.elapsed().as_secs_f64();
        let last = report.log.last().expect("at least one step");
        println!(
            "{:<12} {:>12} {:>10.4} {:>10.4} {:>9.2}",
            tag.name(),
            net.num_parameters(),
            last.loss_s1,
            last.loss_s2,
            secs
        );
        rows.push((tag, net.num_parameters(), last.loss_s1, last.loss_s2, secs));
    }
    if let Some(path) = &args.out {
        let mut w = csv::Writer::from_path(path)
            .with_context(|| format!("cannot write {}", path.display()))
            .map_err(runtime)?;
        w.write_record(["variant", "parameters", "loss_s1", "loss_s2", "seconds"])
            .map_err(runtime)?;
        for (tag, n, l1, l2, s) in rows {
            w.write_record([
                tag.name().to_string(),
                n.to_string(),
                l1.to_string(),
                l2.to_string(),
                s.to_string(),
            ])
            .map_err(runtime)?;
        }
        w.flush().map_err(runtime)?;
    }
    Ok(())
}

fn write_synth(args: SynthArgs) -> CmdResult {
    let style = match args.style.to_ascii_lowercase().as_str() {
        "a" => Style::a(),
        "b" => Style::b(),
        other => return Err(usage(anyhow!("unknown style `{other}` (expected a or b)"))),
    };
    let mut cfg = SynthConfig::new(style, args.count, args.side, args.seed);
    if args.random_depth {
        cfg.depth_mode = DepthMode::Random;
    }
    cfg.rgb_cue = !args.no_rgb_cue;
    synth::write_corpus(&cfg, &args.out).map_err(runtime)?;
    println!("wrote {} samples to {}", args.count, args.out.display());
    Ok(())
}
