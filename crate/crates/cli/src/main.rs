//! `mifmatch`: train, match, evaluate and ablate from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 pipeline error.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mifmatch::autodiff::ParamStore;
use mifmatch::evaluation::{
    plots, run_benchmark, write_corpus, BenchmarkConfig, MatcherChoice, Protocol, PseudoModality, REPORT_SCHEMA,
};
use mifmatch::features::Image;
use mifmatch::geometry::{estimate_homography, Homography, RansacConfig};
use mifmatch::matcher::{extract_matches, knn_ratio_match, Match, DEFAULT_KNN_RATIO};
use mifmatch::model::{describe_image, FeatureConfig, MifNet};
use mifmatch::training::{load_model, sample_rng, train, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "mifmatch", version, about = "Modality-invariant keypoint matching and registration")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network on single images from a manifest.
    Train(TrainArgs),
    /// Match one image pair and estimate the homography between them.
    Match(MatchArgs),
    /// Run a registration benchmark over a manifest.
    Evaluate(EvaluateArgs),
    /// Train and evaluate once per value of one hyperparameter.
    Ablate(AblateArgs),
    /// Write a procedural image corpus with its manifest.
    Corpus(CorpusArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed; overrides the config file.
    #[arg(long, env = "MIFMATCH_SEED")]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Config overrides as dotted key=value pairs.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Continue from a checkpoint, restoring optimiser state.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct MatchArgs {
    image_a: PathBuf,
    image_b: PathBuf,
    #[arg(long, required_unless_present = "base_only", conflicts_with = "base_only")]
    checkpoint: Option<PathBuf>,
    /// Match base descriptors with the ratio test instead of the network.
    #[arg(long)]
    base_only: bool,
    /// Extract matches from the dual-softmax assignment instead of the
    /// ratio test on network descriptors.
    #[arg(long, conflicts_with = "base_only")]
    assignment: bool,
    /// Writes `<prefix>.json` and `<prefix>.png`.
    #[arg(long)]
    out_prefix: PathBuf,
    #[arg(long, env = "MIFMATCH_SEED")]
    seed: Option<u64>,
    #[arg(long, default_value_t = 512)]
    max_keypoints: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProtocolArg {
    Retinal,
    Remote,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MatcherArg {
    /// Ratio-test nearest neighbours on the network descriptors.
    Mif,
    /// Mutual-argmax extraction from the dual-softmax assignment.
    MifAssignment,
    /// Ratio-test nearest neighbours on the base descriptors.
    BaseKnn,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModalityArg {
    None,
    InvertGamma,
    BlurNoise,
}

#[derive(Args, Debug)]
struct EvalFlags {
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    #[arg(long, value_enum)]
    matcher: Option<MatcherArg>,
    #[arg(long, value_enum)]
    pseudo_modality: Option<ModalityArg>,
    /// Symmetric rotation range in degrees for synthetic pairs.
    #[arg(long)]
    rotation_range: Option<f64>,
    /// Comma-separated RMSE thresholds for the SRR sweep.
    #[arg(long, value_delimiter = ',')]
    rmse_thresholds: Option<Vec<f64>>,
    /// Resize synthetic-pair images to this square size.
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    flags: EvalFlags,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    plots: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Axis {
    Lambda,
    K,
    Layers,
    Rotation,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long, value_enum)]
    axis: Axis,
    /// Comma-separated values to sweep.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Training manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Evaluation manifest.
    #[arg(long)]
    eval_manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON benchmark config for the evaluation half.
    #[arg(long)]
    eval_config: Option<PathBuf>,
    #[command(flatten)]
    flags: EvalFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct CorpusArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, env = "MIFMATCH_SEED", default_value_t = 0)]
    seed: u64,
}

/// Failure split by exit code.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<mifmatch::Error> for Failure {
    fn from(e: mifmatch::Error) -> Self {
        match e {
            mifmatch::Error::Config(_) | mifmatch::Error::CheckpointNotFound(_) => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

fn usage(e: anyhow::Error) -> Failure {
    Failure::Usage(e)
}

fn runtime(e: anyhow::Error) -> Failure {
    Failure::Runtime(e)
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Match(a) => cmd_match(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Corpus(a) => cmd_corpus(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, Failure> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| runtime(anyhow!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn train_config(common: &Common) -> Result<TrainConfig, Failure> {
    let mut cfg: TrainConfig = config::load(common.config.as_deref(), &common.overrides).map_err(usage)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg = train_config(&a.common)?;
    let outcome = with_pool(a.common.jobs, || train(&a.manifest, &cfg, &a.out_dir, a.resume.as_deref()))??;
    log::info!(
        "trained {} steps, final loss {:.6}, checkpoint {}",
        outcome.steps,
        outcome.final_loss,
        outcome.checkpoint.display()
    );
    println!("{}", outcome.checkpoint.display());
    Ok(())
}

fn load_net(path: &Path) -> Result<(MifNet, ParamStore, TrainConfig), Failure> {
    let (net, store, meta) = load_model(path)?;
    Ok((net, store, meta.config))
}

fn cmd_match(a: MatchArgs) -> CmdResult {
    let net = a.checkpoint.as_deref().map(load_net).transpose()?;
    let features = match &net {
        Some((_, _, cfg)) => cfg.features.clone(),
        None => FeatureConfig {
            max_keypoints: a.max_keypoints,
            ..Default::default()
        },
    };
    let image_a = Image::load(&a.image_a)?;
    let image_b = Image::load(&a.image_b)?;
    let fa = describe_image(&image_a, &features)?;
    let fb = describe_image(&image_b, &features)?;
    let matches: Vec<Match> = match &net {
        Some((model, store, _)) => {
            let pred = model.predict(store, &fa, &fb)?;
            if a.assignment {
                extract_matches(
                    &pred.p,
                    &pred.sigma_a,
                    &pred.sigma_b,
                    mifmatch::matcher::DEFAULT_P_THRESHOLD,
                    mifmatch::matcher::DEFAULT_SIGMA_FLOOR,
                )
            } else {
                knn_ratio_match(&pred.descriptors_a, &pred.descriptors_b, DEFAULT_KNN_RATIO)?
            }
        }
        None => knn_ratio_match(&fa.base, &fb.base, DEFAULT_KNN_RATIO)?,
    };
    let pts: Vec<_> = matches.iter().map(|m| (fa.kpts.coords[m.i], fb.kpts.coords[m.j])).collect();
    let mut rng = sample_rng(a.seed.unwrap_or(0), 0, 0);
    let estimate = estimate_homography(&pts, &RansacConfig::default(), &mut rng);

    let out_json = a.out_prefix.with_extension("json");
    let out_png = a.out_prefix.with_extension("png");
    if let Some(dir) = out_json.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(runtime)?;
    }
    let (h, inliers): (Option<Homography>, Vec<bool>) = match &estimate {
        Ok((h, m)) => (Some(h.clone()), m.clone()),
        Err(_) => (None, vec![false; matches.len()]),
    };
    let doc = json!({
        "schema": REPORT_SCHEMA,
        "image_a": a.image_a,
        "image_b": a.image_b,
        "matcher": match (&net, a.assignment) {
            (None, _) => "base_knn",
            (Some(_), false) => "mif",
            (Some(_), true) => "mif_assignment",
        },
        "n_keypoints_a": fa.len(),
        "n_keypoints_b": fb.len(),
        "keypoints_a": fa.kpts.coords,
        "keypoints_b": fb.kpts.coords,
        "matches": matches,
        "inliers": inliers,
        "homography": h,
    });
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| runtime(e.into()))?;
    text.push('\n');
    fs::write(&out_json, text)
        .with_context(|| format!("writing {}", out_json.display()))
        .map_err(runtime)?;
    let classes: Vec<plots::LineClass> = inliers
        .iter()
        .map(|&ok| if ok { plots::LineClass::Correct } else { plots::LineClass::Wrong })
        .collect();
    plots::write_match_plot(&out_png, &image_a, &image_b, &pts, &classes)?;
    estimate?;
    println!("{}", out_json.display());
    Ok(())
}

fn bench_config(common: &Common, file: Option<&Path>, flags: &EvalFlags) -> Result<BenchmarkConfig, Failure> {
    let mut cfg: BenchmarkConfig = config::load(file, &common.overrides).map_err(usage)?;
    if let Some(p) = flags.protocol {
        cfg.protocol = match p {
            ProtocolArg::Retinal => Protocol::Retinal,
            ProtocolArg::Remote => Protocol::Remote,
        };
    }
    if let Some(m) = flags.matcher {
        cfg.matcher = match m {
            MatcherArg::Mif => MatcherChoice::Mif,
            MatcherArg::MifAssignment => MatcherChoice::MifAssignment,
            MatcherArg::BaseKnn => MatcherChoice::BaseKnn,
        };
    }
    if let Some(m) = flags.pseudo_modality {
        cfg.pseudo_modality = match m {
            ModalityArg::None => PseudoModality::None,
            ModalityArg::InvertGamma => PseudoModality::InvertGamma,
            ModalityArg::BlurNoise => PseudoModality::BlurNoise,
        };
    }
    if let Some(r) = flags.rotation_range {
        cfg = cfg.with_rotation_range(r);
    }
    if let Some(t) = &flags.rmse_thresholds {
        cfg.rmse_thresholds = t.clone();
    }
    if flags.image_size.is_some() {
        cfg.image_size = flags.image_size;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.jobs = common.jobs;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_evaluate(a: EvaluateArgs) -> CmdResult {
    let mut cfg = bench_config(&a.common, a.common.config.as_deref(), &a.flags)?;
    cfg.plots = a.plots.clone();
    if a.checkpoint.is_some() && a.flags.matcher.is_none() {
        cfg.matcher = MatcherChoice::Mif;
    }
    let net = a.checkpoint.as_deref().map(load_net).transpose()?;
    if let Some((_, _, train_cfg)) = &net {
        if cfg.matcher.needs_model() {
            cfg.features = train_cfg.features.clone();
        }
    }
    let report = run_benchmark(net.as_ref().map(|(m, s, _)| (m, s)), &a.manifest, &cfg)?;
    report.write(&a.out)?;
    println!(
        "srr {:.4} ms {:.4} pairs {} failed {}",
        report.aggregate.srr, report.aggregate.ms, report.aggregate.n_pairs, report.aggregate.n_failed
    );
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CmdResult {
    let train_cfg = train_config(&a.common)?;
    let mut bench = bench_config(
        &Common {
            config: None,
            seed: a.common.seed,
            jobs: a.common.jobs,
            overrides: Vec::new(),
        },
        a.eval_config.as_deref(),
        &a.flags,
    )?;
    bench.matcher = MatcherChoice::Mif;
    bench.features = train_cfg.features.clone();
    fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))
        .map_err(runtime)?;

    let axis_name = format!("{:?}", a.axis).to_lowercase();
    let mut rows = vec!["value,srr,rmse,ms".to_string()];
    let mut curve = Vec::new();
    let mut shared_checkpoint: Option<PathBuf> = None;
    for &value in &a.values {
        let run_dir = a.out_dir.join(format!("{axis_name}_{value}"));
        let mut cfg = train_cfg.clone();
        let mut eval = bench.clone();
        match a.axis {
            Axis::Lambda => cfg.lambda_lfa = value,
            Axis::K => cfg.gmm_k = value.round().max(1.0) as usize,
            Axis::Layers => cfg.layers = value.round().max(1.0) as usize,
            Axis::Rotation => eval = eval.with_rotation_range(value),
        }
        let outcome = (|| -> Result<(f64, Option<f64>, f64), Failure> {
            cfg.validate()?;
            eval.validate()?;
            let checkpoint = match (&a.axis, &shared_checkpoint) {
                (Axis::Rotation, Some(p)) => p.clone(),
                _ => {
                    let dir = if a.axis == Axis::Rotation { a.out_dir.join("model") } else { run_dir.clone() };
                    let out = with_pool(a.common.jobs, || train(&a.manifest, &cfg, &dir, None))??;
                    out.checkpoint
                }
            };
            if a.axis == Axis::Rotation {
                shared_checkpoint = Some(checkpoint.clone());
            }
            let (net, store, _) = load_net(&checkpoint)?;
            let report = run_benchmark(Some((&net, &store)), &a.eval_manifest, &eval)?;
            fs::create_dir_all(&run_dir).map_err(|e| runtime(e.into()))?;
            report.write(&run_dir.join("report.json"))?;
            Ok((report.aggregate.srr, report.aggregate.mean_rmse, report.aggregate.ms))
        })();
        match outcome {
            Ok((srr, rmse, ms)) => {
                let rmse = rmse.map(|r| r.to_string()).unwrap_or_default();
                rows.push(format!("{value},{srr},{rmse},{ms}"));
                curve.push((value, srr));
            }
            Err(Failure::Usage(e)) => return Err(Failure::Usage(e)),
            Err(Failure::Runtime(e)) => {
                log::warn!("{axis_name}={value}: {e:#}");
                rows.push(format!("{value},,,"));
            }
        }
    }
    let csv = a.out_dir.join(format!("ablate_{axis_name}.csv"));
    fs::write(&csv, rows.join("\n") + "\n")
        .with_context(|| format!("writing {}", csv.display()))
        .map_err(runtime)?;
    plots::write_curve(&a.out_dir.join(format!("ablate_{axis_name}.png")), &curve)?;
    println!("{}", csv.display());
    Ok(())
}

fn cmd_corpus(a: CorpusArgs) -> CmdResult {
    if a.size < 32 {
        return Err(usage(anyhow!("corpus images must be at least 32 pixels")));
    }
    let manifest = write_corpus(&a.out_dir, a.count, a.size, a.seed)?;
    println!("{}", manifest.display());
    Ok(())
}
