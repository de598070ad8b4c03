//! Command-line entry point: inference on RGB/depth pairs, forward-pass
//! latency measurement, boundary-alignment depth-quality analysis, and
//! weight-file tooling.
//!
//! Exit codes: 2 for I/O and image errors, 3 for weight-store problems,
//! 4 for shape and argument violations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dfmnet::error::Error;
use dfmnet::image_io::{load_depth, load_gray_raw, load_rgb, load_rgb_raw, normalize_depth, normalize_rgb, save_map};
use dfmnet::metrics::{mae, max_fmeasure};
use dfmnet::model::{
    param_stats, DepthBackbone, DfmNet, Gating, ModelConfig, ParamStats, INPUT_SIZE,
};
use dfmnet::nn::set_threads;
use dfmnet::quality::{boundary_alignment, corpus_alignment};
use dfmnet::tensor::{Shape, Tensor};
use dfmnet::weights::{init_random, uniform_f32, ModelWeights};
use dfmnet::Result;

#[derive(Parser)]
#[command(
    name = "dfmnet",
    version,
    about = "CPU inference and analysis toolkit for dual-stream RGB-D salient object detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run inference on one RGB/depth pair and write the saliency map.
    Infer(InferArgs),
    /// Measure forward-pass latency on synthetic inputs.
    Bench(BenchArgs),
    /// Score how well depth discontinuities track image edges.
    Quality(QualityArgs),
    /// Write a seeded random weight file for the chosen configuration.
    InitWeights(InitWeightsArgs),
    /// Validate a weight file and print parameter statistics.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GatingArg {
    /// One gate per hierarchy.
    Multiple,
    /// A single gate shared by all hierarchies.
    Identical,
}

#[derive(Clone, Copy, ValueEnum)]
enum DepthBackboneArg {
    /// Tailored depth backbone.
    Tdb,
    /// MobileNet-v2-style depth branch (ablation).
    MobilenetLike,
}

#[derive(Args)]
struct ConfigArgs {
    /// Disable depth-quality gating; alpha becomes 1.
    #[arg(long)]
    no_dqw: bool,
    /// Disable depth holistic attention; beta becomes 1.
    #[arg(long)]
    no_dha: bool,
    /// DHA recalibration passes, 0 to 3. Changes the expected weight set.
    #[arg(long, default_value_t = 2)]
    dha_recalib: usize,
    #[arg(long, value_enum, default_value_t = GatingArg::Multiple)]
    gating: GatingArg,
    #[arg(long, value_enum, default_value_t = DepthBackboneArg::Tdb)]
    depth_backbone: DepthBackboneArg,
}

impl ConfigArgs {
    fn to_config(&self) -> ModelConfig {
        ModelConfig {
            use_dqw: !self.no_dqw,
            use_dha: !self.no_dha,
            recalib_times: self.dha_recalib,
            gating: match self.gating {
                GatingArg::Multiple => Gating::Multiple,
                GatingArg::Identical => Gating::Identical,
            },
            depth_backbone: match self.depth_backbone {
                DepthBackboneArg::Tdb => DepthBackbone::Tdb,
                DepthBackboneArg::MobilenetLike => DepthBackbone::MobilenetLike,
            },
        }
    }
}

#[derive(Args)]
struct InferArgs {
    /// RGB input image.
    #[arg(long)]
    rgb: PathBuf,
    /// Depth map (8- or 16-bit grayscale).
    #[arg(long)]
    depth: PathBuf,
    /// Weight file to load.
    #[arg(long)]
    weights: PathBuf,
    /// Where to write the saliency map (PNG).
    #[arg(long)]
    out: PathBuf,
    /// Also write the auxiliary depth-stream map.
    #[arg(long)]
    save_coarse: Option<PathBuf>,
    /// Also write the alpha gates as JSON.
    #[arg(long)]
    save_alpha: Option<PathBuf>,
    /// Also write the beta attention maps into this directory.
    #[arg(long)]
    save_beta: Option<PathBuf>,
    /// Treat smaller depth values as farther away.
    #[arg(long)]
    invert_depth: bool,
    /// Ground-truth mask; prints MAE and max F-measure as JSON.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Weight file; omitted means seeded random weights.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Seed for random weights and the synthetic input pair.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct QualityArgs {
    /// Single-pair mode: RGB image (requires --depth).
    #[arg(long, requires = "depth")]
    rgb: Option<PathBuf>,
    /// Single-pair mode: depth map.
    #[arg(long, requires = "rgb")]
    depth: Option<PathBuf>,
    /// Corpus mode: directory of RGB images matched to --depth-dir by
    /// file stem.
    #[arg(long, requires = "depth_dir", conflicts_with = "rgb")]
    rgb_dir: Option<PathBuf>,
    /// Corpus mode: directory of depth maps.
    #[arg(long, requires = "rgb_dir", conflicts_with = "depth")]
    depth_dir: Option<PathBuf>,
    /// Edge binarization threshold.
    #[arg(long, default_value_t = 0.1)]
    threshold: f32,
    /// Seed for the deranged (mismatched) pairing in corpus mode.
    #[arg(long, default_value_t = 0)]
    mismatch_seed: u64,
}

#[derive(Args)]
struct InitWeightsArgs {
    /// Where to write the weight file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct InspectArgs {
    /// Weight file to validate.
    #[arg(long)]
    weights: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Image { .. } => 2,
        Error::BadMagic
        | Error::UnsupportedVersion(_)
        | Error::WeightShape { .. }
        | Error::TruncatedPayload(_)
        | Error::WeightNonFinite { .. }
        | Error::MissingEntry(_)
        | Error::UnexpectedEntry(_)
        | Error::WeightStore(_) => 3,
        _ => 4,
    }
}

fn print_json<T: Serialize>(value: &T) {
    use std::io::Write;
    let body = serde_json::to_string_pretty(value).expect("serializable report");
    // Ignore write errors (for example a closed pipe downstream).
    let _ = writeln!(std::io::stdout(), "{body}");
}

fn load_model(path: &Path, cfg: ModelConfig) -> Result<DfmNet> {
    let store = ModelWeights::load_from_path(path)?;
    store.validate(&DfmNet::manifest(&cfg)?)?;
    DfmNet::from_weights(&store, cfg)
}

fn run_infer(args: InferArgs) -> Result<()> {
    set_threads(args.threads);
    let net = load_model(&args.weights, args.config.to_config())?;
    let rgb = load_rgb(&args.rgb, INPUT_SIZE)?;
    let depth = load_depth(&args.depth, INPUT_SIZE, args.invert_depth)?;
    let out = net.forward(&rgb, &depth)?;
    save_map(&out.s_c, &args.out)?;
    if let Some(path) = &args.save_coarse {
        save_map(&out.s_d, path)?;
    }
    if let Some(path) = &args.save_alpha {
        #[derive(Serialize)]
        struct AlphaOut {
            alpha: [f32; 5],
        }
        let body = serde_json::to_string_pretty(&AlphaOut {
            alpha: out.gates.alpha,
        })
        .expect("serializable gates");
        std::fs::write(path, body)?;
    }
    if let Some(dir) = &args.save_beta {
        std::fs::create_dir_all(dir)?;
        for (i, beta) in out.gates.betas.iter().enumerate() {
            save_map(beta, &dir.join(format!("beta_h{}.png", i + 1)))?;
        }
    }
    if let Some(gt_path) = &args.gt {
        let gt = load_gray_raw(gt_path, INPUT_SIZE)?;
        #[derive(Serialize)]
        struct EvalOut {
            mae: f64,
            max_f: f64,
        }
        print_json(&EvalOut {
            mae: mae(&out.s_c, &gt)?,
            max_f: max_fmeasure(&out.s_c, &gt)?,
        });
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    timed_region: &'static str,
    batch: usize,
    threads: usize,
    warmup: usize,
    runs: usize,
    mean_ms: f64,
    stddev_ms: f64,
    min_ms: f64,
    max_ms: f64,
    /// Latency the architecture targets on a modern desktop CPU core.
    reference_ms: f64,
    soft_budget_ms: f64,
    within_soft_budget: bool,
    params: ParamStats,
}

fn run_bench(args: BenchArgs) -> Result<()> {
    if args.runs == 0 {
        return Err(Error::InvalidArgument("--runs must be positive".into()));
    }
    set_threads(args.threads);
    let cfg = args.config.to_config();
    let net = match &args.weights {
        Some(path) => load_model(path, cfg)?,
        None => DfmNet::init_random(cfg, args.seed)?,
    };
    let mut state = args.seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let shape_rgb = Shape::new(1, 3, INPUT_SIZE, INPUT_SIZE);
    let shape_depth = Shape::new(1, 1, INPUT_SIZE, INPUT_SIZE);
    let raw_rgb = Tensor::from_fn(shape_rgb, |_, _, _, _| uniform_f32(&mut state, 0.0, 1.0))?;
    let raw_depth = Tensor::from_fn(shape_depth, |_, _, _, _| uniform_f32(&mut state, 0.0, 1.0))?;
    let rgb = normalize_rgb(&raw_rgb)?;
    let depth = normalize_depth(&raw_depth, false)?;

    for _ in 0..args.warmup {
        net.forward(&rgb, &depth)?;
    }
    let mut samples_ms = Vec::with_capacity(args.runs);
    for _ in 0..args.runs {
        let start = Instant::now();
        net.forward(&rgb, &depth)?;
        samples_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let n = samples_ms.len() as f64;
    let mean = samples_ms.iter().sum::<f64>() / n;
    let var = samples_ms.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    let min = samples_ms.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = samples_ms.iter().cloned().fold(0.0, f64::max);
    let soft_budget_ms = 500.0;
    print_json(&BenchReport {
        timed_region: "forward pass only; image decode, preprocessing, and encode excluded",
        batch: 1,
        threads: args.threads,
        warmup: args.warmup,
        runs: args.runs,
        mean_ms: mean,
        stddev_ms: var.sqrt(),
        min_ms: min,
        max_ms: max,
        reference_ms: 140.0,
        soft_budget_ms,
        within_soft_budget: mean <= soft_budget_ms,
        params: param_stats(&DfmNet::manifest(&cfg)?),
    });
    Ok(())
}

/// Maps file stems to paths for every regular file in a directory.
fn stem_index(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut map = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        let stem = match path.file_stem().and_then(|s| s.to_str()) {
            Some(s) => s.to_string(),
            None => continue,
        };
        if let Some(previous) = map.insert(stem.clone(), path.clone()) {
            return Err(Error::Image {
                path: path.display().to_string(),
                reason: format!("stem '{stem}' also matches {}", previous.display()),
            });
        }
    }
    Ok(map)
}

fn run_quality(args: QualityArgs) -> Result<()> {
    match (&args.rgb, &args.depth, &args.rgb_dir, &args.depth_dir) {
        (Some(rgb), Some(depth), None, None) => {
            let rgb = load_rgb_raw(rgb, INPUT_SIZE)?;
            let depth = load_gray_raw(depth, INPUT_SIZE)?;
            print_json(&boundary_alignment(&rgb, &depth, args.threshold)?);
            Ok(())
        }
        (None, None, Some(rgb_dir), Some(depth_dir)) => {
            let rgbs = stem_index(rgb_dir)?;
            let depths = stem_index(depth_dir)?;
            for stem in rgbs.keys() {
                if !depths.contains_key(stem) {
                    return Err(Error::Image {
                        path: rgbs[stem].display().to_string(),
                        reason: format!("no depth map with stem '{stem}' in {}", depth_dir.display()),
                    });
                }
            }
            for stem in depths.keys() {
                if !rgbs.contains_key(stem) {
                    return Err(Error::Image {
                        path: depths[stem].display().to_string(),
                        reason: format!("no rgb image with stem '{stem}' in {}", rgb_dir.display()),
                    });
                }
            }
            let mut rgb_tensors = Vec::with_capacity(rgbs.len());
            let mut depth_tensors = Vec::with_capacity(depths.len());
            for (stem, path) in &rgbs {
                rgb_tensors.push(load_rgb_raw(path, INPUT_SIZE)?);
                depth_tensors.push(load_gray_raw(&depths[stem], INPUT_SIZE)?);
            }
            print_json(&corpus_alignment(
                &rgb_tensors,
                &depth_tensors,
                args.threshold,
                args.mismatch_seed,
            )?);
            Ok(())
        }
        _ => Err(Error::InvalidArgument(
            "pass either --rgb with --depth, or --rgb-dir with --depth-dir".into(),
        )),
    }
}

fn run_init_weights(args: InitWeightsArgs) -> Result<()> {
    let manifest = DfmNet::manifest(&args.config.to_config())?;
    let store = init_random(&manifest, args.seed);
    let bytes = store.save_to_path(&args.out)?;
    #[derive(Serialize)]
    struct InitReport {
        path: String,
        bytes: u64,
        entries: usize,
        seed: u64,
    }
    print_json(&InitReport {
        path: args.out.display().to_string(),
        bytes,
        entries: store.len(),
        seed: args.seed,
    });
    Ok(())
}

fn run_inspect(args: InspectArgs) -> Result<()> {
    let store = ModelWeights::load_from_path(&args.weights)?;
    let manifest = DfmNet::manifest(&args.config.to_config())?;
    store.validate(&manifest)?;
    #[derive(Serialize)]
    struct InspectReport {
        file: String,
        file_bytes: u64,
        entries: usize,
        params: ParamStats,
    }
    print_json(&InspectReport {
        file: args.weights.display().to_string(),
        file_bytes: std::fs::metadata(&args.weights)?.len(),
        entries: store.len(),
        params: param_stats(&manifest),
    });
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Infer(args) => run_infer(args),
        Command::Bench(args) => run_bench(args),
        Command::Quality(args) => run_quality(args),
        Command::InitWeights(args) => run_init_weights(args),
        Command::Inspect(args) => run_inspect(args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
