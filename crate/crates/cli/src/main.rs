//! `tbn` — train, evaluate, validate, benchmark, and report on tiled bit
//! networks from the command line.
//!
//! Exit codes are pinned for scripting: 0 ok, 2 config error, 3 data
//! error, 4 model/validation error. Every error path prints a single
//! `error: ...` line to stderr.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use tbn_core::kernels::{
    self, binary_matmul_packed, tiled_matmul_fp, tiled_matmul_packed, PackedBitMatrix,
    TiledWeightHandle,
};
use tbn_core::layers::{Layer, LayerParams, Model};
use tbn_core::modelfile;
use tbn_core::tensor::{Shape, Tensor};
use tbn_core::tiling::{AlphaMode, AlphaSource};
use tbn_core::train::{self, MnistDataset, TrainConfig};
use tbn_core::{build_mlp, evaluate, ModelMode, TilingPolicy};

const SCHEMA_VERSION: u32 = 1;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_MODEL: u8 = 4;

#[derive(Parser)]
#[command(name = "tbn", version, about = "Tiled bit networks at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Dense,
    Bwnn,
    Tbn,
    TbnFp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AlphaArg {
    PerLayer,
    PerTile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AlphaSourceArg {
    /// Compute alphas from the tiling weights W.
    W,
    /// Learn a dedicated tensor A for alphas (W+A).
    Wa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum KernelArg {
    Dense,
    Alg1,
    TiledFp,
    Packed,
    TiledPacked,
}

impl KernelArg {
    fn name(&self) -> &'static str {
        match self {
            KernelArg::Dense => "dense",
            KernelArg::Alg1 => "alg1",
            KernelArg::TiledFp => "tiled-fp",
            KernelArg::Packed => "packed",
            KernelArg::TiledPacked => "tiled-packed",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on MNIST IDX files and write a .tbn model file.
    Train(TrainArgs),
    /// Evaluate a model file on the test split.
    Eval(EvalArgs),
    /// Compare every inference kernel against the materialized reference.
    Validate(ValidateArgs),
    /// Measure single-sample inference speed (FPS) per kernel.
    Bench(BenchArgs),
    /// Emit storage / memory / bit-ops accounting for a model file.
    Report(ReportArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Directory with MNIST IDX files (falls back to $TBN_DATA_DIR).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Layer sizes, e.g. 784,128,10 [default: 784,128,10]
    #[arg(long)]
    arch: Option<String>,
    /// Weight regime [default: tbn]
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Tiling compression factor [default: 4]
    #[arg(long)]
    p: Option<usize>,
    /// Minimum layer element count for tiling [default: 64000]
    #[arg(long)]
    lambda: Option<usize>,
    /// One alpha per layer or per tile [default: per-tile]
    #[arg(long, value_enum)]
    alpha: Option<AlphaArg>,
    /// Alpha source: w or wa [default: wa]
    #[arg(long, value_enum)]
    alpha_source: Option<AlphaSourceArg>,
    /// Training epochs [default: 10]
    #[arg(long)]
    epochs: Option<usize>,
    /// PRNG seed for init and shuffling [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Mini-batch size [default: 128]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f32>,
    /// Output model path [default: model.tbn]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stop once this test accuracy is reached.
    #[arg(long)]
    stop_at: Option<f32>,
    /// Use only the first N training samples.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Use only the first N test samples.
    #[arg(long)]
    test_limit: Option<usize>,
    /// key=value config file; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Evaluate on the training split instead of t10k.
    #[arg(long)]
    train_split: bool,
}

#[derive(clap::Args)]
struct ValidateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Random inputs per layer.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Max absolute deviation allowed against the dense reference.
    #[arg(long, default_value_t = 0.01)]
    tol: f32,
    /// Write the full report as JSON.
    #[arg(long)]
    out_json: Option<PathBuf>,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    /// Kernels to time (repeatable / comma-separated).
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = vec![KernelArg::Dense, KernelArg::Alg1])]
    kernel: Vec<KernelArg>,
    /// Single-sample inferences per run.
    #[arg(long, default_value_t = 1000)]
    inputs: usize,
    /// Timed runs (one extra warmup run is discarded).
    #[arg(long, default_value_t = 5)]
    runs: usize,
    /// Write results as CSV.
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ReportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Input activation dims for the memory report, e.g. 784 or 3,32,32.
    #[arg(long, default_value = "784")]
    input_dims: String,
    #[arg(long)]
    out_json: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Validate(args) => cmd_validate(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(code) => code,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.exit)
        }
    }
}

struct Failure {
    exit: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            exit: EXIT_CONFIG,
            message: message.into(),
        }
    }
    fn data(message: impl Into<String>) -> Self {
        Failure {
            exit: EXIT_DATA,
            message: message.into(),
        }
    }
    fn model(message: impl Into<String>) -> Self {
        Failure {
            exit: EXIT_MODEL,
            message: message.into(),
        }
    }
}

type CmdResult = Result<ExitCode, Failure>;

// ── Config file merging ────────────────────────────────────────────────

fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Failure::config(format!(
                "{}:{}: expected key=value, got {line:?}",
                path.display(),
                lineno + 1
            ))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn take<T: std::str::FromStr>(
    cfg: &mut BTreeMap<String, String>,
    key: &str,
) -> Result<Option<T>, Failure> {
    match cfg.remove(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse()
            .map(Some)
            .map_err(|_| Failure::config(format!("config key {key}: cannot parse {raw:?}"))),
    }
}

fn data_dir_or_env(flag: Option<PathBuf>) -> Result<PathBuf, Failure> {
    if let Some(dir) = flag {
        return Ok(dir);
    }
    if let Ok(env) = std::env::var("TBN_DATA_DIR") {
        if !env.is_empty() {
            return Ok(PathBuf::from(env));
        }
    }
    Err(Failure::config(
        "no --data-dir given and TBN_DATA_DIR is not set",
    ))
}

fn load_split(dir: &Path, stem: &str) -> Result<MnistDataset, Failure> {
    train::load_mnist_split(dir, stem).map_err(|e| Failure::data(e.to_string()))
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    modelfile::deserialize(path).map_err(|e| Failure::model(e.to_string()))
}

// ── train ──────────────────────────────────────────────────────────────

fn cmd_train(mut args: TrainArgs) -> CmdResult {
    let mut cfg = match &args.config {
        Some(path) => parse_config_file(path)?,
        None => BTreeMap::new(),
    };
    // Flags win over config; config wins over defaults.
    if args.data_dir.is_none() {
        args.data_dir = take(&mut cfg, "data-dir")?;
    }
    if args.arch.is_none() {
        args.arch = take(&mut cfg, "arch")?;
    }
    if args.mode.is_none() {
        args.mode = match cfg.remove("mode").as_deref() {
            None => None,
            Some("dense") => Some(ModeArg::Dense),
            Some("bwnn") => Some(ModeArg::Bwnn),
            Some("tbn") => Some(ModeArg::Tbn),
            Some("tbn-fp") => Some(ModeArg::TbnFp),
            Some(other) => return Err(Failure::config(format!("config mode: unknown {other:?}"))),
        };
    }
    if args.p.is_none() {
        args.p = take(&mut cfg, "p")?;
    }
    if args.lambda.is_none() {
        args.lambda = take(&mut cfg, "lambda")?;
    }
    if args.alpha.is_none() {
        args.alpha = match cfg.remove("alpha").as_deref() {
            None => None,
            Some("per-layer") => Some(AlphaArg::PerLayer),
            Some("per-tile") => Some(AlphaArg::PerTile),
            Some(other) => return Err(Failure::config(format!("config alpha: unknown {other:?}"))),
        };
    }
    if args.alpha_source.is_none() {
        args.alpha_source = match cfg.remove("alpha-source").as_deref() {
            None => None,
            Some("w") => Some(AlphaSourceArg::W),
            Some("wa") => Some(AlphaSourceArg::Wa),
            Some(other) => {
                return Err(Failure::config(format!(
                    "config alpha-source: unknown {other:?}"
                )))
            }
        };
    }
    if args.epochs.is_none() {
        args.epochs = take(&mut cfg, "epochs")?;
    }
    if args.seed.is_none() {
        args.seed = take(&mut cfg, "seed")?;
    }
    if args.batch_size.is_none() {
        args.batch_size = take(&mut cfg, "batch-size")?;
    }
    if args.lr.is_none() {
        args.lr = take(&mut cfg, "lr")?;
    }
    if args.out.is_none() {
        args.out = take(&mut cfg, "out")?;
    }
    if let Some(unknown) = cfg.keys().next() {
        return Err(Failure::config(format!("unknown config key {unknown:?}")));
    }

    let arch: Vec<usize> = args
        .arch
        .as_deref()
        .unwrap_or("784,128,10")
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::config(format!("bad --arch: {e}")))?;
    let mode = match args.mode.unwrap_or(ModeArg::Tbn) {
        ModeArg::Dense => ModelMode::Dense,
        ModeArg::Bwnn => ModelMode::Bwnn,
        ModeArg::Tbn => ModelMode::Tbn,
        ModeArg::TbnFp => ModelMode::TbnFp,
    };
    let policy = TilingPolicy {
        p: args.p.unwrap_or(4),
        lambda: args.lambda.unwrap_or(64_000),
        alpha_mode: match args.alpha.unwrap_or(AlphaArg::PerTile) {
            AlphaArg::PerLayer => AlphaMode::PerLayer,
            AlphaArg::PerTile => AlphaMode::PerTile,
        },
        alpha_source: match args.alpha_source.unwrap_or(AlphaSourceArg::Wa) {
            AlphaSourceArg::W => AlphaSource::FromW,
            AlphaSourceArg::Wa => AlphaSource::FromA,
        },
    };
    let seed = args.seed.unwrap_or(0);
    let out = args.out.unwrap_or_else(|| PathBuf::from("model.tbn"));

    let mut model =
        build_mlp(&arch, mode, &policy, seed).map_err(|e| Failure::config(e.to_string()))?;

    let data_dir = data_dir_or_env(args.data_dir.take())?;
    let mut train_ds = load_split(&data_dir, "train")?;
    let mut test_ds = load_split(&data_dir, "t10k")?;
    if let Some(n) = args.train_limit {
        train_ds = train_ds
            .truncated(n)
            .map_err(|e| Failure::data(e.to_string()))?;
    }
    if let Some(n) = args.test_limit {
        test_ds = test_ds
            .truncated(n)
            .map_err(|e| Failure::data(e.to_string()))?;
    }

    let config = TrainConfig {
        epochs: args.epochs.unwrap_or(10),
        batch_size: args.batch_size.unwrap_or(128),
        adam: tbn_core::train::AdamConfig {
            learning_rate: args.lr.unwrap_or(0.001),
            ..Default::default()
        },
        seed,
    };
    let metrics = train::train(&mut model, &train_ds, &test_ds, &config, args.stop_at)
        .map_err(|e| Failure::config(e.to_string()))?;
    for e in &metrics.epochs {
        println!(
            "epoch {:>3}  loss {:.4}  test_acc {:.4}  ({:.1}s)",
            e.epoch, e.train_loss, e.test_accuracy, e.seconds
        );
    }
    modelfile::serialize(&model, &out).map_err(|e| Failure::model(e.to_string()))?;
    println!(
        "wrote {} ({} layers, final test_acc {:.4})",
        out.display(),
        model.slots.len(),
        metrics.final_accuracy().unwrap_or(0.0)
    );
    Ok(ExitCode::SUCCESS)
}

// ── eval ───────────────────────────────────────────────────────────────

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let model = load_model(&args.model)?;
    let data_dir = data_dir_or_env(args.data_dir)?;
    let stem = if args.train_split { "train" } else { "t10k" };
    let ds = load_split(&data_dir, stem)?;
    let acc = evaluate(&model, &ds).map_err(|e| Failure::model(e.to_string()))?;
    println!("accuracy {:.4}", acc);
    Ok(ExitCode::SUCCESS)
}

// ── validate ───────────────────────────────────────────────────────────

fn cmd_validate(args: ValidateArgs) -> CmdResult {
    let model = load_model(&args.model)?;
    let report = kernels::validate_kernels(&model, args.trials, args.tol)
        .map_err(|e| Failure::model(e.to_string()))?;
    println!("layer  kernel        trials  max_abs_dev  status");
    for c in &report.checks {
        println!(
            "{:>5}  {:<12}  {:>6}  {:>11.3e}  {}",
            c.layer_index,
            c.kernel.name(),
            c.trials,
            c.max_abs_dev,
            if c.pass { "ok" } else { "FAIL" }
        );
    }
    println!(
        "{} (tol {}, max dev {:.3e})",
        if report.pass { "PASS" } else { "FAIL" },
        report.tol,
        report.max_dev()
    );
    if let Some(path) = &args.out_json {
        let json = serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "report": report,
        });
        std::fs::write(path, serde_json::to_string_pretty(&json).expect("report serializes"))
            .map_err(|e| Failure::model(format!("cannot write {}: {e}", path.display())))?;
    }
    if report.pass {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Failure::model(format!(
            "kernel validation failed on layers {:?}",
            report.failed_layers()
        )))
    }
}

// ── bench ──────────────────────────────────────────────────────────────

/// Per-layer kernel execution state, prepared once outside the timed loop.
enum LayerRunner {
    Dense {
        bhat_t: Tensor,
    },
    Alg1 {
        packed: PackedBitMatrix,
        alphas: Vec<f32>,
        m: usize,
        n: usize,
    },
    TiledFp {
        tile_cols: Tensor,
        p: usize,
        alphas: Vec<f32>,
    },
    Packed {
        packed_t: PackedBitMatrix,
        alpha: f32,
        block_alphas: Option<(usize, Vec<f32>)>,
    },
    TiledPacked {
        packed_cols: PackedBitMatrix,
        p: usize,
        alphas: Vec<f32>,
    },
}

impl LayerRunner {
    fn run(&self, x: Tensor) -> Tensor {
        match self {
            LayerRunner::Dense { bhat_t } => {
                tbn_core::tensor::matmul(&x, bhat_t).expect("prepared dims")
            }
            LayerRunner::Alg1 { packed, alphas, m, n } => {
                let mut y = vec![0.0f32; *m];
                kernels::fc_tiled_many_alpha_packed_into(packed, alphas, x.data(), *m, *n, &mut y)
                    .expect("prepared dims");
                Tensor::new(Shape::new(&[1, *m]).expect("m >= 1"), y).expect("sized")
            }
            LayerRunner::TiledFp { tile_cols, p, alphas } => {
                tiled_matmul_fp(&x, tile_cols, *p, alphas).expect("prepared dims")
            }
            LayerRunner::Packed {
                packed_t,
                alpha,
                block_alphas,
            } => {
                let mut y = binary_matmul_packed(&x, packed_t, *alpha).expect("prepared dims");
                if let Some((qr, alphas)) = block_alphas {
                    for (o, v) in y.data_mut().iter_mut().enumerate() {
                        *v *= alphas[o / qr];
                    }
                }
                y
            }
            LayerRunner::TiledPacked {
                packed_cols,
                p,
                alphas,
            } => tiled_matmul_packed(&x, packed_cols, *p, alphas).expect("prepared dims"),
        }
    }

    /// Alg1 fuses its ReLU; every other kernel needs the explicit one.
    fn fuses_relu(&self) -> bool {
        matches!(self, LayerRunner::Alg1 { .. })
    }
}

fn prepare_runner(layer: &Layer, kernel: KernelArg) -> Result<LayerRunner, Failure> {
    let fail =
        |msg: &str| Failure::config(format!("kernel {} not applicable: {msg}", kernel.name()));
    let (m, n) = match layer.weight_dims().as_slice() {
        &[m, n] => (m, n),
        _ => return Err(fail("bench covers fully-connected layers only")),
    };
    if kernel == KernelArg::Dense {
        let bhat_t = layer
            .effective_weight()
            .and_then(|t| t.transposed2d())
            .map_err(|e| Failure::model(e.to_string()))?;
        return Ok(LayerRunner::Dense { bhat_t });
    }

    // Full-precision tiled layers expose only the fp column-block kernel.
    if let LayerParams::FrozenFpTiled { tile, spec } = layer.params() {
        if kernel != KernelArg::TiledFp {
            return Err(fail("fp-tiled layers support dense and tiled-fp"));
        }
        if spec.q() % n != 0 {
            return Err(fail("tile does not align with output rows"));
        }
        let qr = spec.q() / n;
        let mut data = vec![0.0f32; n * qr];
        for r in 0..n {
            for c in 0..qr {
                data[r * qr + c] = tile[c * n + r];
            }
        }
        return Ok(LayerRunner::TiledFp {
            tile_cols: Tensor::new(Shape::new(&[n, qr]).expect("dims"), data).expect("sized"),
            p: spec.p(),
            alphas: vec![1.0],
        });
    }

    let handle = TiledWeightHandle::from_layer(layer)
        .map_err(|e| Failure::model(e.to_string()))?
        .ok_or_else(|| fail("layer does not store binary weights"))?;
    match kernel {
        KernelArg::Alg1 => Ok(LayerRunner::Alg1 {
            packed: handle.packed_tile().clone(),
            alphas: handle.block_alphas(),
            m,
            n,
        }),
        KernelArg::TiledFp => {
            let tile_cols = handle
                .tile_cols()
                .ok_or_else(|| fail("tile does not align with output rows"))?;
            Ok(LayerRunner::TiledFp {
                tile_cols,
                p: handle.spec.p(),
                alphas: handle.block_alphas(),
            })
        }
        KernelArg::Packed => {
            let bhat = layer
                .effective_weight()
                .map_err(|e| Failure::model(e.to_string()))?;
            // Pack the sign pattern of the transposed weight.
            let signs: Vec<f32> = bhat
                .data()
                .iter()
                .map(|&v| if v >= 0.0 { 1.0 } else { -1.0 })
                .collect();
            let sign_t = Tensor::new(Shape::new(&[m, n]).expect("dims"), signs)
                .and_then(|t| t.transposed2d())
                .map_err(|e| Failure::model(e.to_string()))?;
            let packed_t =
                kernels::pack_bits(&sign_t).map_err(|e| Failure::model(e.to_string()))?;
            if handle.alphas.mode == AlphaMode::PerLayer {
                Ok(LayerRunner::Packed {
                    packed_t,
                    alpha: handle.alphas.values[0],
                    block_alphas: None,
                })
            } else {
                let qr = handle
                    .column_block()
                    .ok_or_else(|| fail("per-tile alphas need row-aligned tiles"))?;
                Ok(LayerRunner::Packed {
                    packed_t,
                    alpha: 1.0,
                    block_alphas: Some((qr, handle.block_alphas())),
                })
            }
        }
        KernelArg::TiledPacked => {
            let packed_cols = handle
                .packed_tile_cols()
                .ok_or_else(|| fail("tile does not align with output rows"))?;
            Ok(LayerRunner::TiledPacked {
                packed_cols,
                p: handle.spec.p(),
                alphas: handle.block_alphas(),
            })
        }
        KernelArg::Dense => unreachable!("handled above"),
    }
}

fn cmd_bench(args: BenchArgs) -> CmdResult {
    let model = load_model(&args.model)?;
    if args.runs == 0 || args.inputs == 0 {
        return Err(Failure::config("--runs and --inputs must be >= 1"));
    }
    let in_features = match &model.slots.first() {
        Some(slot) => match slot.layer.weight_dims().as_slice() {
            &[_, n] => n,
            _ => return Err(Failure::config("bench expects an MLP model")),
        },
        None => return Err(Failure::model("model has no layers")),
    };

    // Pixel-scale random inputs, generated once outside the timed loop.
    use rand_chacha::rand_core::{RngCore, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let inputs: Vec<Tensor> = (0..args.inputs)
        .map(|_| {
            let data: Vec<f32> = (0..in_features)
                .map(|_| (rng.next_u64() >> 40) as f32 / (1u64 << 24) as f32)
                .collect();
            Tensor::new(Shape::new(&[1, in_features]).expect("dims"), data).expect("sized")
        })
        .collect();

    let mut rows = Vec::new();
    for &kernel in &args.kernel {
        let runners: Vec<(LayerRunner, bool)> = model
            .slots
            .iter()
            .map(|slot| Ok((prepare_runner(&slot.layer, kernel)?, slot.relu_after)))
            .collect::<Result<_, Failure>>()?;

        let run_once = || {
            let started = Instant::now();
            for x in &inputs {
                let mut cur = x.clone();
                for (runner, relu_after) in &runners {
                    cur = runner.run(cur);
                    if *relu_after && !runner.fuses_relu() {
                        tbn_core::layers::relu_in_place(&mut cur);
                    }
                }
                std::hint::black_box(&cur);
            }
            args.inputs as f64 / started.elapsed().as_secs_f64()
        };

        run_once(); // warmup, excluded
        let fps: Vec<f64> = (0..args.runs).map(|_| run_once()).collect();
        let mean = fps.iter().sum::<f64>() / fps.len() as f64;
        // Population std over the run means, by definition.
        let var = fps.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / fps.len() as f64;
        rows.push((kernel, mean, var.sqrt()));
    }

    println!("kernel        runs  inputs  mean_fps      std_fps");
    for (kernel, mean, std) in &rows {
        println!(
            "{:<12}  {:>4}  {:>6}  {:>12.1}  {:>9.1}",
            kernel.name(),
            args.runs,
            args.inputs,
            mean,
            std
        );
    }
    if let Some(path) = &args.out_csv {
        let mut csv = String::from("schema_version,kernel,runs,inputs,mean_fps,std_fps\n");
        for (kernel, mean, std) in &rows {
            csv.push_str(&format!(
                "{SCHEMA_VERSION},{},{},{},{mean:.3},{std:.3}\n",
                kernel.name(),
                args.runs,
                args.inputs
            ));
        }
        std::fs::write(path, csv)
            .map_err(|e| Failure::model(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(ExitCode::SUCCESS)
}

// ── report ─────────────────────────────────────────────────────────────

fn cmd_report(args: ReportArgs) -> CmdResult {
    let model = load_model(&args.model)?;
    let input_dims: Vec<usize> = args
        .input_dims
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::config(format!("bad --input-dims: {e}")))?;
    let report = modelfile::memory_report(&model, &input_dims)
        .map_err(|e| Failure::model(e.to_string()))?;

    println!("layer  kind    mode          params     p  storage_bits  mem_bytes  bitops");
    for l in &report.layers {
        println!(
            "{:>5}  {:<6}  {:<12}  {:>8}  {:>4}  {:>12}  {:>9}  {:>7}",
            l.index,
            l.kind,
            format!("{:?}", l.mode),
            l.params,
            l.p,
            l.storage_bits,
            l.layer_memory_bytes.unwrap_or(0),
            l.bitops_effective,
        );
    }
    println!(
        "storage {:.2} KB  |  bitwidth/param {:.3}  |  savings vs 1-bit {:.2}x",
        report.storage_kb, report.bitwidth_per_param, report.savings_vs_binary
    );
    println!(
        "peak layer memory {:.2} KB  |  bit-ops {} -> {} ({:.2}x)",
        report.peak_memory_kb.unwrap_or(0.0),
        report.total_bitops_dense,
        report.total_bitops_effective,
        report.total_bitops_dense as f64 / report.total_bitops_effective.max(1) as f64
    );
    if let Some(path) = &args.out_json {
        let json = serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "report": report,
        });
        std::fs::write(path, serde_json::to_string_pretty(&json).expect("report serializes"))
            .map_err(|e| Failure::model(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(ExitCode::SUCCESS)
}
