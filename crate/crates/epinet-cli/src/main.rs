//! `epinet` command-line tool: train, evaluate, gradient-check and export
//! filter grids.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use epinet::data::{channel_mean, load_cifar10, load_mnist, preprocess, AugmentSpec, Dataset};
use epinet::gradcheck::{check_network, GradCheckConfig};
use epinet::net::{
    load_checkpoint, parse_config, Network, NetworkConfig, TrainState,
};
use epinet::optim::SgdConfig;
use epinet::train::{evaluate, train, TrainOptions};
use epinet::viz::{render_filter_grid, write_ppm};

#[derive(Parser)]
#[command(name = "epinet", about = "Epitomic convolutional network trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write per-epoch checkpoints and train_log.csv.
    Train(TrainArgs),
    /// Report top-1 error of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient in a config.
    Gradcheck(GradcheckArgs),
    /// Render a layer's filters as a tiled PPM image.
    ExportFilters(ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory (falls back to $EPINET_DATA).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    wd: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Learning-rate schedule as `epoch:mult,...` (e.g. `10:0.1,15:0.1`).
    #[arg(long)]
    schedule: Option<String>,
    /// Resume from a checkpoint written with the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Use only the first N training samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Use only the first N validation samples.
    #[arg(long)]
    val_limit: Option<usize>,
    /// Worker threads for batch-parallel matrix products (default 1,
    /// deterministic in all cases).
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// `train` or `test`.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the machine-readable report here.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    batch: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Layer name (e.g. `ep1`) or zero-based stack index.
    #[arg(long)]
    layer: String,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::ExportFilters(a) => cmd_export_filters(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Expand a u64 seed into the 32-byte master seed all RNG streams derive
/// from.
fn master_seed(seed: u64) -> [u8; 32] {
    ChaCha8Rng::seed_from_u64(seed).get_seed()
}

fn init_rng(seed: [u8; 32]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(0);
    rng
}

fn load_config(path: &Path) -> Result<NetworkConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn data_dir(flag: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(d) = flag {
        return Ok(d);
    }
    if let Some(d) = std::env::var_os("EPINET_DATA") {
        return Ok(PathBuf::from(d));
    }
    bail!("no dataset directory: pass --data or set EPINET_DATA")
}

/// Load the split named by `split`, picking the dataset family from the
/// configured input channel count (1 = MNIST IDX, 3 = CIFAR-10 binary).
fn load_split(cfg: &NetworkConfig, dir: &Path, split: &str) -> Result<Dataset> {
    let ds = match cfg.input.0 {
        1 => {
            let (images, labels) = match split {
                "train" => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
                "test" => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
                other => bail!("unknown split `{other}` (use train or test)"),
            };
            load_mnist(&dir.join(images), &dir.join(labels), split)?
        }
        3 => {
            let paths: Vec<PathBuf> = match split {
                "train" => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
                "test" => vec![dir.join("test_batch.bin")],
                other => bail!("unknown split `{other}` (use train or test)"),
            };
            load_cifar10(&paths, split)?
        }
        c => bail!("no dataset loader for {c}-channel input"),
    };
    Ok(ds)
}

fn parse_schedule(s: &str) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for part in s.split(',').filter(|p| !p.is_empty()) {
        let (e, m) = part
            .split_once(':')
            .ok_or_else(|| anyhow!("schedule entry `{part}` is not epoch:mult"))?;
        out.push((e.trim().parse()?, m.trim().parse()?));
    }
    Ok(out)
}

fn configure_threads(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build_global()
        .context("configuring thread pool")?;
    Ok(())
}

/// Train-time augmentation policy: random crops appear when the dataset
/// images are larger than the configured input; flips only for color data.
fn augment_policy(cfg: &NetworkConfig, ds: &Dataset) -> Option<AugmentSpec> {
    let (_, _, h, _) = ds.images.dims();
    let (c, ch, _) = cfg.input;
    if h > ch {
        Some(AugmentSpec::train(ch, c == 3))
    } else {
        None
    }
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    configure_threads(a.threads)?;
    let cfg = load_config(&a.config)?;
    let dir = data_dir(a.data)?;
    let mut train_ds = load_split(&cfg, &dir, "train")?;
    let mut val_ds = load_split(&cfg, &dir, "test")?;
    if let Some(n) = a.limit {
        train_ds = train_ds.take(n);
    }
    if let Some(n) = a.val_limit {
        val_ds = val_ds.take(n);
    }
    let mean = channel_mean(&train_ds.images);
    preprocess(&mut train_ds, &mean)?;
    preprocess(&mut val_ds, &mean)?;

    let seed = master_seed(a.seed);
    let mut net: Network<f32> = Network::build(&cfg, &mut init_rng(seed))?;
    let mut state = match &a.resume {
        Some(ckpt) => load_checkpoint(&mut net, ckpt)
            .with_context(|| format!("resuming from {}", ckpt.display()))?,
        None => TrainState::new(&mut net, seed),
    };

    let defaults = SgdConfig::default();
    let opt = SgdConfig {
        learning_rate: a.lr.unwrap_or(defaults.learning_rate),
        momentum: a.momentum.unwrap_or(defaults.momentum),
        weight_decay: a.wd.unwrap_or(defaults.weight_decay),
        batch_size: a.batch.unwrap_or(defaults.batch_size),
        schedule: match &a.schedule {
            Some(s) => parse_schedule(s)?,
            None => Vec::new(),
        },
    };
    let opts = TrainOptions {
        epochs: a.epochs,
        augment: augment_policy(&cfg, &train_ds),
        out_dir: Some(a.out.clone()),
        opt,
        ..TrainOptions::default()
    };
    train(&mut net, &mut state, &train_ds, &val_ds, &opts, |s| {
        println!(
            "epoch {:>3}  step {:>6}  lr {:.5}  train_loss {:.4}  val_error {:.4}",
            s.epoch, s.step, s.lr, s.train_loss, s.val_error_top1
        );
        true
    })?;
    println!("final checkpoint: {}", a.out.join("final.ckpt").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let cfg = load_config(&a.config)?;
    let dir = data_dir(a.data)?;
    // The mean always comes from the training split.
    let train_ds = load_split(&cfg, &dir, "train")?;
    let mean = channel_mean(&train_ds.images);
    let mut ds = if a.split == "train" {
        train_ds
    } else {
        load_split(&cfg, &dir, &a.split)?
    };
    if let Some(n) = a.limit {
        ds = ds.take(n);
    }
    preprocess(&mut ds, &mean)?;
    let mut net: Network<f32> = Network::build(&cfg, &mut init_rng(master_seed(0)))?;
    load_checkpoint(&mut net, &a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let spec = augment_policy(&cfg, &ds);
    let error = evaluate(&mut net, &ds, spec.as_ref(), 256)?;
    println!("top-1 error on {}: {:.4}", a.split, error);
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let cfg = load_config(&a.config)?;
    let report = check_network(&cfg, a.batch, a.seed, &GradCheckConfig::default())?;
    print!("{}", report.to_text());
    if let Some(path) = &a.csv {
        std::fs::write(path, report.to_csv())?;
    }
    Ok(if report.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_export_filters(a: ExportArgs) -> Result<ExitCode> {
    let cfg = load_config(&a.config)?;
    let mut net: Network<f32> = Network::build(&cfg, &mut init_rng(master_seed(0)))?;
    load_checkpoint(&mut net, &a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let name = match a.layer.parse::<usize>() {
        Ok(i) if i < net.layer_count() => net.layer_name(i).to_string(),
        Ok(i) => bail!("layer index {i} out of range (stack has {})", net.layer_count()),
        Err(_) => a.layer.clone(),
    };
    let params = net.layer_params(&name)?;
    let weights = params
        .iter()
        .find(|p| p.dims.len() == 4)
        .ok_or_else(|| anyhow!("layer `{name}` has no filter parameters to render"))?;
    let (k, c, side) = (weights.dims[0], weights.dims[1], weights.dims[2]);
    let grid = render_filter_grid(weights.value, k, c, side)?;
    write_ppm(&grid, &a.out)?;
    println!(
        "wrote {} ({}x{} px, {} tiles)",
        a.out.display(),
        grid.width,
        grid.height,
        k
    );
    Ok(ExitCode::SUCCESS)
}
