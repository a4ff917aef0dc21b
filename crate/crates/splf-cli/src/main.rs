//! `splf` binary: dataset synthesis, training, evaluation, single-image
//! inference, gradient checking and the ablation table, wired to exit codes
//! scripts can rely on. `0` means success, `2` flags invalid input (bad
//! flags, malformed config, rejected image), and `1` covers runtime
//! failures such as unreadable checkpoints or a failing gradient check.
//!
//! Every subcommand prints machine-parseable lines: `key=value` pairs for
//! training and gradient checks, fixed-width whitespace-separated tables
//! for evaluation and ablation, and single-line `error: ...` diagnostics on
//! stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use splf_core::config::Config;
use splf_core::data::{load_dataset, save_dataset, synth_dataset};
use splf_core::error::{Error, Result};
use splf_core::graph::Graph;
use splf_core::model::SplfModel;
use splf_core::train::{evaluate, train, TrainOptions};
use splf_core::{checkpoint, gradcheck, metrics, netpbm};

/// Side length of generated synthetic samples. Matches the default model
/// configuration so `synth` output feeds straight into `train`.
const SYNTH_SIZE: usize = 64;

#[derive(Parser)]
#[command(name = "splf", version, about = "Salient-object detection pipeline with spectral adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset of PPM images and PGM masks.
    Synth {
        /// Seed for the sample stream; equal seeds give byte-identical files.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Number of image/mask pairs to generate. Must be at least 1.
        #[arg(long)]
        count: usize,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory and write a checkpoint.
    Train {
        /// JSON run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory containing an index.txt.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset and print per-image metrics.
    Eval {
        /// Checkpoint produced by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory containing an index.txt.
        #[arg(long)]
        data: PathBuf,
        /// Config describing the checkpointed model, when not the default.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Predict a saliency map for one PPM image.
    Infer {
        /// Checkpoint produced by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Input image; both sides must be multiples of 32.
        #[arg(long)]
        image: PathBuf,
        /// Output saliency map, written as an 8-bit PGM.
        #[arg(long)]
        out: PathBuf,
        /// Config describing the checkpointed model, when not the default.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        /// Seed controlling weights, inputs and coordinate sampling.
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train every feature combination and tabulate the resulting metrics.
    Ablation {
        /// Dataset directory containing an index.txt.
        #[arg(long)]
        data: PathBuf,
        /// Training epochs per table row.
        #[arg(long, default_value_t = 12)]
        epochs: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let status = match cli.command {
        Command::Synth { seed, count, out } => cmd_synth(seed, count, &out),
        Command::Train { config, data, out } => cmd_train(config.as_deref(), &data, &out),
        Command::Eval { ckpt, data, config } => cmd_eval(&ckpt, &data, config.as_deref()),
        Command::Infer { ckpt, image, out, config } => cmd_infer(&ckpt, &image, &out, config.as_deref()),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Ablation { data, epochs } => cmd_ablation(&data, epochs),
    };
    match status {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 2 } else { 1 })
        }
    }
}

/// Loads the config file when given, otherwise starts from defaults; the
/// SPLF_SEED environment variable takes precedence over both.
fn resolve_config(path: Option<&Path>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_seed_override(std::env::var("SPLF_SEED").ok().as_deref())?;
    Ok(cfg)
}

/// Builds a model for `cfg` and fills it from a checkpoint file.
fn restore_model(cfg: &Config, ckpt: &Path) -> Result<SplfModel> {
    let model = SplfModel::new(cfg)?;
    checkpoint::load(ckpt, &model.params())?;
    Ok(model)
}

/// Image file names from an index.txt, in dataset order, for table rows.
fn index_names(dir: &Path) -> Result<Vec<String>> {
    let listing = std::fs::read_to_string(dir.join("index.txt"))?;
    Ok(listing
        .lines()
        .filter_map(|l| l.split_whitespace().next().map(str::to_string))
        .collect())
}

fn cmd_synth(seed: u64, count: usize, out: &Path) -> Result<ExitCode> {
    if count == 0 {
        return Err(Error::Usage("count must be at least 1".to_string()));
    }
    let samples = synth_dataset(seed, count, SYNTH_SIZE);
    save_dataset(out, &samples)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(config: Option<&Path>, data_dir: &Path, out: &Path) -> Result<ExitCode> {
    let cfg = resolve_config(config)?;
    let data = load_dataset(data_dir)?;
    let model = SplfModel::new(&cfg)?;
    let opts = TrainOptions {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        seed: cfg.seed,
        stop_at_loss: None,
    };
    train(&model, &data, &opts, |stats| println!("{}", stats.log_line()))?;
    checkpoint::save(out, &model.params())?;
    println!("checkpoint={}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(ckpt: &Path, data_dir: &Path, config: Option<&Path>) -> Result<ExitCode> {
    let cfg = resolve_config(config)?;
    let model = restore_model(&cfg, ckpt)?;
    let data = load_dataset(data_dir)?;
    let names = index_names(data_dir)?;
    let reports = evaluate(&model, &data)?;

    println!("{:<20} {:>10} {:>10} {:>10} {:>10}", "image", "s_alpha", "f_beta", "e_phi", "mae");
    for (i, r) in reports.iter().enumerate() {
        let name = names.get(i).map(String::as_str).unwrap_or("?");
        println!("{:<20} {:>10.6} {:>10.6} {:>10.6} {:>10.6}", name, r.s_alpha, r.f_beta, r.e_phi, r.mae);
    }
    let mean = metrics::mean_reports(&reports);
    println!(
        "{:<20} {:>10.6} {:>10.6} {:>10.6} {:>10.6}",
        "mean", mean.s_alpha, mean.f_beta, mean.e_phi, mean.mae
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_infer(ckpt: &Path, image: &Path, out: &Path, config: Option<&Path>) -> Result<ExitCode> {
    let cfg = resolve_config(config)?;
    let model = restore_model(&cfg, ckpt)?;
    let (rgb, h, w) = netpbm::read_ppm(image)?;
    let input = splf_core::Tensor::new(rgb, &[1, 3, h, w]);

    let mut g = Graph::<f32>::inference();
    let fwd = model.forward(&mut g, &input)?;
    let saliency: Vec<f32> = fwd.logits[3]
        .data()
        .iter()
        .map(|&z| 1.0 / (1.0 + (-z).exp()))
        .collect();
    netpbm::write_pgm(out, &saliency, h, w)?;
    println!("saliency={}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: u64) -> Result<ExitCode> {
    let mut all_pass = true;
    for name in gradcheck::component_names() {
        let report = gradcheck::run_component(name, seed)?;
        let status = if report.passed() { "pass" } else { "fail" };
        all_pass &= report.passed();
        println!("component={} maxrel={:.3e} status={status}", report.component, report.max_rel);
    }
    Ok(if all_pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

/// The six ablation rows: which features are enabled and whether the
/// encoder trains. Order moves from full fine-tuning over the frozen
/// baseline to the complete adapter stack.
const ABLATION_ROWS: [(&str, [bool; 4], bool); 6] = [
    ("finetune-all", [false, false, false, false], true),
    ("frozen-base", [false, false, false, false], false),
    ("mafa-conv", [true, false, false, false], false),
    ("mafa-fourier", [true, true, false, false], false),
    ("prompts", [true, true, true, false], false),
    ("full-model", [true, true, true, true], false),
];

fn cmd_ablation(data_dir: &Path, epochs: usize) -> Result<ExitCode> {
    if epochs == 0 {
        return Err(Error::Usage("epochs must be at least 1".to_string()));
    }
    let base = resolve_config(None)?;
    let data = load_dataset(data_dir)?;

    println!("{:<16} {:>10} {:>10}", "model", "f_beta", "mae");
    let mut rows = Vec::new();
    for (label, [mafa, filter, prompts, umfeb], tune_encoder) in ABLATION_ROWS {
        let mut cfg = base.clone();
        cfg.epochs = epochs;
        cfg.use_mafa = mafa;
        cfg.use_fourier_filter = filter;
        cfg.use_prompts = prompts;
        cfg.use_umfeb = umfeb;

        let model = SplfModel::new(&cfg)?;
        if tune_encoder {
            model.set_encoder_trainable(true);
        }
        let opts = TrainOptions {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            seed: cfg.seed,
            stop_at_loss: None,
        };
        train(&model, &data, &opts, |_| {})?;
        let mean = metrics::mean_reports(&evaluate(&model, &data)?);
        println!("{:<16} {:>10.6} {:>10.6}", label, mean.f_beta, mean.mae);
        rows.push((label, mean));
    }

    let (full, frozen) = (&rows[5].1, &rows[1].1);
    println!(
        "delta full-model vs frozen-base: fbeta={:+.6} mae={:+.6}",
        full.f_beta - frozen.f_beta,
        full.mae - frozen.mae
    );
    Ok(ExitCode::SUCCESS)
}
