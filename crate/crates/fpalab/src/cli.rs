//! Command-line front end: dataset synthesis, zoo training, single attacks,
//! transfer matrices, gate ablations, wall-clock benchmarks, feature-map
//! dumps, and a fast in-memory self-check suite.
//!
//! Every subcommand accepts `--config <file>` pointing at a JSON document
//! whose fields mirror the flags; explicit flags override file values, which
//! override built-in defaults. Commands that produce artifacts snapshot their
//! effective configuration next to the outputs. Exit codes: 0 on success,
//! 2 for configuration problems, 3 for violated invariants, 1 otherwise.

use crate::attacks::{run_attack, AttackConfig, AttackInputs, AttackMethod};
use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fp::{apply_forward, build_batch_plans, dump_feature_maps, FpConfig, FpStrategy};
use crate::harness::ablate::{render_ablation_csv, run_ablation, AblationConfig};
use crate::harness::bench::paired_attack_bench;
use crate::harness::datasets::{load_test, load_train, standardize, DataFormat};
use crate::harness::report::write_artifacts;
use crate::harness::subset::{attack_success_rate, build_eval_subset};
use crate::harness::synth::{write_dataset_dir, SynthConfig, CLASS_NAMES};
use crate::harness::transfer::{
    default_fp, prepare_run, run_transfer_matrix, ExperimentConfig, ModelSet, VariantSpec,
};
use crate::seeds::{derive_seed, rng_from, rng_from_seed};
use crate::tensor::Tensor;
use crate::zoo::{
    argmax_row, build_model, insert_fp_layer, load_checkpoint, preset_by_name, save_checkpoint,
    train_with_progress, ForwardOptions, Hyper, Model, TrainMeta,
};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Parser)]
#[command(
    name = "fpalab",
    version,
    about = "Desk-scale laboratory for feature-permutation transfer attacks",
    long_about = "Train a small heterogeneous model zoo, run gradient attacks against a \
                  surrogate whose feature maps pass through a parameter-free permutation \
                  layer, and measure black-box transfer to the other models."
)]
pub struct Cli {
    /// Cap worker threads (overrides the FPALAB_THREADS environment variable)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic ten-class glyph dataset as IDX files
    Synth(SynthArgs),
    /// Train zoo models on a dataset directory and write checkpoints
    Train(TrainArgs),
    /// Run one attack and report white-box and transfer success rates
    Attack(AttackArgs),
    /// Run the full variants-by-targets transfer matrix with CSV artifacts
    Transfer(TransferArgs),
    /// Sweep permutation gates over a grid and tabulate transfer rates
    Ablate(AblateArgs),
    /// Compare per-iteration attack wall-clock across permutation strategies
    Bench(BenchArgs),
    /// Dump feature maps before and after the permutation layer as PGM grids
    Viz(VizArgs),
    /// Run the fast in-memory invariant suite
    Selftest(SelftestArgs),
}

/// Parse the command line and execute the selected subcommand.
pub fn run() -> Result<()> {
    run_from(std::env::args_os())
}

/// [`run`] with an explicit argument list (testable entry point).
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => return Err(Error::config(e.to_string())),
        Err(help_or_version) => {
            print!("{help_or_version}");
            return Ok(());
        }
    };
    init_threads(cli.threads)?;
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Attack(args) => cmd_attack(args),
        Command::Transfer(args) => cmd_transfer(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Viz(args) => cmd_viz(args),
        Command::Selftest(args) => cmd_selftest(args),
    }
}

/// Configure the global worker pool from the flag or `FPALAB_THREADS`.
/// Repeated initialization (e.g. in tests) is ignored.
fn init_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("FPALAB_THREADS") {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                Error::config(format!("FPALAB_THREADS must be a positive integer, got '{v}'"))
            })?),
            Err(_) => None,
        },
    };
    let Some(n) = n else { return Ok(()) };
    if n == 0 {
        return Err(Error::config("thread count must be at least 1"));
    }
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

// ===================== shared plumbing =====================

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn maybe_config<T: DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    match path {
        Some(p) => read_config(p),
        None => Ok(T::default()),
    }
}

fn require<T>(value: Option<T>, what: &str) -> Result<T> {
    value.ok_or_else(|| Error::config(format!("{what} is required (flag or config file)")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::config(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn parse_format(s: &str) -> std::result::Result<DataFormat, String> {
    s.parse::<DataFormat>().map_err(|e| e.to_string())
}

fn parse_method(s: &str) -> std::result::Result<AttackMethod, String> {
    s.parse::<AttackMethod>().map_err(|e| e.to_string())
}

fn parse_strategy(s: &str) -> std::result::Result<FpStrategy, String> {
    match s {
        "off" => Ok(FpStrategy::Off),
        "fpa-r" => Ok(FpStrategy::Random),
        "fpa-n" => Ok(FpStrategy::Neighborhood),
        _ => Err(format!("unknown strategy '{s}' (expected off, fpa-r or fpa-n)")),
    }
}

fn parse_variant(s: &str) -> std::result::Result<VariantSpec, String> {
    s.parse::<VariantSpec>().map_err(|e| e.to_string())
}

fn load_standard_test(dir: &Path, format: DataFormat) -> Result<Dataset> {
    standardize(load_test(dir, format)?)
}

/// Checkpoint stems found in `dir`, sorted by name.
fn ckpt_stems(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|s| s.to_str()) == Some("ckpt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Load `{name}.ckpt` from `dir` and insist the stored model carries the
/// same name, so reports never silently mislabel a model.
fn load_named_model(dir: &Path, name: &str) -> Result<Model> {
    let path = dir.join(format!("{name}.ckpt"));
    let (model, _) = load_checkpoint(&path)?;
    if model.name() != name {
        return Err(Error::config(format!(
            "checkpoint {} contains model '{}'",
            path.display(),
            model.name()
        )));
    }
    Ok(model)
}

/// Start from the strategy's default gates and apply any explicit overrides.
fn fp_with_overrides(
    base: FpConfig,
    gamma: Option<f32>,
    prob: Option<f32>,
    position: Option<usize>,
) -> FpConfig {
    let mut fp = base;
    if let Some(v) = gamma {
        fp.gamma = v;
    }
    if let Some(v) = prob {
        fp.prob = v;
    }
    if let Some(v) = position {
        fp.position = v;
    }
    fp
}

// ===================== synth =====================

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON config file with any of {train, test, side, seed}
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory to write the four IDX files into
    #[arg(long)]
    out: PathBuf,
    /// Training images (default 4000)
    #[arg(long)]
    train: Option<usize>,
    /// Test images (default 1000)
    #[arg(long)]
    test: Option<usize>,
    /// Square image side in pixels (default 28)
    #[arg(long)]
    side: Option<usize>,
    /// Generator seed (default 7)
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = maybe_config(args.config.as_ref())?;
    if let Some(v) = args.train {
        cfg.train = v;
    }
    if let Some(v) = args.test {
        cfg.test = v;
    }
    if let Some(v) = args.side {
        cfg.side = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    write_dataset_dir(&args.out, &cfg)?;
    write_json(&args.out.join("synth-config.json"), &cfg)?;
    println!(
        "wrote {} train / {} test {}x{} images over {} classes to {}",
        cfg.train,
        cfg.test,
        cfg.side,
        cfg.side,
        CLASS_NAMES.len(),
        args.out.display()
    );
    Ok(())
}

// ===================== train =====================

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    data: Option<PathBuf>,
    format: Option<DataFormat>,
    out: Option<PathBuf>,
    models: Option<Vec<String>>,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f32>,
    momentum: Option<f32>,
    seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON config file mirroring the flags below
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset layout: idx or cifar10 (default idx)
    #[arg(long, value_parser = parse_format)]
    format: Option<DataFormat>,
    /// Directory for checkpoints
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated presets (default convnet-a,convnet-b,transformer,mixer)
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    /// Training epochs (default 8)
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size (default 64)
    #[arg(long)]
    batch: Option<usize>,
    /// Learning rate (default 0.01)
    #[arg(long)]
    lr: Option<f32>,
    /// SGD momentum (default 0.9)
    #[arg(long)]
    momentum: Option<f32>,
    /// Master seed for weight init and batch order (default 1)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct TrainSnapshot<'a> {
    data: &'a Path,
    format: DataFormat,
    models: &'a [String],
    hyper: &'a Hyper,
    seed: u64,
    final_test_accuracy: Vec<(String, f32)>,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file: TrainFile = maybe_config(args.config.as_ref())?;
    let data_dir = require(args.data.or(file.data), "--data")?;
    let format = args.format.or(file.format).unwrap_or(DataFormat::Idx);
    let out = require(args.out.or(file.out), "--out")?;
    let models = args.models.or(file.models).unwrap_or_else(|| {
        ["convnet-a", "convnet-b", "transformer", "mixer"].map(String::from).to_vec()
    });
    let base = Hyper::default();
    let hyper = Hyper {
        epochs: args.epochs.or(file.epochs).unwrap_or(base.epochs),
        batch: args.batch.or(file.batch).unwrap_or(base.batch),
        lr: args.lr.or(file.lr).unwrap_or(base.lr),
        momentum: args.momentum.or(file.momentum).unwrap_or(base.momentum),
    };
    let seed = args.seed.or(file.seed).unwrap_or(1);

    let train_set = standardize(load_train(&data_dir, format)?)?;
    let test_set = standardize(load_test(&data_dir, format)?)?;
    let (channels, height, width) = train_set.image_dims();
    let input = crate::zoo::ImageDims { channels, height, width };
    create_dir(&out)?;
    println!(
        "training {} model(s) on {} train / {} test images ({channels}x{height}x{width})",
        models.len(),
        train_set.len(),
        test_set.len()
    );

    let mut summary = Vec::new();
    for name in &models {
        let spec = preset_by_name(name, input, train_set.classes())?;
        let mut model = build_model(&spec, &mut rng_from(seed, &format!("init/{name}"), 0))?;
        println!("{name}: {} parameters", model.num_scalars());
        let started = Instant::now();
        let stats = train_with_progress(
            &mut model,
            &train_set,
            &test_set,
            &hyper,
            derive_seed(seed, &format!("train/{name}"), 0),
            |s| {
                println!(
                    "  epoch {:>2}: train loss {:.4}, test accuracy {:.4}",
                    s.epoch, s.train_loss, s.test_accuracy
                );
            },
        )?;
        let final_acc = stats.last().map_or(0.0, |s| s.test_accuracy);
        let path = out.join(format!("{name}.ckpt"));
        save_checkpoint(
            &model,
            &TrainMeta { seed, epochs: hyper.epochs, final_test_accuracy: final_acc },
            &path,
        )?;
        println!("  saved {} ({:.1}s)", path.display(), started.elapsed().as_secs_f64());
        summary.push((name.clone(), final_acc));
    }

    write_json(
        &out.join("train-config.json"),
        &TrainSnapshot {
            data: &data_dir,
            format,
            models: &models,
            hyper: &hyper,
            seed,
            final_test_accuracy: summary.clone(),
        },
    )?;
    for (name, acc) in &summary {
        let note = if *acc < 0.9 { "  (below the 0.90 bar)" } else { "" };
        println!("{name}: final test accuracy {acc:.4}{note}");
    }
    Ok(())
}

// ===================== attack =====================

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AttackFile {
    data: Option<PathBuf>,
    format: Option<DataFormat>,
    models: Option<PathBuf>,
    out: Option<PathBuf>,
    surrogate: Option<String>,
    targets: Option<Vec<String>>,
    count: Option<usize>,
    seed: Option<u64>,
    attack: Option<AttackConfig>,
    fp: Option<FpConfig>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// JSON config file mirroring the flags below (plus full attack/fp blocks)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset layout: idx or cifar10 (default idx)
    #[arg(long, value_parser = parse_format)]
    format: Option<DataFormat>,
    /// Checkpoint directory
    #[arg(long)]
    models: Option<PathBuf>,
    /// Surrogate checkpoint stem (default convnet-a)
    #[arg(long)]
    surrogate: Option<String>,
    /// Comma-separated target stems (default: every other checkpoint)
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<String>>,
    /// Attack method: ifgsm, mifgsm, dim, tim, sim or admix (default ifgsm)
    #[arg(long, value_parser = parse_method)]
    method: Option<AttackMethod>,
    /// Permutation strategy: off, fpa-r or fpa-n (default off)
    #[arg(long, value_parser = parse_strategy)]
    fp: Option<FpStrategy>,
    /// Eligible-channel fraction in [0, 1]
    #[arg(long)]
    gamma: Option<f32>,
    /// Per-channel permutation probability in [0, 1]
    #[arg(long)]
    prob: Option<f32>,
    /// 1-based conv block the permutation layer follows
    #[arg(long)]
    position: Option<usize>,
    /// Images to attack (default 64)
    #[arg(long)]
    count: Option<usize>,
    /// Sign steps (default 50)
    #[arg(long)]
    iterations: Option<usize>,
    /// Max-norm budget (default 8/255)
    #[arg(long)]
    epsilon: Option<f32>,
    /// Step size (default 2/255)
    #[arg(long)]
    alpha: Option<f32>,
    /// Master seed (default 1)
    #[arg(long)]
    seed: Option<u64>,
    /// Optional artifact directory (report + loss trace + config snapshot)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct AttackSnapshot<'a> {
    data: &'a Path,
    format: DataFormat,
    models: &'a Path,
    surrogate: &'a str,
    targets: &'a [String],
    count: usize,
    seed: u64,
    attack: &'a AttackConfig,
    fp: &'a FpConfig,
}

fn cmd_attack(args: AttackArgs) -> Result<()> {
    let file: AttackFile = maybe_config(args.config.as_ref())?;
    let data_dir = require(args.data.or(file.data), "--data")?;
    let format = args.format.or(file.format).unwrap_or(DataFormat::Idx);
    let models_dir = require(args.models.or(file.models), "--models")?;
    let surrogate_name =
        args.surrogate.or(file.surrogate).unwrap_or_else(|| "convnet-a".to_string());
    let targets = match args.targets.or(file.targets) {
        Some(t) => t,
        None => ckpt_stems(&models_dir)?.into_iter().filter(|n| *n != surrogate_name).collect(),
    };
    let count = args.count.or(file.count).unwrap_or(64);
    let seed = args.seed.or(file.seed).unwrap_or(1);

    let mut attack = file.attack.unwrap_or_default();
    if let Some(m) = args.method {
        attack.method = m;
    }
    if let Some(v) = args.iterations {
        attack.iterations = v;
    }
    if let Some(v) = args.epsilon {
        attack.epsilon = v;
    }
    if let Some(v) = args.alpha {
        attack.alpha = v;
    }
    let fp = {
        let base = match (args.fp, file.fp) {
            (Some(s), Some(f)) if f.strategy == s => f,
            (Some(s), _) => default_fp(s),
            (None, Some(f)) => f,
            (None, None) => FpConfig::off(),
        };
        fp_with_overrides(base, args.gamma, args.prob, args.position)
    };

    let test = load_standard_test(&data_dir, format)?;
    let surrogate_model = load_named_model(&models_dir, &surrogate_name)?;
    let target_models: Vec<(String, Model)> = targets
        .iter()
        .map(|n| Ok((n.clone(), load_named_model(&models_dir, n)?)))
        .collect::<Result<_>>()?;

    let mut all: Vec<&Model> = vec![&surrogate_model];
    all.extend(target_models.iter().map(|(_, m)| m));
    let subset = build_eval_subset(&all, &test, count)?;

    let surrogate = insert_fp_layer(surrogate_model, fp.clone())?;
    let inputs =
        AttackInputs { images: subset.images(), labels: subset.labels(), mix_pool: Some(&test) };
    let started = Instant::now();
    let batch = run_attack(&surrogate, &inputs, &attack, derive_seed(seed, "cli/attack", 0))?;
    let seconds = started.elapsed().as_secs_f64();

    println!(
        "{}/{} images, {} iterations of {} (fp {}), {:.1}s",
        subset.len(),
        test.len(),
        attack.iterations,
        attack.method,
        fp.strategy.tag(),
        seconds
    );
    println!(
        "surrogate loss {:.4} -> {:.4}",
        batch.loss_trace.first().copied().unwrap_or(f32::NAN),
        batch.loss_trace.last().copied().unwrap_or(f32::NAN)
    );
    let mut rows = vec![(
        "surrogate",
        surrogate_name.clone(),
        attack_success_rate(surrogate.model(), &batch.adversarials, &batch.labels)?,
    )];
    for (name, model) in &target_models {
        rows.push((
            "target",
            name.clone(),
            attack_success_rate(model, &batch.adversarials, &batch.labels)?,
        ));
    }
    for (role, name, asr) in &rows {
        println!("{role:<10} {name:<14} attack success {asr:.4}");
    }

    if let Some(out) = args.out.or(file.out) {
        create_dir(&out)?;
        let mut report = String::from("role,model,asr\n");
        for (role, name, asr) in &rows {
            let _ = writeln!(report, "{role},{name},{asr:.6}");
        }
        std::fs::write(out.join("attack-report.csv"), report)
            .map_err(|e| Error::io(&out, e))?;
        let mut trace = String::from("iteration,loss\n");
        for (i, loss) in batch.loss_trace.iter().enumerate() {
            let _ = writeln!(trace, "{i},{loss:.6}");
        }
        std::fs::write(out.join("loss-trace.csv"), trace).map_err(|e| Error::io(&out, e))?;
        write_json(
            &out.join("attack-config.json"),
            &AttackSnapshot {
                data: &data_dir,
                format,
                models: &models_dir,
                surrogate: &surrogate_name,
                targets: &targets,
                count,
                seed,
                attack: &attack,
                fp: &fp,
            },
        )?;
        println!("artifacts in {}", out.display());
    }
    Ok(())
}

// ===================== transfer =====================

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct TransferFile {
    data: Option<PathBuf>,
    format: Option<DataFormat>,
    models: Option<PathBuf>,
    out: Option<PathBuf>,
    #[serde(flatten)]
    experiment: ExperimentConfig,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    /// JSON config file: paths plus any experiment field
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset layout: idx or cifar10 (default idx)
    #[arg(long, value_parser = parse_format)]
    format: Option<DataFormat>,
    /// Checkpoint directory
    #[arg(long)]
    models: Option<PathBuf>,
    /// Artifact directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluation subset size
    #[arg(long)]
    eval_count: Option<usize>,
    /// Repetitions per variant
    #[arg(long)]
    reps: Option<usize>,
    /// Images per attack job
    #[arg(long)]
    chunk: Option<usize>,
    /// Surrogate checkpoint stem
    #[arg(long)]
    surrogate: Option<String>,
    /// Comma-separated target stems
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<String>>,
    /// Comma-separated variants, e.g. ifgsm,ifgsm+fpa-n,mifgsm+fpa-n
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    variants: Option<Vec<VariantSpec>>,
    /// Sign steps per attack
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Serialize)]
struct InvocationSnapshot<'a> {
    data: &'a Path,
    format: DataFormat,
    models: &'a Path,
    out: &'a Path,
}

fn cmd_transfer(args: TransferArgs) -> Result<()> {
    let file: TransferFile = maybe_config(args.config.as_ref())?;
    let data_dir = require(args.data.or(file.data), "--data")?;
    let format = args.format.or(file.format).unwrap_or(DataFormat::Idx);
    let models_dir = require(args.models.or(file.models), "--models")?;
    let out = require(args.out.or(file.out), "--out")?;

    let mut cfg = file.experiment;
    if let Some(v) = args.seed {
        cfg.master_seed = v;
    }
    if let Some(v) = args.eval_count {
        cfg.eval_count = v;
    }
    if let Some(v) = args.reps {
        cfg.reps = v;
    }
    if let Some(v) = args.chunk {
        cfg.chunk = v;
    }
    if let Some(v) = args.surrogate {
        cfg.surrogate = v;
    }
    if let Some(v) = args.targets {
        cfg.targets = v;
    }
    if let Some(v) = args.variants {
        cfg.variants = v;
    }
    if let Some(v) = args.iterations {
        cfg.attack.iterations = v;
    }
    cfg.validate()?;

    let test = load_standard_test(&data_dir, format)?;
    let models = ModelSet::load(&models_dir, &cfg.surrogate, &cfg.targets)?;
    println!(
        "transfer: {} variants x {} targets, {} reps on {} images (chunk {})",
        cfg.variants.len(),
        cfg.targets.len(),
        cfg.reps,
        cfg.eval_count,
        cfg.chunk
    );
    let subset = prepare_run(&models, &test, &cfg)?;
    let started = Instant::now();
    let outcome = run_transfer_matrix(&models, &subset, &cfg)?;
    let wall = started.elapsed().as_secs_f64();

    create_dir(&out)?;
    let paths = write_artifacts(&out, &cfg, &outcome, wall)?;
    write_json(
        &out.join("invocation.json"),
        &InvocationSnapshot { data: &data_dir, format, models: &models_dir, out: &out },
    )?;

    println!("grand means over {} targets ({} reps):", cfg.targets.len(), cfg.reps);
    for g in &outcome.grand {
        println!("  {:<16} {:.4} +/- {:.4}", g.variant, g.mean, g.std);
    }
    println!("per-target cells:");
    for c in &outcome.cells {
        println!("  {:<16} -> {:<12} {:.4} +/- {:.4}", c.variant, c.target, c.mean, c.std);
    }
    println!("{wall:.1}s total; artifacts in {}", paths.report.parent().unwrap_or(&out).display());
    Ok(())
}

// ===================== ablate =====================

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct AblateFile {
    data: Option<PathBuf>,
    format: Option<DataFormat>,
    models: Option<PathBuf>,
    out: Option<PathBuf>,
    surrogate: Option<String>,
    targets: Option<Vec<String>>,
    #[serde(flatten)]
    ablation: AblationConfig,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// JSON config file: paths plus any ablation field
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset layout: idx or cifar10 (default idx)
    #[arg(long, value_parser = parse_format)]
    format: Option<DataFormat>,
    /// Checkpoint directory
    #[arg(long)]
    models: Option<PathBuf>,
    /// Artifact directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Surrogate checkpoint stem (default convnet-a)
    #[arg(long)]
    surrogate: Option<String>,
    /// Comma-separated target stems (default: every other checkpoint)
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<String>>,
    /// Permutation strategy under study: fpa-r or fpa-n
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<FpStrategy>,
    /// Comma-separated eligible-channel fractions
    #[arg(long, value_delimiter = ',')]
    gammas: Option<Vec<f32>>,
    /// Comma-separated permutation probabilities
    #[arg(long, value_delimiter = ',')]
    probs: Option<Vec<f32>>,
    /// Comma-separated 1-based layer positions
    #[arg(long, value_delimiter = ',')]
    positions: Option<Vec<usize>>,
    /// Attack method carrying the sweep (default ifgsm)
    #[arg(long, value_parser = parse_method)]
    method: Option<AttackMethod>,
    /// Master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluation subset size
    #[arg(long)]
    eval_count: Option<usize>,
    /// Repetitions per grid point
    #[arg(long)]
    reps: Option<usize>,
    /// Images per attack job
    #[arg(long)]
    chunk: Option<usize>,
}

#[derive(Serialize)]
struct AblateSnapshot<'a> {
    data: &'a Path,
    format: DataFormat,
    models: &'a Path,
    surrogate: &'a str,
    targets: &'a [String],
    ablation: &'a AblationConfig,
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let file: AblateFile = maybe_config(args.config.as_ref())?;
    let data_dir = require(args.data.or(file.data), "--data")?;
    let format = args.format.or(file.format).unwrap_or(DataFormat::Idx);
    let models_dir = require(args.models.or(file.models), "--models")?;
    let out = require(args.out.or(file.out), "--out")?;
    let surrogate =
        args.surrogate.or(file.surrogate).unwrap_or_else(|| "convnet-a".to_string());
    let targets = match args.targets.or(file.targets) {
        Some(t) => t,
        None => ckpt_stems(&models_dir)?.into_iter().filter(|n| *n != surrogate).collect(),
    };

    let mut cfg = file.ablation;
    if let Some(v) = args.strategy {
        cfg.strategy = v;
    }
    if let Some(v) = args.gammas {
        cfg.gammas = v;
    }
    if let Some(v) = args.probs {
        cfg.probs = v;
    }
    if let Some(v) = args.positions {
        cfg.positions = v;
    }
    if let Some(v) = args.method {
        cfg.method = v;
    }
    if let Some(v) = args.seed {
        cfg.master_seed = v;
    }
    if let Some(v) = args.eval_count {
        cfg.eval_count = v;
    }
    if let Some(v) = args.reps {
        cfg.reps = v;
    }
    if let Some(v) = args.chunk {
        cfg.chunk = v;
    }
    cfg.validate()?;

    let test = load_standard_test(&data_dir, format)?;
    let models = ModelSet::load(&models_dir, &surrogate, &targets)?;
    models.validate()?;
    let all = models.all_models();
    let subset = build_eval_subset(&all, &test, cfg.eval_count)?;
    println!(
        "ablation: {} grid points, {} reps on {} images",
        cfg.positions.len() * cfg.gammas.len() * cfg.probs.len(),
        cfg.reps,
        subset.len()
    );
    let started = Instant::now();
    let cells = run_ablation(&models, &subset, &cfg)?;
    let wall = started.elapsed().as_secs_f64();

    create_dir(&out)?;
    std::fs::write(out.join("ablation.csv"), render_ablation_csv(&cells))
        .map_err(|e| Error::io(&out, e))?;
    write_json(
        &out.join("ablate-config.json"),
        &AblateSnapshot {
            data: &data_dir,
            format,
            models: &models_dir,
            surrogate: &surrogate,
            targets: &targets,
            ablation: &cfg,
        },
    )?;
    for c in &cells {
        println!(
            "  gamma {:<4} prob {:<4} position {} -> {:<12} {:.4} +/- {:.4}",
            c.gamma, c.prob, c.position, c.target, c.mean_asr, c.std_asr
        );
    }
    println!("{wall:.1}s total; artifacts in {}", out.display());
    Ok(())
}

// ===================== bench =====================

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BenchFile {
    data: Option<PathBuf>,
    format: Option<DataFormat>,
    models: Option<PathBuf>,
    out: Option<PathBuf>,
    surrogate: Option<String>,
    count: Option<usize>,
    rounds: Option<usize>,
    seed: Option<u64>,
    attack: Option<AttackConfig>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// JSON config file mirroring the flags below (plus a full attack block)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset layout: idx or cifar10 (default idx)
    #[arg(long, value_parser = parse_format)]
    format: Option<DataFormat>,
    /// Checkpoint directory
    #[arg(long)]
    models: Option<PathBuf>,
    /// Surrogate checkpoint stem (default convnet-a)
    #[arg(long)]
    surrogate: Option<String>,
    /// Attack method timed across strategies (default ifgsm)
    #[arg(long, value_parser = parse_method)]
    method: Option<AttackMethod>,
    /// Comma-separated strategies to compare (default off,fpa-r,fpa-n)
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
    strategies: Option<Vec<FpStrategy>>,
    /// Eligible-channel fraction for active strategies
    #[arg(long)]
    gamma: Option<f32>,
    /// Permutation probability for active strategies
    #[arg(long)]
    prob: Option<f32>,
    /// 1-based layer position for active strategies
    #[arg(long)]
    position: Option<usize>,
    /// Images per timed pass (default 64)
    #[arg(long)]
    count: Option<usize>,
    /// Sign steps per pass (default 50)
    #[arg(long)]
    iterations: Option<usize>,
    /// Timed rounds after one discarded warm-up pass (default 3)
    #[arg(long)]
    rounds: Option<usize>,
    /// Master seed (default 1)
    #[arg(long)]
    seed: Option<u64>,
    /// Optional artifact directory (bench.csv + config snapshot)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct BenchSnapshot<'a> {
    data: &'a Path,
    format: DataFormat,
    models: &'a Path,
    surrogate: &'a str,
    strategies: Vec<&'static str>,
    count: usize,
    rounds: usize,
    seed: u64,
    attack: &'a AttackConfig,
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let file: BenchFile = maybe_config(args.config.as_ref())?;
    let data_dir = require(args.data.or(file.data), "--data")?;
    let format = args.format.or(file.format).unwrap_or(DataFormat::Idx);
    let models_dir = require(args.models.or(file.models), "--models")?;
    let surrogate_name =
        args.surrogate.or(file.surrogate).unwrap_or_else(|| "convnet-a".to_string());
    let strategies = args
        .strategies
        .unwrap_or_else(|| vec![FpStrategy::Off, FpStrategy::Random, FpStrategy::Neighborhood]);
    let count = args.count.or(file.count).unwrap_or(64);
    let rounds = args.rounds.or(file.rounds).unwrap_or(3);
    let seed = args.seed.or(file.seed).unwrap_or(1);
    let mut attack = file.attack.unwrap_or_default();
    if let Some(m) = args.method {
        attack.method = m;
    }
    if let Some(v) = args.iterations {
        attack.iterations = v;
    }

    let test = load_standard_test(&data_dir, format)?;
    if count == 0 || count > test.len() {
        return Err(Error::config(format!(
            "bench count must lie in [1, {}], got {count}",
            test.len()
        )));
    }
    let indices: Vec<usize> = (0..count).collect();
    let batch = test.select(&indices)?;
    let model = load_named_model(&models_dir, &surrogate_name)?;

    let mut variants = Vec::new();
    for &strategy in &strategies {
        let fp = fp_with_overrides(default_fp(strategy), args.gamma, args.prob, args.position);
        let label = VariantSpec { method: attack.method, fp: fp.clone() }.label();
        variants.push((label, insert_fp_layer(model.clone(), fp)?));
    }

    println!(
        "bench: {} images x {} iterations, {} rounds after warm-up",
        count, attack.iterations, rounds
    );
    let results = paired_attack_bench(&variants, batch.images(), batch.labels(), &attack, rounds, seed)?;
    let baseline = results[0].seconds_per_iteration;
    for r in &results {
        let rounds_ms: Vec<String> =
            r.rounds.iter().map(|s| format!("{:.2}", s * 1e3)).collect();
        println!(
            "  {:<16} {:>8.3} ms/iteration  {:>+7.2}% vs {}  (rounds: {} ms)",
            r.label,
            r.seconds_per_iteration * 1e3,
            (r.seconds_per_iteration / baseline - 1.0) * 100.0,
            results[0].label,
            rounds_ms.join(", ")
        );
    }

    if let Some(out) = args.out.or(file.out) {
        create_dir(&out)?;
        let mut csv = String::from("variant,seconds_per_iteration\n");
        for r in &results {
            let _ = writeln!(csv, "{},{:.9}", r.label, r.seconds_per_iteration);
        }
        std::fs::write(out.join("bench.csv"), csv).map_err(|e| Error::io(&out, e))?;
        write_json(
            &out.join("bench-config.json"),
            &BenchSnapshot {
                data: &data_dir,
                format,
                models: &models_dir,
                surrogate: &surrogate_name,
                strategies: strategies.iter().map(|s| s.tag()).collect(),
                count,
                rounds,
                seed,
                attack: &attack,
            },
        )?;
        println!("artifacts in {}", out.display());
    }
    Ok(())
}

// ===================== viz =====================

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct VizFile {
    data: Option<PathBuf>,
    format: Option<DataFormat>,
    models: Option<PathBuf>,
    out: Option<PathBuf>,
    surrogate: Option<String>,
    fp: Option<FpConfig>,
    image: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    /// JSON config file mirroring the flags below (plus a full fp block)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset layout: idx or cifar10 (default idx)
    #[arg(long, value_parser = parse_format)]
    format: Option<DataFormat>,
    /// Checkpoint directory
    #[arg(long)]
    models: Option<PathBuf>,
    /// Surrogate checkpoint stem (default convnet-a)
    #[arg(long)]
    surrogate: Option<String>,
    /// Permutation strategy: fpa-r or fpa-n (default fpa-n)
    #[arg(long, value_parser = parse_strategy)]
    fp: Option<FpStrategy>,
    /// Eligible-channel fraction in [0, 1]
    #[arg(long)]
    gamma: Option<f32>,
    /// Per-channel permutation probability in [0, 1]
    #[arg(long)]
    prob: Option<f32>,
    /// 1-based conv block the permutation layer follows
    #[arg(long)]
    position: Option<usize>,
    /// Test-image index to visualize (default 0)
    #[arg(long)]
    image: Option<usize>,
    /// Plan seed (default 1)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the PGM files
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_viz(args: VizArgs) -> Result<()> {
    let file: VizFile = maybe_config(args.config.as_ref())?;
    let data_dir = require(args.data.or(file.data), "--data")?;
    let format = args.format.or(file.format).unwrap_or(DataFormat::Idx);
    let models_dir = require(args.models.or(file.models), "--models")?;
    let out = require(args.out.or(file.out), "--out")?;
    let surrogate_name =
        args.surrogate.or(file.surrogate).unwrap_or_else(|| "convnet-a".to_string());
    let image = args.image.or(file.image).unwrap_or(0);
    let seed = args.seed.or(file.seed).unwrap_or(1);
    let fp = {
        let base = match (args.fp, file.fp) {
            (Some(s), Some(f)) if f.strategy == s => f,
            (Some(s), _) => default_fp(s),
            (None, Some(f)) => f,
            (None, None) => default_fp(FpStrategy::Neighborhood),
        };
        fp_with_overrides(base, args.gamma, args.prob, args.position)
    };
    if !fp.strategy.is_active() {
        return Err(Error::config("viz needs an active permutation strategy (fpa-r or fpa-n)"));
    }

    let test = load_standard_test(&data_dir, format)?;
    if image >= test.len() {
        return Err(Error::config(format!(
            "image index {image} out of range (test split has {} images)",
            test.len()
        )));
    }
    let sample = test.select(&[image])?;
    let model = load_named_model(&models_dir, &surrogate_name)?;
    let surrogate = insert_fp_layer(model, fp.clone())?;
    let (c, h, w) = surrogate
        .fp_site_dims()
        .ok_or_else(|| Error::config("the permutation site has no feature map"))?;
    let plans =
        build_batch_plans(1, c, h, w, &fp, &mut rng_from(seed, "viz/plan", image as u64))?;

    let mut tape = Tape::new();
    let x = tape.constant(sample.images().clone());
    let pass = surrogate.forward_attack(&mut tape, x, Some(&plans))?;
    let (before, after) = pass
        .fp_boundary
        .ok_or_else(|| Error::config("no permutation layer was applied"))?;
    create_dir(&out)?;
    let stem = out.join(format!("{surrogate_name}-block{}-image{image}", fp.position));
    let (before_path, after_path) =
        dump_feature_maps(tape.value(before), tape.value(after), &stem)?;

    let logits = tape.value(pass.logits);
    let predicted = argmax_row(&logits.data()[..logits.shape()[1]]);
    println!(
        "image {image} (label {}): predicted class {predicted} under the permuted forward",
        sample.labels()[0]
    );
    println!(
        "permuted {} of {c} channels at the {}x{w} site after block {}",
        plans[0].masked_count(),
        h,
        fp.position
    );
    println!("wrote {} and {}", before_path.display(), after_path.display());
    Ok(())
}

// ===================== selftest =====================

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Seed for the randomized checks (default 7)
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_selftest(args: SelftestArgs) -> Result<()> {
    let seed = args.seed.unwrap_or(7);
    let checks: [(&str, fn(u64) -> Result<String>); 7] = [
        ("gradient-finite-difference", check_gradient),
        ("value-preservation", check_value_preservation),
        ("neighbor-plan-structure", check_neighbor_structure),
        ("gating-rate", check_gating_rate),
        ("degenerate-equivalence", check_degenerate),
        ("budget-and-range", check_budget),
        ("determinism", check_determinism),
    ];
    let started = Instant::now();
    for (name, check) in checks {
        let t = Instant::now();
        let detail = check(seed)?;
        println!("PASS {name:<28} {detail} ({:.2}s)", t.elapsed().as_secs_f64());
    }
    println!("all {} checks passed in {:.1}s", checks.len(), started.elapsed().as_secs_f64());
    Ok(())
}

fn selftest_model(seed: u64) -> Result<Model> {
    build_model(&crate::testutil::tiny_cnn_spec(), &mut rng_from_seed(seed ^ 0x5eed))
}

/// Backward gradients through the tiny CNN match central finite differences
/// on the best-conditioned input coordinates.
fn check_gradient(seed: u64) -> Result<String> {
    let model = selftest_model(seed)?;
    let data = crate::testutil::halves_dataset(4, seed);
    let loss_at = |images: &Tensor| -> Result<f32> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let pass = model.forward(&mut tape, x, &ForwardOptions { train_params: false, fp: None })?;
        let loss = tape.cross_entropy(pass.logits, data.labels())?;
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let x = tape.leaf(data.images().clone(), true);
    let pass = model.forward(&mut tape, x, &ForwardOptions { train_params: false, fp: None })?;
    let loss = tape.cross_entropy(pass.logits, data.labels())?;
    tape.backward(loss)?;
    let grad = tape
        .grad(x)
        .ok_or_else(|| Error::Invariant("input gradient missing".to_string()))?
        .to_vec();

    let mut order: Vec<usize> = (0..grad.len()).collect();
    order.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
    let h = 1e-3f32;
    let mut worst = 0.0f32;
    for &i in order.iter().take(10) {
        let mut plus = data.images().clone();
        plus.data_mut()[i] += h;
        let mut minus = data.images().clone();
        minus.data_mut()[i] -= h;
        let fd = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / grad[i].abs().max(1e-6);
        worst = worst.max(rel);
        if rel > 2e-2 {
            return Err(Error::Invariant(format!(
                "input gradient {} vs finite difference {fd} at coordinate {i} (rel err {rel:.2e})",
                grad[i]
            )));
        }
    }
    Ok(format!("max rel err {worst:.1e} on 10 coordinates"))
}

/// Permutation forward passes only rearrange values: every channel keeps its
/// value multiset exactly.
fn check_value_preservation(seed: u64) -> Result<String> {
    let (c, h, w) = (8, 6, 6);
    let mut rng = rng_from(seed, "selftest/values", 0);
    let x = Tensor::uniform(vec![2, c, h, w], 0.0, 1.0, &mut rng)?;
    let mut plans_checked = 0;
    for strategy in [FpStrategy::Random, FpStrategy::Neighborhood] {
        let mut fp = default_fp(strategy);
        fp.gamma = 0.7;
        fp.prob = 0.8;
        let plans = build_batch_plans(2, c, h, w, &fp, &mut rng)?;
        let y = apply_forward(&x, &plans)?;
        for n in 0..2 {
            for ch in 0..c {
                let at = |t: &Tensor| {
                    let mut v = t.data()[(n * c + ch) * h * w..(n * c + ch + 1) * h * w].to_vec();
                    v.sort_by(f32::total_cmp);
                    v
                };
                if at(&x) != at(&y) {
                    return Err(Error::Invariant(format!(
                        "channel {ch} of sample {n} changed its value multiset under {strategy:?}"
                    )));
                }
            }
        }
        plans_checked += 100;
        for _ in 0..99 {
            build_batch_plans(1, c, h, w, &fp, &mut rng)?[0].check_structure()?;
        }
    }
    Ok(format!("{plans_checked} plans, per-channel multisets intact"))
}

/// Neighborhood plans are involutions whose moved cells travel exactly one
/// grid step.
fn check_neighbor_structure(seed: u64) -> Result<String> {
    let (c, h, w) = (4, 8, 8);
    let mut fp = default_fp(FpStrategy::Neighborhood);
    fp.gamma = 1.0;
    fp.prob = 1.0;
    let mut rng = rng_from(seed, "selftest/neighbor", 0);
    let mut moved = 0usize;
    for _ in 0..1000 {
        let plan = build_batch_plans(1, c, h, w, &fp, &mut rng)?.remove(0);
        plan.check_structure()?;
        for ch in 0..c {
            let Some(perm) = plan.perm(ch) else { continue };
            for (i, &j) in perm.iter().enumerate() {
                let j = j as usize;
                if i == j {
                    continue;
                }
                moved += 1;
                let d = (i / w).abs_diff(j / w) + (i % w).abs_diff(j % w);
                if d != 1 {
                    return Err(Error::Invariant(format!(
                        "cell {i} moved to {j}, an L1 distance of {d}"
                    )));
                }
                if perm[j] as usize != i {
                    return Err(Error::Invariant(format!(
                        "cells {i} and {j} are not swapped with each other"
                    )));
                }
            }
        }
    }
    Ok(format!("1000 plans, {moved} single-step swapped cells"))
}

/// The fraction of permuted channels concentrates on gamma times prob.
fn check_gating_rate(seed: u64) -> Result<String> {
    let c = 100;
    let mut fp = default_fp(FpStrategy::Random);
    fp.gamma = 0.3;
    fp.prob = 0.2;
    let mut rng = rng_from(seed, "selftest/gating", 0);
    let draws = 2000;
    let mut total = 0usize;
    for _ in 0..draws {
        let plan = build_batch_plans(1, c, 4, 4, &fp, &mut rng)?.remove(0);
        total += plan.masked_count();
        for (ch, masked) in plan.channel_mask().iter().enumerate() {
            if ch >= 30 && *masked {
                return Err(Error::Invariant(format!(
                    "channel {ch} was permuted but only the first 30 are eligible"
                )));
            }
        }
    }
    let mean = total as f64 / (draws * c) as f64;
    if (mean - 0.06).abs() > 0.004 {
        return Err(Error::Invariant(format!(
            "permuted-channel rate {mean:.4} strays from 0.06 over {draws} draws"
        )));
    }
    Ok(format!("mean rate {mean:.4} over {draws} draws (expected 0.06)"))
}

/// Gamma = 0, prob = 0 and strategy-off all collapse to the bare attack,
/// bit for bit.
fn check_degenerate(seed: u64) -> Result<String> {
    let model = selftest_model(seed)?;
    let data = crate::testutil::halves_dataset(4, seed.wrapping_add(1));
    let attack = AttackConfig { iterations: 8, ..AttackConfig::default() };
    let inputs =
        AttackInputs { images: data.images(), labels: data.labels(), mix_pool: None };
    let job_seed = derive_seed(seed, "selftest/degenerate", 0);
    let configs = [
        FpConfig::off(),
        FpConfig { gamma: 0.0, ..default_fp(FpStrategy::Neighborhood) },
        FpConfig { prob: 0.0, ..default_fp(FpStrategy::Random) },
    ];
    let mut reference: Option<Tensor> = None;
    for fp in configs {
        let surrogate = insert_fp_layer(model.clone(), fp)?;
        let batch = run_attack(&surrogate, &inputs, &attack, job_seed)?;
        match &reference {
            None => reference = Some(batch.adversarials),
            Some(r) => {
                if !r.bit_eq(&batch.adversarials) {
                    return Err(Error::Invariant(
                        "a degenerate permutation config changed the attack output".to_string(),
                    ));
                }
            }
        }
    }
    Ok("3 degenerate configs bit-identical over 8 iterations".to_string())
}

/// Every method with the permutation layer active keeps its output inside
/// the max-norm ball and the pixel range.
fn check_budget(seed: u64) -> Result<String> {
    let model = selftest_model(seed)?;
    let data = crate::testutil::halves_dataset(4, seed.wrapping_add(2));
    let fp = default_fp(FpStrategy::Neighborhood);
    let surrogate = insert_fp_layer(model, fp)?;
    for method in AttackMethod::ALL {
        let attack = AttackConfig { method, iterations: 6, ..AttackConfig::default() };
        let inputs = AttackInputs {
            images: data.images(),
            labels: data.labels(),
            mix_pool: Some(&data),
        };
        let batch =
            run_attack(&surrogate, &inputs, &attack, derive_seed(seed, "selftest/budget", 0))?;
        let worst = batch
            .adversarials
            .data()
            .iter()
            .zip(batch.originals.data())
            .map(|(a, o)| (a - o).abs())
            .fold(0.0f32, f32::max);
        let slack = attack.epsilon + 2.0 * f32::EPSILON;
        if worst > slack {
            return Err(Error::Invariant(format!(
                "{method} strayed {worst} from the original (budget {})",
                attack.epsilon
            )));
        }
        if batch.adversarials.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invariant(format!("{method} left the [0, 1] pixel range")));
        }
    }
    Ok("6 methods x fpa-n stayed in budget and range".to_string())
}

/// The same seed and config reproduce an attack bit for bit.
fn check_determinism(seed: u64) -> Result<String> {
    let model = selftest_model(seed)?;
    let data = crate::testutil::halves_dataset(4, seed.wrapping_add(3));
    let surrogate = insert_fp_layer(model, default_fp(FpStrategy::Neighborhood))?;
    let attack = AttackConfig {
        method: AttackMethod::Mifgsm,
        iterations: 6,
        ..AttackConfig::default()
    };
    let inputs = AttackInputs { images: data.images(), labels: data.labels(), mix_pool: None };
    let job_seed = derive_seed(seed, "selftest/determinism", 0);
    let first = run_attack(&surrogate, &inputs, &attack, job_seed)?;
    let second = run_attack(&surrogate, &inputs, &attack, job_seed)?;
    if !first.adversarials.bit_eq(&second.adversarials) || first.loss_trace != second.loss_trace {
        return Err(Error::Invariant(
            "two identically seeded attacks diverged".to_string(),
        ));
    }
    Ok("repeated mifgsm+fpa-n runs bit-identical".to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_checks_pass() {
        for (name, check) in [
            ("gradient", check_gradient as fn(u64) -> Result<String>),
            ("values", check_value_preservation),
            ("neighbors", check_neighbor_structure),
            ("gating", check_gating_rate),
            ("degenerate", check_degenerate),
            ("budget", check_budget),
            ("determinism", check_determinism),
        ] {
            check(7).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn strategy_parser_round_trips_tags() {
        for s in [FpStrategy::Off, FpStrategy::Random, FpStrategy::Neighborhood] {
            assert_eq!(parse_strategy(s.tag()).unwrap(), s);
        }
        assert!(parse_strategy("sideways").is_err());
    }

    #[test]
    fn bad_flags_become_config_errors() {
        let err = run_from(["fpalab", "no-such-command"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = run_from(["fpalab", "synth"]).unwrap_err();
        assert_eq!(err.exit_code(), 2, "missing --out must be a config error");
    }

    #[test]
    fn help_is_not_an_error() {
        run_from(["fpalab", "--help"]).unwrap();
        run_from(["fpalab", "transfer", "--help"]).unwrap();
    }

    #[test]
    fn synth_command_writes_a_loadable_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data");
        run_from([
            "fpalab",
            "synth",
            "--out",
            out.to_str().unwrap(),
            "--train",
            "30",
            "--test",
            "10",
            "--side",
            "16",
        ])
        .unwrap();
        let test = load_test(&out, DataFormat::Idx).unwrap();
        assert_eq!(test.len(), 10);
        assert_eq!(test.image_dims(), (1, 16, 16));
        assert!(out.join("synth-config.json").exists());
    }

    #[test]
    fn config_file_fields_are_overridden_by_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("synth.json");
        std::fs::write(&cfg, r#"{"train": 20, "test": 20, "side": 16}"#).unwrap();
        let out = dir.path().join("data");
        run_from([
            "fpalab",
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--test",
            "5",
        ])
        .unwrap();
        let train = load_train(&out, DataFormat::Idx).unwrap();
        let test = load_test(&out, DataFormat::Idx).unwrap();
        assert_eq!((train.len(), test.len()), (20, 5));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("train.json");
        std::fs::write(&cfg, r#"{"epocs": 3}"#).unwrap();
        let err = run_from([
            "fpalab",
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            "x",
            "--out",
            "y",
        ])
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
