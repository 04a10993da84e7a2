//! Command-line interface: `gen-spirals`, `train` and `eval`.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{
    filter_binary_mnist, generate_two_spirals, load_binary_csv, load_mnist_idx, load_multilabel_csv,
    split_train_validation, write_binary_csv, Dataset, SpiralSpec, SpiralVariant,
};
use crate::error::{Error, Result};
use crate::model::{Architecture, Network};
use crate::trainer::{evaluate, train, write_log_csv, Metrics, StopReason, TrainConfig, TrainOutcome};

#[derive(Debug, Parser)]
#[command(
    name = "grownet",
    version,
    about = "Train and evaluate tunnel networks, highway networks and budding perceptrons"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a two-spirals dataset as CSV (x0,x1,label) plus a JSON manifest.
    GenSpirals(GenSpiralsArgs),
    /// Train a network and write its log, checkpoints and run manifest.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenSpiralsArgs {
    /// easy | medium | difficult
    #[arg(long)]
    pub variant: String,
    /// Seed for the arm angles and noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV path; the manifest goes next to it as <stem>.manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub points_per_class: usize,
    /// Standard deviation of Gaussian noise added to each coordinate.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
}

/// Where data comes from and how it is prepared.
#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// spirals:<easy|medium|difficult>, spirals-csv:<path>, mnist[:<dir>],
    /// mnist01[:<dir>] or multilabel:<path>. MNIST dirs hold the four
    /// standard IDX files (default data/mnist).
    #[arg(long)]
    pub data: String,
    /// Seed for spiral generation, subsetting and the 5:1 train/validation split.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Points per class for generated spirals.
    #[arg(long, default_value_t = 200)]
    pub points_per_class: usize,
    /// Use a seeded random subset of this many training instances (MNIST).
    #[arg(long)]
    pub train_subset: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// JSON file with TrainConfig fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    pub out: PathBuf,
    /// tunnel | highway | budding | mlp-baseline [default: tunnel]
    #[arg(long)]
    pub arch: Option<String>,
    /// Hidden units per layer [default: 10 for spirals, 100 otherwise]
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Tunnel/highway/MLP layers [default: 10]
    #[arg(long)]
    pub layers: Option<usize>,
    /// Budding tree depth cap in levels [default: 20]
    #[arg(long)]
    pub max_depth: Option<usize>,
    /// Base learning rate [default: 0.003 tunnel spirals, 0.001 budding spirals, 0.0003 MNIST]
    #[arg(long)]
    pub lr: Option<f64>,
    /// L1 penalty on gates and (1 - leafness) [default: 0.001]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// L2 penalty on weight matrices [default: 1e-5]
    #[arg(long)]
    pub l2: Option<f64>,
    /// Input dropout probability [default: 0 for spirals, 0.25 otherwise]
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Minibatch size, 1 is online [default: 1 for spirals, 32 otherwise]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Epochs without improvement before each schedule step [default: 20]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Comma-separated learning-rate factors [default: 0.3,0.1]
    #[arg(long, value_delimiter = ',')]
    pub lr_factors: Option<Vec<f64>>,
    /// Scale each deeper layer's learning rate by 3/4 [default: true]
    #[arg(long)]
    pub depth_decay: Option<bool>,
    /// Highway gate bias initialization [default: -2]
    #[arg(long, allow_hyphen_values = true)]
    pub gate_bias: Option<f64>,
    /// Run seed: initialization, shuffling, dropout [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hard cap on epochs [default: 2000]
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSON checkpoint written by `train` (best.json or final.json).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Drop stale budding subtrees before evaluating and report the reduction.
    #[arg(long)]
    pub prune: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Spirals(SpiralVariant),
    SpiralsCsv(PathBuf),
    Mnist(PathBuf),
    Mnist01(PathBuf),
    Multilabel(PathBuf),
}

impl FromStr for DataSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let mnist_dir = || PathBuf::from(arg.filter(|a| !a.is_empty()).unwrap_or("data/mnist"));
        let path = || {
            arg.filter(|a| !a.is_empty())
                .map(PathBuf::from)
                .ok_or_else(|| Error::Usage(format!("data spec '{s}' needs a path after ':'")))
        };
        match kind {
            "spirals" => {
                let v =
                    arg.ok_or_else(|| Error::Usage("spirals needs a variant: spirals:<easy|medium|difficult>".into()))?;
                v.parse::<SpiralVariant>().map(DataSpec::Spirals).map_err(as_usage)
            }
            "spirals-csv" => Ok(DataSpec::SpiralsCsv(path()?)),
            "mnist" => Ok(DataSpec::Mnist(mnist_dir())),
            "mnist01" => Ok(DataSpec::Mnist01(mnist_dir())),
            "multilabel" => Ok(DataSpec::Multilabel(path()?)),
            other => Err(Error::Usage(format!(
                "unknown data kind '{other}' (expected spirals, spirals-csv, mnist, mnist01 or multilabel)"
            ))),
        }
    }
}

impl DataSpec {
    fn is_spirals(&self) -> bool {
        matches!(self, DataSpec::Spirals(_) | DataSpec::SpiralsCsv(_))
    }

    /// Files that must exist, checked before any compute.
    fn required_files(&self) -> Vec<PathBuf> {
        match self {
            DataSpec::Spirals(_) => Vec::new(),
            DataSpec::SpiralsCsv(p) | DataSpec::Multilabel(p) => vec![p.clone()],
            DataSpec::Mnist(d) | DataSpec::Mnist01(d) => MNIST_FILES.iter().map(|f| d.join(f)).collect(),
        }
    }
}

const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Training, development and optional test sets. `dev == None` means the
/// training set doubles as the development set.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub dev: Option<Dataset>,
    pub test: Option<Dataset>,
}

fn as_usage(e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Usage(m),
        other => other,
    }
}

fn check_files(spec: &DataSpec) -> Result<()> {
    for f in spec.required_files() {
        if !f.is_file() {
            return Err(Error::Usage(format!("data file {} does not exist", f.display())));
        }
    }
    Ok(())
}

fn load_mnist_pair(dir: &Path, stem: &str, binary: bool) -> Result<Dataset> {
    let d = load_mnist_idx(
        &dir.join(format!("{stem}-images-idx3-ubyte")),
        &dir.join(format!("{stem}-labels-idx1-ubyte")),
    )?;
    if binary {
        filter_binary_mnist(&d, 0, 1)
    } else {
        Ok(d)
    }
}

fn spirals(variant: SpiralVariant, args: &DataArgs) -> Result<Dataset> {
    let mut spec = SpiralSpec::new(variant, args.data_seed);
    spec.points_per_class = args.points_per_class;
    generate_two_spirals(&spec)
}

pub fn load_training_data(spec: &DataSpec, args: &DataArgs) -> Result<LoadedData> {
    check_files(spec)?;
    let pool_split = |pool: Dataset| -> Result<(Dataset, Dataset)> {
        let pool = match args.train_subset {
            Some(n) => pool.subset(n, args.data_seed),
            None => pool,
        };
        split_train_validation(&pool, 5.0 / 6.0, args.data_seed)
    };
    Ok(match spec {
        DataSpec::Spirals(v) => LoadedData {
            train: spirals(*v, args)?,
            dev: None,
            test: None,
        },
        DataSpec::SpiralsCsv(p) => LoadedData {
            train: load_binary_csv(p)?,
            dev: None,
            test: None,
        },
        DataSpec::Mnist(dir) | DataSpec::Mnist01(dir) => {
            let binary = matches!(spec, DataSpec::Mnist01(_));
            let (train, dev) = pool_split(load_mnist_pair(dir, "train", binary)?)?;
            LoadedData {
                train,
                dev: Some(dev),
                test: Some(load_mnist_pair(dir, "t10k", binary)?),
            }
        }
        DataSpec::Multilabel(p) => {
            let (train, dev) = pool_split(load_multilabel_csv(p, true)?)?;
            LoadedData {
                train,
                dev: Some(dev),
                test: None,
            }
        }
    })
}

/// The dataset `eval` scores: MNIST specs give the test files, everything
/// else the full dataset.
pub fn load_eval_data(spec: &DataSpec, args: &DataArgs) -> Result<Dataset> {
    check_files(spec)?;
    match spec {
        DataSpec::Spirals(v) => spirals(*v, args),
        DataSpec::SpiralsCsv(p) => load_binary_csv(p),
        DataSpec::Mnist(dir) => load_mnist_pair(dir, "t10k", false),
        DataSpec::Mnist01(dir) => load_mnist_pair(dir, "t10k", true),
        DataSpec::Multilabel(p) => load_multilabel_csv(p, true),
    }
}

/// Built-in defaults, overlaid by the config file, overlaid by flags.
pub fn resolve_config(args: &TrainArgs, spec: &DataSpec) -> Result<TrainConfig> {
    let file: Option<serde_json::Value> = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let v: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::parse(p, format!("line {}", e.line()), e.to_string()))?;
            if !v.is_object() {
                return Err(Error::parse(p, "line 1", "config must be a JSON object"));
            }
            Some(v)
        }
        None => None,
    };
    let arch: Architecture = match (&args.arch, file.as_ref().and_then(|f| f.get("architecture"))) {
        (Some(a), _) => a.parse().map_err(as_usage)?,
        (None, Some(a)) => {
            serde_json::from_value(a.clone()).map_err(|e| Error::Config(format!("architecture: {e}")))?
        }
        (None, None) => Architecture::Tunnel,
    };
    let base = if spec.is_spirals() {
        TrainConfig::spirals(arch)
    } else {
        TrainConfig::mnist(arch)
    };
    let mut merged = serde_json::to_value(&base).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(serde_json::Value::Object(m)) = file {
        for (k, v) in m {
            merged[k] = v;
        }
    }
    let mut c: TrainConfig = serde_json::from_value(merged).map_err(|e| Error::Config(format!("config file: {e}")))?;
    c.architecture = arch;
    macro_rules! set {
        ($flag:ident => $field:ident) => {
            if let Some(v) = args.$flag.clone() {
                c.$field = v;
            }
        };
    }
    set!(hidden => hidden_width);
    set!(layers => max_layers);
    set!(max_depth => max_depth);
    set!(lr => base_lr);
    set!(lambda => lambda_l1);
    set!(l2 => l2_coeff);
    set!(dropout => dropout_p);
    set!(batch_size => batch_size);
    set!(patience => patience);
    set!(lr_factors => lr_factors);
    set!(depth_decay => depth_decay);
    set!(gate_bias => highway_gate_bias);
    set!(seed => seed);
    set!(max_epochs => max_epochs);
    c.validate().map_err(as_usage)?;
    Ok(c)
}

/// Self-describing record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_path: Option<PathBuf>,
    pub data: String,
    pub config: TrainConfig,
    pub output_dir: PathBuf,
    pub config_echo: PathBuf,
    pub log_csv: PathBuf,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub best_epoch: usize,
    pub epochs: usize,
    pub best_dev_metric: f64,
    pub test_error: Option<f64>,
    pub test_macro_f1: Option<f64>,
    pub stop: StopReason,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn cmd_gen_spirals(args: &GenSpiralsArgs) -> Result<PathBuf> {
    let variant: SpiralVariant = args.variant.parse().map_err(as_usage)?;
    let mut spec = SpiralSpec::new(variant, args.seed);
    spec.points_per_class = args.points_per_class;
    spec.noise_sd = args.noise;
    let d = generate_two_spirals(&spec)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_binary_csv(&d, &args.out)?;
    let manifest = manifest_path(&args.out);
    write_json(&spec, &manifest)?;
    println!(
        "wrote {} rows to {} (manifest {})",
        d.len(),
        args.out.display(),
        manifest.display()
    );
    Ok(manifest)
}

fn manifest_path(csv: &Path) -> PathBuf {
    let stem = csv
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    csv.with_file_name(format!("{stem}.manifest.json"))
}

fn describe(m: &Metrics) -> String {
    let mut s = format!("error {:.6} loss {:.6}", m.error, m.loss);
    if let Some(f1) = m.macro_f1 {
        s += &format!(" macro-F1 {f1:.6}");
    }
    if let Some(t) = m.sizes.total {
        s += &format!(" soft size {t:.4}");
    }
    if let Some(h) = m.sizes.hard {
        s += &format!(" hard size {h}");
    }
    s
}

/// Runs training and writes every artifact. Nothing is written unless
/// training produced at least one epoch.
pub fn cmd_train(args: &TrainArgs) -> Result<(RunManifest, TrainOutcome)> {
    let spec: DataSpec = args.data.data.parse()?;
    let config = resolve_config(args, &spec)?;
    let data = load_training_data(&spec, &args.data)?;
    let outcome = train(&config, &data.train, data.dev.as_ref())?;

    let out = &args.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_echo = out.join("config.json");
    let log_csv = out.join("log.csv");
    let best_checkpoint = out.join("best.json");
    let final_checkpoint = out.join("final.json");
    write_json(&config, &config_echo)?;
    write_log_csv(&outcome.log, outcome.best.size_columns(), &log_csv)?;
    save_checkpoint(
        &Checkpoint::new(&config, outcome.best_epoch, &outcome.best, None),
        &best_checkpoint,
    )?;
    save_checkpoint(
        &Checkpoint::new(&config, outcome.log.len(), &outcome.last, Some(outcome.rng.clone())),
        &final_checkpoint,
    )?;
    let test = match &data.test {
        Some(t) => Some(evaluate(&outcome.best, t)?),
        None => None,
    };
    let manifest = RunManifest {
        config_path: args.config.clone(),
        data: args.data.data.clone(),
        config,
        output_dir: out.clone(),
        config_echo,
        log_csv,
        best_checkpoint,
        final_checkpoint,
        best_epoch: outcome.best_epoch,
        epochs: outcome.log.len(),
        best_dev_metric: outcome.best_metric,
        test_error: test.as_ref().map(|t| t.error),
        test_macro_f1: test.as_ref().and_then(|t| t.macro_f1),
        stop: outcome.stop.clone(),
    };
    write_json(&manifest, &out.join("manifest.json"))?;

    let best = outcome.best_record();
    let metric_name = if best.macro_f1_val.is_some() {
        "macro-F1"
    } else {
        "error"
    };
    let mut line = format!(
        "best epoch {} of {}: dev {metric_name} {:.6}, train error {:.6}",
        outcome.best_epoch,
        outcome.log.len(),
        outcome.best_metric,
        best.train_error
    );
    if let Some(t) = &test {
        line += &format!(", test error {:.6}", t.error);
        if let Some(f1) = t.macro_f1 {
            line += &format!(", test macro-F1 {f1:.6}");
        }
    }
    if let Some(s) = best.total_soft_size {
        line += &format!(", soft size {s:.4}");
    }
    if let Some(h) = best.hard_size {
        line += &format!(", hard size {h}");
    }
    println!("{line}");
    if let StopReason::Diverged { epoch, message } = &outcome.stop {
        return Err(Error::Numerical(format!(
            "training diverged in epoch {epoch} ({message}); best checkpoint from epoch {} kept in {}",
            outcome.best_epoch,
            out.display()
        )));
    }
    Ok((manifest, outcome))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub params: usize,
    /// Metrics, parameter count and node count after pruning.
    pub pruned: Option<(Metrics, usize, usize)>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let net: Network = ck.network()?;
    let spec: DataSpec = args.data.data.parse()?;
    let d = load_eval_data(&spec, &args.data)?;
    let metrics = evaluate(&net, &d)?;
    println!("{} ({} parameters)", describe(&metrics), net.num_params());
    let pruned = if args.prune {
        let p = net.prune_for_export();
        let m = evaluate(&p, &d)?;
        let nodes = |n: &Network| n.budding_tree().map_or(0, |t| t.nodes().len());
        println!(
            "pruned: {} ({} parameters; stored nodes {} -> {})",
            describe(&m),
            p.num_params(),
            nodes(&net),
            nodes(&p)
        );
        Some((m, p.num_params(), nodes(&p)))
    } else {
        None
    };
    Ok(EvalReport {
        metrics,
        params: net.num_params(),
        pruned,
    })
}

/// Parses arguments and runs one command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::GenSpirals(a) => cmd_gen_spirals(a).map(|_| ()),
        Command::Train(a) => cmd_train(a).map(|_| ()),
        Command::Eval(a) => cmd_eval(a).map(|_| ()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_specs() {
        assert_eq!(
            "spirals:easy".parse::<DataSpec>().unwrap(),
            DataSpec::Spirals(SpiralVariant::Easy)
        );
        assert_eq!(
            "mnist".parse::<DataSpec>().unwrap(),
            DataSpec::Mnist(PathBuf::from("data/mnist"))
        );
        assert_eq!(
            "mnist01:/x".parse::<DataSpec>().unwrap(),
            DataSpec::Mnist01(PathBuf::from("/x"))
        );
        let err = "spirals:bogus".parse::<DataSpec>().unwrap_err().to_string();
        assert!(err.contains("easy|medium|difficult"), "{err}");
        assert!("multilabel".parse::<DataSpec>().is_err());
        assert!("cifar".parse::<DataSpec>().is_err());
    }

    fn train_args(extra: &[&str]) -> TrainArgs {
        let mut argv = vec!["grownet", "train"];
        argv.extend_from_slice(extra);
        match Cli::try_parse_from(argv).unwrap().command {
            Command::Train(a) => *a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn precedence_flags_over_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(&cfg, r#"{"architecture": "budding", "base_lr": 0.05, "patience": 7}"#).unwrap();
        let cfg_s = cfg.to_str().unwrap();
        let a = train_args(&["--data", "spirals:easy", "--config", cfg_s, "--lr", "0.2"]);
        let c = resolve_config(&a, &"spirals:easy".parse().unwrap()).unwrap();
        assert_eq!(c.architecture, Architecture::Budding);
        assert_eq!(c.base_lr, 0.2);
        assert_eq!(c.patience, 7);
        assert_eq!(c.lambda_l1, 0.001);

        let a = train_args(&["--data", "mnist", "--arch", "highway", "--gate-bias", "-4"]);
        let c = resolve_config(&a, &"mnist".parse().unwrap()).unwrap();
        assert_eq!(
            (c.hidden_width, c.batch_size, c.dropout_p, c.base_lr),
            (100, 32, 0.25, 0.0003)
        );
        assert_eq!(c.highway_gate_bias, -4.0);

        let a = train_args(&["--data", "spirals:easy", "--lr-factors", "0.5,0.25"]);
        let c = resolve_config(&a, &"spirals:easy".parse().unwrap()).unwrap();
        assert_eq!(c.lr_factors, vec![0.5, 0.25]);
        assert_eq!(c.base_lr, 0.003);
    }

    #[test]
    fn bad_configs_are_usage_errors() {
        let a = train_args(&["--data", "spirals:easy", "--dropout", "1.5"]);
        assert!(matches!(
            resolve_config(&a, &"spirals:easy".parse().unwrap()),
            Err(Error::Usage(_))
        ));
        let a = train_args(&["--data", "spirals:easy", "--arch", "cnn"]);
        assert!(matches!(
            resolve_config(&a, &"spirals:easy".parse().unwrap()),
            Err(Error::Usage(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(&cfg, "{\n  \"base_lr\": oops\n}").unwrap();
        let a = train_args(&["--data", "spirals:easy", "--config", cfg.to_str().unwrap()]);
        let err = resolve_config(&a, &"spirals:easy".parse().unwrap()).unwrap_err();
        assert!(
            matches!(err, Error::Parse { .. }) && err.to_string().contains("line 2"),
            "{err}"
        );
    }

    #[test]
    fn missing_mnist_files_fail_before_compute() {
        let args = DataArgs {
            data: "mnist:/nonexistent".into(),
            data_seed: 0,
            points_per_class: 200,
            train_subset: None,
        };
        let err = load_training_data(&args.data.parse().unwrap(), &args).unwrap_err();
        assert!(matches!(err, Error::Usage(_)) && err.to_string().contains("train-images-idx3-ubyte"));
    }
}
