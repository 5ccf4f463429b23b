//! `ropad`: generate synthetic data, train, evaluate and probe.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 I/O error,
//! 4 non-finite loss, 5 single-class split.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ropad_core::config::RunConfig;
use ropad_core::data::{self, generate_dataset, load_manifest, load_split, Dataset, Factors, Split};
use ropad_core::error::{CheckpointError, ConfigError, DataError, MetricsError, TensorError, TrainError};
use ropad_core::metrics::{self, ScoreSet};
use ropad_core::model::checkpoint::{load_checkpoint, save_checkpoint};
use ropad_core::model::{Architecture, RopadModel};
use ropad_core::train::{self, Precision};
use ropad_core::{Rng, Scalar};

const SEED_ENV: &str = "ROPAD_SEED";
const EVAL_BATCH: usize = 100;

#[derive(Parser)]
#[command(name = "ropad", version, about = "Presentation attack detection with adversarial invariance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Config file (`key = value` under `[section]` headers).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.lr=0.01`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with a manifest.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Train-split agreement between hue parity and label.
        #[arg(long)]
        r: Option<f64>,
    },
    /// Train a model on the dataset's train split.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        arch: Option<Arch>,
        #[arg(long)]
        out_ckpt: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score dev and test splits and report metrics at the dev EER threshold.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dev")]
        dev_split: String,
        #[arg(long, default_value = "test")]
        test_split: String,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        roc: Option<PathBuf>,
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Linear-probe accuracy of a factor from one embedding.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        factor: String,
        #[arg(long, value_enum)]
        embedding: Embedding,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the JSON result here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Uncorrelated,
    Correlated,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Bm,
    Ropad,
}

#[derive(Clone, Copy, ValueEnum)]
enum Embedding {
    E1,
    E2,
}

const FACTORS: [&str; 3] = ["background_hue", "identity_glyph", "glyph_offset"];

/// Failures detected by the CLI itself rather than the core library.
#[derive(Debug)]
enum Usage {
    Config(String),
    SingleClass(String),
}

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Usage::Config(m) | Usage::SingleClass(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(u) = cause.downcast_ref::<Usage>() {
            return match u {
                Usage::Config(_) => 2,
                Usage::SingleClass(_) => 5,
            };
        }
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::NonFiniteLoss { .. } | TrainError::Tensor(TensorError::NonFinite { .. }) => 4,
                TrainError::Config(_) => 2,
                TrainError::Tensor(_) => 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<MetricsError>() {
            return match e {
                MetricsError::SingleClass { .. } => 5,
                MetricsError::NonFiniteScore(_) => 4,
                MetricsError::Parse { .. } => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<DataError>() {
            return match e {
                DataError::CorrelationOutOfRange(_) | DataError::UnknownLevel(_) => 2,
                DataError::Io { .. } | DataError::Ppm { .. } | DataError::Manifest(_) | DataError::Csv(_) => 3,
                DataError::Invalid(_) | DataError::Tensor(_) => 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<CheckpointError>() {
            return if matches!(e, CheckpointError::Config(_)) { 2 } else { 3 };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { config, out, seed, mode, r } => generate(&config, &out, seed, mode, r),
        Command::Train { config, data, arch, out_ckpt, epochs, seed } => {
            train_cmd(&config, &data, arch, &out_ckpt, epochs, seed)
        }
        Command::Eval { ckpt, data, dev_split, test_split, report, roc, scores } => {
            eval(&ckpt, &data, &dev_split, &test_split, &report, roc.as_deref(), scores.as_deref())
        }
        Command::Probe { ckpt, data, factor, embedding, split, seed, out } => {
            probe(&ckpt, &data, &factor, embedding, &split, seed, out.as_deref())
        }
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Usage::Config(format!("{SEED_ENV}={v} is not an unsigned integer")).into()),
        Err(_) => Ok(None),
    }
}

/// Defaults, then the config file, then `--set` overrides. `seed_key` falls
/// back to `ROPAD_SEED` when neither the file nor an override sets it.
fn resolve(args: &ConfigArgs, seed_key: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut set = Vec::new();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        set = cfg.apply(&text).with_context(|| format!("in {}", path.display()))?;
    }
    for o in &args.overrides {
        let (key, value) =
            o.split_once('=').ok_or_else(|| Usage::Config(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(key.trim(), value.trim())?;
        set.push(key.trim().to_string());
    }
    if !set.iter().any(|k| k == seed_key) {
        if let Some(seed) = env_seed()? {
            cfg.set(seed_key, &seed.to_string())?;
        }
    }
    Ok(cfg)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn audit(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    write(&dir.join(format!("{command}.resolved.conf")), cfg.to_document())
}

fn parent(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new(""))
}

fn parse_split(name: &str) -> Result<Split> {
    Split::parse(name).ok_or_else(|| Usage::Config(format!("unknown split `{name}` (expected train, dev or test)")).into())
}

fn generate(args: &ConfigArgs, out: &Path, seed: Option<u64>, mode: Option<Mode>, r: Option<f64>) -> Result<String> {
    let mut cfg = resolve(args, "data.seed")?;
    if let Some(seed) = seed {
        cfg.data.seed = seed;
    }
    match mode {
        Some(Mode::Correlated) => cfg.data.correlated = true,
        Some(Mode::Uncorrelated) => cfg.data.correlated = false,
        None => {}
    }
    if let Some(r) = r {
        cfg.data.r = r;
    }
    cfg.data_dir = out.to_path_buf();
    cfg.validate()?;
    let plan = cfg.data.plan();
    let manifest = generate_dataset(&cfg.factors, &plan, cfg.data.seed, out)?;
    audit(out, "generate", &cfg)?;
    Ok(format!(
        "generated {} samples ({} train, {} dev, {} test) in {}",
        manifest.rows.len(),
        plan.n_train,
        plan.n_dev,
        plan.n_test,
        out.display()
    ))
}

fn train_cmd(
    args: &ConfigArgs,
    data_dir: &Path,
    arch: Option<Arch>,
    out_ckpt: &Path,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<String> {
    let mut cfg = resolve(args, "train.seed")?;
    if let Some(arch) = arch {
        cfg.arch = match arch {
            Arch::Bm => Architecture::Base,
            Arch::Ropad => Architecture::Ropad,
        };
    }
    if let Some(epochs) = epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    cfg.data_dir = data_dir.to_path_buf();
    cfg.out_dir = parent(out_ckpt).to_path_buf();
    cfg.validate()?;
    match cfg.train.precision {
        Precision::F32 => train_as::<f32>(&cfg, out_ckpt),
        Precision::F64 => train_as::<f64>(&cfg, out_ckpt),
    }
}

fn train_as<T: Scalar>(cfg: &RunConfig, out_ckpt: &Path) -> Result<String> {
    let manifest = load_manifest(&cfg.data_dir)?;
    let data: Dataset<T> = load_split(&cfg.data_dir, &manifest, Split::Train)?;
    let shape = data.images.shape();
    if shape[1..] != [cfg.model.channels, cfg.model.height, cfg.model.width] {
        return Err(Usage::Config(format!(
            "dataset images are {:?} but the model expects {}x{}x{}",
            &shape[1..],
            cfg.model.channels,
            cfg.model.height,
            cfg.model.width
        ))
        .into());
    }
    let mut model = RopadModel::<T>::build(&cfg.model, cfg.arch, &mut Rng::new(cfg.train.seed))?;
    let log = match cfg.arch {
        Architecture::Base => train::train_base(&mut model, &data, &cfg.train)?,
        Architecture::Ropad => train::train_ropad(&mut model, &data, &cfg.train)?,
    };
    let dir = parent(out_ckpt);
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_checkpoint(&model, cfg, out_ckpt)?;
    let log_path = dir.join("trainlog.csv");
    log.save_csv(&log_path).with_context(|| format!("writing {}", log_path.display()))?;
    audit(dir, "train", cfg)?;
    let last = log.main_records().last().map_or(String::from("n/a"), |r| format!("{:.4}", r.losses.total));
    Ok(format!(
        "trained {} for {} epochs ({} steps, final loss {last}) -> {}",
        cfg.arch.name(),
        cfg.train.epochs,
        log.records.len(),
        out_ckpt.display()
    ))
}

/// Reads the checkpoint at the precision recorded in it.
fn with_checkpoint<R>(
    path: &Path,
    f32_fn: impl FnOnce(RopadModel<f32>, RunConfig) -> Result<R>,
    f64_fn: impl FnOnce(RopadModel<f64>, RunConfig) -> Result<R>,
) -> Result<R> {
    let ctx = || format!("loading {}", path.display());
    let (model, cfg) = load_checkpoint::<f32>(path).with_context(ctx)?;
    match cfg.train.precision {
        Precision::F32 => f32_fn(model, cfg),
        Precision::F64 => {
            let (model, cfg) = load_checkpoint::<f64>(path).with_context(ctx)?;
            f64_fn(model, cfg)
        }
    }
}

fn eval(
    ckpt: &Path,
    data_dir: &Path,
    dev_split: &str,
    test_split: &str,
    report: &Path,
    roc: Option<&Path>,
    scores: Option<&Path>,
) -> Result<String> {
    let dev = parse_split(dev_split)?;
    let test = parse_split(test_split)?;
    let outputs = EvalOutputs { data_dir, dev, test, report, roc, scores };
    with_checkpoint(ckpt, |m, c| outputs.run(m, c), |m, c| outputs.run(m, c))
}

struct EvalOutputs<'a> {
    data_dir: &'a Path,
    dev: Split,
    test: Split,
    report: &'a Path,
    roc: Option<&'a Path>,
    scores: Option<&'a Path>,
}

impl EvalOutputs<'_> {
    fn score_split<T: Scalar>(&self, model: &RopadModel<T>, manifest: &data::Manifest, split: Split) -> Result<ScoreSet> {
        let data: Dataset<T> = load_split(self.data_dir, manifest, split)?;
        let scores = train::score_dataset(model, &data, EVAL_BATCH)?;
        let records = data
            .ids
            .into_iter()
            .zip(scores)
            .zip(data.labels)
            .map(|((sample_id, score), label)| metrics::ScoreRecord { sample_id, score, label })
            .collect();
        Ok(ScoreSet::new(records).with_context(|| format!("{} split", split.as_str()))?)
    }

    fn run<T: Scalar>(&self, model: RopadModel<T>, mut cfg: RunConfig) -> Result<String> {
        let model = model.prune_for_inference();
        let manifest = load_manifest(self.data_dir)?;
        let dev = self.score_split(&model, &manifest, self.dev)?;
        let test = self.score_split(&model, &manifest, self.test)?;
        let report = metrics::metrics_report(&dev, &test)?;
        write(self.report, report.to_json())?;
        if let Some(path) = self.roc {
            write(path, metrics::roc_to_csv(&metrics::roc_curve(&test)?))?;
        }
        if let Some(path) = self.scores {
            let mut all = dev.records.clone();
            all.extend(test.records.iter().cloned());
            write(path, metrics::scores_to_csv(&ScoreSet { records: all }))?;
        }
        cfg.data_dir = self.data_dir.to_path_buf();
        cfg.out_dir = parent(self.report).to_path_buf();
        audit(parent(self.report), "eval", &cfg)?;
        Ok(format!(
            "{}: apcer {:.2} bpcer {:.2} acer {:.2} hter {:.2} eer {:.2} auc {:.4}",
            self.test.as_str(),
            report.apcer,
            report.bpcer,
            report.acer,
            report.hter,
            report.eer,
            report.auc
        ))
    }
}

fn factor_level(factor: &str, f: &Factors) -> usize {
    match factor {
        "background_hue" => f.background_hue,
        "identity_glyph" => f.identity_glyph,
        _ => f.glyph_offset,
    }
}

/// Factor levels renumbered densely in order of first appearance.
fn dense_labels(levels: &[usize]) -> (Vec<usize>, usize) {
    let mut seen: Vec<usize> = Vec::new();
    let labels = levels
        .iter()
        .map(|l| match seen.iter().position(|s| s == l) {
            Some(i) => i,
            None => {
                seen.push(*l);
                seen.len() - 1
            }
        })
        .collect();
    (labels, seen.len())
}

#[allow(clippy::too_many_arguments)]
fn probe_as<T: Scalar>(
    mut model: RopadModel<T>,
    cfg: RunConfig,
    data_dir: &Path,
    factor: &str,
    embedding: Embedding,
    split: Split,
    seed: u64,
    out: Option<&Path>,
) -> Result<String> {
    let manifest = load_manifest(data_dir)?;
    let data: Dataset<T> = load_split(data_dir, &manifest, split)?;
    let levels: Vec<usize> = data.factors.iter().map(|f| factor_level(factor, f)).collect();
    let (labels, classes) = dense_labels(&levels);
    if classes < 2 {
        return Err(Usage::SingleClass(format!("{factor} takes a single value in the {} split", split.as_str())).into());
    }
    let (e1, e2) = train::embed_dataset(&mut model, &data, EVAL_BATCH)?;
    let (name, features) = match embedding {
        Embedding::E1 => ("e1", e1),
        Embedding::E2 => ("e2", e2.ok_or_else(|| Usage::Config("checkpoint has no e2 (base model)".into()))?),
    };
    let accuracy = data::nuisance_probe(&features, &labels, data::PROBE_FOLDS, seed)
        .map_err(|e| Usage::Config(format!("{} split too small to probe {factor}: {e}", split.as_str())))?;
    let json = serde_json::json!({
        "embedding": name,
        "factor": factor,
        "split": split.as_str(),
        "classes": classes,
        "chance": 100.0 / classes as f64,
        "accuracy": accuracy,
        "n": data.len(),
    });
    let line = json.to_string();
    if let Some(path) = out {
        write(path, format!("{line}\n"))?;
        audit(parent(path), "probe", &cfg)?;
    }
    Ok(line)
}

fn probe(
    ckpt: &Path,
    data_dir: &Path,
    factor: &str,
    embedding: Embedding,
    split: &str,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<String> {
    if !FACTORS.contains(&factor) {
        return Err(Usage::Config(format!("unknown factor `{factor}` (expected one of: {})", FACTORS.join(", "))).into());
    }
    let split = parse_split(split)?;
    let seed = match seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    with_checkpoint(
        ckpt,
        |m, c| probe_as(m, c, data_dir, factor, embedding, split, seed, out),
        |m, c| probe_as(m, c, data_dir, factor, embedding, split, seed, out),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::anyhow;

    #[test]
    fn dense_labels_renumber_by_first_appearance() {
        assert_eq!(dense_labels(&[13, 15, 13, 14]), (vec![0, 1, 0, 2], 3));
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&anyhow::Error::from(ConfigError::UnknownKey("x".into()))), 2);
        let nf = TrainError::NonFiniteLoss { step: 0, phase: "main", component: "total" };
        assert_eq!(exit_code(&anyhow::Error::from(nf).context("training")), 4);
        let sc = MetricsError::SingleClass { bona_fide: 3, attack: 0 };
        assert_eq!(exit_code(&anyhow::Error::from(sc)), 5);
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert_eq!(exit_code(&anyhow::Error::from(io)), 3);
        assert_eq!(exit_code(&anyhow!("other")), 1);
    }
}
