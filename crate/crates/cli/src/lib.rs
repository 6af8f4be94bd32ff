//! `dame` command-line driver.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use dame_core::checkpoint::Checkpoint;
use dame_core::eval::evaluate;
use dame_core::objective::{alignment_weights_with_base, WeightScheme};
use dame_core::schedules::Regime;
use dame_core::selftest::{run_selftest, SelftestOptions, DEFAULT_TOLERANCE};
use dame_core::synthdata::{load_trials, Dataset, TRIALS_DIR};
use dame_core::trainer::{train_ft, train_gt};
use dame_core::DameError;

pub use config::{CliConfig, ConfigError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SELFTEST: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CONFIG_ECHO_FILE: &str = "config.txt";
pub const OVERRIDES_FILE: &str = "overrides.txt";

#[derive(Debug, Parser)]
#[command(name = "dame", version, about = "Duration-aware nested speaker embeddings on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic speaker dataset with trial lists.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory (data.dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train or fine-tune a model on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Named preset (train.preset).
        #[arg(long)]
        preset: Option<String>,
        /// gt or ft (train.regime).
        #[arg(long)]
        regime: Option<String>,
        /// Pretrained checkpoint for fine-tuning (train.checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory (data.dir).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (train.out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score trial lists with a trained checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (eval.checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of trial lists (eval.trials); defaults to the dataset's.
        #[arg(long)]
        trials: Option<PathBuf>,
        /// Dataset directory holding the utterances (data.dir).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated prefix dimensions (eval.prefixes); defaults to D.
        #[arg(long)]
        prefixes: Option<String>,
        /// Also write the report CSV here (eval.out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print an alignment-weight matrix as CSV.
    DumpWeights {
        #[arg(long)]
        scheme: String,
        #[arg(long = "J")]
        j: usize,
        #[arg(long = "K")]
        k: usize,
        /// Soft-weighting decay base.
        #[arg(long, default_value_t = 2.0)]
        base: f64,
    },
    /// Run gradient checks and metric oracles.
    Selftest {
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        /// Run only checks whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file with [data], [train] and [eval] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. --set train.epochs=5 (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

/// Config text as read, plus the parsed document with overrides applied.
struct Loaded {
    text: Option<String>,
    overrides: Vec<String>,
    cfg: CliConfig,
}

impl Common {
    fn load(&self, flags: &[(&str, &str, Option<String>)]) -> Result<Loaded> {
        let text = match &self.config {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| io_error(p, e))?),
            None => None,
        };
        let mut cfg = match &text {
            Some(t) => CliConfig::parse(t).map_err(|e| {
                ConfigError(format!("{}: {e}", self.config.as_ref().expect("text implies path").display()))
            })?,
            None => CliConfig::default(),
        };
        let mut overrides = Vec::new();
        for s in &self.set {
            cfg.set_override(s)?;
            overrides.push(s.clone());
        }
        for (sec, key, v) in flags {
            if let Some(v) = v {
                cfg.set(sec, key, v)?;
                overrides.push(format!("{sec}.{key}={v}"));
            }
        }
        Ok(Loaded { text, overrides, cfg })
    }
}

impl Loaded {
    /// Copies the consumed config verbatim, and any overrides, into `dir`.
    fn echo(&self, dir: &Path) -> Result<()> {
        let text = self.text.as_deref().unwrap_or("");
        let p = dir.join(CONFIG_ECHO_FILE);
        fs::write(&p, text).map_err(|e| io_error(&p, e))?;
        if !self.overrides.is_empty() {
            let p = dir.join(OVERRIDES_FILE);
            let mut body = self.overrides.join("\n");
            body.push('\n');
            fs::write(&p, body).map_err(|e| io_error(&p, e))?;
        }
        Ok(())
    }
}

/// Raised when selftest checks fail.
#[derive(Debug)]
pub struct SelftestFailed(pub Vec<&'static str>);

impl std::fmt::Display for SelftestFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "selftest failed: {}", self.0.join(", "))
    }
}

impl std::error::Error for SelftestFailed {}

fn io_error(path: &Path, e: std::io::Error) -> anyhow::Error {
    anyhow::Error::new(e).context(format!("{}", path.display()))
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<SelftestFailed>().is_some() {
            return EXIT_SELFTEST;
        }
        if cause.downcast_ref::<ConfigError>().is_some() || cause.downcast_ref::<clap::Error>().is_some() {
            return EXIT_CONFIG;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
        if let Some(e) = cause.downcast_ref::<DameError>() {
            return match e {
                DameError::ConfigInvalid(_)
                | DameError::SchemeShapeMismatch { .. }
                | DameError::DegenerateDurations(_)
                | DameError::InvalidPrefix(_)
                | DameError::InvalidDuration(_)
                | DameError::InvalidShape(_)
                | DameError::InsufficientUtterances { .. }
                | DameError::LabelOutOfRange { .. } => EXIT_CONFIG,
                DameError::Io { .. } | DameError::CheckpointCorrupt { .. } | DameError::DataCorrupt { .. } => EXIT_IO,
                DameError::NonFiniteLoss { .. }
                | DameError::NonFinite(_)
                | DameError::ZeroVector
                | DameError::ShapeMismatch(_) => EXIT_NUMERIC,
            };
        }
    }
    EXIT_NUMERIC
}

/// Runs one command, printing its normal output to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => gen_data(&common, out),
        Command::Train { common, preset, regime, checkpoint, data, out } => {
            train(&common, preset, regime, checkpoint, data, out)
        }
        Command::Eval { common, checkpoint, trials, data, prefixes, out } => {
            eval(&common, checkpoint, trials, data, prefixes, out)
        }
        Command::DumpWeights { scheme, j, k, base } => {
            let scheme: WeightScheme = scheme.parse()?;
            print!("{}", alignment_weights_with_base(scheme, j, k, base)?.to_csv());
            Ok(())
        }
        Command::Selftest { tolerance, filter, inject_fault } => {
            let report = run_selftest(&SelftestOptions { tolerance, filter, inject_fault });
            for c in &report.checks {
                println!("{c}");
            }
            if report.checks.is_empty() {
                return Err(ConfigError("no selftest check matches the filter".into()).into());
            }
            if report.passed() {
                println!("selftest passed ({} checks)", report.checks.len());
                Ok(())
            } else {
                Err(SelftestFailed(report.failures()).into())
            }
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn gen_data(common: &Common, out: Option<PathBuf>) -> Result<()> {
    let loaded = common.load(&[("data", "dir", path_str(&out))])?;
    let gen = loaded.cfg.generator()?;
    gen.validate()?;
    let dir = loaded.cfg.data_dir();
    let ds = Dataset::generate(&gen)?;
    create_dir(&dir)?;
    ds.save(&dir)?;
    loaded.echo(&dir)?;
    let train_utts: usize = ds.train.iter().map(Vec::len).sum();
    let eval_utts: usize = ds.eval.iter().map(Vec::len).sum();
    println!("wrote {}", dir.display());
    println!("training speakers: {} ({train_utts} utterances)", ds.train.len());
    println!("evaluation speakers: {} ({eval_utts} utterances)", ds.eval.len());
    for t in &ds.trials {
        println!("trials {}: {} target, {} non-target", t.condition.name, t.targets(), t.nontargets());
    }
    Ok(())
}

fn train(
    common: &Common,
    preset: Option<String>,
    regime: Option<String>,
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let loaded = common.load(&[
        ("train", "preset", preset),
        ("train", "regime", regime),
        ("train", "checkpoint", path_str(&checkpoint)),
        ("data", "dir", path_str(&data)),
        ("train", "out", path_str(&out)),
    ])?;
    let run_cfg = loaded.cfg.run_config()?;
    if run_cfg.regime == Regime::FineTune && run_cfg.pretrained.is_none() {
        return Err(ConfigError("fine-tuning needs --checkpoint (train.checkpoint)".into()).into());
    }
    let ds = Dataset::load(&loaded.cfg.data_dir())?;
    let model = match run_cfg.regime {
        Regime::General => train_gt(&run_cfg, &ds.train)?,
        Regime::FineTune => train_ft(&run_cfg, &ds.train)?,
    };
    let dir = loaded.cfg.train_out();
    create_dir(&dir)?;
    let ck_path = dir.join(CHECKPOINT_FILE);
    model.checkpoint()?.save(&ck_path)?;
    let log_path = dir.join(TRAIN_LOG_FILE);
    fs::write(&log_path, model.log.to_csv()).map_err(|e| io_error(&log_path, e))?;
    loaded.echo(&dir)?;
    let last = model.log.records.last().ok_or_else(|| anyhow!("no epochs were run"))?;
    println!(
        "{} {} {}: {} epochs, final loss {:.6}",
        run_cfg.regime,
        run_cfg.scheme,
        run_cfg.prefixes,
        model.log.records.len(),
        last.loss
    );
    println!("checkpoint {}", ck_path.display());
    println!("train log {}", log_path.display());
    Ok(())
}

fn eval(
    common: &Common,
    checkpoint: Option<PathBuf>,
    trials: Option<PathBuf>,
    data: Option<PathBuf>,
    prefixes: Option<String>,
    out: Option<PathBuf>,
) -> Result<()> {
    let loaded = common.load(&[
        ("eval", "checkpoint", path_str(&checkpoint)),
        ("eval", "trials", path_str(&trials)),
        ("data", "dir", path_str(&data)),
        ("eval", "prefixes", prefixes),
        ("eval", "out", path_str(&out)),
    ])?;
    let cfg = &loaded.cfg;
    let ck_path = cfg
        .get("eval", "checkpoint")
        .map(PathBuf::from)
        .ok_or_else(|| ConfigError("eval needs --checkpoint (eval.checkpoint)".into()))?;
    let ck = Checkpoint::load(&ck_path)?;
    let data_dir = cfg.data_dir();
    let ds = Dataset::load(&data_dir)?;
    let trial_dir = cfg.get("eval", "trials").map(PathBuf::from).unwrap_or_else(|| data_dir.join(TRIALS_DIR));
    let lists = load_trials(&trial_dir)?;
    if lists.is_empty() {
        return Err(anyhow::Error::new(std::io::Error::new(std::io::ErrorKind::NotFound, "no trial lists"))
            .context(trial_dir.display().to_string()));
    }
    let spec = ck.heads.spec().clone();
    let dims = cfg.eval_prefixes()?.unwrap_or_else(|| vec![spec.full_dim()]);
    let report = evaluate(&ck.encoder, &lists, ds.eval_index(), &spec, &dims)
        .with_context(|| format!("evaluating {}", ck_path.display()))?;
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(p) = cfg.get("eval", "out") {
        let p = PathBuf::from(p);
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        fs::write(&p, &csv).map_err(|e| io_error(&p, e))?;
    }
    Ok(())
}
