//! Command-line driver for dense training, upcycling, MoE training and analysis.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use upcycle_core::analysis::AnalysisReport;
use upcycle_core::checkpoint::Checkpoint;
use upcycle_core::config::PipelineConfig;
use upcycle_core::pipeline::{self, Datasets};
use upcycle_core::train::{evaluate_task, TrainLogRecord};
use upcycle_core::upcycle::InitMethod;

#[derive(Parser, Debug)]
#[command(name = "upcycle", version, about = "Upcycle a dense toy model into a mixture of experts")]
struct Cli {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long, global = true, env = "UPCYCLE_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Worker threads, overriding the config.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the dense model.
    TrainDense,
    /// Record per-site FFN inputs of the dense model on calibration data.
    Capture {
        #[arg(long)]
        dense: Option<PathBuf>,
    },
    /// Build an MoE model from the dense checkpoint.
    Upcycle {
        #[arg(long, value_parser = parse_method)]
        method: Option<InitMethod>,
        #[arg(long)]
        dense: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Train an upcycled model.
    TrainMoe {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Add expert self-distillation against an EMA teacher.
        #[arg(long)]
        eesd: bool,
    },
    /// Write routing and expert metrics for an MoE checkpoint.
    Analyze {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run every initialization method over several seeds.
    Compare {
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
}

fn parse_method(s: &str) -> Result<InitMethod, String> {
    InitMethod::ALL
        .into_iter()
        .find(|m| m.cli_name() == s)
        .ok_or_else(|| {
            let names: Vec<_> = InitMethod::ALL.iter().map(|m| m.cli_name()).collect();
            format!("unknown method {s:?}, expected one of {}", names.join(", "))
        })
}

#[derive(Debug, Serialize)]
struct CliError {
    error: String,
    message: String,
}

impl CliError {
    fn new(kind: &str, message: impl Into<String>) -> Self {
        Self {
            error: kind.into(),
            message: message.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.error.as_str() {
            "InvalidArgument" | "Usage" => 2,
            "MissingInput" => 3,
            "NonFiniteLoss" => 4,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.error, self.message)
    }
}

impl From<upcycle_core::Error> for CliError {
    fn from(e: upcycle_core::Error) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("Io", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new("Io", e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

struct Ctx {
    cfg: PipelineConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([("seed".to_string(), self.cfg.seed)])
    }

    fn datasets(&self) -> CliResult<Datasets> {
        Ok(pipeline::make_datasets(&self.cfg)?)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<PathBuf> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }

    fn write_text(&self, name: &str, text: &str) -> CliResult<PathBuf> {
        let path = self.path(name);
        fs::write(&path, text)?;
        Ok(path)
    }

    fn save(&self, name: &str, ck: &Checkpoint) -> CliResult<PathBuf> {
        let path = self.path(name);
        ck.save(&path)?;
        Ok(path)
    }

    fn default_moe(&self) -> String {
        format!("moe_{}.json", self.cfg.init.method.cli_name())
    }
}

fn load(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::new(
            "MissingInput",
            format!("{} does not exist", path.display()),
        ));
    }
    Ok(Checkpoint::load(path)?)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

/// JSON-lines training log.
struct JsonLog {
    w: BufWriter<fs::File>,
}

impl JsonLog {
    fn create(path: &Path) -> CliResult<Self> {
        Ok(Self {
            w: BufWriter::new(fs::File::create(path)?),
        })
    }

    fn record(&mut self, r: &TrainLogRecord) -> upcycle_core::Result<()> {
        let line = serde_json::to_string(r).map_err(|e| upcycle_core::Error::Io(e.to_string()))?;
        writeln!(self.w, "{line}")?;
        Ok(())
    }

    fn finish(mut self) -> CliResult<()> {
        self.w.flush()?;
        Ok(())
    }
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn train_dense(ctx: &Ctx) -> CliResult<()> {
    let data = ctx.datasets()?;
    let log_path = ctx.path("dense_log.jsonl");
    let mut log = JsonLog::create(&log_path)?;
    let model = pipeline::train_dense(&ctx.cfg, &data, &mut |r| log.record(r))?;
    log.finish()?;
    let ck = Checkpoint::from_model(&model, None, ctx.cfg.to_json_value(), ctx.seeds())?;
    let path = ctx.save("dense.json", &ck)?;
    report(&[path, log_path]);
    Ok(())
}

fn capture(ctx: &Ctx, dense: Option<PathBuf>) -> CliResult<()> {
    let dense_path = dense.unwrap_or_else(|| ctx.path("dense.json"));
    let (dense, _) = load(&dense_path)?.to_model()?;
    let data = ctx.datasets()?;
    let bank = pipeline::capture(&ctx.cfg, &dense, &data)?;
    let ck = Checkpoint::from_bank(&bank, ctx.cfg.to_json_value(), ctx.seeds());
    report(&[ctx.save("bank.json", &ck)?]);
    Ok(())
}

#[derive(Serialize)]
struct ClusterSite<'a> {
    site: usize,
    cluster_sizes: Vec<usize>,
    assignments: &'a [usize],
    centroids: Vec<Vec<f64>>,
    objective_trace: &'a [f64],
}

fn upcycle(
    ctx: &Ctx,
    method: Option<InitMethod>,
    dense: Option<PathBuf>,
    bank: Option<PathBuf>,
) -> CliResult<()> {
    let method = method.unwrap_or(ctx.cfg.init.method);
    let dense_path = dense.unwrap_or_else(|| ctx.path("dense.json"));
    let (dense, _) = load(&dense_path)?.to_model()?;
    let bank = if method == InitMethod::ClusterAware {
        let bank_path = bank.unwrap_or_else(|| ctx.path("bank.json"));
        Some(load(&bank_path)?.to_bank()?)
    } else {
        None
    };
    let out = pipeline::upcycle(&ctx.cfg, &dense, bank.as_ref(), method)?;
    let name = method.cli_name();
    let ck = Checkpoint::from_model(&out.model, None, ctx.cfg.to_json_value(), ctx.seeds())?;
    let mut paths = vec![
        ctx.save(&format!("moe_{name}.json"), &ck)?,
        ctx.write_json(&format!("init_{name}.json"), &out.reports)?,
    ];
    if !out.clusters.is_empty() {
        let sites: Vec<ClusterSite> = out
            .clusters
            .iter()
            .map(|(&site, c)| ClusterSite {
                site,
                cluster_sizes: c.cluster_sizes(),
                assignments: &c.assignments,
                centroids: c.centroids.to_rows(),
                objective_trace: &c.objective_trace,
            })
            .collect();
        paths.push(ctx.write_json(&format!("clusters_{name}.json"), &sites)?);
    }
    report(&paths);
    Ok(())
}

fn train_moe(ctx: &Ctx, model: Option<PathBuf>, eesd: bool) -> CliResult<()> {
    let model_path = model.unwrap_or_else(|| ctx.path(&ctx.default_moe()));
    let (mut model, teachers) = load(&model_path)?.to_model()?;
    if model.moe_sites().is_empty() {
        return Err(CliError::new(
            "InvalidArgument",
            format!("{} has no MoE blocks", model_path.display()),
        ));
    }
    let eesd = eesd || ctx.cfg.moe_train.eesd;
    let data = ctx.datasets()?;
    let base = format!("{}_trained{}", stem(&model_path), if eesd { "_eesd" } else { "" });
    let log_path = ctx.path(&format!("{base}_log.jsonl"));
    let mut log = JsonLog::create(&log_path)?;
    let teachers =
        pipeline::train_moe(&ctx.cfg, &mut model, teachers, &data, eesd, &mut |r| log.record(r))?;
    log.finish()?;
    let ck = Checkpoint::from_model(&model, teachers.as_ref(), ctx.cfg.to_json_value(), ctx.seeds())?;
    report(&[ctx.save(&format!("{base}.json"), &ck)?, log_path]);
    Ok(())
}

#[derive(Serialize)]
struct AnalysisOutput<'a> {
    model: String,
    eval_task_loss: f64,
    eval_accuracy: f64,
    capacity_factor: f64,
    sites: &'a AnalysisReport,
}

fn analyze(ctx: &Ctx, model: Option<PathBuf>) -> CliResult<()> {
    let model_path = model.unwrap_or_else(|| ctx.path(&ctx.default_moe()));
    let (mut model, _) = load(&model_path)?.to_model()?;
    let data = ctx.datasets()?;
    let cf = ctx.cfg.moe.capacity_eval;
    model.set_capacity_factor(cf);
    let eval = &data.eval;
    let metrics = evaluate_task(&model, &eval.inputs, &eval.labels, cf)?;
    let analysis = AnalysisReport::for_model(&model, &eval.inputs)?;
    let base = stem(&model_path);
    let out = AnalysisOutput {
        model: model_path.display().to_string(),
        eval_task_loss: metrics.task_loss,
        eval_accuracy: metrics.accuracy,
        capacity_factor: cf,
        sites: &analysis,
    };
    report(&[
        ctx.write_text(&format!("{base}_summary.csv"), &analysis.summary_csv())?,
        ctx.write_text(&format!("{base}_metrics.csv"), &analysis.metrics_csv())?,
        ctx.write_json(&format!("{base}_analysis.json"), &out)?,
    ]);
    Ok(())
}

fn gradcheck(ctx: &Ctx, model: Option<PathBuf>) -> CliResult<()> {
    let model_path = model.unwrap_or_else(|| ctx.path(&ctx.default_moe()));
    let (mut model, teachers) = load(&model_path)?.to_model()?;
    model.set_capacity_factor(ctx.cfg.moe.capacity_train);
    let teachers = match teachers {
        Some(t) => Some(t),
        None if ctx.cfg.moe_train.eesd && !model.moe_sites().is_empty() => {
            Some(model.teachers(ctx.cfg.moe_train.beta)?)
        }
        None => None,
    };
    let data = ctx.datasets()?;
    let rep = pipeline::gradcheck(&ctx.cfg, &model, teachers.as_ref(), &data)?;
    report(&[ctx.write_json(&format!("{}_gradcheck.json", stem(&model_path)), &rep)?]);
    Ok(())
}

fn compare(ctx: &Ctx, seeds: usize) -> CliResult<()> {
    if seeds == 0 {
        return Err(CliError::new("InvalidArgument", "--seeds must be >= 1"));
    }
    let rows = pipeline::compare(&ctx.cfg, seeds)?;
    report(&[
        ctx.write_text("compare.csv", &pipeline::compare_csv(&rows))?,
        ctx.write_json("compare.json", &rows)?,
    ]);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) if !p.exists() => {
            return Err(CliError::new(
                "MissingInput",
                format!("{} does not exist", p.display()),
            ))
        }
        Some(p) => PipelineConfig::from_path(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(t) = cli.threads {
        cfg.threads = t;
        cfg.validate()?;
    }
    let out = cli
        .out_dir
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&out)?;
    let ctx = Ctx { cfg, out };
    match cli.command {
        Command::TrainDense => train_dense(&ctx),
        Command::Capture { dense } => capture(&ctx, dense),
        Command::Upcycle { method, dense, bank } => upcycle(&ctx, method, dense, bank),
        Command::TrainMoe { model, eesd } => train_moe(&ctx, model, eesd),
        Command::Analyze { model } => analyze(&ctx, model),
        Command::Gradcheck { model } => gradcheck(&ctx, model),
        Command::Compare { seeds } => compare(&ctx, seeds),
    }
}

fn fail(err: CliError) -> ExitCode {
    let text = serde_json::to_string(&err).unwrap_or_else(|_| err.to_string());
    eprintln!("{text}");
    ExitCode::from(err.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            return fail(CliError::new("Usage", e.to_string().trim_end()));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
