use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use qsam_core::data::{
    build_compressed_dataset, generate_synthetic, load_container, load_png_dir, qst_report, read_cifar_binary,
    save_container, SyntheticSpec,
};
use qsam_core::jpeg::{parse_quant_tables, read_frame_info, Precision};
use qsam_core::nn::{read_checkpoint, write_checkpoint};
use qsam_core::train::{
    evaluate, metrics_csv, train_baseline, train_qam, Batcher, BasisStrategy, EpochMetrics, QamInit,
};
use qsam_core::{
    classify_qst, extract_qst, qac, scale_default_table, AssembleMode, DataError, Dataset, JpegError, ModelError,
    QacConfig, Qst, TinyNet, TrainConfig, TrainError,
};

#[derive(Debug)]
enum CliError {
    /// Bad flags, unreadable or malformed input.
    Input(String),
    /// An internal invariant failed.
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "{m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

fn input(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        input(e)
    }
}

impl From<JpegError> for CliError {
    fn from(e: JpegError) -> Self {
        input(e)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        input(e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Nn(n) => CliError::Internal(n.to_string()),
            other => input(other),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Nn(n) => CliError::Internal(n.to_string()),
            other => input(other),
        }
    }
}

#[derive(Parser)]
#[command(name = "qsam", version, about = "Quantization-aware training on JPEG-compressed images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print quantization tables, frame info, QST, its class and QAC as JSON.
    Inspect {
        path: PathBuf,
        /// Accept Cb/Cr bound to different tables (Cb wins).
        #[arg(long)]
        lenient: bool,
    },
    /// QAC of the scaled default tables at a quality factor.
    Qac {
        #[arg(long)]
        qf: u8,
    },
    /// Compress a source set at each QF and write a dataset container.
    BuildDataset(BuildArgs),
    /// Train a QAM model (or the baseline) and write a checkpoint.
    Train(TrainArgs),
    /// Per-QST accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// JSON instead of CSV.
        #[arg(long)]
        json: bool,
    },
    /// Merge eval or metrics CSVs into one table, one column per run.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Column names, in input order; defaults to file stems.
        #[arg(long, value_delimiter = ',')]
        names: Vec<String>,
    },
}

#[derive(Args)]
struct BuildArgs {
    /// Directory of `<class>/*.png`.
    #[arg(long, group = "source")]
    png_dir: Option<PathBuf>,
    /// CIFAR binary batch file.
    #[arg(long, group = "source")]
    cifar: Option<PathBuf>,
    /// Generate the synthetic desk corpus.
    #[arg(long, group = "source")]
    synthetic: bool,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 300)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated quality factors.
    #[arg(long, value_delimiter = ',', required = true)]
    qf: Vec<u8>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Plain BN model trained on every sample without QAC.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    no_qac: bool,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    second_order: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ite1: Option<usize>,
    #[arg(long)]
    ite2: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<BasisStrategy>,
    /// Initialize a QAM model from this baseline checkpoint.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Write metrics CSV here instead of stdout.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<BasisStrategy, String> {
    match s {
        "spread" => Ok(BasisStrategy::Spread),
        "top_frequency" | "top-frequency" => Ok(BasisStrategy::TopFrequency),
        _ => Err(format!("unknown strategy {s}; expected spread or top_frequency")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.code());
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("QSAM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Input(format!("QSAM_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Internal(e.to_string()))
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Inspect { path, lenient } => cmd_inspect(&path, lenient),
        Command::Qac { qf } => {
            let q = scale_default_table(qf).map_err(input)?;
            emit_json(&json!({
                "qf": qf,
                "qac_raw": qac(&q, &QacConfig::raw()),
                "qac_normalized": qac(&q, &QacConfig::default()),
            }))
        }
        Command::BuildDataset(a) => cmd_build(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval { dataset, ckpt, json } => cmd_eval(&dataset, &ckpt, json),
        Command::Report { inputs, names } => cmd_report(&inputs, &names),
    }
}

fn emit_json(v: &impl Serialize) -> Result<(), CliError> {
    let s = serde_json::to_string_pretty(v).map_err(|e| CliError::Internal(e.to_string()))?;
    emit(&format!("{s}\n"))
}

fn emit(s: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    out.write_all(s.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn qst_json(q: &Qst) -> serde_json::Value {
    json!({ "luma": q.luma().to_vec(), "chroma": q.chroma().to_vec() })
}

fn cmd_inspect(path: &Path, lenient: bool) -> Result<(), CliError> {
    let bytes = fs::read(path)?;
    let tables = parse_quant_tables(&bytes)?;
    let frame = read_frame_info(&bytes)?;
    let mode = if lenient { AssembleMode::Lenient } else { AssembleMode::Strict };
    let assembled = extract_qst(&bytes, mode)?;
    let class = classify_qst(&assembled.qst);
    let tables: Vec<_> = tables
        .iter()
        .map(|t| {
            json!({
                "id": t.id,
                "precision": if t.precision == Precision::Bits8 { 8 } else { 16 },
                "offset": t.offset,
                "steps": t.steps.to_vec(),
            })
        })
        .collect();
    emit_json(&json!({
        "tables": tables,
        "frame": frame,
        "qst": qst_json(&assembled.qst),
        "clamped": assembled.clamped,
        "class": class.to_string(),
        "default_qf": match class { qsam_core::QstClass::DefaultQf(qf) => Some(qf), _ => None },
        "qac_raw": qac(&assembled.qst, &QacConfig::raw()),
        "qac_normalized": qac(&assembled.qst, &QacConfig::default()),
    }))
}

fn cmd_build(a: BuildArgs) -> Result<(), CliError> {
    let source = if let Some(dir) = &a.png_dir {
        load_png_dir(dir)?
    } else if let Some(f) = &a.cifar {
        read_cifar_binary(f)?
    } else if a.synthetic {
        generate_synthetic(&SyntheticSpec::desk(a.classes, a.per_class, a.seed))?
    } else {
        return Err(CliError::Input("one of --png-dir, --cifar or --synthetic is required".into()));
    };
    log::info!("source: {} images, {} classes", source.len(), source.classes);
    let ds = build_compressed_dataset(&source, &a.qf)?;
    save_container(&ds, &a.out)?;
    log::info!("wrote {} records to {}", ds.len(), a.out.display());
    emit(&qst_report(&ds))
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    Ok(load_container(path)?)
}

fn resolve_config(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { cfg.$f = v; } )* };
    }
    set!(m, seed, ite1, ite2, batch, alpha, beta, gamma, strategy);
    if a.second_order {
        cfg.second_order = true;
    }
    if a.no_qac || a.baseline {
        cfg.qac = QacConfig::disabled();
    }
    if a.init_from.is_some() {
        cfg.init = QamInit::Baseline;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ordered_labels(ds: &Dataset) -> Result<Vec<String>, CliError> {
    Ok(Batcher::new(ds, &QacConfig::disabled())?.ordered_labels())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let cfg = resolve_config(&a)?;
    log::info!(
        "resolved config: {}",
        serde_json::to_string(&cfg).map_err(|e| CliError::Internal(e.to_string()))?
    );
    let ds = load_dataset(&a.dataset)?;
    let seen: Vec<Qst> = ds.qsts.clone();
    let (mut model, metrics, extra): (TinyNet, Vec<EpochMetrics>, serde_json::Value) = if a.baseline {
        let run = train_baseline(&ds, &cfg)?;
        (run.model, run.metrics, json!({ "kind": "baseline" }))
    } else {
        let baseline = match &a.init_from {
            Some(p) => Some(load_model(p)?.0),
            None => None,
        };
        let run = train_qam(&ds, &cfg, baseline.as_ref())?;
        let extra = json!({
            "kind": "qam",
            "basis": run.basis.as_slice(),
            "split": { "base": run.split.base.len(), "meta": run.split.meta.len() },
        });
        (run.model, run.metrics, extra)
    };
    let mut extra = extra;
    extra["config"] = serde_json::to_value(&cfg).map_err(|e| CliError::Internal(e.to_string()))?;
    extra["seen_qsts"] = serde_json::to_value(&seen).map_err(|e| CliError::Internal(e.to_string()))?;
    let ck = model.to_checkpoint(extra);
    fs::write(&a.out, write_checkpoint(&ck))?;
    log::info!("wrote checkpoint {}", a.out.display());
    let csv = metrics_csv(&metrics, &ordered_labels(&ds)?);
    match &a.metrics {
        Some(p) => fs::write(p, csv)?,
        None => emit(&csv)?,
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(TinyNet, serde_json::Value), CliError> {
    let bytes = fs::read(path)?;
    let ck = read_checkpoint(&bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(TinyNet::from_checkpoint(&ck)?)
}

fn cmd_eval(dataset: &Path, ckpt: &Path, as_json: bool) -> Result<(), CliError> {
    let ds = load_dataset(dataset)?;
    let (model, extra) = load_model(ckpt)?;
    let seen: Vec<Qst> = match extra.get("seen_qsts") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| CliError::Input(format!("checkpoint seen_qsts: {e}")))?,
        None => Vec::new(),
    };
    if model.arch.classes < ds.classes as usize {
        return Err(CliError::Input(format!(
            "dataset has {} classes, model {}",
            ds.classes, model.arch.classes
        )));
    }
    let report = evaluate(&model, &ds, &seen)?;
    if as_json {
        emit_json(&report)
    } else {
        emit(&report.to_csv())
    }
}

/// Per-run column: bucket label to value, in first-seen order.
type Column = Vec<(String, String)>;

fn read_run(path: &Path) -> Result<Column, CliError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| CliError::Input(format!("{}: empty file", path.display())))?
        .split(',')
        .collect();
    let rows: Vec<Vec<&str>> = lines.filter(|l| !l.is_empty()).map(|l| l.split(',').collect()).collect();
    if header.first() == Some(&"qst") {
        let acc = header
            .iter()
            .position(|h| *h == "accuracy")
            .ok_or_else(|| CliError::Input(format!("{}: no accuracy column", path.display())))?;
        Ok(rows
            .iter()
            .map(|r| (r[0].to_string(), r.get(acc).unwrap_or(&"").to_string()))
            .collect())
    } else if header.first() == Some(&"epoch") {
        let last = rows
            .last()
            .ok_or_else(|| CliError::Input(format!("{}: no epochs", path.display())))?;
        Ok(header
            .iter()
            .enumerate()
            .filter_map(|(i, h)| {
                h.strip_prefix("acc_")
                    .map(|l| (l.to_string(), last.get(i).unwrap_or(&"").to_string()))
            })
            .collect())
    } else {
        Err(CliError::Input(format!(
            "{}: neither an eval table nor a metrics file",
            path.display()
        )))
    }
}

fn cmd_report(inputs: &[PathBuf], names: &[String]) -> Result<(), CliError> {
    if !names.is_empty() && names.len() != inputs.len() {
        return Err(CliError::Input(format!(
            "{} names for {} inputs",
            names.len(),
            inputs.len()
        )));
    }
    let mut order: Vec<String> = Vec::new();
    let mut columns: Vec<(String, BTreeMap<String, String>)> = Vec::new();
    for (i, p) in inputs.iter().enumerate() {
        let name = names.get(i).cloned().unwrap_or_else(|| {
            p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("run{i}"))
        });
        let col = read_run(p)?;
        for (label, _) in &col {
            if !order.contains(label) {
                order.push(label.clone());
            }
        }
        columns.push((name, col.into_iter().collect()));
    }
    let mut out = String::from("qst");
    for (name, _) in &columns {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for label in &order {
        out.push_str(label);
        for (_, col) in &columns {
            out.push(',');
            out.push_str(col.get(label).map(String::as_str).unwrap_or(""));
        }
        out.push('\n');
    }
    emit(&out)
}
