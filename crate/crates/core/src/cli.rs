//! Command-line front end: `synth`, `train`, `bench` and `report`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::costmodel::{self, rows_to_csv};
use crate::datasynth::{self, SyntheticDataset};
use crate::error::{Error, Result};
use crate::loss::MarginKind;
use crate::metrics::{self, DiagnosticsSnapshot};
use crate::numerics::{Matrix, SeededRng};
use crate::sampler::ShardLayout;
use crate::shardsim::{distributed_partial_step, init_shards, FeatureBatch, StepConfig, ELEMENT_BYTES};
use crate::trainer::{FinalReport, SamplingRatio, Trainer};

/// Version of `summary.json`; `report` refuses to mix versions.
pub const SCHEMA_VERSION: u32 = 1;
pub const THREADS_ENV: &str = "PFC_SIM_THREADS";

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "pfc-sim", version, about = "Sampled, sharded margin-softmax simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file and its summary sidecar.
    Synth(CommonArgs),
    /// Train on a dataset file; one run directory per sampling ratio.
    Train(CommonArgs),
    /// Emit the memory/FLOP/communication scaling table.
    Bench(CommonArgs),
    /// Merge run summaries into one comparison table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MarginFlag {
    Plain,
    #[value(name = "cosface-style")]
    CosfaceStyle,
    #[value(name = "arcface-style")]
    ArcfaceStyle,
}

impl From<MarginFlag> for MarginKind {
    fn from(m: MarginFlag) -> Self {
        match m {
            MarginFlag::Plain => MarginKind::Plain,
            MarginFlag::CosfaceStyle => MarginKind::AdditiveCosine,
            MarginFlag::ArcfaceStyle => MarginKind::AdditiveAngular,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long)]
    pub shards: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub filter_threshold: Option<f64>,
    #[arg(long, value_enum)]
    pub margin: Option<MarginFlag>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Loaded config with flag overrides applied, plus the file text for provenance.
pub struct Resolved {
    pub config: ExperimentConfig,
    pub source: Option<String>,
    pub out: Option<PathBuf>,
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<Resolved> {
        let (mut cfg, source) = match &self.config {
            Some(path) => {
                let (cfg, text) = ExperimentConfig::load(path)?;
                (cfg, Some(text))
            }
            None => (ExperimentConfig::default(), None),
        };
        if let Some(seed) = self.seed {
            cfg.data.seed = seed;
        }
        if let Some(r) = self.r {
            cfg.pfc.ratio = SamplingRatio::Fixed(r);
            cfg.pfc.sweep.clear();
        }
        if let Some(k) = self.shards {
            cfg.pfc.shards = k;
        }
        if let Some(b) = self.batch {
            cfg.pfc.batch_size = b;
        }
        if let Some(t) = self.filter_threshold {
            cfg.pfc.filter_threshold = Some(t);
        }
        if let Some(m) = self.margin {
            cfg.model.margin = m.into();
        }
        let out = self.out.clone().or_else(|| cfg.output.dir.clone());
        Ok(Resolved {
            config: cfg,
            source,
            out,
        })
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Format { .. } | Error::Io { .. } => EXIT_DATA,
        Error::NumericalFailure { .. } => EXIT_NUMERICAL,
        _ => EXIT_OTHER,
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Reads the thread cap from the environment; unset means rayon's default.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let threads = thread_cap()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Synth(args) => cmd_synth(&args.resolve()?).map(|_| ()),
        Command::Train(args) => cmd_train(&args.resolve()?).map(|_| ()),
        Command::Bench(args) => cmd_bench(&args.resolve()?),
        Command::Report { runs, out } => cmd_report(&runs, out.as_deref()),
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

/// `config.toml` holds the file exactly as given; `effective.toml` has flags applied.
fn echo_config(dir: &Path, r: &Resolved) -> Result<()> {
    if let Some(text) = &r.source {
        write(&dir.join("config.toml"), text)?;
    }
    write(&dir.join("effective.toml"), r.config.to_toml())
}

fn require_out(r: &Resolved) -> Result<PathBuf> {
    r.out
        .clone()
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output.dir".into()))
}

pub const DATASET_FILE: &str = "dataset.pfcd";

/// Writes `dataset.pfcd`, `summary.json` and the config echo into the output directory.
pub fn cmd_synth(r: &Resolved) -> Result<PathBuf> {
    let out = require_out(r)?;
    let ds = r.config.synthesize()?;
    let summary = datasynth::summarize(&ds);
    create_dir(&out)?;
    let path = out.join(DATASET_FILE);
    datasynth::write_dataset(&ds, &path)?;
    write(&out.join("summary.json"), to_json(&summary))?;
    echo_config(&out, r)?;
    println!(
        "{}: {} points, {} classes, {} identities, {} flipped, {} conflicted",
        path.display(),
        summary.points,
        summary.classes,
        summary.identities,
        summary.flipped,
        summary.conflicted_points
    );
    Ok(path)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub ratio: String,
    pub resolved_ratio: f64,
    pub filter_threshold: Option<f64>,
    pub margin: MarginKind,
    pub shards: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub classes: usize,
    pub train_points: usize,
    pub report: FinalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub property: String,
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    fn new(property: &str, pass: bool, detail: String) -> Self {
        Self {
            property: property.into(),
            pass,
            detail,
        }
    }
}

fn load_dataset(r: &Resolved) -> Result<SyntheticDataset> {
    let path = r
        .config
        .data
        .path
        .as_ref()
        .ok_or_else(|| Error::Config("data.path is not set".into()))?;
    if !path.is_file() {
        return Err(Error::format("dataset", format!("{} does not exist", path.display())));
    }
    datasynth::read_dataset(path)
}

fn run_dir_name(ratio: &SamplingRatio) -> String {
    format!("r-{}", ratio.label())
}

/// Trains every configured ratio. Nothing is created on disk until the
/// dataset has loaded and every run has been configured successfully.
pub fn cmd_train(r: &Resolved) -> Result<Vec<RunSummary>> {
    let out = require_out(r)?;
    let ds = load_dataset(r)?;
    let ratios = r.config.ratios();
    let mut trainers = Vec::new();
    for ratio in &ratios {
        let cfg = r.config.train_config(*ratio)?;
        trainers.push(Trainer::new(&ds, cfg)?);
    }
    let sweep = !r.config.pfc.sweep.is_empty();
    create_dir(&out)?;
    let mut summaries = Vec::new();
    for (ratio, fresh) in ratios.iter().zip(trainers) {
        let dir = if sweep { out.join(run_dir_name(ratio)) } else { out.clone() };
        create_dir(&dir)?;
        let summary = run_one(r, &ds, fresh, &dir)?;
        println!(
            "{}: r={} loss={:.4} apcs={:.4} mics_max={:.4} tar={:.4}",
            dir.display(),
            summary.ratio,
            summary.report.mean_loss,
            summary.report.diagnostics.apcs,
            summary.report.mics_max,
            summary.report.verification.tar
        );
        summaries.push(summary);
    }
    if sweep {
        let rows: Vec<_> = ratios
            .iter()
            .map(|r| run_dir_name(r))
            .zip(&summaries)
            .map(|(name, s)| ReportRow::from_summary(name, s))
            .collect();
        write(&out.join("sweep.csv"), report_csv(&rows)?)?;
        let verdicts = sweep_verdicts(&summaries);
        write_verdicts(&out.join("verdicts.jsonl"), &verdicts)?;
    }
    Ok(summaries)
}

fn write_verdicts(path: &Path, verdicts: &[Verdict]) -> Result<()> {
    let mut text = String::new();
    for v in verdicts {
        text += &serde_json::to_string(v).expect("serializable");
        text.push('\n');
    }
    write(path, text)
}

fn run_one(r: &Resolved, ds: &SyntheticDataset, fresh: Trainer, dir: &Path) -> Result<RunSummary> {
    let ckpt = dir.join("checkpoint.bin");
    let metrics_path = dir.join("metrics.jsonl");
    let cfg = fresh.config().clone();
    let mut trainer = if r.config.output.resume && ckpt.is_file() {
        let bytes = fs::read(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        Trainer::resume(ds, cfg.clone(), &bytes)?
    } else {
        fresh
    };
    let resumed_at = trainer.state().step;
    let mut kept = String::new();
    if resumed_at > 0 {
        let old = fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        for line in old.lines() {
            let snap: DiagnosticsSnapshot =
                serde_json::from_str(line).map_err(|e| Error::format("metrics stream", e.to_string()))?;
            if snap.iteration < resumed_at {
                kept += line;
                kept.push('\n');
            }
        }
    }
    echo_config(dir, r)?;
    let mut stream = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    stream.write_all(kept.as_bytes()).map_err(|e| Error::io(&metrics_path, e))?;

    let every = r.config.output.checkpoint_every;
    let mut snapshots = Vec::new();
    while !trainer.is_done() {
        let outcome = trainer.step().map_err(|e| match e {
            Error::NumericalFailure { iteration, detail } => Error::NumericalFailure {
                iteration,
                detail: format!("{detail}; checkpoint: {}", ckpt.display()),
            },
            other => other,
        })?;
        if let Some(snap) = outcome.snapshot {
            metrics::write_snapshot_line(&mut stream, &snap).map_err(|e| Error::io(&metrics_path, e))?;
            snapshots.push(snap);
        }
        if every > 0 && trainer.state().step % every == 0 && !trainer.is_done() {
            save_checkpoint(&trainer, &ckpt)?;
        }
    }
    save_checkpoint(&trainer, &ckpt)?;
    let report = trainer.final_report()?;
    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        ratio: cfg.ratio.label(),
        resolved_ratio: trainer.ratio(),
        filter_threshold: cfg.filter_threshold,
        margin: cfg.margin.kind(),
        shards: cfg.shards,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        classes: trainer.data().num_classes(),
        train_points: trainer.data().len(),
        report,
    };
    write(&dir.join("summary.json"), to_json(&summary))?;
    let verdicts = run_verdicts(&trainer, &summary, &snapshots, resumed_at);
    write_verdicts(&dir.join("verdicts.jsonl"), &verdicts)?;
    Ok(summary)
}

fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let tmp = path.with_extension("bin.tmp");
    trainer.save_checkpoint(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn run_verdicts(trainer: &Trainer, s: &RunSummary, snaps: &[DiagnosticsSnapshot], resumed_at: u64) -> Vec<Verdict> {
    let rep = &s.report;
    let in_range = |v: f64| (-1.0 - 1e-12..=1.0 + 1e-12).contains(&v);
    let mut out = vec![
        Verdict::new(
            "finite_loss",
            rep.mean_loss.is_finite() && rep.final_loss.is_finite(),
            format!("mean {} final {}", rep.mean_loss, rep.final_loss),
        ),
        Verdict::new(
            "epoch_accounting",
            rep.steps == trainer.total_steps(),
            format!("{} steps, expected {}", rep.steps, trainer.total_steps()),
        ),
        Verdict::new(
            "diagnostics_in_range",
            snaps.iter().all(|x| in_range(x.apcs) && in_range(x.amncs)) && in_range(rep.mics_max),
            format!("{} snapshots after step {resumed_at}", snaps.len()),
        ),
    ];
    if s.filter_threshold.is_none() {
        out.push(Verdict::new(
            "verification_computed",
            rep.verification.genuine_pairs > 0 && rep.verification.impostor_pairs > 0,
            format!("tar {} at far {}", rep.verification.tar, rep.verification.far_target),
        ));
    }
    out
}

/// Trend checks across a sweep: smaller ratios give larger inter-class and
/// intra-class similarity, and a lower training loss than the full layer.
pub fn sweep_verdicts(runs: &[RunSummary]) -> Vec<Verdict> {
    let mut fixed: Vec<&RunSummary> = runs.iter().filter(|s| s.ratio != "batch").collect();
    fixed.sort_by(|a, b| a.resolved_ratio.total_cmp(&b.resolved_ratio));
    let mut out = Vec::new();
    if fixed.len() >= 2 {
        let strictly_down = |f: &dyn Fn(&RunSummary) -> f64| fixed.windows(2).all(|w| f(w[0]) > f(w[1]));
        let listing = |f: &dyn Fn(&RunSummary) -> f64| {
            fixed
                .iter()
                .map(|s| format!("r={}: {:.4}", s.ratio, f(s)))
                .collect::<Vec<_>>()
                .join(", ")
        };
        let mics = |s: &RunSummary| s.report.mics_mean;
        let apcs = |s: &RunSummary| s.report.diagnostics.apcs;
        out.push(Verdict::new("mics_decreases_with_ratio", strictly_down(&mics), listing(&mics)));
        out.push(Verdict::new("apcs_decreases_with_ratio", strictly_down(&apcs), listing(&apcs)));
    }
    let full = runs.iter().find(|s| s.resolved_ratio == 1.0);
    for s in runs.iter().filter(|s| s.resolved_ratio < 1.0) {
        if let Some(fc) = full {
            out.push(Verdict::new(
                &format!("loss_below_full_at_r_{}", s.ratio),
                s.report.mean_loss <= fc.report.mean_loss,
                format!("{:.4} vs {:.4}", s.report.mean_loss, fc.report.mean_loss),
            ));
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LiveCheck {
    pub classes: usize,
    pub dim: usize,
    pub batch: usize,
    pub shards: usize,
    pub estimated_comm_bytes: u64,
    pub measured_comm_bytes: u64,
    pub matches: bool,
}

/// Runs one real sharded step and compares its trace with the closed form.
pub fn live_comm_check(classes: usize, dim: usize, batch: usize, shards: usize, seed: u64) -> Result<LiveCheck> {
    let layout = ShardLayout::new(classes, shards)?;
    let centers = init_shards(&layout, dim, 0.1, seed)?;
    let mut rng = SeededRng::new(seed, 0);
    let features = Matrix::from_fn(dim, batch, |_, _| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng));
    let labels = (0..batch).map(|i| (i * 7919) % classes).collect();
    let batch_data = FeatureBatch::new(features, labels)?;
    let cfg = StepConfig::new(1.0, crate::loss::MarginConfig::cosface(), 0.1);
    let res = distributed_partial_step(centers, &batch_data, &cfg, seed, 0)?;
    let est = costmodel::estimate(classes, dim, batch, shards, 1.0, ELEMENT_BYTES)?;
    Ok(LiveCheck {
        classes,
        dim,
        batch,
        shards,
        estimated_comm_bytes: est.comm_bytes(),
        measured_comm_bytes: res.trace.total_bytes(),
        matches: est.comm == res.trace,
    })
}

/// Writes `bench.csv` and `live_check.json` to the output directory, or the table to stdout.
pub fn cmd_bench(r: &Resolved) -> Result<()> {
    let spec = r.config.scaling_spec()?;
    let csv = rows_to_csv(&costmodel::scaling_report(&spec)?)?;
    let live = live_comm_check(1000, 64, 128, 4, r.config.data.seed)?;
    if !live.matches {
        return Err(Error::contract(format!(
            "communication estimate {} differs from measured trace {}",
            live.estimated_comm_bytes, live.measured_comm_bytes
        )));
    }
    match &r.out {
        Some(dir) => {
            create_dir(dir)?;
            write(&dir.join("bench.csv"), &csv)?;
            write(&dir.join("live_check.json"), to_json(&live))?;
            echo_config(dir, r)?;
            println!("{}", dir.join("bench.csv").display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub run: String,
    pub ratio: String,
    pub filter_threshold: String,
    pub classes: usize,
    pub apcs: String,
    pub amncs: String,
    pub amncs_conflicted: String,
    pub mics_mean: String,
    pub mics_max: String,
    pub tar: String,
    pub far: String,
    pub mean_loss: String,
}

fn fixed6(v: f64) -> String {
    format!("{v:.6}")
}

impl ReportRow {
    pub fn from_summary(run: String, s: &RunSummary) -> Self {
        let rep = &s.report;
        Self {
            run,
            ratio: s.ratio.clone(),
            filter_threshold: s.filter_threshold.map(fixed6).unwrap_or_default(),
            classes: s.classes,
            apcs: fixed6(rep.diagnostics.apcs),
            amncs: fixed6(rep.diagnostics.amncs),
            amncs_conflicted: rep.diagnostics.amncs_conflicted.map(fixed6).unwrap_or_default(),
            mics_mean: fixed6(rep.mics_mean),
            mics_max: fixed6(rep.mics_max),
            tar: fixed6(rep.verification.tar),
            far: format!("{:e}", rep.verification.far_target),
            mean_loss: fixed6(rep.mean_loss),
        }
    }
}

pub fn report_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::format("csv", e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("csv", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format("run summary", e.to_string()))?;
    let version = value.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(SCHEMA_VERSION as u64) {
        return Err(Error::format(
            "run summary",
            format!("{}: schema version {version:?}, expected {SCHEMA_VERSION}", path.display()),
        ));
    }
    serde_json::from_value(value).map_err(|e| Error::format("run summary", e.to_string()))
}

fn label_of(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Collects run rows; a sweep directory contributes one row per ratio subdirectory.
pub fn collect_rows(runs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for dir in runs {
        if dir.join("summary.json").is_file() {
            rows.push(ReportRow::from_summary(label_of(dir), &read_summary(dir)?));
            continue;
        }
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut subs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("summary.json").is_file())
            .collect();
        if subs.is_empty() {
            return Err(Error::format("run directory", format!("{} has no summary.json", dir.display())));
        }
        subs.sort();
        for sub in subs {
            let name = format!("{}/{}", label_of(dir), label_of(&sub));
            rows.push(ReportRow::from_summary(name, &read_summary(&sub)?));
        }
    }
    Ok(rows)
}

pub fn cmd_report(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let csv = report_csv(&collect_rows(runs)?)?;
    match out {
        Some(dir) => {
            create_dir(dir)?;
            write(&dir.join("report.csv"), &csv)?;
            println!("{}", dir.join("report.csv").display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}
