//! `oaid` — operator front end for the detection toolkit.
//!
//! Subcommands: `corpus gen`, `train online`, `eval matrix`, `inpaint gen`,
//! `train pixel`, `eval pixel`. All randomness flows from `--seed`; repeated
//! runs with the same configuration produce byte-identical outputs, with
//! timestamps confined to `<out>/log.jsonl`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use oaid_core::corpus::{self, Manifest};
use oaid_core::detector::{load_checkpoint, save_checkpoint, HeadKind};
use oaid_core::error::{Error, Result};
use oaid_core::exec;
use oaid_core::inpaint::{
    self, load_pixel_manifest, load_pixel_split, whole_image_sample, PixelDatasetConfig,
    PixelSample, PixelTrainConfig, ProvenanceKind,
};
use oaid_core::metrics;
use oaid_core::online::{self, TrainConfig};

#[derive(Parser)]
#[command(name = "oaid", version, about = "Synthetic-image detection toolkit")]
struct Cli {
    /// JSON configuration file (keys: manifest, train, pixel_train,
    /// pixel_data); flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides seeds from config and manifest files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Workspace directory for outputs and the event log.
    #[arg(long, global = true, default_value = "oaid-out")]
    out: PathBuf,
    /// Worker thread cap (1 forces sequential execution, 0 = one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus operations.
    Corpus {
        #[command(subcommand)]
        op: CorpusOp,
    },
    /// Training runs.
    Train {
        #[command(subcommand)]
        op: TrainOp,
    },
    /// Evaluation and reports.
    Eval {
        #[command(subcommand)]
        op: EvalOp,
    },
    /// Pixel-level dataset synthesis.
    Inpaint {
        #[command(subcommand)]
        op: InpaintOp,
    },
}

#[derive(Subcommand)]
enum CorpusOp {
    /// Materialize the image corpus to `<out>/corpus`.
    Gen {
        /// Corpus manifest JSON (default: the built-in manifest).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TrainOp {
    /// Run (or resume) the progressive whole-image training sequence.
    Online {
        /// Materialized corpus directory (default `<out>/corpus`).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Run identifier under `<out>/runs/`.
        #[arg(long, default_value = "default")]
        run_id: String,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Train the pixel-level detector on a materialized pixel dataset.
    Pixel {
        /// Pixel dataset directory (default `<out>/pixel`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated provenance kinds: inpaint, cutmix, whole.
        #[arg(long, default_value = "inpaint,cutmix")]
        kinds: String,
        /// Comma-separated base source ids (default: all in the dataset).
        #[arg(long)]
        sources: Option<String>,
        /// Cap on training samples per pixel source (for budget-matched runs).
        #[arg(long)]
        limit: Option<usize>,
        /// Corpus directory, required when `kinds` includes `whole`.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
}

#[derive(Args, Clone, Copy, Default)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Subcommand)]
enum EvalOp {
    /// Build the source-by-stage generalization matrix and emit reports.
    Matrix {
        /// Materialized corpus directory (default `<out>/corpus`).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Run identifier under `<out>/runs/` holding the stage checkpoints.
        #[arg(long, default_value = "default")]
        run_id: String,
    },
    /// Evaluate a pixel model and print the metrics table.
    Pixel {
        /// Pixel dataset directory (default `<out>/pixel`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pixel model checkpoint (default `<out>/pixel_model.ckpt`).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
        /// Comma-separated pixel source names (default: all in the dataset).
        #[arg(long)]
        sources: Option<String>,
    },
}

#[derive(Subcommand)]
enum InpaintOp {
    /// Synthesize inpaint and CutMix pixel datasets to `<out>/pixel`.
    Gen {
        /// Corpus manifest JSON (default `<out>/corpus/manifest.json`).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

/// Optional JSON configuration; every field has a default and flags win.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    manifest: Option<PathBuf>,
    train: Option<TrainConfig>,
    pixel_train: Option<PixelTrainConfig>,
    pixel_data: Option<PixelDatasetConfig>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))
}

struct EventLog {
    path: PathBuf,
}

impl EventLog {
    fn new(out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        Ok(EventLog { path: out_dir.join("log.jsonl") })
    }

    /// Append one event line; the timestamp lives only here, keeping every
    /// other output byte-reproducible.
    fn emit(&self, event: &str, mut fields: serde_json::Value) {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        if let Some(map) = fields.as_object_mut() {
            map.insert("ts".into(), json!(ts));
            map.insert("event".into(), json!(event));
        }
        if let Ok(mut f) = fs::OpenOptions::new().create(true).append(true).open(&self.path) {
            let _ = writeln!(f, "{fields}");
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // usage problem, i.e. a validation failure.
            let code = if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        exec::configure_threads(threads)?;
    }
    let file_config = load_file_config(cli.config.as_deref())?;
    match cli.command {
        Command::Corpus { op: CorpusOp::Gen { manifest } } => {
            cmd_corpus_gen(&cli.out, cli.seed, manifest.or(file_config.manifest))
        }
        Command::Train { op } => match op {
            TrainOp::Online { corpus, run_id, overrides } => cmd_train_online(
                &cli.out,
                cli.seed,
                corpus,
                &run_id,
                file_config.train.unwrap_or_default(),
                overrides,
            ),
            TrainOp::Pixel { data, kinds, sources, limit, corpus, overrides } => cmd_train_pixel(
                &cli.out,
                cli.seed,
                data,
                &kinds,
                sources.as_deref(),
                limit,
                corpus,
                file_config.pixel_train.unwrap_or_default(),
                overrides,
            ),
        },
        Command::Eval { op } => match op {
            EvalOp::Matrix { corpus, run_id } => cmd_eval_matrix(&cli.out, corpus, &run_id),
            EvalOp::Pixel { data, model, split, sources } => {
                cmd_eval_pixel(&cli.out, data, model, &split, sources.as_deref())
            }
        },
        Command::Inpaint { op: InpaintOp::Gen { manifest } } => cmd_inpaint_gen(
            &cli.out,
            cli.seed,
            manifest.or(file_config.manifest),
            file_config.pixel_data.unwrap_or_default(),
        ),
    }
}

fn load_manifest_from(path: &Path) -> Result<Manifest> {
    if !path.is_file() {
        return Err(Error::MissingData(format!("manifest {} does not exist", path.display())));
    }
    Manifest::load(path)
}

fn corpus_dir(out: &Path, flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| out.join("corpus"))
}

fn cmd_corpus_gen(out: &Path, seed: Option<u64>, manifest_path: Option<PathBuf>) -> Result<()> {
    let mut manifest = match &manifest_path {
        Some(path) => load_manifest_from(path)?,
        None => corpus::default_manifest(),
    };
    if let Some(seed) = seed {
        manifest.seed = seed;
    }
    manifest.validate()?;
    let log = EventLog::new(out)?;
    log.emit("command_start", json!({"command": "corpus gen", "seed": manifest.seed}));
    let target = out.join("corpus");
    let summary = corpus::materialize_corpus(&manifest, &target)?;
    for s in &summary.sources {
        println!(
            "{:<16} train {:>5}  val {:>4}  test {:>4}  {}",
            s.id,
            s.train,
            s.val,
            s.test,
            if s.generated_files { "rendered" } else { "validated on disk" }
        );
        log.emit(
            "source_materialized",
            json!({"source": s.id, "train": s.train, "val": s.val, "test": s.test}),
        );
    }
    log.emit("command_end", json!({"command": "corpus gen", "status": "ok"}));
    println!("corpus written to {}", target.display());
    Ok(())
}

fn apply_overrides(config: &mut TrainConfig, seed: Option<u64>, o: TrainOverrides) {
    if let Some(seed) = seed {
        config.master_seed = seed;
    }
    if let Some(epochs) = o.epochs {
        config.epochs_per_stage = epochs;
    }
    if let Some(batch) = o.batch_size {
        config.batch_size = batch;
    }
    if let Some(lr) = o.learning_rate {
        config.optimizer.learning_rate = lr;
    }
}

fn cmd_train_online(
    out: &Path,
    seed: Option<u64>,
    corpus_flag: Option<PathBuf>,
    run_id: &str,
    mut config: TrainConfig,
    overrides: TrainOverrides,
) -> Result<()> {
    apply_overrides(&mut config, seed, overrides);
    config.validate()?;
    let corpus_dir = corpus_dir(out, corpus_flag);
    let manifest = load_manifest_from(&corpus_dir.join("manifest.json"))?;
    let timeline = corpus::build_timeline(&manifest)?;
    let log = EventLog::new(out)?;
    log.emit(
        "command_start",
        json!({"command": "train online", "run_id": run_id, "stages": timeline.stage_count(),
               "seed": config.master_seed, "config_digest": config.digest()}),
    );
    let outcome = online::run_online(&timeline, &corpus_dir, &config, &out.join("runs"), run_id)?;
    for ckpt in &outcome.checkpoints {
        let retrained = outcome.retrained.contains(&ckpt.stage);
        let losses = outcome
            .history
            .iter()
            .find(|(stage, _)| *stage == ckpt.stage)
            .map(|(_, h)| h.clone())
            .unwrap_or_default();
        println!(
            "stage {} (+{}): {} [{}]",
            ckpt.stage,
            ckpt.source_added,
            if retrained { "trained" } else { "reused checkpoint" },
            ckpt.cumulative_sources.join(", ")
        );
        log.emit(
            "stage_complete",
            json!({"stage": ckpt.stage, "source": ckpt.source_added,
                   "cumulative_sources": ckpt.cumulative_sources,
                   "retrained": retrained, "epoch_losses": losses}),
        );
    }
    log.emit("command_end", json!({"command": "train online", "status": "ok"}));
    println!("checkpoints in {}", outcome.run_dir.display());
    Ok(())
}

fn cmd_eval_matrix(out: &Path, corpus_flag: Option<PathBuf>, run_id: &str) -> Result<()> {
    let corpus_dir = corpus_dir(out, corpus_flag);
    let manifest = load_manifest_from(&corpus_dir.join("manifest.json"))?;
    let timeline = corpus::build_timeline(&manifest)?;
    let run_dir = out.join("runs").join(run_id);
    let mut models = Vec::with_capacity(timeline.stage_count());
    for (idx, source) in timeline.generated.iter().enumerate() {
        let path = online::stage_checkpoint_path(&run_dir, idx as u32 + 1, &source.id);
        if !path.is_file() {
            return Err(Error::MissingData(format!(
                "stage checkpoint {} not found; run `oaid train online` first",
                path.display()
            )));
        }
        models.push(online::load_stage_checkpoint(&path, &timeline)?.model);
    }
    let log = EventLog::new(out)?;
    log.emit("command_start", json!({"command": "eval matrix", "run_id": run_id}));
    let matrix = metrics::build_matrix(&models, &timeline, &corpus_dir)?;
    for (row, source) in matrix.source_ids.iter().enumerate() {
        for col in 0..matrix.stage_count() {
            let cell = &matrix.cells[row][col];
            log.emit(
                "metric_cell",
                json!({"test_source": source, "stage": col + 1,
                       "region": format!("{:?}", matrix.regions[row][col]).to_lowercase(),
                       "auc": cell.auc, "ap": cell.ap,
                       "synthetic_accuracy": cell.synthetic_accuracy,
                       "real_accuracy": cell.real_accuracy,
                       "balanced_accuracy": cell.balanced_accuracy}),
            );
        }
    }
    let report_dir = out.join("reports");
    let files = metrics::emit_reports(&matrix, &report_dir)?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    log.emit(
        "command_end",
        json!({"command": "eval matrix", "status": "ok",
               "files": files.iter().map(|f| f.display().to_string()).collect::<Vec<_>>()}),
    );
    Ok(())
}

fn cmd_inpaint_gen(
    out: &Path,
    seed: Option<u64>,
    manifest_path: Option<PathBuf>,
    config: PixelDatasetConfig,
) -> Result<()> {
    let path = manifest_path.unwrap_or_else(|| out.join("corpus").join("manifest.json"));
    let mut manifest = load_manifest_from(&path)?;
    if let Some(seed) = seed {
        manifest.seed = seed;
    }
    manifest.validate()?;
    config.validate()?;
    let log = EventLog::new(out)?;
    log.emit("command_start", json!({"command": "inpaint gen", "seed": manifest.seed}));
    let target = out.join("pixel");
    let summary = inpaint::build_pixel_dataset(&manifest, &config, &target)?;
    for s in &summary.sources {
        println!(
            "{:<28} train {:>5}  val {:>4}  test {:>4}",
            s.name, s.counts.train, s.counts.val, s.counts.test
        );
        log.emit(
            "pixel_source_materialized",
            json!({"source": s.name, "kind": s.kind, "base_source": s.base_source,
                   "train": s.counts.train, "val": s.counts.val, "test": s.counts.test}),
        );
    }
    log.emit("command_end", json!({"command": "inpaint gen", "status": "ok"}));
    println!("pixel dataset written to {}", target.display());
    Ok(())
}

fn kind_flag_name(kind: ProvenanceKind) -> &'static str {
    match kind {
        ProvenanceKind::SimulatedInpaint => "inpaint",
        ProvenanceKind::CutMix => "cutmix",
        ProvenanceKind::WholeImage => "whole",
    }
}

fn parse_kinds(kinds: &str) -> Result<Vec<ProvenanceKind>> {
    let mut out = Vec::new();
    for part in kinds.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        out.push(match part {
            "inpaint" => ProvenanceKind::SimulatedInpaint,
            "cutmix" => ProvenanceKind::CutMix,
            "whole" => ProvenanceKind::WholeImage,
            other => {
                return Err(Error::Config(format!(
                    "unknown provenance kind {other:?} (expected inpaint, cutmix, or whole)"
                )))
            }
        });
    }
    if out.is_empty() {
        return Err(Error::Config("at least one provenance kind is required".into()));
    }
    Ok(out)
}

fn parse_list(list: Option<&str>) -> Option<Vec<String>> {
    list.map(|s| s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect())
}

/// Gather training samples for the requested provenance kinds, capped at
/// `limit` per pixel source so differently-sized mixtures can be compared on
/// an equal budget.
fn gather_pixel_samples(
    data_dir: &Path,
    kinds: &[ProvenanceKind],
    sources: Option<&[String]>,
    limit: Option<usize>,
    corpus_dir: Option<&Path>,
    split: &str,
) -> Result<Vec<PixelSample>> {
    let mut samples = Vec::new();
    let wants = |kind: ProvenanceKind| kinds.contains(&kind);
    let keep_source =
        |id: &str| sources.map(|list| list.iter().any(|s| s == id)).unwrap_or(true);
    let cap = |mut v: Vec<PixelSample>| {
        if let Some(limit) = limit {
            v.truncate(limit);
        }
        v
    };

    if wants(ProvenanceKind::SimulatedInpaint) || wants(ProvenanceKind::CutMix) {
        let manifest = load_pixel_manifest(data_dir)?;
        for entry in &manifest.sources {
            if wants(entry.kind) && keep_source(&entry.base_source) {
                samples.extend(cap(load_pixel_split(data_dir, &entry.name, split)?));
            }
        }
    }
    if wants(ProvenanceKind::WholeImage) {
        let corpus_dir = corpus_dir.ok_or_else(|| {
            Error::Config("--corpus is required when kinds includes `whole`".into())
        })?;
        let manifest = load_manifest_from(&corpus_dir.join("manifest.json"))?;
        let timeline = corpus::build_timeline(&manifest)?;
        let real = corpus::load_split(corpus_dir, &timeline.real, split)?;
        samples.extend(cap(real
            .into_iter()
            .map(|img| whole_image_sample(img, false, &timeline.real.id))
            .collect()));
        for source in &timeline.generated {
            if keep_source(&source.id) {
                let fake = corpus::load_split(corpus_dir, source, split)?;
                samples.extend(cap(fake
                    .into_iter()
                    .map(|img| whole_image_sample(img, true, &source.id))
                    .collect()));
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::MissingData(format!(
            "no {split} samples matched the requested kinds/sources"
        )));
    }
    Ok(samples)
}

#[derive(Serialize)]
struct PixelModelMetadata {
    kinds: Vec<String>,
    sources: Vec<String>,
    sample_count: usize,
    epochs: u32,
    batch_size: usize,
    learning_rate: f64,
    master_seed: u64,
    epoch_losses: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_pixel(
    out: &Path,
    seed: Option<u64>,
    data: Option<PathBuf>,
    kinds: &str,
    sources: Option<&str>,
    limit: Option<usize>,
    corpus_flag: Option<PathBuf>,
    mut config: PixelTrainConfig,
    overrides: TrainOverrides,
) -> Result<()> {
    if let Some(seed) = seed {
        config.master_seed = seed;
    }
    if let Some(epochs) = overrides.epochs {
        config.epochs = epochs;
    }
    if let Some(batch) = overrides.batch_size {
        config.batch_size = batch;
    }
    if let Some(lr) = overrides.learning_rate {
        config.optimizer.learning_rate = lr;
    }
    config.validate()?;
    let kinds = parse_kinds(kinds)?;
    let sources = parse_list(sources);
    let data_dir = data.unwrap_or_else(|| out.join("pixel"));
    let samples = gather_pixel_samples(
        &data_dir,
        &kinds,
        sources.as_deref(),
        limit,
        corpus_flag.as_deref(),
        "train",
    )?;
    let log = EventLog::new(out)?;
    let kind_names: Vec<String> =
        kinds.iter().map(|&k| kind_flag_name(k).to_string()).collect();
    log.emit(
        "command_start",
        json!({"command": "train pixel", "kinds": kind_names,
               "samples": samples.len(), "seed": config.master_seed}),
    );
    let (model, history) = inpaint::train_pixel_detector(&samples, &config)?;
    let model_path = out.join("pixel_model.ckpt");
    save_checkpoint(&model, &model_path)?;
    let mut source_ids: Vec<String> =
        samples.iter().map(|s| s.provenance.source_id.clone()).collect();
    source_ids.sort();
    source_ids.dedup();
    let metadata = PixelModelMetadata {
        kinds: kind_names,
        sources: source_ids,
        sample_count: samples.len(),
        epochs: config.epochs,
        batch_size: config.batch_size,
        learning_rate: config.optimizer.learning_rate,
        master_seed: config.master_seed,
        epoch_losses: history.clone(),
    };
    let meta_path = out.join("pixel_model.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&metadata).expect("serializes") + "\n")
        .map_err(|e| Error::io(meta_path.as_path(), e))?;
    log.emit(
        "pixel_training_complete",
        json!({"model": model_path.display().to_string(), "epoch_losses": history}),
    );
    log.emit("command_end", json!({"command": "train pixel", "status": "ok"}));
    println!("pixel model written to {} (metadata alongside)", model_path.display());
    Ok(())
}

fn cmd_eval_pixel(
    out: &Path,
    data: Option<PathBuf>,
    model_path: Option<PathBuf>,
    split: &str,
    sources: Option<&str>,
) -> Result<()> {
    let data_dir = data.unwrap_or_else(|| out.join("pixel"));
    let model_path = model_path.unwrap_or_else(|| out.join("pixel_model.ckpt"));
    let model = load_checkpoint(&model_path)?;
    if model.head != HeadKind::Pixel {
        return Err(Error::Config(format!(
            "{} is not a pixel-head checkpoint",
            model_path.display()
        )));
    }
    let manifest = load_pixel_manifest(&data_dir)?;
    let wanted = parse_list(sources);
    let entries: Vec<_> = manifest
        .sources
        .iter()
        .filter(|e| wanted.as_ref().map(|w| w.contains(&e.name)).unwrap_or(true))
        .collect();
    if entries.is_empty() {
        return Err(Error::MissingData("no pixel sources matched the filter".into()));
    }
    let log = EventLog::new(out)?;
    log.emit(
        "command_start",
        json!({"command": "eval pixel", "split": split, "model": model_path.display().to_string()}),
    );
    println!("{:<28} {:>9} {:>10} {:>9} {:>9}", "source", "accuracy", "precision", "recall", "f1");
    let mut all_samples = Vec::new();
    for entry in entries {
        let samples = load_pixel_split(&data_dir, &entry.name, split)?;
        let m = inpaint::eval_pixel_detector(&model, &samples, 0.5)?;
        println!(
            "{:<28} {:>9.4} {:>10.4} {:>9.4} {:>9.4}",
            entry.name, m.accuracy, m.precision, m.recall, m.f1
        );
        log.emit(
            "pixel_metrics",
            json!({"source": entry.name, "split": split, "accuracy": m.accuracy,
                   "precision": m.precision, "recall": m.recall, "f1": m.f1}),
        );
        all_samples.extend(samples);
    }
    let overall = inpaint::eval_pixel_detector(&model, &all_samples, 0.5)?;
    println!(
        "{:<28} {:>9.4} {:>10.4} {:>9.4} {:>9.4}",
        "overall", overall.accuracy, overall.precision, overall.recall, overall.f1
    );
    log.emit(
        "pixel_metrics",
        json!({"source": "overall", "split": split, "accuracy": overall.accuracy,
               "precision": overall.precision, "recall": overall.recall, "f1": overall.f1}),
    );
    log.emit("command_end", json!({"command": "eval pixel", "status": "ok"}));
    Ok(())
}
