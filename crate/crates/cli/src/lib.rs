//! The `wsod` command line: dataset generation, training, inference,
//! evaluation, discovery dumps, coverage analysis and gradient checks.
//!
//! Every command resolves a [`RunConfig`] from defaults, an optional JSON
//! file and `--set` overrides, in that order. Exit codes: 0 success, 1 usage
//! or validation error, 2 runtime failure.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use wsod::data::{
    category_names, generate_dataset, load_split, load_voc_annotations, save_split, LabeledImage,
    TrainingImage,
};
use wsod::engine::{
    argmax_coverage, detect_all, discover, discovery_coverage, evaluate, read_detections,
    run_gradcheck, write_detections, CoverageReport, DiscoveryRecord, EvalReport, GradcheckConfig,
    RunConfig, Trainer,
};
use wsod::model::checkpoint;

mod config;

pub use config::{apply_override, merge, resolve_config};

#[derive(Debug, Parser)]
#[command(
    name = "wsod",
    version,
    about = "Weakly supervised object detection on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
struct Common {
    /// JSON config merged over the defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides `train.seed`, which also seeds data generation.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key override such as `train.lr=0.003`; the value is parsed as
    /// JSON and falls back to a string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the train and test splits to disk.
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a network on the train split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Evaluate on the test split every N steps (0 disables).
        #[arg(long, default_value_t = 0)]
        eval_every: usize,
    },
    /// Write detections for a split.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to the test split.
        #[arg(long)]
        split: Option<String>,
    },
    /// Score a detections file against a split's annotations.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/detections.json`.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Defaults to the test split.
        #[arg(long)]
        split: Option<String>,
    },
    /// Dump the pseudo ground truths a trained network mines on a split.
    Discover {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to the train split.
        #[arg(long)]
        split: Option<String>,
    },
    /// Instance coverage of argmax labeling on VOC annotations, or of a discovery dump.
    AnalyzeCoverage {
        #[command(flatten)]
        common: Common,
        /// Directory of VOC XML annotation files.
        #[arg(long, conflicts_with = "dump", required_unless_present = "dump")]
        voc: Option<PathBuf>,
        /// Discovery dump written by `discover`.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Split the dump was mined on; defaults to the train split.
        #[arg(long)]
        split: Option<String>,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<wsod::Error> for Failure {
    fn from(e: wsod::Error) -> Self {
        match e {
            wsod::Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn runtime(what: impl std::fmt::Display) -> Failure {
    Failure::Runtime(what.to_string())
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Some(n) = std::env::var("WSOD_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
    {
        wsod::par::init_workers(n);
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            log::error!("{msg}");
            1
        }
        Err(Failure::Runtime(msg)) => {
            log::error!("{msg}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenerateData { common } => generate(&common),
        Command::Train { common, eval_every } => train(&common, eval_every),
        Command::Infer {
            common,
            checkpoint,
            split,
        } => infer(&common, checkpoint, split),
        Command::Eval {
            common,
            detections,
            split,
        } => eval(&common, detections, split),
        Command::Discover {
            common,
            checkpoint,
            split,
        } => discover_cmd(&common, checkpoint, split),
        Command::AnalyzeCoverage {
            common,
            voc,
            dump,
            split,
        } => coverage(&common, voc, dump, split),
        Command::Gradcheck { common } => gradcheck(&common),
    }
}

fn load_config(common: &Common) -> CliResult<(RunConfig, Value)> {
    resolve_config(common.config.as_deref(), common.seed, &common.overrides).map_err(Failure::Usage)
}

fn out_dir(common: &Common) -> CliResult<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    write_text(path, &(text + "\n"))
}

fn load(cfg: &RunConfig, split: &str) -> CliResult<Vec<LabeledImage>> {
    let dir = cfg.data.root.join(split);
    let (_, images) =
        load_split(&dir).map_err(|e| runtime(format!("{e} (run `wsod generate-data` first?)")))?;
    Ok(images)
}

fn load_checkpoint(path: &Path, cfg: &RunConfig) -> CliResult<wsod::model::Network> {
    let (net, header) = checkpoint::load(path)?;
    if header.model.num_classes != cfg.data.scene.num_categories {
        return Err(Failure::Usage(format!(
            "{}: checkpoint has {} classes, data has {}",
            path.display(),
            header.model.num_classes,
            cfg.data.scene.num_categories
        )));
    }
    Ok(net)
}

fn generate(common: &Common) -> CliResult<()> {
    let (cfg, _) = load_config(common)?;
    let root = common.out.clone().unwrap_or_else(|| cfg.data.root.clone());
    let names = category_names(cfg.data.scene.num_categories);
    let seed = cfg.train.seed;
    for (split, count) in [
        (&cfg.data.train_split, cfg.data.num_train),
        (&cfg.data.test_split, cfg.data.num_test),
    ] {
        let images = generate_dataset(
            split,
            seed,
            count,
            &cfg.data.scene,
            &cfg.data.proposals,
            cfg.train.execution,
        )?;
        let dir = save_split(&root, split, seed, &names, &images)?;
        log::info!("wrote {count} images to {}", dir.display());
    }
    Ok(())
}

fn unix_time() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn eval_summary(r: &EvalReport) -> Value {
    json!({ "map": r.map, "corloc": r.corloc, "ar1": r.ar1, "ar10": r.ar10, "ar100": r.ar100 })
}

fn train(common: &Common, eval_every: usize) -> CliResult<()> {
    let (cfg, value) = load_config(common)?;
    let out = out_dir(common)?;
    write_json(&out.join("config.json"), &value)?;
    let images = load(&cfg, &cfg.data.train_split)?;
    let test = if eval_every > 0 {
        load(&cfg, &cfg.data.test_split)?
    } else {
        Vec::new()
    };
    let metrics_path = out.join("metrics.jsonl");
    let file = File::create(&metrics_path)
        .map_err(|e| runtime(format!("{}: {e}", metrics_path.display())))?;
    let mut metrics = BufWriter::new(file);
    let hash = checkpoint::config_hash(&value);
    let header = json!({ "timestamp": unix_time(), "config_hash": hash });
    writeln!(metrics, "{header}").map_err(runtime)?;

    let iterations = cfg.train.iterations;
    let log_every = cfg.train.log_every.max(1);
    let mut trainer = Trainer::new(cfg.train.clone())?;
    log::info!("training {iterations} steps on {} images", images.len());
    let result = trainer.run(&images, iterations, |t, r| {
        let io = |e: std::io::Error| {
            wsod::Error::Precondition(format!("{}: {e}", metrics_path.display()))
        };
        if r.iteration % log_every == 0 || r.iteration == iterations {
            writeln!(metrics, "{}", r.json_line()).map_err(io)?;
            log::info!(
                "step {} total {:.4} bank {} discovered {}",
                r.iteration,
                r.losses.total,
                r.bank_size,
                r.discovered
            );
        }
        if eval_every > 0 && r.iteration % eval_every == 0 {
            let dets = detect_all(&t.net, &test, &cfg.infer, t.cfg.execution)?;
            let gts: Vec<_> = test.iter().map(LabeledImage::gt).collect();
            let report = evaluate(&dets, &gts, cfg.data.scene.num_categories, &cfg.eval);
            let line = json!({ "iteration": r.iteration, "eval": eval_summary(&report) });
            writeln!(metrics, "{line}").map_err(io)?;
            log::info!("step {} mAP {:.4}", r.iteration, report.map);
        }
        Ok(())
    });
    metrics.flush().map_err(runtime)?;
    if let Err(wsod::Error::NonFinite { iteration, detail }) = &result {
        let detail: Value =
            serde_json::from_str(detail).unwrap_or_else(|_| Value::String(detail.clone()));
        write_json(
            &out.join("nonfinite.json"),
            &json!({ "iteration": iteration, "detail": detail }),
        )?;
    }
    result?;
    let ckpt = out.join("checkpoint.bin");
    checkpoint::save(&ckpt, &trainer.net, trainer.iteration, &value)?;
    log::info!("wrote {}", ckpt.display());
    Ok(())
}

fn infer(common: &Common, ckpt: Option<PathBuf>, split: Option<String>) -> CliResult<()> {
    let (cfg, _) = load_config(common)?;
    let out = out_dir(common)?;
    let net = load_checkpoint(&ckpt.unwrap_or_else(|| out.join("checkpoint.bin")), &cfg)?;
    let images = load(&cfg, split.as_deref().unwrap_or(&cfg.data.test_split))?;
    let dets = detect_all(&net, &images, &cfg.infer, cfg.train.execution)?;
    let ids: Vec<&str> = images.iter().map(|i| i.id.as_str()).collect();
    let path = out.join("detections.json");
    write_detections(&path, &ids, &dets)?;
    log::info!(
        "wrote {} detections to {}",
        dets.iter().map(Vec::len).sum::<usize>(),
        path.display()
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.4}", x))
}

fn eval(common: &Common, detections: Option<PathBuf>, split: Option<String>) -> CliResult<()> {
    let (cfg, _) = load_config(common)?;
    let out = out_dir(common)?;
    let images = load(&cfg, split.as_deref().unwrap_or(&cfg.data.test_split))?;
    let ids: Vec<&str> = images.iter().map(|i| i.id.as_str()).collect();
    let dets = read_detections(
        &detections.unwrap_or_else(|| out.join("detections.json")),
        &ids,
    )?;
    let gts: Vec<_> = images.iter().map(LabeledImage::gt).collect();
    let report = evaluate(&dets, &gts, cfg.data.scene.num_categories, &cfg.eval);
    write_json(&out.join("eval.json"), &report)?;
    let names = category_names(cfg.data.scene.num_categories);
    println!("{:<12} {:>6} {:>8} {:>8}", "class", "gt", "AP", "CorLoc");
    for c in &report.classes {
        println!(
            "{:<12} {:>6} {:>8} {:>8}",
            names[c.category],
            c.num_gt,
            fmt_opt(c.ap),
            fmt_opt(c.corloc)
        );
    }
    println!(
        "mAP {:.4}  CorLoc {:.4}  AR@1 {:.4}  AR@10 {:.4}  AR@100 {:.4}",
        report.map, report.corloc, report.ar1, report.ar10, report.ar100
    );
    Ok(())
}

fn discover_cmd(common: &Common, ckpt: Option<PathBuf>, split: Option<String>) -> CliResult<()> {
    let (cfg, _) = load_config(common)?;
    if !cfg.train.needs_bank() {
        return Err(Failure::Usage(
            "discover needs train.wscl or train.discovery.enabled".into(),
        ));
    }
    let out = out_dir(common)?;
    let net = load_checkpoint(&ckpt.unwrap_or_else(|| out.join("checkpoint.bin")), &cfg)?;
    let images = load(&cfg, split.as_deref().unwrap_or(&cfg.data.train_split))?;
    let views: Vec<TrainingImage<'_>> = images.iter().map(LabeledImage::training_view).collect();
    let mut records = Vec::with_capacity(images.len());
    for (b, chunk) in views.chunks(cfg.train.batch_size).enumerate() {
        let sup = discover(&net, &cfg.train, chunk, b as u64)?;
        for (view, d) in chunk.iter().zip(sup.discoveries) {
            records.push(DiscoveryRecord {
                id: view.id.to_string(),
                pseudo_gts: d.pseudo_gts.into_iter().flatten().collect(),
            });
        }
    }
    let path = out.join("discoveries.json");
    write_json(&path, &records)?;
    log::info!("wrote {} records to {}", records.len(), path.display());
    Ok(())
}

fn print_coverage(title: &str, r: &CoverageReport) {
    println!("{title}");
    println!(
        "{:<14} {:>8} {:>8} {:>8}",
        "class", "selected", "total", "fraction"
    );
    for row in r.categories.iter().chain(std::iter::once(&r.overall)) {
        println!(
            "{:<14} {:>8} {:>8} {:>8.4}",
            row.category, row.selected, row.total, row.fraction
        );
    }
}

fn coverage(
    common: &Common,
    voc: Option<PathBuf>,
    dump: Option<PathBuf>,
    split: Option<String>,
) -> CliResult<()> {
    let (cfg, _) = load_config(common)?;
    let out = out_dir(common)?;
    let reports = if let Some(dir) = voc {
        let loaded = load_voc_annotations(&dir)?;
        for (path, msg) in &loaded.errors {
            log::warn!("skipped {}: {msg}", path.display());
        }
        if loaded.records.is_empty() {
            return Err(runtime(format!(
                "{}: no readable annotation files",
                dir.display()
            )));
        }
        vec![
            (
                "argmax, difficult excluded",
                argmax_coverage(&loaded.records, false),
            ),
            (
                "argmax, difficult included",
                argmax_coverage(&loaded.records, true),
            ),
        ]
    } else {
        let dump = dump.expect("clap requires --voc or --dump");
        let text = std::fs::read_to_string(&dump)
            .map_err(|e| runtime(format!("{}: {e}", dump.display())))?;
        let records: Vec<DiscoveryRecord> =
            serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", dump.display())))?;
        let images = load(&cfg, split.as_deref().unwrap_or(&cfg.data.train_split))?;
        let mut gts = Vec::with_capacity(records.len());
        for r in &records {
            let img = images
                .iter()
                .find(|i| i.id == r.id)
                .ok_or_else(|| runtime(format!("{}: unknown image id {}", dump.display(), r.id)))?;
            gts.push(img.gt());
        }
        let d: Vec<_> = records.iter().map(|r| r.pseudo_gts.as_slice()).collect();
        let names = category_names(cfg.data.scene.num_categories);
        vec![(
            "discovery dump",
            discovery_coverage(&gts, &d, &names, cfg.eval.iou_threshold, true),
        )]
    };
    for (title, r) in &reports {
        print_coverage(title, r);
    }
    let reports: Vec<&CoverageReport> = reports.iter().map(|(_, r)| r).collect();
    write_json(&out.join("coverage.json"), &reports)
}

fn gradcheck(common: &Common) -> CliResult<()> {
    let gc = GradcheckConfig {
        seed: common.seed.unwrap_or(0),
        ..GradcheckConfig::default()
    };
    let rows = run_gradcheck(&gc)?;
    println!(
        "{:<6} {:>8} {:>8} {:>12} {:>12}  result",
        "loss", "checked", "skipped", "max rel err", "max |grad|"
    );
    for r in &rows {
        println!(
            "{:<6} {:>8} {:>8} {:>12.3e} {:>12.3e}  {}",
            r.loss,
            r.checked,
            r.skipped,
            r.max_rel_err,
            r.max_abs_grad,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    if let Some(dir) = &common.out {
        std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        write_json(&dir.join("gradcheck.json"), &rows)?;
    }
    if rows.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(runtime(format!(
            "gradient check failed at tolerance {:e}",
            gc.tolerance
        )))
    }
}
