mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use exuseg::dataset::{
    extract_balanced, find_by_stem, load_image, load_mask, load_patchset, resize_mask, resize_nearest,
    resize_to_working, save_patchset, ClassCounts, ExtractionWarning, PatchSet,
};
use exuseg::inference::{self, InferenceMode};
use exuseg::metrics::{self, ConfusionMatrix, EvalReport};
use exuseg::nn::Model;
use exuseg::tensor::REAL_DTYPE;
use exuseg::training::{load_checkpoint, save_checkpoint, EpochMetrics, Trainer};
use exuseg::{gradcheck, Error, Rng, WORKING_SIZE};
use log::{info, warn};
use serde::Serialize;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "exuseg", version, about = "Patch-based hard-exudate segmentation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set schedule.epochs_per_shard=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for extraction, training and gradient checks.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Inference mode, overriding `inference.mode`.
    #[arg(long, global = true)]
    mode: Option<InferenceMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Extract balanced patch archives from the train and test lists.
    Prepare,
    /// Train on the prepared train archive.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many shard-epochs and write `latest.exsg`.
        #[arg(long)]
        stop_after_epochs: Option<usize>,
        /// Validate the config and archive, print the plan and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Predict masks for images (defaults to the test list).
    Predict {
        /// Defaults to `<output_dir>/final.exsg`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        images: Vec<PathBuf>,
    },
    /// Compare predicted masks with ground truth.
    Evaluate {
        /// Defaults to `<output_dir>/predictions`.
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        /// Defaults to `paths.masks`.
        #[arg(long)]
        truth_dir: Option<PathBuf>,
    },
    /// Finite-difference check of every layer and the whole model.
    Gradcheck,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EXUSEG_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    let mut cfg = RunConfig::load(g.config.as_deref(), &g.overrides, g.seed)?;
    if let Some(mode) = g.mode {
        cfg.inference.mode = mode;
    }
    match cli.command {
        Command::Prepare => prepare(&cfg),
        Command::Train {
            resume,
            stop_after_epochs,
            dry_run,
        } => train(&cfg, resume.as_deref(), stop_after_epochs, dry_run),
        Command::Predict { checkpoint, images } => predict(&cfg, checkpoint, &images),
        Command::Evaluate { pred_dir, truth_dir } => evaluate(&cfg, pred_dir, truth_dir),
        Command::Gradcheck => run_gradcheck(&cfg),
    }
}

fn read_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading image list {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        bail!("{what} directory {} does not exist", path.display());
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct SetSummary {
    archive: PathBuf,
    images: Vec<String>,
    counts: ClassCounts,
    warnings: Vec<ExtractionWarning>,
}

#[derive(Serialize)]
struct PrepareProvenance {
    seed: u64,
    per_class: usize,
    sets: BTreeMap<String, SetSummary>,
}

fn extract_list(cfg: &RunConfig, ids: &[String], root: &Rng) -> Result<PatchSet> {
    let p = &cfg.paths;
    let mut set = PatchSet::default();
    for id in ids {
        let img_path = find_by_stem(&p.images, id)
            .with_context(|| format!("no image for {id:?} in {}", p.images.display()))?;
        let mask_stem = format!("{id}{}", p.mask_suffix);
        let mask_path = find_by_stem(&p.masks, &mask_stem)
            .with_context(|| format!("no mask {mask_stem:?} pairs with image {id:?} in {}", p.masks.display()))?;
        let img = resize_to_working(&load_image(&img_path)?)?;
        let mut mask = resize_mask(&load_mask(&mask_path)?);
        mask.id = id.clone();
        let mut rng = root.child(&format!("image:{id}"));
        let part = extract_balanced(&img, &mask, cfg.extraction.per_class, &mut rng)?;
        info!("{id}: {} patches", part.len());
        set.extend(part);
    }
    set.provenance.seed = cfg.extraction.seed;
    set.provenance.per_class = cfg.extraction.per_class;
    Ok(set)
}

fn prepare(cfg: &RunConfig) -> Result<()> {
    let p = &cfg.paths;
    require_dir(&p.images, "image")?;
    require_dir(&p.masks, "mask")?;
    let lists = [("train", &p.train_list), ("test", &p.test_list)];
    let mut ids = Vec::new();
    for (name, list) in lists {
        let entries = read_list(list)?;
        if entries.is_empty() {
            bail!("{name} list {} names no images", list.display());
        }
        ids.push((name, entries));
    }
    create_dir(&p.output_dir)?;
    let root = Rng::new(cfg.extraction.seed);
    let mut sets = BTreeMap::new();
    for (name, entries) in ids {
        let set = extract_list(cfg, &entries, &root)?;
        let archive = p.output_dir.join(format!("{name}.exps"));
        save_patchset(&set, &archive)?;
        let counts = set.class_counts();
        println!(
            "{name}: {} images, {} background + {} exudate = {} patches -> {}",
            entries.len(),
            counts.background,
            counts.exudate,
            counts.total(),
            archive.display()
        );
        for w in &set.provenance.warnings {
            let action = if w.with_replacement { "sampled with replacement" } else { "none taken" };
            println!(
                "  warning: {} has {} {:?} centers, {} requested ({action})",
                w.image, w.available, w.class, w.requested
            );
        }
        sets.insert(
            name.to_string(),
            SetSummary {
                archive,
                images: entries,
                counts,
                warnings: set.provenance.warnings.clone(),
            },
        );
    }
    write_json(
        &p.output_dir.join("provenance.json"),
        &PrepareProvenance {
            seed: cfg.extraction.seed,
            per_class: cfg.extraction.per_class,
            sets,
        },
    )
}

fn write_history(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut text = String::from(EpochMetrics::CSV_HEADER);
    text.push('\n');
    for m in history {
        text.push_str(&m.csv_row());
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(cfg: &RunConfig, resume: Option<&Path>, stop_after: Option<usize>, dry_run: bool) -> Result<()> {
    let out = &cfg.paths.output_dir;
    let archive = out.join("train.exps");
    if !archive.is_file() {
        bail!("train archive {} not found; run `prepare` first", archive.display());
    }
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            if ckpt.schedule != cfg.schedule || ckpt.config != cfg.model {
                warn!("resuming with the schedule and model stored in the checkpoint, not the config");
            }
            info!("resuming at shard-epoch {}", ckpt.position.step);
            Trainer::from_checkpoint(&ckpt)?
        }
        None => Trainer::new(cfg.model.clone(), cfg.schedule.clone(), cfg.adam)?,
    };
    println!("plan: {}", trainer.schedule().describe());
    info!("plan: {}", trainer.schedule().describe());
    let patches = load_patchset(&archive)?;
    info!("{} training patches, {} parameters", patches.len(), trainer.model().parameter_count());
    if dry_run {
        let fitted = trainer.schedule().fit_to(patches.len())?;
        if fitted != *trainer.schedule() {
            println!("archive holds {} patches; plan scaled to: {}", patches.len(), fitted.describe());
        }
        println!("dry run: configuration accepted");
        return Ok(());
    }

    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let csv = out.join("metrics.csv");
    let mut ran = 0;
    let result = trainer.run(&patches, |t, m| {
        info!(
            "shard-epoch {}: streak {} shard {} epoch {} loss {:.6} train accuracy {:.5}",
            m.step, m.streak, m.shard, m.epoch, m.loss, m.train_accuracy
        );
        write_history(&csv, t.history()).map_err(|e| Error::InvalidConfig(format!("{e:#}")))?;
        let every = t.schedule().checkpoint_every;
        if every > 0 && m.step % every == 0 && !t.is_finished() {
            save_checkpoint(&t.checkpoint(), &ckpt_dir.join(format!("step-{}.exsg", m.step)))?;
        }
        ran += 1;
        Ok(stop_after.is_none_or(|n| ran < n))
    });
    if let Err(e) = result {
        if matches!(e, Error::Divergence { .. }) {
            let path = out.join("diverged.exsg");
            save_checkpoint(&trainer.checkpoint(), &path)?;
            bail!("training diverged: {e}; state before the failing epoch saved to {}", path.display());
        }
        return Err(e.into());
    }
    if trainer.is_finished() {
        let path = out.join("final.exsg");
        save_checkpoint(&trainer.checkpoint(), &path)?;
        println!("training finished: {}", path.display());
    } else {
        let path = out.join("latest.exsg");
        save_checkpoint(&trainer.checkpoint(), &path)?;
        println!(
            "stopped after {ran} shard-epoch(s) at step {}: {}",
            trainer.position().step,
            path.display()
        );
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    if !path.is_file() {
        bail!("checkpoint {} not found", path.display());
    }
    let ckpt = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let mut model = Model::new(ckpt.config.clone(), &Rng::new(0))?;
    let expected = model.named_params().len() + model.named_buffers().len();
    if ckpt.params.len() + ckpt.buffers.len() != expected {
        bail!("{}: checkpoint does not match its model configuration", path.display());
    }
    for (name, t) in ckpt.params.into_iter().chain(ckpt.buffers) {
        model.set_tensor(&name, t)?;
    }
    Ok(model)
}

fn predict(cfg: &RunConfig, checkpoint: Option<PathBuf>, images: &[PathBuf]) -> Result<()> {
    let out = &cfg.paths.output_dir;
    let model = load_model(&checkpoint.unwrap_or_else(|| out.join("final.exsg")))?;
    let images = if images.is_empty() {
        require_dir(&cfg.paths.images, "image")?;
        read_list(&cfg.paths.test_list)?
            .iter()
            .map(|id| {
                find_by_stem(&cfg.paths.images, id)
                    .with_context(|| format!("no image for {id:?} in {}", cfg.paths.images.display()))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        images.to_vec()
    };
    if images.is_empty() {
        bail!("no images to predict");
    }
    let dir = out.join("predictions");
    create_dir(&dir)?;
    let mode = cfg.inference.mode;
    for path in &images {
        let img = resize_to_working(&load_image(path)?)?;
        let pm = inference::predict_image(&img, &model, mode, cfg.inference.batch)?;
        let [mask, overlay, prob] = inference::output_paths(&dir, &img.id, mode);
        inference::write_mask(&pm.mask, &mask)?;
        inference::overlay(&img, &pm, &overlay)?;
        inference::write_probability(&pm, &prob)?;
        println!(
            "{}: {} of {} pixels exudate -> {}",
            img.id,
            pm.mask.count_ones(),
            pm.mask.as_slice().len(),
            mask.display()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct ImageResult {
    id: String,
    prediction: PathBuf,
    truth: PathBuf,
    report: EvalReport,
}

#[derive(Serialize)]
struct FileError {
    file: PathBuf,
    error: String,
}

#[derive(Serialize)]
struct Evaluation {
    images: Vec<ImageResult>,
    errors: Vec<FileError>,
    aggregate: Option<metrics::AggregateReport>,
}

/// Image id of a prediction file: `{id}_{mode}_mask.png` or `{id}_mask.png`.
fn prediction_id(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    let stem = name.strip_suffix("_mask.png")?;
    let stem = ["_valid", "_padded"]
        .iter()
        .find_map(|m| stem.strip_suffix(m))
        .unwrap_or(stem);
    Some(stem.to_string())
}

fn evaluate_pair(cfg: &RunConfig, pred_path: &Path, truth_path: &Path) -> Result<ConfusionMatrix> {
    let pred = inference::read_mask(pred_path)?;
    let mut truth = load_mask(truth_path)?.mask;
    if truth.extent() != pred.extent() && cfg.metrics.align_truth {
        if truth.extent() != (WORKING_SIZE, WORKING_SIZE) {
            truth = resize_nearest(&truth, WORKING_SIZE, WORKING_SIZE);
        }
        truth = metrics::align_truth(&truth, pred.extent())?;
    }
    Ok(metrics::confusion(&pred, &truth)?)
}

fn evaluate(cfg: &RunConfig, pred_dir: Option<PathBuf>, truth_dir: Option<PathBuf>) -> Result<()> {
    let pred_dir = pred_dir.unwrap_or_else(|| cfg.paths.output_dir.join("predictions"));
    let truth_dir = truth_dir.unwrap_or_else(|| cfg.paths.masks.clone());
    require_dir(&pred_dir, "prediction")?;
    require_dir(&truth_dir, "ground-truth")?;
    let mut preds: Vec<(String, PathBuf)> = fs::read_dir(&pred_dir)
        .with_context(|| format!("listing {}", pred_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| prediction_id(&p).map(|id| (id, p)))
        .collect();
    preds.sort();
    if preds.is_empty() {
        bail!("no *_mask.png files in {}", pred_dir.display());
    }

    let mut eval = Evaluation {
        images: Vec::new(),
        errors: Vec::new(),
        aggregate: None,
    };
    let mut matrices = Vec::new();
    for (id, pred_path) in preds {
        let truth = find_by_stem(&truth_dir, &format!("{id}{}", cfg.paths.mask_suffix))
            .or_else(|| find_by_stem(&truth_dir, &id));
        let Some(truth) = truth else {
            eval.errors.push(FileError {
                file: pred_path,
                error: format!("no ground truth for {id:?} in {}", truth_dir.display()),
            });
            continue;
        };
        match evaluate_pair(cfg, &pred_path, &truth).and_then(|cm| Ok((cm, metrics::report(&cm)?))) {
            Ok((cm, report)) => {
                matrices.push(cm);
                eval.images.push(ImageResult {
                    id,
                    prediction: pred_path,
                    truth,
                    report,
                });
            }
            Err(e) => eval.errors.push(FileError {
                file: pred_path,
                error: format!("{e:#}"),
            }),
        }
    }
    if !matrices.is_empty() {
        eval.aggregate = Some(metrics::aggregate(&matrices)?);
    }
    let json = cfg.paths.output_dir.join("evaluation.json");
    create_dir(&cfg.paths.output_dir)?;
    write_json(&json, &eval)?;

    for r in &eval.images {
        println!("{}: accuracy {:.5}", r.id, r.report.accuracy);
    }
    if let Some(agg) = &eval.aggregate {
        println!("\n{} image(s), pooled counts:\n", agg.images);
        print!("{}", metrics::format_table(&agg.pooled));
        println!("{:<46}{:>10.5}", "mean per-image accuracy", agg.macro_accuracy);
    }
    for e in &eval.errors {
        eprintln!("{}: {}", e.file.display(), e.error);
    }
    println!("report: {}", json.display());
    if !eval.errors.is_empty() {
        bail!("{} file(s) could not be evaluated", eval.errors.len());
    }
    Ok(())
}

fn run_gradcheck(cfg: &RunConfig) -> Result<()> {
    if REAL_DTYPE != "f64" {
        bail!("gradient checks need the 64-bit build; this binary uses {REAL_DTYPE}");
    }
    let opts = &cfg.gradcheck;
    let mut model = Model::new(cfg.model.clone(), &Rng::new(opts.seed).child("init"))?;
    let report = gradcheck::run(&mut model, opts)?;

    let mut worst: BTreeMap<usize, (&str, f64, f64, bool)> = BTreeMap::new();
    for r in &report.layers {
        let e = worst.entry(r.layer).or_insert((r.kind, 0.0, r.tol as f64, true));
        e.1 = e.1.max(r.rel_error as f64);
        e.3 &= r.passed;
    }
    println!("{:<7}{:<12}{:>14}{:>10}", "layer", "kind", "worst error", "tol");
    for (layer, (kind, err, tol, passed)) in &worst {
        let status = if *passed { "ok" } else { "FAIL" };
        println!("{layer:<7}{kind:<12}{err:>14.3e}{tol:>10.0e}  {status}");
    }
    let e2e_ok = report.end_to_end.iter().all(|r| r.passed);
    println!(
        "{:<19}{:>14.3e}{:>10.0e}  {}",
        "end-to-end",
        report.max_e2e_error(),
        opts.e2e_tol,
        if e2e_ok { "ok" } else { "FAIL" }
    );
    if !report.passed() {
        for f in report.failures() {
            eprintln!(
                "layer {} ({}) {}: relative error {:.3e} exceeds {:.0e}",
                f.layer, f.kind, f.target, f.rel_error, f.tol
            );
        }
        bail!("gradient check failed");
    }
    println!("all checks passed");
    Ok(())
}
