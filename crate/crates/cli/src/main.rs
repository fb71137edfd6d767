//! `apdi`: synthesize datasets, train, infer, evaluate and analyze detection
//! dumps, and run the augmentation x IoU-head ablation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use apdi_core::config::{DatasetManifest, Split};
use apdi_core::data::{
    load_coco_annotations, load_proposal_dump, save_coco_annotations, save_proposal_dump,
};
use apdi_core::eval::{
    average_recall, histogram_of, positive_ious, ApParams, EvalReport, Population,
};
use apdi_core::pipeline::{
    ablation_csv, augmented_proposals, ground_truth_map, infer_images, load_detections,
    proposal_map, run_ablation, save_detections, train, Detector, InferenceSettings,
};
use apdi_core::{exec, Error, ExperimentConfig, Mode, Provenance};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

#[derive(Parser, Debug)]
#[command(
    name = "apdi",
    version,
    about = "Proposal-augmented two-stage detection toolkit"
)]
struct Cli {
    /// Worker threads for per-image parallelism (0 = all cores). Overrides
    /// the config's `workers`.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a dataset manifest plus COCO annotations and proposal dumps.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector; writes model.json, train_log.jsonl and checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a trained detector and write a detections dump.
    Infer {
        /// Trained detector (model.json).
        #[arg(long)]
        model: PathBuf,
        /// Dataset manifest from `synth`; defaults to the config's dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Proposal dump replacing the dataset's own proposals.
        #[arg(long)]
        proposals: Option<PathBuf>,
        /// Which split to run on.
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Multiply class scores by the predicted IoU.
        #[arg(long, value_enum)]
        calibrate: Option<Switch>,
        /// Total regression passes per proposal, the last one following the
        /// scoring pass. Not available for cascade detectors.
        #[arg(long, value_name = "N")]
        ibbr: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output detections file (JSON lines).
        #[arg(long)]
        out: PathBuf,
        /// Also write the augmented proposals (positive originals plus
        /// one regression pass over every proposal) for `analyze`.
        #[arg(long, value_name = "PATH")]
        augmented_out: Option<PathBuf>,
    },
    /// Score a detections dump against COCO-style annotations.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Write the metric CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recall table and positive-IoU histograms for a proposal dump.
    Analyze {
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Proposals kept per image, in score order.
        #[arg(long, default_value_t = 1000)]
        budget: usize,
        /// Histogram bins over [0.5, 1.0].
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Output directory for ar_table.csv and iou_histogram_*.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the four augmentation x IoU-head modes on one
    /// shared dataset; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training mode.
    #[arg(long)]
    mode: Option<Mode>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Training iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Override any config key, e.g. `training.lr=0.1`. Values parse as
    /// JSON, falling back to plain strings. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidBox(_) | Error::OutOfRange(_) => 2,
        Error::Io { .. } => 3,
        Error::Schema { .. } | Error::Parse { .. } => 4,
        _ => 1,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::InvalidBox(_) => "invalid-box",
        Error::OutOfRange(_) => "out-of-range",
        Error::Io { .. } => "io",
        Error::Schema { .. } => "schema",
        Error::Parse { .. } => "parse",
        Error::NonFinite(_) => "non-finite",
        Error::DimensionMismatch { .. } => "dimension",
        Error::Singular(_) => "singular",
        Error::Undefined(_) => "undefined",
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), Error> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("bad override key {key:?}")));
        }
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "override {key:?}: {part:?} is not inside an object"
            ))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

impl ConfigArgs {
    fn load(&self, workers: Option<usize>) -> Result<ExperimentConfig, Error> {
        let mut value = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {kv:?} is not KEY=VALUE")))?;
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            set_path(&mut value, k, v)?;
        }
        let mut cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.iterations {
            cfg.training.iterations = n;
        }
        if let Some(w) = workers {
            cfg.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn synth(cfg: &ExperimentConfig, out: &Path) -> Result<(), Error> {
    create_dir(out)?;
    let manifest = DatasetManifest::from_config(cfg);
    manifest.save(&out.join("manifest.json"))?;
    let scene = &manifest.dataset.scene;
    for (name, split) in [("train", Split::Train), ("test", Split::Test)] {
        let images = manifest.split(split)?;
        let sizes: BTreeMap<u64, (usize, usize)> = images
            .iter()
            .map(|im| (im.image_id, (scene.height, scene.width)))
            .collect();
        save_coco_annotations(
            &out.join(format!("{name}_annotations.json")),
            &sizes,
            &ground_truth_map(&images),
            scene.num_classes,
        )?;
        save_proposal_dump(
            &proposal_map(&images),
            &out.join(format!("{name}_proposals.jsonl")),
        )?;
        log::info!("{name}: {} images", images.len());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn infer(
    model: &Path,
    dataset: Option<&Path>,
    proposals: Option<&Path>,
    split: Split,
    calibrate: Option<Switch>,
    ibbr: Option<usize>,
    cfg: &ExperimentConfig,
    out: &Path,
    augmented_out: Option<&Path>,
) -> Result<(), Error> {
    let det = Detector::load(model)?;
    let mut inference = cfg.inference.clone();
    if let Some(c) = calibrate {
        inference.calibrate = Some(matches!(c, Switch::On));
    }
    if let Some(n) = ibbr {
        if det.mode.is_cascade() {
            return Err(Error::Config(format!(
                "--ibbr is not available for {} detectors",
                det.mode
            )));
        }
        if n == 0 {
            return Err(Error::Config("--ibbr must be at least 1".into()));
        }
        inference.refine_passes = Some(n - 1);
    }
    inference.validate()?;
    if det.mode.is_cascade() && inference.refine_passes.is_some_and(|p| p > 1) {
        return Err(Error::Config(
            "cascade detectors support at most one pre-refinement pass".into(),
        ));
    }
    let manifest = match dataset {
        Some(p) => DatasetManifest::load(p)?,
        None => DatasetManifest::from_config(cfg),
    };
    let mut images = manifest.split(split)?;
    if let Some(p) = proposals {
        let mut dump = load_proposal_dump(p)?;
        for im in &mut images {
            im.data.proposals = dump.remove(&im.image_id).ok_or_else(|| Error::Parse {
                path: p.to_path_buf(),
                line: 0,
                msg: format!("no proposals for image {}", im.image_id),
            })?;
        }
    }
    let settings = InferenceSettings::resolve(&inference, &det);
    let (dets, stats) = infer_images(&det, &images, &settings)?;
    log::info!(
        "{} images, {} proposals, {} detections",
        images.len(),
        stats.proposals,
        dets.len()
    );
    save_detections(out, &dets)?;
    if let Some(p) = augmented_out {
        let fg = cfg.training.step.routing.fg_threshold;
        save_proposal_dump(&augmented_proposals(&det, &images, fg)?, p)?;
    }
    Ok(())
}

fn eval(detections: &Path, annotations: &Path, out: Option<&Path>) -> Result<(), Error> {
    let dets = load_detections(detections)?;
    let coco = load_coco_annotations(annotations)?;
    let k = coco.num_classes();
    if let Some(d) = dets.iter().find(|d| d.class_id >= k) {
        return Err(Error::Config(format!(
            "detection class {} outside the {k} annotated categories",
            d.class_id
        )));
    }
    let report = EvalReport::evaluate(&dets, &coco.ground_truth, k, &ApParams::default());
    let csv = report.to_csv();
    match out {
        Some(p) => write_text(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn analyze(
    proposals: &Path,
    annotations: &Path,
    budget: usize,
    bins: usize,
    out: &Path,
) -> Result<(), Error> {
    let dump = load_proposal_dump(proposals)?;
    let coco = load_coco_annotations(annotations)?;
    create_dir(out)?;
    let table = average_recall(&dump, &coco.ground_truth, budget)?;
    let csv = table.to_csv();
    write_text(&out.join("ar_table.csv"), &csv)?;
    print!("{csv}");

    let has_refined = dump
        .values()
        .filter_map(|s| s.provenance.as_ref())
        .any(|p| p.contains(&Provenance::Refined));
    let mut populations = vec![Population::OriginalPositive];
    if has_refined {
        populations.push(Population::AugmentedPositive);
    }
    for pop in populations {
        let values = positive_ious(&dump, &coco.ground_truth, pop)?;
        let hist = histogram_of(&values, pop, bins)?;
        let name = match pop {
            Population::OriginalPositive => "original",
            Population::AugmentedPositive => "augmented",
        };
        write_text(
            &out.join(format!("iou_histogram_{name}.csv")),
            &hist.to_csv(),
        )?;
    }
    Ok(())
}

fn ablate(cfg: &ExperimentConfig, out: &Path) -> Result<(), Error> {
    create_dir(out)?;
    let rows = run_ablation(cfg, Some(out))?;
    let csv = ablation_csv(&rows);
    write_text(&out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let workers = cli.workers;
    match cli.command {
        Command::Synth { cfg, out } => {
            let cfg = cfg.load(workers)?;
            exec::with_workers(cfg.workers, || synth(&cfg, &out))
        }
        Command::Train { cfg, out } => {
            let cfg = cfg.load(workers)?;
            let outcome = train(&cfg, Some(&out))?;
            log::info!(
                "trained {} for {} iterations",
                outcome.detector.mode,
                cfg.training.iterations
            );
            Ok(())
        }
        Command::Infer {
            model,
            dataset,
            proposals,
            split,
            calibrate,
            ibbr,
            cfg,
            out,
            augmented_out,
        } => {
            let cfg = cfg.load(workers)?;
            exec::with_workers(cfg.workers, || {
                infer(
                    &model,
                    dataset.as_deref(),
                    proposals.as_deref(),
                    split.into(),
                    calibrate,
                    ibbr,
                    &cfg,
                    &out,
                    augmented_out.as_deref(),
                )
            })
        }
        Command::Eval {
            detections,
            annotations,
            out,
        } => exec::with_workers(workers.unwrap_or(0), || {
            eval(&detections, &annotations, out.as_deref())
        }),
        Command::Analyze {
            proposals,
            annotations,
            budget,
            bins,
            out,
        } => exec::with_workers(workers.unwrap_or(0), || {
            analyze(&proposals, &annotations, budget, bins, &out)
        }),
        Command::Ablate { cfg, out } => {
            let cfg = cfg.load(workers)?;
            ablate(&cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("APDI_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error: kind={} code={} msg={msg}", kind(&e), exit_code(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
