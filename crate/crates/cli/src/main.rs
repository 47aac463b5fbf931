//! `slicekit`: sliced inference, dataset slicing, merging, evaluation and
//! the synthetic benchmark behind one binary.
//!
//! Exit codes: 0 success, 1 invalid input (bad flags, config or values),
//! 2 runtime failure.

mod config;
mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use slicekit::coco::{load_coco, load_predictions, read_json, save_predictions, write_text, CocoDataset};
use slicekit::detector::{
    Detector, ExternalConfig, ExternalDetector, OracleDetector, RecordingDetector, ReplayDetector, ReplayStore,
};
use slicekit::eval::{compare_runs, evaluate, EvalResult};
use slicekit::grid::{compute_slice_grid, coverage_check};
use slicekit::merge::nms;
use slicekit::pipeline::run_dataset_inference;
use slicekit::slicer::build_finetune_dataset;
use slicekit::synth::{preset_runs, run_benchmark, BenchRun, BenchmarkSpec, SceneConfig, SCENE_PRESETS};

use config::{set, Backend, ToolConfig};
use manifest::{sidecar_path, ManifestBuilder};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(slicekit::Error),
}

impl From<slicekit::Error> for CliError {
    fn from(e: slicekit::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_validation() => 1,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "slicekit", version, about = "Sliced inference and fine-tuning tools for small-object detection")]
struct Cli {
    /// Log progress (repeat for more detail). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file; explicit flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Seed for every random choice [default: 0].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the patch grid of an image as JSON.
    Grid(GridArgs),
    /// Cut a COCO dataset into overlapping patches for fine-tuning.
    Slice(SliceArgs),
    /// Run sliced inference over a dataset and write COCO results.
    Predict(PredictArgs),
    /// Apply NMS to an existing COCO results file, per image.
    Merge(MergeArgs),
    /// Score COCO results against ground truth (AP50 and size bins).
    Evaluate(EvaluateArgs),
    /// Tabulate several evaluation results against the first one.
    Compare(CompareArgs),
    /// Generate a synthetic scene and compare pipeline configurations on it.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Clone)]
struct GridFlags {
    /// Patch width M [default: 640].
    #[arg(long)]
    patch: Option<u32>,
    /// Patch height N [default: same as --patch].
    #[arg(long)]
    patch_h: Option<u32>,
    /// Fractional overlap between neighbouring patches, in [0, 1) [default: 0.25].
    #[arg(long)]
    overlap: Option<f64>,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    common: Common,
    /// Image width in pixels.
    #[arg(long)]
    width: u32,
    /// Image height in pixels.
    #[arg(long)]
    height: u32,
    #[command(flatten)]
    grid: GridFlags,
}

#[derive(Args, Debug)]
struct SliceArgs {
    #[command(flatten)]
    common: Common,
    /// COCO annotations of the source images.
    #[arg(long, value_name = "JSON")]
    coco: Option<PathBuf>,
    /// Directory the dataset's file names are relative to.
    #[arg(long, value_name = "DIR")]
    images: Option<PathBuf>,
    /// Output directory (receives images/ and annotations.json).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Smallest patch side, drawn once per image [default: 480].
    #[arg(long)]
    patch_min: Option<u32>,
    /// Largest patch side [default: 640].
    #[arg(long)]
    patch_max: Option<u32>,
    /// Patch overlap ratio [default: 0.25].
    #[arg(long)]
    overlap: Option<f64>,
    /// Keep a clipped box iff its visible fraction is at least this [default: 0.1].
    #[arg(long)]
    min_area_ratio: Option<f64>,
    /// Also emit the original images [default].
    #[arg(long, overrides_with = "no_originals")]
    include_originals: bool,
    /// Emit patches only.
    #[arg(long)]
    no_originals: bool,
    /// Lower bound of the recorded training resize width [default: 800].
    #[arg(long)]
    resize_min: Option<u32>,
    /// Upper bound of the recorded training resize width [default: 1333].
    #[arg(long)]
    resize_max: Option<u32>,
    /// Abort on an unreadable image instead of skipping it.
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Debug, Clone)]
struct MergeFlags {
    /// NMS IoU threshold T_m, in (0, 1]; pairs above it are merged [default: 0.5].
    #[arg(long)]
    tm: Option<f64>,
    /// Minimum detection score T_d, in [0, 1] [default: 0].
    #[arg(long)]
    td: Option<f64>,
    /// Let boxes of different categories suppress each other.
    #[arg(long)]
    class_agnostic: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    /// COCO dataset to run on (its annotations feed the oracle backend).
    #[arg(long, value_name = "JSON")]
    coco: Option<PathBuf>,
    /// Directory the dataset's file names are relative to.
    #[arg(long, value_name = "DIR")]
    images: Option<PathBuf>,
    /// COCO results file to write.
    #[arg(long, value_name = "JSON")]
    out: Option<PathBuf>,
    /// Per-image statistics file.
    #[arg(long, value_name = "JSON")]
    report: Option<PathBuf>,
    #[command(flatten)]
    grid: GridFlags,
    /// Width each patch is resized to before detection [default: 2 x patch width].
    #[arg(long)]
    target_width: Option<u32>,
    /// Skip the patch grid (full-image inference only; needs --fi).
    #[arg(long)]
    no_slicing: bool,
    /// Add a full-image pass.
    #[arg(long, overrides_with = "no_fi")]
    fi: bool,
    /// Disable the full-image pass [default].
    #[arg(long)]
    no_fi: bool,
    /// Resize width of the full-image pass [default: 1333].
    #[arg(long)]
    fi_width: Option<u32>,
    #[command(flatten)]
    merge: MergeFlags,
    /// Worker threads for patch inference [default: 1].
    #[arg(long)]
    parallelism: Option<usize>,
    /// Abort on the first failing patch.
    #[arg(long)]
    strict: bool,
    /// Detector backend [default: oracle].
    #[arg(long, value_enum)]
    detector: Option<Backend>,
    /// Replay store for --detector replay.
    #[arg(long, value_name = "JSON")]
    replay_store: Option<PathBuf>,
    /// Shell command starting the external detector.
    #[arg(long, value_name = "CMD")]
    external_cmd: Option<String>,
    /// External detector processes [default: 1].
    #[arg(long)]
    workers: Option<usize>,
    /// Seconds to wait for an external answer [default: 300].
    #[arg(long)]
    timeout: Option<u64>,
    /// Record every backend answer into this replay store.
    #[arg(long, value_name = "JSON")]
    record: Option<PathBuf>,
    /// Oracle: smallest visible side after resizing, px [default: 32].
    #[arg(long)]
    min_apparent_px: Option<f64>,
    /// Oracle: apparent side at which the score saturates, px [default: 64].
    #[arg(long)]
    score_saturation_px: Option<f64>,
    /// Oracle: box edge jitter half-width, resized px [default: 1].
    #[arg(long)]
    noise_px: Option<f64>,
}

#[derive(Args, Debug)]
struct MergeArgs {
    #[command(flatten)]
    common: Common,
    /// COCO results file to merge.
    #[arg(long, value_name = "JSON")]
    preds: Option<PathBuf>,
    /// Merged results file to write.
    #[arg(long, value_name = "JSON")]
    out: Option<PathBuf>,
    #[command(flatten)]
    merge: MergeFlags,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Ground-truth COCO dataset.
    #[arg(long, value_name = "JSON")]
    gt: Option<PathBuf>,
    /// COCO results file.
    #[arg(long, value_name = "JSON")]
    preds: Option<PathBuf>,
    /// IoU needed for a match [default: 0.5].
    #[arg(long)]
    iou: Option<f64>,
    /// Detections kept per image, across categories [default: 500].
    #[arg(long)]
    max_dets: Option<usize>,
    /// Where to write the result JSON.
    #[arg(long, value_name = "JSON")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    /// Evaluation result files; the first is the baseline.
    #[arg(long, num_args = 1.., value_name = "JSON")]
    runs: Vec<PathBuf>,
    /// Row labels, comma separated [default: file stems].
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    /// Print CSV instead of an aligned table.
    #[arg(long)]
    csv: bool,
    /// Also write the table to this file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Scene preset: default, large or seams [default: default].
    #[arg(long)]
    scene: Option<String>,
    /// Output directory for the scene, predictions, report and table.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// JSON list of {"label", "pipeline"} runs [default: the preset's runs].
    #[arg(long, value_name = "JSON")]
    configs: Option<PathBuf>,
    /// Worker threads per run [default: 1].
    #[arg(long)]
    parallelism: Option<usize>,
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing required flag {flag}")))
}

fn resolve(common: &Common) -> CliResult<ToolConfig> {
    let mut cfg = ToolConfig::load(common.config.as_deref())?;
    set(&mut cfg.seed, common.seed);
    cfg.propagate_seed();
    Ok(cfg)
}

fn apply_grid(cfg: &mut slicekit::GridSpec, flags: &GridFlags) {
    if let Some(p) = flags.patch {
        cfg.patch_w = p;
        cfg.patch_h = flags.patch_h.unwrap_or(p);
    } else {
        set(&mut cfg.patch_h, flags.patch_h);
    }
    set(&mut cfg.overlap_ratio, flags.overlap);
}

fn apply_merge(cfg: &mut slicekit::MergeConfig, flags: &MergeFlags) {
    set(&mut cfg.t_m, flags.tm);
    set(&mut cfg.t_d, flags.td);
    if flags.class_agnostic {
        cfg.class_aware = false;
    }
}

fn grid(args: GridArgs) -> CliResult {
    let mut cfg = resolve(&args.common)?;
    apply_grid(&mut cfg.pipeline.grid, &args.grid);
    cfg.pipeline.grid.validate()?;
    if args.width == 0 || args.height == 0 {
        return Err(CliError::Usage("--width and --height must be at least 1".into()));
    }
    let slices = compute_slice_grid(args.width, args.height, &cfg.pipeline.grid)?;
    let rects: Vec<serde_json::Value> = slices
        .iter()
        .map(|s| serde_json::json!({"index": s.index, "x": s.x(), "y": s.y(), "width": s.width(), "height": s.height()}))
        .collect();
    println!("{}", serde_json::to_string_pretty(&rects).expect("rects serialize"));
    info!("{} slices, full coverage: {}", slices.len(), coverage_check(args.width, args.height, &slices));
    Ok(())
}

fn slice(args: SliceArgs) -> CliResult {
    let mut cfg = resolve(&args.common)?;
    let s = &mut cfg.slice;
    if let Some(lo) = args.patch_min {
        s.dims_range.m_min = lo;
        s.dims_range.n_min = lo;
    }
    if let Some(hi) = args.patch_max {
        s.dims_range.m_max = hi;
        s.dims_range.n_max = hi;
    }
    set(&mut s.overlap_ratio, args.overlap);
    set(&mut s.min_area_ratio, args.min_area_ratio);
    if args.no_originals {
        s.include_originals = false;
    } else if args.include_originals {
        s.include_originals = true;
    }
    set(&mut s.resize_width_range.0, args.resize_min);
    set(&mut s.resize_width_range.1, args.resize_max);
    s.strict |= args.strict;
    s.validate()?;

    let coco = required(&args.coco, "--coco")?;
    let images = required(&args.images, "--images")?;
    let out = required(&args.out, "--out")?;
    let mut manifest = ManifestBuilder::start("slice");
    manifest.input(coco)?;
    let dataset = load_coco(coco)?;
    let result = build_finetune_dataset(&dataset, images, out, &cfg.slice)?;
    for (path, reason) in &result.skipped {
        warn!("skipped {}: {reason}", path.display());
    }
    manifest.output(&out.join("annotations.json"));
    manifest.output(&out.join("images"));
    manifest.write(&cfg, &out.join("manifest.json"))?;
    println!(
        "{} images, {} annotations written to {} ({} source images skipped)",
        result.dataset.images.len(),
        result.dataset.annotations.len(),
        out.display(),
        result.skipped.len()
    );
    Ok(())
}

fn build_detector(cfg: &ToolConfig, dataset: &CocoDataset) -> CliResult<Box<dyn Detector>> {
    let d = &cfg.detector;
    Ok(match d.backend {
        Backend::Oracle => Box::new(OracleDetector::new(dataset, cfg.visibility, cfg.seed)?),
        Backend::Replay => {
            let path = d
                .replay_store
                .as_deref()
                .ok_or_else(|| CliError::Usage("--detector replay needs --replay-store".into()))?;
            Box::new(ReplayDetector::new(ReplayStore::load(path)?, cfg.pipeline.strict))
        }
        Backend::External => {
            let command = d
                .command
                .clone()
                .ok_or_else(|| CliError::Usage("--detector external needs --external-cmd".into()))?;
            let ext = ExternalDetector::spawn(ExternalConfig {
                command,
                workers: d.workers,
                timeout: Duration::from_secs(d.timeout_secs),
            })
            .map_err(slicekit::Error::from)?;
            Box::new(ext)
        }
    })
}

fn predict(args: PredictArgs) -> CliResult {
    let mut cfg = resolve(&args.common)?;
    let p = &mut cfg.pipeline;
    apply_grid(&mut p.grid, &args.grid);
    if args.target_width.is_some() {
        p.target_width = args.target_width;
    }
    if args.no_slicing {
        p.sliced_inference = false;
    }
    if args.no_fi {
        p.full_inference = false;
    } else if args.fi {
        p.full_inference = true;
    }
    set(&mut p.fi_target_width, args.fi_width);
    apply_merge(&mut p.merge, &args.merge);
    set(&mut p.parallelism, args.parallelism);
    p.strict |= args.strict;
    let d = &mut cfg.detector;
    set(&mut d.backend, args.detector);
    if args.replay_store.is_some() {
        d.replay_store = args.replay_store.clone();
    }
    if args.external_cmd.is_some() {
        d.command = args.external_cmd.clone();
    }
    set(&mut d.workers, args.workers);
    set(&mut d.timeout_secs, args.timeout);
    let v = &mut cfg.visibility;
    set(&mut v.min_apparent_px, args.min_apparent_px);
    set(&mut v.score_saturation_px, args.score_saturation_px);
    set(&mut v.localization_noise_px, args.noise_px);
    cfg.pipeline.validate()?;
    cfg.visibility.validate()?;
    if cfg.detector.workers == 0 || cfg.detector.timeout_secs == 0 {
        return Err(CliError::Usage("--workers and --timeout must be at least 1".into()));
    }

    let coco = required(&args.coco, "--coco")?;
    let images = required(&args.images, "--images")?;
    let out = required(&args.out, "--out")?;
    let mut manifest = ManifestBuilder::start("predict");
    manifest.input(coco)?;
    if let Some(store) = &cfg.detector.replay_store {
        manifest.input(store)?;
    }
    let dataset = load_coco(coco)?;
    let detector = build_detector(&cfg, &dataset)?;
    let inference = match &args.record {
        Some(store_path) => {
            let recorder = RecordingDetector::new(detector);
            let result = run_dataset_inference(&dataset, images, &cfg.pipeline, &recorder, out, args.report.as_deref());
            recorder.into_store().save(store_path)?;
            manifest.output(store_path);
            result?
        }
        None => run_dataset_inference(&dataset, images, &cfg.pipeline, &detector, out, args.report.as_deref())?,
    };
    manifest.output(out);
    if let Some(r) = &args.report {
        manifest.output(r);
    }
    manifest.write(&cfg, &sidecar_path(out))?;
    println!(
        "{} predictions from {} detector calls over {} images -> {}",
        inference.predictions.len(),
        inference.report.total_patches,
        inference.report.images.len(),
        out.display()
    );
    Ok(())
}

fn merge(args: MergeArgs) -> CliResult {
    let mut cfg = resolve(&args.common)?;
    apply_merge(&mut cfg.pipeline.merge, &args.merge);
    cfg.pipeline.merge.validate()?;
    let input = required(&args.preds, "--preds")?;
    let out = required(&args.out, "--out")?;
    let mut manifest = ManifestBuilder::start("merge");
    manifest.input(input)?;
    let preds = load_predictions(input)?;
    let mut by_image: BTreeMap<u64, Vec<slicekit::Detection>> = BTreeMap::new();
    for p in &preds {
        by_image.entry(p.image_id).or_default().push(p.to_detection());
    }
    let merged: Vec<slicekit::PredictionRecord> = by_image
        .iter()
        .flat_map(|(image_id, dets)| {
            nms(dets, &cfg.pipeline.merge)
                .into_iter()
                .map(move |d| d.to_prediction(*image_id))
        })
        .collect();
    save_predictions(&merged, out)?;
    manifest.output(out);
    manifest.write(&cfg, &sidecar_path(out))?;
    println!("{} -> {} detections", preds.len(), merged.len());
    Ok(())
}

fn fmt_bin(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |v| format!("{v:.4}"))
}

fn evaluate_cmd(args: EvaluateArgs) -> CliResult {
    let mut cfg = resolve(&args.common)?;
    set(&mut cfg.eval.iou_threshold, args.iou);
    set(&mut cfg.eval.max_detections, args.max_dets);
    cfg.eval.validate()?;
    let gt_path = required(&args.gt, "--gt")?;
    let preds_path = required(&args.preds, "--preds")?;
    let mut manifest = ManifestBuilder::start("evaluate");
    manifest.input(gt_path)?;
    manifest.input(preds_path)?;
    let gt = load_coco(gt_path)?;
    let preds = load_predictions(preds_path)?;
    let result = evaluate(&gt, &preds, &cfg.eval)?;
    println!(
        "AP50 {:.4}  AP50s {}  AP50m {}  AP50l {}",
        result.ap50,
        fmt_bin(result.ap50_small),
        fmt_bin(result.ap50_medium),
        fmt_bin(result.ap50_large)
    );
    if let Some(out) = &args.out {
        let mut text = serde_json::to_string_pretty(&result).expect("result serializes");
        text.push('\n');
        write_text(out, &text)?;
        manifest.output(out);
        manifest.write(&cfg, &sidecar_path(out))?;
    }
    Ok(())
}

fn compare(args: CompareArgs) -> CliResult {
    let cfg = resolve(&args.common)?;
    if args.runs.is_empty() {
        return Err(CliError::Usage("compare needs at least one --runs file".into()));
    }
    if !args.labels.is_empty() && args.labels.len() != args.runs.len() {
        return Err(CliError::Usage(format!(
            "{} labels given for {} runs",
            args.labels.len(),
            args.runs.len()
        )));
    }
    let mut manifest = ManifestBuilder::start("compare");
    let mut rows = Vec::with_capacity(args.runs.len());
    for (i, path) in args.runs.iter().enumerate() {
        manifest.input(path)?;
        let result: EvalResult = read_json(path)?;
        let label = args.labels.get(i).cloned().unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("run{}", i + 1))
        });
        rows.push((label, result));
    }
    let table = compare_runs(rows)?;
    let text = if args.csv { table.to_csv() } else { table.to_text() };
    print!("{text}");
    if let Some(out) = &args.out {
        write_text(out, &text)?;
        manifest.output(out);
        manifest.write(&cfg, &sidecar_path(out))?;
    }
    Ok(())
}

fn bench(args: BenchArgs) -> CliResult {
    let cfg = resolve(&args.common)?;
    let scene_name = args.scene.as_deref().unwrap_or("default");
    let scene = match &cfg.scene {
        Some(scene) => scene.clone(),
        None => SceneConfig::preset(scene_name, cfg.seed).ok_or_else(|| {
            CliError::Usage(format!("unknown scene `{scene_name}`; expected one of {}", SCENE_PRESETS.join(", ")))
        })?,
    };
    scene.validate()?;
    let mut manifest = ManifestBuilder::start("bench");
    let mut runs: Vec<BenchRun> = match &args.configs {
        Some(path) => {
            manifest.input(path)?;
            read_json(path)?
        }
        None => preset_runs(scene_name).unwrap_or_else(|| preset_runs("default").expect("default preset exists")),
    };
    for run in &mut runs {
        run.pipeline.seed = cfg.seed;
        set(&mut run.pipeline.parallelism, args.parallelism);
    }
    let out = required(&args.out, "--out")?;
    let spec = BenchmarkSpec {
        scene,
        visibility: cfg.visibility,
        eval: cfg.eval,
        runs,
    };
    let outcome = run_benchmark(&spec, out)?;
    print!("{}", outcome.table.to_text());
    for f in ["report.json", "table.txt", "table.csv", "timings.json"] {
        manifest.output(&out.join(f));
    }
    manifest.write(&cfg, &out.join("manifest.json"))?;
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Grid(a) => grid(a),
        Command::Slice(a) => slice(a),
        Command::Predict(a) => predict(a),
        Command::Merge(a) => merge(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Compare(a) => compare(a),
        Command::Bench(a) => bench(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
