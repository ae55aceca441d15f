use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use scene_removal::colmap::{detect_format, parse_model, ColmapError, ImageId, ModelFormat, SparseModel};
use scene_removal::field::{render_image, VoxelField};
use scene_removal::mask::Mask;
use scene_removal::metrics::{mask_accuracy, mask_iou, psnr};
use scene_removal::propagation::{
    points_from_json, predict_masks, run_points_prompt, run_text_prompt, BoxDetector, ExecDetector, ExecPredictor,
    MaskPredictor, PointJson, PromptFile, PromptSet, PropagationError, ViewInput,
};
use scene_removal::raster::ColorImage;
use scene_removal::service::{serve, ServiceState};
use scene_removal::synthetic::{oracle_mask_predictor, write_dataset, OracleDetector, SceneSpec};
use scene_removal::trainer::{
    init_field, model_bounds, train_removal, write_loss_csv, DepthMode, SupervisionSet, TrainConfig, TrainError,
};

#[derive(Parser)]
#[command(name = "scene-removal", version, about = "Prompt propagation and object-removal retraining")]
struct Cli {
    /// Print errors as JSON on stderr.
    #[arg(long, global = true)]
    json: bool,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Auto,
    Text,
    Binary,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with ground truth.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parse and validate a COLMAP sparse model.
    ParseModel {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "auto")]
        format: FormatArg,
    },
    /// Propagate a single-view point prompt and predict masks for every view.
    Propagate {
        /// Dataset root (with sparse/ and images/) or a sparse model directory.
        #[arg(long)]
        model: PathBuf,
        /// `{view_id, points}` clicks or a full prompt file.
        #[arg(long)]
        prompts: PathBuf,
        /// `oracle` (synthetic scenes) or `exec:CMD`.
        #[arg(long, default_value = "oracle")]
        mask_predictor: String,
        /// Ground-truth masks; adds metrics.csv to the output.
        #[arg(long)]
        gt_masks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect the object from text in one view, then propagate.
    TextPrompt {
        #[arg(long)]
        model: PathBuf,
        /// `oracle` (synthetic scenes) or `exec:CMD`.
        #[arg(long)]
        detector: String,
        #[arg(long)]
        text: String,
        #[arg(long)]
        view: Option<ImageId>,
        #[arg(long, default_value = "oracle")]
        mask_predictor: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render depth (and color) of a trained field for every model view.
    RenderDepth {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain a field on color and depth priors.
    Train {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        priors: Option<PathBuf>,
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        mode: Option<DepthMode>,
        #[arg(long, value_enum)]
        lpips: Option<Switch>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        /// Print the effective configuration and exit.
        #[arg(long)]
        print_config: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a trained field on held-out background views.
    Evaluate {
        #[arg(long)]
        field: PathBuf,
        /// Synthetic dataset root with heldout/.
        #[arg(long)]
        gt: PathBuf,
        /// Predicted masks to score against gt/masks.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the annotation HTTP service.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "oracle")]
        mask_predictor: String,
        /// Directory that /api/export writes into.
        #[arg(long)]
        export_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Failure {
    Usage,
    Data,
    External,
}

impl Failure {
    fn code(self) -> u8 {
        match self {
            Failure::Usage => 2,
            Failure::Data => 3,
            Failure::External => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Failure::Usage => "usage",
            Failure::Data => "data",
            Failure::External => "external",
        }
    }
}

#[derive(Debug)]
struct CliError {
    kind: Failure,
    stage: &'static str,
    message: String,
}

type CliResult<T> = Result<T, CliError>;

fn fail(kind: Failure, stage: &'static str, message: impl ToString) -> CliError {
    CliError {
        kind,
        stage,
        message: message.to_string(),
    }
}

fn data(stage: &'static str) -> impl Fn(&dyn std::fmt::Display) -> CliError {
    move |e| fail(Failure::Data, stage, e)
}

impl From<PropagationError> for CliError {
    fn from(e: PropagationError) -> Self {
        let kind = match e {
            PropagationError::Predictor(_) => Failure::External,
            _ => Failure::Data,
        };
        fail(kind, "propagation", e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = match e {
            TrainError::Config(_) => Failure::Usage,
            _ => Failure::Data,
        };
        fail(kind, "train", e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if cli.json {
                let body = serde_json::json!({
                    "error": e.kind.name(),
                    "stage": e.stage,
                    "message": e.message,
                    "exit_code": e.kind.code(),
                });
                eprintln!("{body}");
            } else {
                eprintln!("error ({}): {}", e.stage, e.message);
            }
            ExitCode::from(e.kind.code())
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Synth { spec, out, seed } => synth(spec.as_deref(), &out, seed),
        Command::ParseModel { model, format } => parse_report(&model, format),
        Command::Propagate {
            model,
            prompts,
            mask_predictor,
            gt_masks,
            out,
        } => propagate(&model, &prompts, &mask_predictor, gt_masks.as_deref(), &out),
        Command::TextPrompt {
            model,
            detector,
            text,
            view,
            mask_predictor,
            out,
        } => text_prompt(&model, &detector, &text, view, &mask_predictor, &out),
        Command::RenderDepth { field, model, out } => render_depth(&field, &model, &out),
        Command::Train {
            model,
            priors,
            masks,
            mode,
            lpips,
            config,
            steps,
            seed,
            lr,
            print_config,
            out,
        } => {
            let mut cfg = match &config {
                Some(path) => load_config(path)?,
                None => TrainConfig::default(),
            };
            if let Some(m) = mode {
                cfg.depth_mode = m;
            }
            if let Some(l) = lpips {
                cfg.perceptual = matches!(l, Switch::On);
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(l) = lr {
                cfg.lr = l;
            }
            if print_config {
                println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
                return Ok(());
            }
            let need = |v: Option<PathBuf>, flag: &str| {
                v.ok_or_else(|| fail(Failure::Usage, "train", format!("--{flag} is required")))
            };
            let model = need(model, "model")?;
            let priors = need(priors, "priors")?;
            let masks = need(masks, "masks")?;
            let out = need(out, "out")?;
            train(&model, &priors, &masks, &cfg, &out)
        }
        Command::Evaluate { field, gt, masks, out } => evaluate(&field, &gt, masks.as_deref(), &out),
        Command::Serve {
            model,
            port,
            mask_predictor,
            export_dir,
        } => {
            let ds = Dataset::open(&model)?;
            let predictor = make_predictor(&mask_predictor, &ds)?;
            let export_dir = export_dir.unwrap_or_else(|| ds.root.join("export"));
            let state = ServiceState::new(ds.model, &ds.images, predictor, export_dir);
            let rt = tokio::runtime::Runtime::new().map_err(|e| fail(Failure::External, "serve", e))?;
            rt.block_on(serve(Arc::new(state), port))
                .map_err(|e| fail(Failure::External, "serve", e))
        }
    }
}

fn synth(spec: Option<&Path>, out: &Path, seed: u64) -> CliResult<()> {
    let spec = match spec {
        Some(p) => SceneSpec::load(p).map_err(|e| data("synth")(&e))?,
        None => SceneSpec::default(),
    };
    let model = write_dataset(&spec, seed, out).map_err(|e| data("synth")(&e))?;
    println!(
        "wrote {} views and {} sparse points to {}",
        model.images().len(),
        model.points().len(),
        out.display()
    );
    Ok(())
}

fn load_sparse(dir: &Path, format: FormatArg) -> CliResult<(SparseModel, ModelFormat)> {
    let format = match format {
        FormatArg::Text => ModelFormat::Text,
        FormatArg::Binary => ModelFormat::Binary,
        FormatArg::Auto => detect_format(dir).ok_or_else(|| {
            fail(
                Failure::Data,
                "parse-model",
                ColmapError::MissingFile(dir.join("cameras.{txt,bin}")),
            )
        })?,
    };
    let model = parse_model(dir, format).map_err(|e| data("parse-model")(&e))?;
    Ok((model, format))
}

#[derive(Serialize)]
struct ModelReport {
    format: String,
    cameras: usize,
    images: usize,
    points: usize,
    observations: usize,
    clamped_keypoints: usize,
}

fn parse_report(dir: &Path, format: FormatArg) -> CliResult<()> {
    let (model, format) = load_sparse(dir, format)?;
    let report = ModelReport {
        format: format!("{format:?}").to_lowercase(),
        cameras: model.cameras().len(),
        images: model.images().len(),
        points: model.points().len(),
        observations: model.points().values().map(|p| p.track.len()).sum(),
        clamped_keypoints: model.clamped_keypoints(),
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

/// A sparse model plus the directories around it.
struct Dataset {
    root: PathBuf,
    model: SparseModel,
    images: PathBuf,
}

impl Dataset {
    /// Accepts a dataset root (`sparse/`, `images/`) or the sparse directory itself.
    fn open(path: &Path) -> CliResult<Self> {
        let (root, sparse) = if detect_format(path).is_some() {
            let root = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
            (root, path.to_path_buf())
        } else {
            (path.to_path_buf(), path.join("sparse"))
        };
        let (model, _) = load_sparse(&sparse, FormatArg::Auto)?;
        Ok(Self {
            images: root.join("images"),
            root,
            model,
        })
    }

    fn views(&self) -> Vec<ViewInput> {
        ViewInput::from_model(&self.model, Some(&self.images))
    }

    fn scene(&self) -> CliResult<SceneSpec> {
        let path = self.root.join("scene.json");
        SceneSpec::load(&path).map_err(|e| {
            fail(
                Failure::Usage,
                "predictor",
                format!("oracle needs a synthetic scene description: {e}"),
            )
        })
    }
}

fn make_predictor(arg: &str, ds: &Dataset) -> CliResult<Box<dyn MaskPredictor>> {
    if arg == "oracle" {
        return Ok(Box::new(oracle_mask_predictor(&ds.scene()?)));
    }
    match arg.strip_prefix("exec:") {
        Some(cmd) => Ok(Box::new(
            ExecPredictor::new(cmd).map_err(|e| fail(Failure::Usage, "predictor", e))?,
        )),
        None => Err(fail(
            Failure::Usage,
            "predictor",
            format!("unknown mask predictor '{arg}' (expected oracle or exec:CMD)"),
        )),
    }
}

fn make_detector(arg: &str, ds: &Dataset) -> CliResult<Box<dyn BoxDetector>> {
    if arg == "oracle" {
        return Ok(Box::new(OracleDetector::new(&ds.scene()?)));
    }
    match arg.strip_prefix("exec:") {
        Some(cmd) => Ok(Box::new(
            ExecDetector::new(cmd).map_err(|e| fail(Failure::Usage, "detector", e))?,
        )),
        None => Err(fail(
            Failure::Usage,
            "detector",
            format!("unknown detector '{arg}' (expected oracle or exec:CMD)"),
        )),
    }
}

/// Either raw clicks on one view or an already propagated prompt file.
#[derive(Deserialize)]
#[serde(untagged)]
enum PromptInput {
    Clicks { view_id: ImageId, points: Vec<PointJson> },
    Propagated(PromptFile),
}

fn create_dir(dir: &Path, stage: &'static str) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| fail(Failure::Data, stage, format!("{}: {e}", dir.display())))
}

fn write_masks(
    views: &[ViewInput],
    set: &PromptSet,
    predictor: &dyn MaskPredictor,
    out: &Path,
) -> CliResult<BTreeMap<ImageId, Mask>> {
    set.save_json(&out.join("prompts.json"))
        .map_err(|e| data("propagate")(&e))?;
    let stack = predict_masks(predictor, views, set);
    let masks_dir = out.join("masks");
    create_dir(&masks_dir, "propagate")?;
    stack.save(views, &masks_dir).map_err(|e| data("propagate")(&e))?;
    let report = serde_json::json!({
        "dropped": set.diagnostics,
        "mask_diagnostics": stack.diagnostics,
        "failures": stack.failures,
    });
    std::fs::write(out.join("diagnostics.json"), format!("{report:#}\n")).map_err(|e| data("propagate")(&e))?;
    if !stack.failures.is_empty() {
        let detail: Vec<String> = stack.failures.iter().map(|(v, m)| format!("view {v}: {m}")).collect();
        log::warn!("{} view(s) failed: {}", stack.failures.len(), detail.join("; "));
        if stack.masks.is_empty() {
            return Err(fail(Failure::External, "mask prediction", detail.join("; ")));
        }
    }
    Ok(stack.masks)
}

fn propagate(model: &Path, prompts: &Path, predictor: &str, gt: Option<&Path>, out: &Path) -> CliResult<()> {
    let ds = Dataset::open(model)?;
    let views = ds.views();
    let predictor = make_predictor(predictor, &ds)?;
    let text = std::fs::read_to_string(prompts).map_err(|e| fail(Failure::Data, "prompts", format!("{}: {e}", prompts.display())))?;
    let input: PromptInput = serde_json::from_str(&text).map_err(|e| data("prompts")(&e))?;
    let set = match input {
        PromptInput::Clicks { view_id, points } => {
            let view = views
                .iter()
                .find(|v| v.view_id == view_id)
                .ok_or(PropagationError::ViewAbsent(view_id))?;
            run_points_prompt(&ds.model, predictor.as_ref(), view, &points_from_json(&points))?.0
        }
        PromptInput::Propagated(file) => PromptSet::from_file(file),
    };
    create_dir(out, "propagate")?;
    let masks = write_masks(&views, &set, predictor.as_ref(), out)?;
    println!("propagated to {} views; {} masks written", set.views.len(), masks.len());
    if let Some(gt) = gt {
        let rows = mask_rows(&views, &masks, gt)?;
        write_metrics(&out.join("metrics.csv"), &rows)?;
    }
    Ok(())
}

fn text_prompt(
    model: &Path,
    detector: &str,
    text: &str,
    view: Option<ImageId>,
    predictor: &str,
    out: &Path,
) -> CliResult<()> {
    let ds = Dataset::open(model)?;
    let views = ds.views();
    let detector = make_detector(detector, &ds)?;
    let predictor = make_predictor(predictor, &ds)?;
    let view_id = view.unwrap_or(ds.model.view_order()[0]);
    let view = views
        .iter()
        .find(|v| v.view_id == view_id)
        .ok_or(PropagationError::ViewAbsent(view_id))?;
    let set = run_text_prompt(&ds.model, detector.as_ref(), predictor.as_ref(), view, text)?;
    create_dir(out, "text-prompt")?;
    let masks = write_masks(&views, &set, predictor.as_ref(), out)?;
    println!("'{text}': propagated to {} views; {} masks written", set.views.len(), masks.len());
    Ok(())
}

fn load_config(path: &Path) -> CliResult<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| fail(Failure::Usage, "config", format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| fail(Failure::Usage, "config", format!("{}: {e}", path.display())))
}

const FIELD_FILE: &str = "field.ckpt";
const CONFIG_FILE: &str = "config.json";

fn train(model: &Path, priors: &Path, masks: &Path, cfg: &TrainConfig, out: &Path) -> CliResult<()> {
    cfg.validate()?;
    let ds = Dataset::open(model)?;
    let sup = SupervisionSet::load(&ds.model, priors, masks)?;
    let bounds = match cfg.grid.bounds {
        Some(b) => b,
        None => model_bounds(&ds.model, 0.02)
            .ok_or_else(|| fail(Failure::Data, "train", "model has no points; set grid.bounds"))?,
    };
    let field = init_field(cfg, bounds)?;
    let every = (cfg.steps / 20).max(1);
    let outcome = train_removal(field, &sup, cfg, |step, parts| {
        if step % every == 0 {
            log::info!("step {step}: total {:.6}", parts.total);
        }
    })?;
    create_dir(out, "train")?;
    outcome
        .field
        .save(&out.join(FIELD_FILE))
        .map_err(|e| data("train")(&e))?;
    write_loss_csv(&outcome.history, &out.join("loss.csv"))?;
    let cfg_text = serde_json::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(out.join(CONFIG_FILE), cfg_text + "\n").map_err(|e| data("train")(&e))?;
    let last = outcome.history.last().map(|p| p.total).unwrap_or(0.0);
    println!("trained {} steps; final loss {last:.6}; checkpoint in {}", cfg.steps, out.display());
    Ok(())
}

/// Field checkpoint and the configuration it was trained with.
fn load_field(dir: &Path) -> CliResult<(VoxelField, TrainConfig)> {
    let field = VoxelField::load(&dir.join(FIELD_FILE)).map_err(|e| data("field")(&e))?;
    let cfg_path = dir.join(CONFIG_FILE);
    let cfg = if cfg_path.is_file() {
        load_config(&cfg_path)?
    } else {
        TrainConfig::default()
    };
    Ok((field, cfg))
}

fn render_depth(field_dir: &Path, model: &Path, out: &Path) -> CliResult<()> {
    let (field, cfg) = load_field(field_dir)?;
    let ds = Dataset::open(model)?;
    create_dir(out, "render-depth")?;
    for id in ds.model.view_order() {
        let img = &ds.model.images()[id];
        let cam = ds.model.camera_of(img);
        let view = render_image(&field, cam, &img.pose, cfg.n_samples, cfg.t_near, cfg.t_far, None);
        view.depth
            .save_pfm(&out.join(format!("{}.depth.pfm", img.name)))
            .map_err(|e| data("render-depth")(&e))?;
        view.color
            .save_png(&out.join(format!("{}.render.png", img.name)))
            .map_err(|e| data("render-depth")(&e))?;
    }
    println!("rendered {} views to {}", ds.model.images().len(), out.display());
    Ok(())
}

#[derive(Default)]
struct MetricRow {
    view: String,
    acc: Option<f64>,
    iou: Option<f64>,
    psnr: Option<f64>,
}

fn mask_rows(views: &[ViewInput], masks: &BTreeMap<ImageId, Mask>, gt: &Path) -> CliResult<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for v in views {
        let truth = Mask::load_png(&gt.join(format!("{}.mask.png", v.name))).map_err(|e| data("metrics")(&e))?;
        let pred = masks.get(&v.view_id).cloned().unwrap_or_else(|| Mask::new(v.width, v.height));
        rows.push(MetricRow {
            view: v.name.clone(),
            acc: Some(mask_accuracy(&pred, &truth).map_err(|e| data("metrics")(&e))?),
            iou: Some(mask_iou(&pred, &truth).map_err(|e| data("metrics")(&e))?),
            psnr: None,
        });
    }
    Ok(rows)
}

fn write_metrics(path: &Path, rows: &[MetricRow]) -> CliResult<()> {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mean = |f: fn(&MetricRow) -> Option<f64>| {
        let vals: Vec<f64> = rows.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| data("metrics")(&e))?;
    let mut put = |r: [String; 4]| w.write_record(&r).map_err(|e| data("metrics")(&e));
    put(["view".into(), "acc".into(), "iou".into(), "psnr".into()])?;
    for r in rows {
        put([r.view.clone(), fmt(r.acc), fmt(r.iou), fmt(r.psnr)])?;
    }
    put([
        "mean".into(),
        fmt(mean(|r| r.acc)),
        fmt(mean(|r| r.iou)),
        fmt(mean(|r| r.psnr)),
    ])?;
    w.flush().map_err(|e| data("metrics")(&e))
}

fn evaluate(field_dir: &Path, gt: &Path, masks: Option<&Path>, out: &Path) -> CliResult<()> {
    let (field, cfg) = load_field(field_dir)?;
    let (held, _) = load_sparse(&gt.join("heldout/sparse"), FormatArg::Auto)?;
    let mut rows = Vec::new();
    for id in held.view_order() {
        let img = &held.images()[id];
        let truth = ColorImage::load_png(&gt.join("heldout/background").join(&img.name)).map_err(|e| data("evaluate")(&e))?;
        let view = render_image(&field, held.camera_of(img), &img.pose, cfg.n_samples, cfg.t_near, cfg.t_far, None);
        rows.push(MetricRow {
            view: img.name.clone(),
            psnr: Some(psnr(&view.color, &truth, 1.0).map_err(|e| data("evaluate")(&e))?),
            ..MetricRow::default()
        });
    }
    if let Some(pred_dir) = masks {
        let ds = Dataset::open(gt)?;
        let views = ds.views();
        let mut pred = BTreeMap::new();
        for v in &views {
            let path = pred_dir.join(format!("{}.mask.png", v.name));
            if path.is_file() {
                pred.insert(v.view_id, Mask::load_png(&path).map_err(|e| data("evaluate")(&e))?);
            }
        }
        rows.extend(mask_rows(&views, &pred, &gt.join("masks"))?);
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent, "evaluate")?;
    }
    write_metrics(out, &rows)?;
    let mean_psnr: Vec<f64> = rows.iter().filter_map(|r| r.psnr).collect();
    println!(
        "mean held-out PSNR {:.3} dB over {} views",
        mean_psnr.iter().sum::<f64>() / mean_psnr.len().max(1) as f64,
        mean_psnr.len()
    );
    Ok(())
}
