mod config;
mod draw;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use abfpe::data::{
    edge_distance_statistics, generate_synthetic, load_manifest, load_rgb, prepare_with_transform, ManifestOptions,
};
use abfpe::evaluation::{
    evaluate, evaluate_predictor, file_sha256, load_box_sidecar, EvalOptions, MetricsReport, ModelPredictor,
    OraclePredictor, Predictor, REPORT_SCHEMA_VERSION,
};
use abfpe::geometry::FINGER_NAMES;
use abfpe::network::load_checkpoint;
use abfpe::training::train;
use abfpe::{Box2, Crop, SampleRecord, SynthConfig};
use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "abfpe", version, about = "Anchor-based fingertip position estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic hand dataset with a manifest.
    Synth(SynthArgs),
    /// Train a model from a config file and flag overrides.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest and write a metrics report.
    Eval(EvalArgs),
    /// Predict fingertips on one image and write an overlay.
    Predict(PredictArgs),
    /// Plot cumulative error curves from one or more reports as SVG.
    PlotCde(PlotArgs),
    /// Fingertip-to-box-edge distance statistics of a manifest.
    Stats(StatsArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 640)]
    width: u32,
    #[arg(long, default_value_t = 480)]
    height: u32,
    #[arg(long)]
    tip_contrast: Option<u8>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    power: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    restart_fraction: Option<f64>,
    #[arg(long)]
    restart_lr: Option<f64>,
    #[arg(long)]
    huber_delta: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    anchors: Option<usize>,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    neck_channels: Option<usize>,
    #[arg(long)]
    hflip_prob: Option<f64>,
    #[arg(long)]
    vflip_prob: Option<f64>,
    #[arg(long)]
    rotation_max_deg: Option<f64>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Manifest to evaluate on.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,15")]
    deltas: Vec<f64>,
    /// Report JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON Lines sidecar of predicted boxes; ground-truth boxes otherwise.
    #[arg(long)]
    boxes: Option<PathBuf>,
    /// Anchor count the checkpoint must match (also sizes the oracle).
    #[arg(long)]
    anchors: Option<usize>,
    #[arg(long, default_value_t = 224)]
    input_size: usize,
    #[arg(long, default_value_t = 0.0)]
    pad_fraction: f64,
    /// Evaluate a ground-truth oracle in place of a checkpoint.
    #[arg(long, hide = true)]
    oracle: bool,
    /// Frame-pixel shift applied to oracle predictions.
    #[arg(long, hide = true, value_delimiter = ',', default_values_t = [0.0, 0.0])]
    oracle_shift: Vec<f64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Normalized hand box x_min,y_min,x_max,y_max.
    #[arg(long, value_delimiter = ',', required_unless_present = "boxes", conflicts_with = "boxes")]
    bbox: Option<Vec<f64>>,
    /// JSON Lines sidecar of boxes keyed by image path or file name.
    #[arg(long)]
    boxes: Option<PathBuf>,
    /// Overlay PNG path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pad_fraction: f64,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// SVG output path.
    #[arg(long)]
    out: PathBuf,
    /// Curve labels, comma separated; report file stems otherwise.
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

trait UsageExt<T> {
    fn usage(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> UsageExt<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::PlotCde(a) => cmd_plot_cde(a),
        Command::Stats(a) => cmd_stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let mut cfg = SynthConfig {
        count: a.count,
        seed: a.seed,
        image_size: (a.width, a.height),
        ..Default::default()
    };
    if let Some(c) = a.tip_contrast {
        cfg.tip_contrast = c;
    }
    cfg.validate().usage()?;
    let manifest = generate_synthetic(&cfg, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn resolve_run_config(a: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p).usage()?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = a.$flag.clone() { cfg.$($field).+ = v; })*
        };
    }
    set!(
        seed => seed,
        epochs => train.epochs,
        batch_size => train.batch_size,
        lr0 => train.lr0,
        power => train.power,
        momentum => train.momentum,
        restart_fraction => train.restart_fraction,
        restart_lr => train.restart_lr,
        huber_delta => train.huber_delta,
        checkpoint_every => train.checkpoint_every,
        anchors => model.anchor_count,
        input_size => model.input_size,
        neck_channels => model.neck_channels,
        hflip_prob => augment.hflip_prob,
        vflip_prob => augment.vflip_prob,
        rotation_max_deg => augment.rotation_max_deg,
    );
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    if let Some(o) = &a.out {
        cfg.out = Some(o.clone());
    }
    if a.no_augment {
        cfg.augment.enabled = false;
    }
    cfg.absolutize()?;
    cfg.validate().usage()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg = resolve_run_config(&a)?;
    let (data, out) = (cfg.data.clone().unwrap_or_default(), cfg.out.clone().unwrap_or_default());
    let manifest = load_manifest(&data, ManifestOptions::strict())?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let snapshot = out.join("run_config.toml");
    fs::write(&snapshot, cfg.to_toml()?).with_context(|| format!("writing {}", snapshot.display()))?;
    log::info!(
        "training on {} samples for {} epochs (seed {})",
        manifest.records.len(),
        cfg.train.epochs,
        cfg.seed
    );
    let outcome = train(&cfg.train, &cfg.model, &cfg.augment, &manifest, &out, cfg.seed)?;
    if let (Some(first), Some(last)) = (outcome.epochs.first(), outcome.epochs.last()) {
        log::info!("mean loss {:.5} (epoch 1) -> {:.5} (epoch {})", first.mean_loss, last.mean_loss, last.epoch);
    }
    println!("{}", outcome.checkpoint.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let boxes = a.boxes.as_deref().map(load_box_sidecar).transpose().usage()?;
    let opts = EvalOptions {
        deltas: a.deltas.clone(),
        boxes,
        pad_fraction: a.pad_fraction,
        ..Default::default()
    };
    opts.validate().usage()?;
    let manifest = load_manifest(&a.data, ManifestOptions::strict())?;
    let mut report = match &a.checkpoint {
        Some(ckpt) => evaluate(ckpt, &manifest, &opts, a.anchors, None)?.report,
        None => {
            let &[dx, dy] = a.oracle_shift.as_slice() else {
                return Err(Failure::Usage(anyhow!("--oracle-shift takes two values")));
            };
            let mut oracle = OraclePredictor::new(a.anchors.unwrap_or(24), a.input_size)
                .usage()?
                .with_shift(dx, dy);
            let mut r = evaluate_predictor(&mut oracle, &manifest, &opts)?.report;
            r.metadata.checkpoint = Some("oracle".into());
            r
        }
    };
    report.metadata.boxes = a.boxes.as_ref().map(|p| p.display().to_string());
    if let Some(out) = &a.out {
        report.write(out)?;
    }
    println!("{}", summary(&report));
    Ok(())
}

fn summary(r: &MetricsReport) -> String {
    let mut s = format!("images {} | avg px error {:.4}", r.images, r.avg_pixel_error);
    for t in &r.per_threshold {
        s += &format!(" | f1@{} {:.4}", t.delta, t.f1);
    }
    if let Some(iou) = r.mean_iou {
        s += &format!(" | mean iou {iou:.4}");
    }
    s
}

fn lookup_box(sidecar: &Path, image: &Path) -> Result<[f64; 4], Failure> {
    let boxes = load_box_sidecar(sidecar).usage()?;
    let by_path = boxes.get(&image.display().to_string()).copied();
    let by_name = || {
        let name = image.file_name()?;
        boxes
            .iter()
            .find(|(k, _)| Path::new(k).file_name() == Some(name))
            .map(|(_, b)| *b)
    };
    by_path
        .or_else(by_name)
        .ok_or_else(|| Failure::Usage(anyhow!("no box for {} in {}", image.display(), sidecar.display())))
}

fn cmd_predict(a: PredictArgs) -> CmdResult {
    let bbox = match (&a.bbox, &a.boxes) {
        (Some(v), _) => <[f64; 4]>::try_from(v.as_slice())
            .map_err(|_| Failure::Usage(anyhow!("--bbox takes four comma-separated values")))?,
        (None, Some(sidecar)) => lookup_box(sidecar, &a.image)?,
        (None, None) => return Err(Failure::Usage(anyhow!("--bbox or --boxes is required"))),
    };
    let bbox = Box2::from_array(bbox).usage()?;
    if !bbox.is_normalized() {
        return Err(Failure::Usage(anyhow!("--bbox must be normalized to [0, 1]")));
    }
    let image = load_rgb(&a.image)?;
    let (model, cfg) = load_checkpoint::<f32>(&a.checkpoint)?;
    let (w, h) = image.dimensions();
    let record = SampleRecord {
        image: a.image.display().to_string(),
        width: w,
        height: h,
        bbox: bbox.to_array(),
        fingertips: [None; 5],
    };
    let transform = Crop::from_bbox(&bbox, (w, h), cfg.input_size, a.pad_fraction).usage()?;
    let crop_px = Box2::new(
        transform.origin.x,
        transform.origin.y,
        transform.origin.x + transform.crop_size.0,
        transform.origin.y + transform.crop_size.1,
    )?;
    let prepared = prepare_with_transform(&record, &image, transform)?;
    let mut predictor = ModelPredictor::new(model)?;
    let tips = predictor.predict(&[&prepared])?.remove(0);

    let fingertips: Vec<_> = tips
        .slots
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|p| json!({ "slot": i, "finger": FINGER_NAMES[i], "x": p.x, "y": p.y })))
        .collect();
    let doc = json!({
        "image": a.image.display().to_string(),
        "width": w,
        "height": h,
        "bbox": bbox.to_array(),
        "pad_fraction": a.pad_fraction,
        "checkpoint": a.checkpoint.display().to_string(),
        "checkpoint_sha256": file_sha256(&a.checkpoint)?,
        "overlay": a.out.display().to_string(),
        "fingertips": fingertips,
    });
    let overlay = draw::overlay(&image, &crop_px, &tips);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    overlay
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    let snapshot = a.out.with_extension("json");
    fs::write(&snapshot, serde_json::to_string_pretty(&doc)? + "\n")?;
    println!("{doc}");
    Ok(())
}

fn cmd_plot_cde(a: PlotArgs) -> CmdResult {
    if !a.labels.is_empty() && a.labels.len() != a.reports.len() {
        return Err(Failure::Usage(anyhow!(
            "{} labels for {} reports",
            a.labels.len(),
            a.reports.len()
        )));
    }
    let mut curves = Vec::with_capacity(a.reports.len());
    for (i, path) in a.reports.iter().enumerate() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let version = value.get("schema_version").and_then(|v| v.as_u64());
        if version != Some(REPORT_SCHEMA_VERSION as u64) {
            return Err(Failure::Usage(anyhow!(
                "{}: report schema version {:?} is not {REPORT_SCHEMA_VERSION}",
                path.display(),
                version
            )));
        }
        let report: MetricsReport =
            serde_json::from_value(value).with_context(|| format!("parsing {}", path.display()))?;
        let label = a.labels.get(i).cloned().unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        });
        curves.push((label, report.cde));
    }
    let note = format!(
        "abfpe plot-cde {}",
        a.reports
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(" ")
    );
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, draw::cde_svg(&curves, &note)).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{}", a.out.display());
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> CmdResult {
    let manifest = load_manifest(&a.data, ManifestOptions::strict())?;
    let stats = edge_distance_statistics(&manifest.records);
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}
