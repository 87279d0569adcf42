//! `tfnet` command line: one subcommand per pipeline stage, each writing a
//! `run_manifest.json` next to its outputs so the run can be replayed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use tfnet_core::evaluator::{evaluate_dataset, match_polygons, Label, RasterInput};
use tfnet_core::nepagg::{augment_tile, split_raster, TileEntry, TileManifest};
use tfnet_core::polygonize::{extract_with, ExtractOptions, PolygonSet};
use tfnet_core::raster::{read_png, read_prob_png, write_png, write_prob_png, Raster};
use tfnet_core::rastergeo::{read_geojson, write_geojson};
use tfnet_core::synthgen::{read_suite_manifest, write_suite, SuiteKind, SuiteSpec};
use tfnet_core::tfnet::TFNetParams;
use tfnet_core::trainer::{fit, make_samples, predict, write_loss_csv, SceneInput, TrainConfig};

/// Default for `--jobs` when the flag is absent.
pub const JOBS_ENV: &str = "TFNET_JOBS";
pub const MANIFEST_FILE: &str = "run_manifest.json";
/// Stem of the final weights written by `train`.
pub const MODEL_STEM: &str = "model";
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";
pub const REPORT_FILE: &str = "report.json";

/// Exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "tfnet", version, about = "Building footprint extraction pipeline")]
pub struct Cli {
    /// Worker threads for per-tile and per-scene work; outputs do not depend on it.
    #[arg(long, global = true, env = JOBS_ENV, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: u16,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "lowercase")]
pub enum Command {
    /// Generate a synthetic scene suite.
    Synth(SynthArgs),
    /// Cut one raster into augmented tiles.
    Tile(TileArgs),
    /// Train a model on a scene suite.
    Train(TrainArgs),
    /// Building/edge probability maps for every scene of a suite, or one image.
    Predict(PredictArgs),
    /// Probability maps to GeoJSON polygons.
    Polygonize(PolygonizeArgs),
    /// Score predicted polygons against ground truth.
    Evaluate(EvaluateArgs),
    /// Overlay TP (green), FP (red) and FN (blue) regions on the images.
    Render(RenderArgs),
    /// Re-run a subcommand from its run manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SynthArgs {
    /// sparse, dense or straddle.
    #[arg(long)]
    pub kind: SuiteKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub scenes: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TileArgs {
    #[arg(long, visible_alias = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub core_w: usize,
    /// Defaults to --core-w.
    #[arg(long)]
    pub core_h: Option<usize>,
    /// `W [H]`, shorthand for --core-w/--core-h.
    #[arg(long, num_args = 1..=2, value_names = ["W", "H"], conflicts_with_all = ["core_w", "core_h"])]
    #[serde(default)]
    pub core_size: Option<Vec<usize>>,
    #[arg(long, default_value_t = 8)]
    pub margin: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Suite directory with manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    /// TrainConfig JSON; missing fields take desk-scale defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub margin: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Drop the edge decoder (single-decoder ablation).
    #[arg(long)]
    pub no_edge_head: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct PredictArgs {
    /// Output directory of `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = MODEL_STEM)]
    pub checkpoint: String,
    /// Suite directory; mutually exclusive with --image.
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Overrides the margin the model was trained with.
    #[arg(long)]
    pub margin: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct PolygonizeArgs {
    /// Directory of `<id>_building.png` (and `<id>_edge.png`) maps, or one such map.
    #[arg(long, visible_alias = "in")]
    pub pred: PathBuf,
    #[arg(long, default_value_t = 0.5, value_parser = unit_closed)]
    pub threshold: f64,
    /// Split touching buildings along edge pixels above this probability.
    #[arg(long, value_parser = unit_closed)]
    pub edge_threshold: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub min_area: usize,
    /// Output directory, or a single `.geojson` file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Directory of predicted `<id>.geojson`.
    #[arg(long, visible_alias = "pred-dir")]
    pub pred: PathBuf,
    /// Directory of ground-truth `<id>.geojson`.
    #[arg(long, visible_alias = "gt-dir")]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 0.5, value_parser = iou_threshold)]
    pub iou: f64,
    /// Output directory, or the report's own `.json` path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct RenderArgs {
    /// Suite directory (images and ground truth).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, default_value_t = 0.5, value_parser = iou_threshold)]
    pub iou: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn unit_closed(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn iou_threshold(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside (0, 1]"))
    }
}

/// Everything needed to re-run a subcommand. No timestamps, so two runs of
/// the same command produce the same file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub argv: Vec<String>,
    pub command: Command,
    /// Settings after defaults and config files were applied.
    pub resolved: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_slice(&raw).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Argument mistakes caught by the CLI itself (exit 1).
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

/// 1 for argument errors, 2 for anything wrong with the data.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<tfnet_core::Error>() {
            return if e.is_invalid_argument() { EXIT_USAGE } else { EXIT_DATA };
        }
    }
    EXIT_DATA
}

/// Parses `argv` (program name first), runs the subcommand, returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let recorded: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli, recorded) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs as usize)
        .build()
        .context("building the worker pool")?;
    pool.install(|| execute(cli.command, argv, None))
}

fn execute(command: Command, argv: Vec<String>, preset: Option<serde_json::Value>) -> Result<()> {
    let (resolved, inputs, seed) = match &command {
        Command::Synth(a) => synth(a)?,
        Command::Tile(a) => tile(a)?,
        Command::Train(a) => train(a, preset)?,
        Command::Predict(a) => predict_cmd(a)?,
        Command::Polygonize(a) => polygonize(a)?,
        Command::Evaluate(a) => evaluate(a)?,
        Command::Render(a) => render(a)?,
        Command::Replay(a) => return replay(a),
    };
    let out = command.out_dir().expect("non-replay commands have --out");
    let manifest = RunManifest {
        tool: "tfnet".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        argv,
        command,
        resolved,
        inputs,
        out: out.clone(),
        seed,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)
}

impl Command {
    pub fn out(&self) -> Option<&Path> {
        Some(match self {
            Command::Synth(a) => &a.out,
            Command::Tile(a) => &a.out,
            Command::Train(a) => &a.out,
            Command::Predict(a) => &a.out,
            Command::Polygonize(a) => &a.out,
            Command::Evaluate(a) => &a.out,
            Command::Render(a) => &a.out,
            Command::Replay(_) => return None,
        })
    }

    /// Directory holding the outputs and the run manifest.
    pub fn out_dir(&self) -> Option<PathBuf> {
        let out = self.out()?;
        Some(match self {
            Command::Polygonize(_) => split_out(out, "geojson").0,
            Command::Evaluate(_) => split_out(out, "json").0,
            _ => out.to_path_buf(),
        })
    }

    /// Moves the outputs to directory `out`, keeping a single-file `--out`'s name.
    fn set_out(&mut self, out: PathBuf) {
        let out = match self.out().zip(self.out_dir()) {
            Some((old, dir)) if old != dir => out.join(old.file_name().expect("file --out has a name")),
            _ => out,
        };
        match self {
            Command::Synth(a) => a.out = out,
            Command::Tile(a) => a.out = out,
            Command::Train(a) => a.out = out,
            Command::Predict(a) => a.out = out,
            Command::Polygonize(a) => a.out = out,
            Command::Evaluate(a) => a.out = out,
            Command::Render(a) => a.out = out,
            Command::Replay(_) => {}
        }
    }
}

type Outcome = (serde_json::Value, Vec<PathBuf>, Option<u64>);

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(value)?;
    json.push(b'\n');
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&raw).with_context(|| format!("parsing {}", path.display()))
}

/// `--out` as (directory, single output file) when it names a file with `ext`.
fn split_out(out: &Path, ext: &str) -> (PathBuf, Option<PathBuf>) {
    if out.extension().is_some_and(|e| e == ext) {
        let dir = match out.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        (dir, Some(out.to_path_buf()))
    } else {
        (out.to_path_buf(), None)
    }
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

/// Files in `dir` ending in `suffix`, as sorted (id, path) pairs.
fn files_with_suffix(dir: &Path, suffix: &str) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if let Some(id) = name.strip_suffix(suffix) {
            if !id.is_empty() {
                out.push((id.to_string(), path));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn synth(a: &SynthArgs) -> Result<Outcome> {
    if a.scenes == 0 {
        return Err(usage("--scenes must be at least 1"));
    }
    let mut spec = SuiteSpec::new(a.kind, a.seed);
    spec.scenes = a.scenes;
    create_out(&a.out)?;
    write_suite(&spec, &a.out)?;
    Ok((serde_json::to_value(&spec)?, vec![], Some(a.seed)))
}

fn tile(a: &TileArgs) -> Result<Outcome> {
    let image = read_png(&a.input)?;
    let (core_w, core_h) = match a.core_size.as_deref() {
        Some([w]) => (*w, *w),
        Some([w, h]) => (*w, *h),
        _ => (a.core_w, a.core_h.unwrap_or(a.core_w)),
    };
    let records = split_raster(&image, core_w, core_h, a.margin)?;
    create_out(&a.out)?;
    let tiles: Vec<TileEntry> = records
        .par_iter()
        .map(|rec| -> Result<TileEntry> {
            let file = format!("{}.png", rec.tile_id.file_stem());
            write_png(&a.out.join(&file), &augment_tile(&image, rec)?)?;
            Ok(TileEntry { record: *rec, file })
        })
        .collect::<Result<_>>()?;
    let manifest = TileManifest {
        parent_height: image.height(),
        parent_width: image.width(),
        channels: image.channels(),
        core_w,
        core_h,
        margin: a.margin,
        geotransform: image.geotransform,
        tiles,
    };
    manifest.write(&a.out.join("tiles.json"))?;
    let resolved = serde_json::json!({ "core_w": core_w, "core_h": core_h, "margin": a.margin });
    Ok((resolved, vec![a.input.clone()], None))
}

/// Images and polygons of every scene listed in a suite manifest.
pub fn load_scenes(dir: &Path) -> Result<Vec<SceneInput>> {
    let manifest = read_suite_manifest(dir)?;
    manifest
        .scenes
        .par_iter()
        .map(|s| {
            let image = read_png(&dir.join(&s.image))?;
            let poly_path = dir.join(&s.polygons);
            if !poly_path.exists() {
                return Err(tfnet_core::Error::Data(format!(
                    "{}: missing polygons file {}",
                    s.image,
                    poly_path.display()
                ))
                .into());
            }
            Ok(SceneInput {
                id: s.id.clone(),
                image,
                polygons: read_geojson(&poly_path)?,
            })
        })
        .collect()
}

pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p).map_err(|e| usage(format!("--config: {e:#}")))?,
        None => TrainConfig::desk_scale(),
    };
    if let Some(s) = a.steps {
        cfg.max_steps = Some(s);
        cfg.epochs = cfg.epochs.max(s);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(k) = a.margin {
        cfg.margin = k;
    }
    if let Some(lr) = a.lr {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(usage(format!("--lr must be a positive number, got {lr}")));
        }
        cfg.learning_rate = lr;
    }
    if a.no_edge_head {
        cfg.model = cfg.model.without_edge_head();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: &TrainArgs, preset: Option<serde_json::Value>) -> Result<Outcome> {
    let cfg = match preset {
        Some(v) => serde_json::from_value(v).context("manifest holds no train config")?,
        None => resolve_train_config(a)?,
    };
    let scenes = load_scenes(&a.data)?;
    let samples = make_samples(&scenes, &cfg)?;
    create_out(&a.out)?;
    let mut params = TFNetParams::build(cfg.model.clone(), cfg.seed)?;
    let history = fit(&mut params, &samples, &cfg, Some(&a.out))?;
    write_loss_csv(&a.out.join("losses.csv"), &history)?;
    let mut meta = BTreeMap::new();
    meta.insert("step".to_string(), serde_json::json!(history.len()));
    params.save(&a.out, MODEL_STEM, meta)?;
    write_json(&a.out.join(TRAIN_CONFIG_FILE), &cfg)?;
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.config.clone());
    Ok((serde_json::to_value(&cfg)?, inputs, Some(cfg.seed)))
}

fn predict_cmd(a: &PredictArgs) -> Result<Outcome> {
    let cfg: TrainConfig = read_json(&a.model.join(TRAIN_CONFIG_FILE))?;
    let (params, _) = TFNetParams::load(&a.model, &a.checkpoint)?;
    let margin = a.margin.unwrap_or(cfg.margin);
    let images: Vec<(String, Raster<u8>)> = match (&a.data, &a.image) {
        (Some(dir), _) => {
            let manifest = read_suite_manifest(dir)?;
            manifest
                .scenes
                .iter()
                .map(|s| Ok((s.id.clone(), read_png(&dir.join(&s.image))?)))
                .collect::<Result<_>>()?
        }
        (None, Some(path)) => {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| usage("--image has no file name"))?
                .to_string();
            vec![(id, read_png(path)?)]
        }
        (None, None) => return Err(usage("one of --data or --image is required")),
    };
    create_out(&a.out)?;
    for (id, image) in &images {
        let p = predict(&params, image, cfg.core_w, cfg.core_h, margin)?;
        write_prob_png(&a.out.join(format!("{id}_building.png")), &p.building)?;
        if let Some(e) = &p.edge {
            write_prob_png(&a.out.join(format!("{id}_edge.png")), e)?;
        }
    }
    let resolved = serde_json::json!({
        "core_w": cfg.core_w,
        "core_h": cfg.core_h,
        "margin": margin,
        "checkpoint": a.checkpoint,
    });
    let mut inputs = vec![a.model.clone()];
    inputs.extend(a.data.clone());
    inputs.extend(a.image.clone());
    Ok((resolved, inputs, None))
}

fn polygonize(a: &PolygonizeArgs) -> Result<Outcome> {
    let opts = ExtractOptions {
        threshold: a.threshold,
        min_area: a.min_area,
        edge_threshold: a.edge_threshold,
    };
    let maps = if a.pred.is_file() {
        let stem = a.pred.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let id = stem.strip_suffix("_building").unwrap_or(stem).to_string();
        vec![(id, a.pred.clone())]
    } else {
        files_with_suffix(&a.pred, "_building.png")?
    };
    if maps.is_empty() {
        bail!(tfnet_core::Error::Data(format!("no *_building.png maps in {}", a.pred.display())));
    }
    let (dir, file) = split_out(&a.out, "geojson");
    if file.is_some() && maps.len() > 1 {
        return Err(usage(format!(
            "--out names one file but {} holds {} maps; pass a directory",
            a.pred.display(),
            maps.len()
        )));
    }
    create_out(&dir)?;
    maps.par_iter()
        .map(|(id, path)| -> Result<()> {
            let prob = read_prob_png(path)?;
            let edge = match a.edge_threshold {
                Some(_) => {
                    let sibling = path.with_file_name(format!("{id}_edge.png"));
                    Some(read_prob_png(&sibling)?)
                }
                None => None,
            };
            let set = extract_with(&prob, edge.as_ref(), &opts)?;
            let target = file.clone().unwrap_or_else(|| dir.join(format!("{id}.geojson")));
            write_geojson(&target, &set.polygons())?;
            Ok(())
        })
        .collect::<Result<()>>()?;
    Ok((serde_json::to_value(opts)?, vec![a.pred.clone()], None))
}

fn load_set(path: &Path) -> Result<PolygonSet> {
    let polys = read_geojson(path)?;
    PolygonSet::from_polygons(&polys).with_context(|| format!("{}", path.display()))
}

fn evaluate(a: &EvaluateArgs) -> Result<Outcome> {
    let preds = files_with_suffix(&a.pred, ".geojson")?;
    let inputs: Vec<RasterInput> = preds
        .par_iter()
        .map(|(id, path)| {
            let gt_path = a.gt.join(format!("{id}.geojson"));
            let gts = if gt_path.exists() { Some(load_set(&gt_path)?) } else { None };
            Ok(RasterInput {
                id: id.clone(),
                preds: load_set(path)?,
                gts,
            })
        })
        .collect::<Result<_>>()?;
    let report = evaluate_dataset(&inputs, a.iou)?;
    let (dir, file) = split_out(&a.out, "json");
    create_out(&dir)?;
    write_json(&file.unwrap_or_else(|| dir.join(REPORT_FILE)), &report)?;
    Ok((serde_json::json!({ "iou": a.iou }), vec![a.pred.clone(), a.gt.clone()], None))
}

const TP_COLOR: [u8; 3] = [0, 200, 0];
const FP_COLOR: [u8; 3] = [220, 0, 0];
const FN_COLOR: [u8; 3] = [0, 80, 255];

/// Grayscale base with TP/FP prediction regions and FN truth regions blended in.
pub fn overlay(image: &Raster<u8>, preds: &PolygonSet, gts: &PolygonSet, iou: f64) -> Result<Raster<u8>> {
    let report = match_polygons(preds, gts, iou)?;
    let (h, w) = (image.height(), image.width());
    let mut out = Raster::<u8>::new(h, w, 3)?;
    for r in 0..h {
        for c in 0..w {
            let px = image.pixel(r, c);
            let g = (px.iter().map(|&v| v as u32).sum::<u32>() / px.len() as u32) as u8;
            for ch in 0..3 {
                out.set(r, c, ch, g / 2);
            }
        }
    }
    let mut paint = |region: &tfnet_core::rastergeo::PixelRegion, color: [u8; 3]| {
        for &(r, c) in region.pixels() {
            let (r, c) = (r as usize, c as usize);
            if r < h && c < w {
                for (ch, &col) in color.iter().enumerate() {
                    let base = out.get(r, c, ch) as u16;
                    out.set(r, c, ch, ((base + col as u16 * 3) / 4) as u8);
                }
            }
        }
    };
    for (m, (region, _)) in report.predictions.iter().zip(preds.entries()) {
        paint(region, if m.label == Label::TP { TP_COLOR } else { FP_COLOR });
    }
    for &j in &report.unmatched_gts {
        paint(&gts.entries()[j].0, FN_COLOR);
    }
    Ok(out)
}

fn render(a: &RenderArgs) -> Result<Outcome> {
    let manifest = read_suite_manifest(&a.data)?;
    create_out(&a.out)?;
    manifest
        .scenes
        .par_iter()
        .map(|s| -> Result<()> {
            let pred_path = a.pred.join(format!("{}.geojson", s.id));
            if !pred_path.exists() {
                return Ok(());
            }
            let image = read_png(&a.data.join(&s.image))?;
            let img = overlay(&image, &load_set(&pred_path)?, &load_set(&a.data.join(&s.polygons))?, a.iou)?;
            write_png(&a.out.join(format!("{}_overlay.png", s.id)), &img)?;
            Ok(())
        })
        .collect::<Result<()>>()?;
    Ok((serde_json::json!({ "iou": a.iou }), vec![a.data.clone(), a.pred.clone()], None))
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let m = RunManifest::read(&a.manifest).map_err(|e| usage(format!("--manifest: {e:#}")))?;
    let mut command = m.command;
    if matches!(command, Command::Replay(_)) {
        return Err(usage("--manifest points at a replay run"));
    }
    if let Some(out) = &a.out {
        command.set_out(out.clone());
    }
    let preset = matches!(command, Command::Train(_)).then_some(m.resolved);
    execute(command, m.argv, preset)
}
