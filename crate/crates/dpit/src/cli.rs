//! Command-line surface: dataset generation, training, inference,
//! evaluation and gradient checking.
//!
//! Configuration is layered: a CLI flag beats the TOML config file, which
//! beats the built-in default, independently per field. Exit codes: 0 ok,
//! 2 usage or config problems, 3 numeric failures (NaN abort, failed
//! gradient check).

use crate::data::coco::{read_results, write_results, CocoDataset, CocoResult, Dataset};
use crate::data::geometry::{crop_to_input, resize_full};
use crate::data::scene::{generate_scene, SceneSpec};
use crate::data::skeleton::Skeleton;
use crate::data::PoseInstance;
use crate::error::{Error, Result};
use crate::gradcheck::grad_check_model;
use crate::metrics::{
    ap_ar, coco_thresholds, head_length, pckh, EvalRecord, GtInstance, MetricsReport, OksParams,
    PckhPair, PckhReport, Prediction, DEFAULT_AREA_BOUNDARY,
};
use crate::model::heatmap::{decode, export_heatmap, to_image_coords};
use crate::model::{forward_scene, BuMode, ModelConfig};
use crate::optim::TrainConfig;
use crate::tensor::{Tape, Tensor};
use crate::train::{derived_seed, train, StepLog};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

pub const DEFAULT_PRESET: &str = "dpit-b";

/// println! that shrugs off a closed stdout (e.g. piping into `head`), so
/// work that follows the print still completes.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

/// Fully resolved run settings: model choice, data/output paths and the
/// training hyperparameters.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub preset: String,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
}

/// One layer of settings where every field is optional. The TOML file
/// deserializes into this; flags build another one. `over` stacks them.
#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    pub preset: Option<String>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainLayer,
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainLayer {
    pub epochs: Option<usize>,
    pub drop_epochs: Option<Vec<usize>>,
    pub drop_factor: Option<f64>,
    pub base_lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub augment: Option<bool>,
    pub rotation_max_deg: Option<f64>,
    pub scale_range: Option<(f64, f64)>,
    pub flip_prob: Option<f64>,
    pub seed: Option<u64>,
    pub weight_decay: Option<f64>,
    pub grad_clip: Option<f64>,
}

impl ConfigLayer {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("reading {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::parse(format!("{}: {e}", path.display())))
    }

    /// Field-wise: a value in `self` wins, otherwise `under`'s is kept.
    pub fn over(self, under: ConfigLayer) -> ConfigLayer {
        ConfigLayer {
            preset: self.preset.or(under.preset),
            data: self.data.or(under.data),
            out: self.out.or(under.out),
            train: TrainLayer {
                epochs: self.train.epochs.or(under.train.epochs),
                drop_epochs: self.train.drop_epochs.or(under.train.drop_epochs),
                drop_factor: self.train.drop_factor.or(under.train.drop_factor),
                base_lr: self.train.base_lr.or(under.train.base_lr),
                batch_size: self.train.batch_size.or(under.train.batch_size),
                augment: self.train.augment.or(under.train.augment),
                rotation_max_deg: self.train.rotation_max_deg.or(under.train.rotation_max_deg),
                scale_range: self.train.scale_range.or(under.train.scale_range),
                flip_prob: self.train.flip_prob.or(under.train.flip_prob),
                seed: self.train.seed.or(under.train.seed),
                weight_decay: self.train.weight_decay.or(under.train.weight_decay),
                grad_clip: self.train.grad_clip.or(under.train.grad_clip),
            },
        }
    }

    /// Fills the remaining holes with the documented defaults. A set
    /// `epochs` without explicit `drop_epochs` rescales the default drop
    /// schedule proportionally, so shortened runs stay self-consistent.
    pub fn finish(self) -> RunConfig {
        let d = TrainConfig::reference();
        let epochs = self.train.epochs.unwrap_or(d.epochs);
        let scaled_drops = d.scaled_to(epochs).drop_epochs;
        RunConfig {
            preset: self.preset.unwrap_or_else(|| DEFAULT_PRESET.to_string()),
            data: self.data,
            out: self.out,
            train: TrainConfig {
                epochs,
                drop_epochs: self.train.drop_epochs.unwrap_or(scaled_drops),
                drop_factor: self.train.drop_factor.unwrap_or(d.drop_factor),
                base_lr: self.train.base_lr.unwrap_or(d.base_lr),
                batch_size: self.train.batch_size.unwrap_or(d.batch_size),
                augment: self.train.augment.unwrap_or(d.augment),
                rotation_max_deg: self.train.rotation_max_deg.unwrap_or(d.rotation_max_deg),
                scale_range: self.train.scale_range.unwrap_or(d.scale_range),
                flip_prob: self.train.flip_prob.unwrap_or(d.flip_prob),
                seed: self.train.seed.unwrap_or(d.seed),
                weight_decay: self.train.weight_decay,
                grad_clip: self.train.grad_clip,
            },
        }
    }
}

/// flag > file > default, per field.
pub fn resolve(flags: ConfigLayer, config_file: Option<&Path>) -> Result<RunConfig> {
    let file = match config_file {
        Some(path) => ConfigLayer::from_file(path)?,
        None => ConfigLayer::default(),
    };
    Ok(flags.over(file).finish())
}

#[derive(Parser)]
#[command(name = "dpit", version, about = "Two-branch pose transformer toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Generate a synthetic multi-person dataset (PNGs + COCO-format JSON)
    GenData(GenDataArgs),
    /// Train a model, writing checkpoints and a per-step loss log
    Train(TrainArgs),
    /// Run inference over a dataset's ground-truth boxes
    Predict(PredictArgs),
    /// Score predictions against ground truth
    Eval(EvalArgs),
    /// Verify analytic gradients against central differences
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Output directory for images, annotations and the skeleton file
    #[arg(long)]
    pub out: PathBuf,
    /// Number of scenes
    #[arg(long, default_value_t = 32)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Default)]
pub struct ModelArgs {
    /// TOML config file; explicit flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model preset: dpit-b, dpit-d6, dpit-d16 or dpit-tiny
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Args, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Dataset directory (from gen-data)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for checkpoints and the loss log
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Resume from this checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs at which the learning rate drops, comma separated
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub drop_epochs: Option<Vec<usize>>,
    #[arg(long)]
    pub drop_factor: Option<f64>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    /// Scenes per optimization step
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// true/false: random rotation, rescaling and flipping
    #[arg(long)]
    pub augment: Option<bool>,
    #[arg(long)]
    pub rotation_max_deg: Option<f64>,
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    pub scale_range: Option<Vec<f64>>,
    #[arg(long)]
    pub flip_prob: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
}

impl TrainArgs {
    fn layer(&self) -> ConfigLayer {
        ConfigLayer {
            preset: self.model.preset.clone(),
            data: self.data.clone(),
            out: self.out.clone(),
            train: TrainLayer {
                epochs: self.epochs,
                drop_epochs: self.drop_epochs.clone(),
                drop_factor: self.drop_factor,
                base_lr: self.base_lr,
                batch_size: self.batch_size,
                augment: self.augment,
                rotation_max_deg: self.rotation_max_deg,
                scale_range: self.scale_range.as_ref().map(|v| (v[0], v[1])),
                flip_prob: self.flip_prob,
                seed: self.seed,
                weight_decay: self.weight_decay,
                grad_clip: self.grad_clip,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum BuModeArg {
    #[default]
    Full,
    /// Feed an all-zero full image (branch tokens present but blank)
    Zeroed,
    /// Drop the full-image tokens from the sequence
    Omitted,
}

impl From<BuModeArg> for BuMode {
    fn from(m: BuModeArg) -> BuMode {
        match m {
            BuModeArg::Full => BuMode::Full,
            BuModeArg::Zeroed => BuMode::Zeroed,
            BuModeArg::Omitted => BuMode::Omitted,
        }
    }
}

#[derive(Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory whose images and ground-truth boxes to use
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Output predictions JSON
    #[arg(long)]
    pub out: PathBuf,
    /// How the full-image branch is fed at inference
    #[arg(long, value_enum, default_value_t = BuModeArg::Full)]
    pub bu_mode: BuModeArg,
    /// If set, export every predicted heatmap here as .raw + .json
    #[arg(long)]
    pub heatmap_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Coco,
    Pckh,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Dataset directory with ground truth
    #[arg(long)]
    pub gt: PathBuf,
    /// Predictions JSON (from predict)
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, value_enum)]
    pub metric: Metric,
    /// Where the report JSON is written
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Number of parameter coordinates to probe
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(&args),
        Cmd::Train(args) => cmd_train(&args),
        Cmd::Predict(args) => cmd_predict(&args),
        Cmd::Eval(args) => cmd_eval(&args),
        Cmd::GradCheck(args) => cmd_grad_check(&args),
    }
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<ExitCode> {
    let skel = Skeleton::coco17();
    let spec = SceneSpec::default();
    let scenes = (0..args.count)
        .map(|i| generate_scene(&spec, &skel, derived_seed(args.seed, 0x6E65, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::write(&args.out, &scenes, &skel)?;
    say!("wrote {} scenes to {}", scenes.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: &TrainArgs) -> Result<ExitCode> {
    let cfg = resolve(args.layer(), args.model.config.as_deref())?;
    let data = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::config("no dataset: pass --data or set `data` in the config"))?;
    let out = cfg
        .out
        .as_ref()
        .ok_or_else(|| Error::config("no output dir: pass --out or set `out` in the config"))?;
    let model = ModelConfig::preset(&cfg.preset)?;
    let ds = Dataset::load(data)?;
    std::fs::create_dir_all(out)?;
    let log_path = out.join("loss.jsonl");
    let mut log = std::io::BufWriter::new(if args.resume.is_some() {
        std::fs::OpenOptions::new().create(true).append(true).open(&log_path)?
    } else {
        std::fs::File::create(&log_path)?
    });
    let outcome =
        train::<f32>(&ds, &model, &cfg.train, out, args.resume.as_deref(), |s: &StepLog| {
            say!("step {} epoch {} lr {:.6e} loss {:.6e}", s.step, s.epoch, s.lr, s.loss);
            let _ = writeln!(log, "{}", serde_json::to_string(s).unwrap());
        })?;
    log.flush()?;
    if let Some(diag) = outcome.aborted {
        eprintln!("training aborted: {diag}");
        if let Some(ckpt) = outcome.checkpoint {
            eprintln!("last good checkpoint: {}", ckpt.display());
        }
        return Ok(ExitCode::from(3));
    }
    say!(
        "trained {} epochs ({} steps), checkpoint at {}",
        outcome.epochs_run,
        outcome.curve.len(),
        outcome.checkpoint.expect("completed run has a checkpoint").display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Predictions for every annotation of every image, shared-BU per scene,
/// in dataset order. Pure function of checkpoint + data, so repeated runs
/// write identical files.
pub fn predict_dataset(
    ds: &Dataset,
    model: &ModelConfig,
    params: &crate::params::ParamStore<f32>,
    bu_mode: BuMode,
    mut heatmap_sink: Option<&mut dyn FnMut(u64, usize, &Tensor<f32>) -> Result<()>>,
) -> Result<Vec<CocoResult>> {
    if ds.skeleton.k != model.k {
        return Err(Error::config(format!(
            "skeleton has {} joints, model expects {}",
            ds.skeleton.k, model.k
        )));
    }
    let geom = model.head_geometry();
    let by_image = ds.by_image();
    let mut results = Vec::new();
    for img in &ds.coco.images {
        let Some(anns) = by_image.get(&img.id) else { continue };
        if anns.is_empty() {
            continue;
        }
        let image = ds.load_image(img)?.to_tensor::<f32>();
        let (bu, _) = resize_full(&image, model.bu_input.0, model.bu_input.1)?;
        let instances: Vec<PoseInstance> =
            anns.iter().map(|a| CocoDataset::annotation_to_instance(a)).collect();
        let mut crops = Vec::with_capacity(instances.len());
        let mut affines = Vec::with_capacity(instances.len());
        for inst in &instances {
            let (crop, to_crop) =
                crop_to_input(&image, inst.bbox, model.td_input.0, model.td_input.1)?;
            crops.push(crop);
            affines.push(to_crop);
        }
        let mut tape = Tape::new();
        let ids = params.bind(&mut tape, false);
        let bound = crate::model::Bound::new(params, &ids);
        let fwd = forward_scene(&mut tape, &bound, model, &bu, &crops, bu_mode)?;
        for (i, to_crop) in affines.iter().enumerate() {
            let cells = geom.cells();
            let hm = Tensor::from_vec(vec![model.k, cells], tape.value(fwd.heatmaps[i]).to_vec())?;
            if let Some(sink) = heatmap_sink.as_deref_mut() {
                sink(img.id, i, &hm)?;
            }
            let decoded = decode(&hm, geom, true)?;
            let crop_pts: Vec<(f64, f64)> = decoded.iter().map(|d| (d.x, d.y)).collect();
            let img_pts = to_image_coords(&crop_pts, to_crop)?;
            let mut keypoints = Vec::with_capacity(3 * model.k);
            let mut score_sum = 0.0;
            for (p, d) in img_pts.iter().zip(&decoded) {
                keypoints.extend([p.0, p.1, d.score]);
                score_sum += d.score;
            }
            results.push(CocoResult {
                image_id: img.id,
                category_id: 1,
                keypoints,
                score: score_sum / model.k as f64,
            });
        }
    }
    Ok(results)
}

fn cmd_predict(args: &PredictArgs) -> Result<ExitCode> {
    let flags = ConfigLayer {
        preset: args.model.preset.clone(),
        data: args.images.clone(),
        ..ConfigLayer::default()
    };
    let cfg = resolve(flags, args.model.config.as_deref())?;
    let data = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::config("no dataset: pass --images or set `data` in the config"))?;
    let model = ModelConfig::preset(&cfg.preset)?;
    let ds = Dataset::load(data)?;
    let loaded = crate::checkpoint::load_checkpoint::<f32>(&args.checkpoint)?;
    let geom = model.head_geometry();

    let mut sink_fn;
    let mut sink: Option<&mut dyn FnMut(u64, usize, &Tensor<f32>) -> Result<()>> = None;
    if let Some(dir) = &args.heatmap_dir {
        std::fs::create_dir_all(dir)?;
        let dir = dir.clone();
        sink_fn = move |image_id: u64, idx: usize, hm: &Tensor<f32>| {
            export_heatmap(hm, geom, &dir.join(format!("img{image_id}_p{idx}")))
        };
        sink = Some(&mut sink_fn);
    }
    let results = predict_dataset(&ds, &model, &loaded.params, args.bu_mode.into(), sink)?;
    write_results(&args.out, &results)?;
    say!("wrote {} predictions to {}", results.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

/// Groups results by GT image, erroring (with the full list) when
/// predictions reference images the ground truth does not have.
pub fn records_for_eval(ds: &Dataset, results: &[CocoResult]) -> Result<Vec<(u64, EvalRecord)>> {
    let known: BTreeSet<u64> = ds.coco.images.iter().map(|i| i.id).collect();
    let unknown: BTreeSet<u64> =
        results.iter().map(|r| r.image_id).filter(|id| !known.contains(id)).collect();
    if !unknown.is_empty() {
        let ids: Vec<String> = unknown.iter().map(|i| i.to_string()).collect();
        return Err(Error::config(format!(
            "predictions reference image ids missing from the ground truth: {}",
            ids.join(", ")
        )));
    }
    let by_image = ds.by_image();
    let mut records = Vec::new();
    for img in &ds.coco.images {
        let gts: Vec<GtInstance> = by_image
            .get(&img.id)
            .map(|anns| {
                anns.iter()
                    .map(|a| {
                        let inst = CocoDataset::annotation_to_instance(a);
                        GtInstance { keypoints: inst.keypoints, area: inst.area }
                    })
                    .collect()
            })
            .unwrap_or_default();
        let preds: Vec<Prediction> = results
            .iter()
            .filter(|r| r.image_id == img.id)
            .map(|r| Prediction {
                keypoints: r.keypoints.chunks(3).map(|c| (c[0], c[1])).collect(),
                score: r.score,
            })
            .collect();
        records.push((img.id, EvalRecord { gts, preds }));
    }
    Ok(records)
}

fn cmd_eval(args: &EvalArgs) -> Result<ExitCode> {
    let ds = Dataset::load(&args.gt)?;
    let results = read_results(&args.pred, ds.skeleton.k)?;
    let records = records_for_eval(&ds, &results)?;
    let report = match args.metric {
        Metric::Coco => {
            let recs: Vec<EvalRecord> = records.into_iter().map(|(_, r)| r).collect();
            let params = OksParams::from_skeleton(&ds.skeleton);
            let summary = ap_ar(&recs, &params, &coco_thresholds(), DEFAULT_AREA_BOUNDARY)?;
            MetricsReport { coco: Some(summary), pckh: None }
        }
        Metric::Pckh => {
            let mut pairs = Vec::new();
            for (image_id, rec) in &records {
                if rec.gts.len() != rec.preds.len() {
                    return Err(Error::config(format!(
                        "image {image_id}: {} ground-truth persons but {} predictions; \
                         pckh needs one prediction per annotation",
                        rec.gts.len(),
                        rec.preds.len()
                    )));
                }
                for (gt, pred) in rec.gts.iter().zip(&rec.preds) {
                    pairs.push(PckhPair {
                        gt: gt.keypoints.clone(),
                        pred: pred.keypoints.clone(),
                        head_len: head_length(&gt.keypoints, &ds.skeleton),
                    });
                }
            }
            let summary = pckh(&pairs, 0.5, ds.skeleton.k)?;
            let report = PckhReport::from_summary(&summary, &ds.skeleton);
            MetricsReport { coco: None, pckh: Some(report) }
        }
    };
    let text = serde_json::to_string_pretty(&report)?;
    say!("{text}");
    report.save(&args.out)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_grad_check(args: &GradCheckArgs) -> Result<ExitCode> {
    let flags = ConfigLayer {
        preset: args.model.preset.clone(),
        train: TrainLayer { seed: args.seed, ..TrainLayer::default() },
        ..ConfigLayer::default()
    };
    let cfg = resolve(flags, args.model.config.as_deref())?;
    let model = ModelConfig::preset(&cfg.preset)?;
    if args.samples == 0 {
        say!("WARNING: 0 samples requested; the check is vacuous");
    }
    let report = grad_check_model(&model, args.samples, cfg.train.seed)?;
    match &report.worst {
        Some(worst) => println!(
            "checked {} coordinates: max rel err {:.3e} at {} (tolerance {:.0e})",
            report.checked, report.max_rel_err, worst, report.tolerance
        ),
        None => println!("checked {} coordinates", report.checked),
    }
    if report.passed() {
        say!("PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        say!("FAIL");
        Ok(ExitCode::from(3))
    }
}
