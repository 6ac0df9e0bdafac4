//! End-to-end training: augment -> letterbox + person crops -> shared-BU
//! forward -> masked heatmap MSE -> Adam.
//!
//! A step consumes a batch of whole scenes, so all persons of an image share
//! one bottom-up subgraph. Every random draw is seeded from
//! (global seed, epoch, scene index), which makes loss curves bit-exactly
//! reproducible and lets a resumed run continue the original curve.

use crate::augment::{augment_scene, AugmentDraw};
use crate::checkpoint::{load_checkpoint, save_checkpoint, TrainMeta};
use crate::data::coco::{CocoDataset, Dataset};
use crate::data::geometry::{crop_to_input, resize_full, Affine};
use crate::data::PoseInstance;
use crate::error::{Error, Result};
use crate::model::heatmap::{mse_loss, render_targets};
use crate::model::{forward_scene, init_params, Bound, BuMode, ModelConfig};
use crate::optim::{lr_at, AdamState, TrainConfig};
use crate::params::ParamStore;
use crate::tensor::{lit, Scalar, Tape, Tensor, ValueId};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_FILE: &str = "last.ckpt";

/// One scene held in memory: pixels as a tensor plus its annotations.
pub struct TrainScene<T> {
    pub image: Tensor<T>,
    pub instances: Vec<PoseInstance>,
}

pub fn load_scenes<T: Scalar>(ds: &Dataset) -> Result<Vec<TrainScene<T>>> {
    let by_image = ds.by_image();
    ds.coco
        .images
        .iter()
        .map(|img| {
            let canvas = ds.load_image(img)?;
            let instances = by_image
                .get(&img.id)
                .map(|anns| anns.iter().map(|a| CocoDataset::annotation_to_instance(a)).collect())
                .unwrap_or_default();
            Ok(TrainScene { image: canvas.to_tensor(), instances })
        })
        .collect()
}

/// A person ready for the TD branch: its crop, the rendered target rows,
/// the visibility mask and the image->crop transform.
pub struct PreparedPerson<T> {
    pub crop: Tensor<T>,
    pub target: Tensor<T>,
    pub visible: Vec<bool>,
    pub to_crop: Affine,
}

pub struct PreparedScene<T> {
    pub bu: Tensor<T>,
    pub persons: Vec<PreparedPerson<T>>,
}

/// Letterboxes the scene for the BU branch and crops each person for the TD
/// branch. Persons without a single labeled keypoint, or with a degenerate
/// box, are skipped: the masked loss is undefined over them.
pub fn prepare_scene<T: Scalar>(
    cfg: &ModelConfig,
    image: &Tensor<T>,
    instances: &[PoseInstance],
) -> Result<PreparedScene<T>> {
    let (bu, _) = resize_full(image, cfg.bu_input.0, cfg.bu_input.1)?;
    let geom = cfg.head_geometry();
    let mut persons = Vec::new();
    for inst in instances {
        if inst.keypoints.len() != cfg.k {
            return Err(Error::shape(format!(
                "instance has {} keypoints, model expects {}",
                inst.keypoints.len(),
                cfg.k
            )));
        }
        if inst.labeled_count() == 0 {
            continue;
        }
        let Ok((crop, to_crop)) = crop_to_input(image, inst.bbox, cfg.td_input.0, cfg.td_input.1)
        else {
            continue;
        };
        let crop_kps: Vec<(f64, f64, u8)> = inst
            .keypoints
            .iter()
            .map(|&(x, y, v)| {
                let (cx, cy) = to_crop.apply((x, y));
                (cx, cy, v)
            })
            .collect();
        let (target, visible) = render_targets(&crop_kps, geom, cfg.sigma)?;
        persons.push(PreparedPerson { crop, target, visible, to_crop });
    }
    Ok(PreparedScene { bu, persons })
}

/// Mean per-person heatmap MSE of a whole batch on one tape. The value and
/// its gradients match the training step's per-scene accumulation up to
/// float reassociation.
pub fn batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound<T>,
    cfg: &ModelConfig,
    scenes: &[PreparedScene<T>],
    bu_mode: BuMode,
) -> Result<ValueId> {
    let n_total: usize = scenes.iter().map(|s| s.persons.len()).sum();
    if n_total == 0 {
        return Err(Error::config("batch has no trainable person instances"));
    }
    let mut acc: Option<ValueId> = None;
    for scene in scenes {
        if scene.persons.is_empty() {
            continue;
        }
        let crops: Vec<Tensor<T>> = scene.persons.iter().map(|p| p.crop.clone()).collect();
        let fwd = forward_scene(tape, bound, cfg, &scene.bu, &crops, bu_mode)?;
        for (i, person) in scene.persons.iter().enumerate() {
            let loss = mse_loss(tape, fwd.heatmaps[i], &person.target, &person.visible)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, loss)?,
                None => loss,
            });
        }
    }
    tape.scale(acc.unwrap(), lit::<T>(1.0 / n_total as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub curve: Vec<StepLog>,
    pub epochs_run: usize,
    /// Diagnostic when the run stopped on a non-finite loss or gradient.
    /// The checkpoint then still holds the last completed epoch.
    pub aborted: Option<String>,
    pub checkpoint: Option<PathBuf>,
}

enum StepOutcome {
    Stepped(f64),
    Empty,
    NonFinite(String),
}

fn batch_step<T: Scalar>(
    params: &mut ParamStore<T>,
    adam: &mut AdamState<T>,
    cfg: &ModelConfig,
    scenes: &[PreparedScene<T>],
) -> Result<StepOutcome> {
    let n_total: usize = scenes.iter().map(|s| s.persons.len()).sum();
    if n_total == 0 {
        return Ok(StepOutcome::Empty);
    }
    let mut grads: Option<Vec<Vec<T>>> = None;
    let mut loss_total = 0.0f64;
    for scene in scenes {
        if scene.persons.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let ids = params.bind(&mut tape, true);
        let bound = Bound::new(params, &ids);
        let crops: Vec<Tensor<T>> = scene.persons.iter().map(|p| p.crop.clone()).collect();
        let fwd = forward_scene(&mut tape, &bound, cfg, &scene.bu, &crops, BuMode::Full)?;
        let mut acc: Option<ValueId> = None;
        for (i, person) in scene.persons.iter().enumerate() {
            let loss = mse_loss(&mut tape, fwd.heatmaps[i], &person.target, &person.visible)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, loss)?,
                None => loss,
            });
        }
        let scene_loss = tape.scale(acc.unwrap(), lit::<T>(1.0 / n_total as f64))?;
        let scene_val = tape.value(scene_loss)[0].to_f64().unwrap();
        if !scene_val.is_finite() {
            return Ok(StepOutcome::NonFinite(format!("loss {scene_val} is not finite")));
        }
        loss_total += scene_val;
        match tape.backward(scene_loss) {
            Ok(()) => {}
            Err(Error::Numeric(diag)) => return Ok(StepOutcome::NonFinite(diag)),
            Err(e) => return Err(e),
        }
        let g = params.collect_grads(&tape, &ids)?;
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => {
                for (a, gi) in acc.iter_mut().zip(g) {
                    for (x, y) in a.iter_mut().zip(gi) {
                        *x = *x + y;
                    }
                }
            }
        }
    }
    if !loss_total.is_finite() {
        return Ok(StepOutcome::NonFinite(format!("loss {loss_total} is not finite")));
    }
    match adam.step(params, &grads.unwrap()) {
        Ok(()) => Ok(StepOutcome::Stepped(loss_total)),
        Err(Error::Numeric(diag)) => Ok(StepOutcome::NonFinite(diag)),
        Err(e) => Err(e),
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Seed for the (epoch, scene) augmentation stream. History-free, so a
/// resumed run draws exactly what the uninterrupted run would have.
pub fn derived_seed(seed: u64, epoch: u64, scene: u64) -> u64 {
    splitmix(splitmix(seed ^ epoch.wrapping_mul(0xA076_1D64_78BD_642F)) ^ scene)
}

/// Trains `model` on `dataset`, logging one entry per optimizer step and
/// writing `last.ckpt` in `out_dir` after every epoch. A non-finite loss or
/// gradient stops the run, leaving the last completed epoch's checkpoint;
/// the outcome then carries the diagnostic instead of an Err.
pub fn train<T: Scalar>(
    dataset: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    if dataset.skeleton.k != model.k {
        return Err(Error::config(format!(
            "skeleton has {} joints, model expects {}",
            dataset.skeleton.k, model.k
        )));
    }
    if dataset.coco.images.is_empty() {
        return Err(Error::config("dataset has no images"));
    }
    let scenes = load_scenes::<T>(dataset)?;
    std::fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);

    let (mut params, mut adam, start_epoch, mut step) = match resume {
        Some(path) => {
            let loaded = load_checkpoint::<T>(path)?;
            let adam = loaded.restore_adam(cfg);
            (loaded.params, adam, loaded.meta.epoch as usize, loaded.meta.step)
        }
        None => {
            let params = init_params::<T>(model, cfg.seed)?;
            let adam = AdamState::from_config(&params, cfg);
            (params, adam, 0, 0)
        }
    };

    let mut curve = Vec::new();
    if start_epoch >= cfg.epochs {
        // Nothing to run (0 epochs, or an already-finished resume): the
        // checkpoint is still produced.
        save_checkpoint(
            &ckpt_path,
            &params,
            Some(&adam),
            &TrainMeta { epoch: start_epoch as u64, step },
        )?;
        return Ok(TrainOutcome {
            curve,
            epochs_run: 0,
            aborted: None,
            checkpoint: Some(ckpt_path),
        });
    }

    let mut last_saved: Option<PathBuf> = None;
    for epoch in start_epoch..cfg.epochs {
        let lr = lr_at(epoch, cfg)?;
        adam.alpha = lr;
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        // The shuffle uses the scene slot u64::MAX, which no scene index
        // reaches, so it never collides with an augmentation stream.
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derived_seed(
            cfg.seed,
            epoch as u64,
            u64::MAX,
        )));
        for chunk in order.chunks(cfg.batch_size) {
            let mut prepared = Vec::with_capacity(chunk.len());
            for &si in chunk {
                let scene = &scenes[si];
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derived_seed(cfg.seed, epoch as u64, si as u64));
                let draw = AugmentDraw::sample(cfg, &mut rng);
                let (img, insts) =
                    augment_scene(&scene.image, &scene.instances, &dataset.skeleton, &draw)?;
                prepared.push(prepare_scene(model, &img, &insts)?);
            }
            match batch_step(&mut params, &mut adam, model, &prepared)? {
                StepOutcome::Empty => continue,
                StepOutcome::NonFinite(diag) => {
                    return Ok(TrainOutcome {
                        curve,
                        epochs_run: epoch - start_epoch,
                        aborted: Some(diag),
                        checkpoint: last_saved,
                    });
                }
                StepOutcome::Stepped(loss) => {
                    step += 1;
                    let log = StepLog { step, epoch, lr, loss };
                    on_step(&log);
                    curve.push(log);
                }
            }
        }
        save_checkpoint(
            &ckpt_path,
            &params,
            Some(&adam),
            &TrainMeta { epoch: epoch as u64 + 1, step },
        )?;
        last_saved = Some(ckpt_path.clone());
    }
    Ok(TrainOutcome {
        curve,
        epochs_run: cfg.epochs - start_epoch,
        aborted: None,
        checkpoint: Some(ckpt_path),
    })
}
