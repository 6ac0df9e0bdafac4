//! COCO-style keypoint JSON: a dataset is a directory holding
//! `annotations.json`, `skeleton.json`, and an `images/` folder of PNGs.
//! Ground-truth keypoints are stored as integer triples like the familiar
//! person-keypoints files; predictions carry float coordinates and a score.

use super::skeleton::Skeleton;
use super::{GeneratedScene, PoseInstance, RgbCanvas};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    /// Flat [x0, y0, v0, x1, y1, v1, ...], three entries per joint.
    pub keypoints: Vec<i64>,
    pub num_keypoints: u32,
    pub bbox: [f64; 4],
    pub area: f64,
    pub iscrowd: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u32,
    pub name: String,
    pub keypoints: Vec<String>,
    /// 1-based joint index pairs, as in the reference annotation files.
    pub skeleton: Vec<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// One predicted pose in results format: float keypoint triples plus an
/// instance score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u32,
    pub keypoints: Vec<f64>,
    pub score: f64,
}

impl CocoDataset {
    pub fn validate(&self, k: usize) -> Result<()> {
        let image_ids: std::collections::HashSet<u64> = self.images.iter().map(|i| i.id).collect();
        if image_ids.len() != self.images.len() {
            return Err(Error::parse("duplicate image id".to_string()));
        }
        let mut ann_ids = std::collections::HashSet::new();
        for ann in &self.annotations {
            if !ann_ids.insert(ann.id) {
                return Err(Error::parse(format!("duplicate annotation id {}", ann.id)));
            }
            if ann.keypoints.len() != 3 * k {
                return Err(Error::parse(format!(
                    "annotation {} has {} keypoint entries, expected {}",
                    ann.id,
                    ann.keypoints.len(),
                    3 * k
                )));
            }
            if !image_ids.contains(&ann.image_id) {
                return Err(Error::parse(format!(
                    "annotation {} references unknown image {}",
                    ann.id, ann.image_id
                )));
            }
            if !(ann.bbox[2] > 0.0 && ann.bbox[3] > 0.0 && ann.area > 0.0) {
                return Err(Error::parse(format!("annotation {} has a degenerate box", ann.id)));
            }
            let labeled = ann.keypoints.chunks(3).filter(|t| t[2] > 0).count();
            if labeled != ann.num_keypoints as usize {
                return Err(Error::parse(format!(
                    "annotation {}: num_keypoints {} but {} joints are labeled",
                    ann.id, ann.num_keypoints, labeled
                )));
            }
        }
        Ok(())
    }

    pub fn annotation_to_instance(ann: &CocoAnnotation) -> PoseInstance {
        let keypoints =
            ann.keypoints.chunks(3).map(|t| (t[0] as f64, t[1] as f64, t[2] as u8)).collect();
        PoseInstance { keypoints, bbox: ann.bbox, area: ann.area }
    }

    pub fn instance_to_keypoints(inst: &PoseInstance) -> Vec<i64> {
        inst.keypoints
            .iter()
            .flat_map(|&(x, y, v)| {
                if v == 0 {
                    // Unlabeled joints are stored as zeros by convention.
                    [0, 0, 0]
                } else {
                    [x.round() as i64, y.round() as i64, v as i64]
                }
            })
            .collect()
    }
}

/// A dataset directory opened for reading: parsed annotations, the skeleton,
/// and lazy access to the image files.
#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub coco: CocoDataset,
    pub skeleton: Skeleton,
}

impl Dataset {
    /// Writes `scenes` as a dataset directory. Image ids and annotation ids
    /// are assigned sequentially from 1.
    pub fn write(dir: &Path, scenes: &[GeneratedScene], skel: &Skeleton) -> Result<()> {
        let images_dir = dir.join("images");
        fs::create_dir_all(&images_dir)?;
        let mut images = Vec::with_capacity(scenes.len());
        let mut annotations = Vec::new();
        let mut next_ann = 1u64;
        for (i, scene) in scenes.iter().enumerate() {
            let id = i as u64 + 1;
            let file_name = format!("scene_{id:05}.png");
            scene.image.save_png(&images_dir.join(&file_name))?;
            images.push(CocoImage {
                id,
                file_name,
                width: scene.image.width as u32,
                height: scene.image.height as u32,
            });
            for inst in &scene.instances {
                let keypoints = CocoDataset::instance_to_keypoints(inst);
                annotations.push(CocoAnnotation {
                    id: next_ann,
                    image_id: id,
                    category_id: 1,
                    num_keypoints: inst.labeled_count() as u32,
                    keypoints,
                    bbox: inst.bbox,
                    area: inst.area,
                    iscrowd: 0,
                });
                next_ann += 1;
            }
        }
        let categories = vec![CocoCategory {
            id: 1,
            name: "person".to_string(),
            keypoints: skel.joints.clone(),
            skeleton: skel.limbs.iter().map(|l| [l[0] + 1, l[1] + 1]).collect(),
        }];
        let coco = CocoDataset { images, annotations, categories };
        fs::write(dir.join("annotations.json"), serde_json::to_string_pretty(&coco)?)?;
        skel.save(&dir.join("skeleton.json"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let skeleton = Skeleton::load(&dir.join("skeleton.json"))?;
        let ann_path = dir.join("annotations.json");
        let text = fs::read_to_string(&ann_path)
            .map_err(|e| Error::parse(format!("reading {}: {e}", ann_path.display())))?;
        let coco: CocoDataset = serde_json::from_str(&text)
            .map_err(|e| Error::parse(format!("parsing {}: {e}", ann_path.display())))?;
        coco.validate(skeleton.k)?;
        Ok(Dataset { root: dir.to_path_buf(), coco, skeleton })
    }

    pub fn load_image(&self, image: &CocoImage) -> Result<RgbCanvas> {
        RgbCanvas::load_png(&self.root.join("images").join(&image.file_name))
    }

    /// Annotations grouped by image id, in annotation order.
    pub fn by_image(&self) -> HashMap<u64, Vec<&CocoAnnotation>> {
        let mut map: HashMap<u64, Vec<&CocoAnnotation>> = HashMap::new();
        for ann in &self.coco.annotations {
            map.entry(ann.image_id).or_default().push(ann);
        }
        map
    }
}

pub fn write_results(path: &Path, results: &[CocoResult]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(results)?)?;
    Ok(())
}

pub fn read_results(path: &Path, k: usize) -> Result<Vec<CocoResult>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::parse(format!("reading {}: {e}", path.display())))?;
    let results: Vec<CocoResult> = serde_json::from_str(&text)
        .map_err(|e| Error::parse(format!("parsing {}: {e}", path.display())))?;
    for (i, r) in results.iter().enumerate() {
        if r.keypoints.len() != 3 * k {
            return Err(Error::parse(format!(
                "result {i} has {} keypoint entries, expected {}",
                r.keypoints.len(),
                3 * k
            )));
        }
    }
    Ok(results)
}
