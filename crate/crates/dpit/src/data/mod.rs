//! Datasets and geometry: synthetic scene generation, COCO-style JSON IO,
//! skeleton metadata, and the affine crop/warp machinery shared by training
//! and inference.

pub mod coco;
pub mod geometry;
pub mod scene;
pub mod skeleton;

pub use coco::{CocoAnnotation, CocoDataset, CocoImage, CocoResult, Dataset};
pub use geometry::{crop_to_input, resize_full, Affine};
pub use scene::{generate_scene, GeneratedScene, SceneSpec};
pub use skeleton::Skeleton;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::path::Path;

/// Row-major RGB image with 8-bit channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbCanvas {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbCanvas {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        RgbCanvas { width, height, data }
    }

    pub fn get(&self, r: usize, c: usize) -> [u8; 3] {
        let i = (r * self.width + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, r: usize, c: usize, color: [u8; 3]) {
        let i = (r * self.width + c) * 3;
        self.data[i..i + 3].copy_from_slice(&color);
    }

    /// Converts to an [H, W, 3] tensor with channels scaled into [0, 1].
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::from_f64(v as f64 / 255.0).unwrap()).collect();
        Tensor::from_vec(vec![self.height, self.width, 3], data).unwrap()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img =
            image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .ok_or_else(|| {
                    Error::shape("canvas buffer does not match its extents".to_string())
                })?;
        img.save(path).map_err(|e| Error::parse(format!("writing {}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::parse(format!("reading {}: {e}", path.display())))?
            .into_rgb8();
        Ok(RgbCanvas {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.into_raw(),
        })
    }
}

/// One annotated person: per-joint (x, y, visibility) in image pixels plus
/// the person box. Visibility is 0 out of frame, 1 occluded, 2 visible.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseInstance {
    pub keypoints: Vec<(f64, f64, u8)>,
    pub bbox: [f64; 4],
    pub area: f64,
}

impl PoseInstance {
    pub fn labeled_count(&self) -> usize {
        self.keypoints.iter().filter(|&&(_, _, v)| v > 0).count()
    }
}
