//! Skeleton definitions: joint names, left/right swap pairs for horizontal
//! flips, per-joint OKS sigmas, the head segment used by PCKh, and limb edges
//! for rendering. Stored as JSON next to generated datasets.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub name: String,
    pub k: usize,
    pub joints: Vec<String>,
    /// Index pairs exchanged by a horizontal flip.
    pub swap_pairs: Vec<[usize; 2]>,
    /// Per-joint OKS falloff sigmas (the published COCO values for the
    /// default layout).
    pub sigmas: Vec<f64>,
    /// The two joints whose distance defines the PCKh head length.
    pub head_pair: [usize; 2],
    /// Joint index pairs connected by a limb, used by the scene renderer.
    pub limbs: Vec<[usize; 2]>,
}

impl Skeleton {
    /// Standard 17-joint layout: nose, eyes, ears, shoulders, elbows,
    /// wrists, hips, knees, ankles.
    pub fn coco17() -> Self {
        let joints = [
            "nose",
            "left_eye",
            "right_eye",
            "left_ear",
            "right_ear",
            "left_shoulder",
            "right_shoulder",
            "left_elbow",
            "right_elbow",
            "left_wrist",
            "right_wrist",
            "left_hip",
            "right_hip",
            "left_knee",
            "right_knee",
            "left_ankle",
            "right_ankle",
        ];
        Skeleton {
            name: "coco17".to_string(),
            k: 17,
            joints: joints.iter().map(|s| s.to_string()).collect(),
            swap_pairs: vec![[1, 2], [3, 4], [5, 6], [7, 8], [9, 10], [11, 12], [13, 14], [15, 16]],
            sigmas: vec![
                0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107,
                0.107, 0.087, 0.087, 0.089, 0.089,
            ],
            head_pair: [3, 4],
            limbs: vec![
                [15, 13],
                [13, 11],
                [16, 14],
                [14, 12],
                [11, 12],
                [5, 11],
                [6, 12],
                [5, 6],
                [5, 7],
                [6, 8],
                [7, 9],
                [8, 10],
                [1, 2],
                [0, 1],
                [0, 2],
                [1, 3],
                [2, 4],
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("skeleton has zero joints".to_string()));
        }
        if self.joints.len() != self.k {
            return Err(Error::config(format!(
                "skeleton {}: {} joint names for k = {}",
                self.name,
                self.joints.len(),
                self.k
            )));
        }
        if self.sigmas.len() != self.k {
            return Err(Error::config(format!(
                "skeleton {}: {} sigmas for k = {}",
                self.name,
                self.sigmas.len(),
                self.k
            )));
        }
        if self.sigmas.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config(format!("skeleton {}: non-positive sigma", self.name)));
        }
        let in_range = |i: usize| i < self.k;
        for pair in &self.swap_pairs {
            if !in_range(pair[0]) || !in_range(pair[1]) || pair[0] == pair[1] {
                return Err(Error::config(format!(
                    "skeleton {}: bad swap pair {pair:?}",
                    self.name
                )));
            }
        }
        // Swapping must be an involution: no index may appear twice.
        let mut seen = vec![false; self.k];
        for pair in &self.swap_pairs {
            for &i in pair {
                if seen[i] {
                    return Err(Error::config(format!(
                        "skeleton {}: joint {i} appears in multiple swap pairs",
                        self.name
                    )));
                }
                seen[i] = true;
            }
        }
        if !in_range(self.head_pair[0]) || !in_range(self.head_pair[1]) {
            return Err(Error::config(format!(
                "skeleton {}: bad head pair {:?}",
                self.name, self.head_pair
            )));
        }
        for limb in &self.limbs {
            if !in_range(limb[0]) || !in_range(limb[1]) {
                return Err(Error::config(format!("skeleton {}: bad limb {limb:?}", self.name)));
            }
        }
        Ok(())
    }

    /// Applies the swap table to a per-joint vector in place.
    pub fn swap_lr<V>(&self, values: &mut [V]) {
        for pair in &self.swap_pairs {
            values.swap(pair[0], pair[1]);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let skel: Skeleton = serde_json::from_str(&text)
            .map_err(|e| Error::parse(format!("skeleton {}: {e}", path.display())))?;
        skel.validate()?;
        Ok(skel)
    }
}
