//! Heatmap head: linear projection of keypoint rows to a per-joint grid,
//! Gaussian target rendering, masked MSE, and argmax decoding back to crop
//! pixel coordinates.

use super::{Bound, ModelConfig};
use crate::data::geometry::Affine;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{lit, Scalar, Tape, Tensor, ValueId};
use rand::Rng;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

/// Maps heatmap cells to crop pixels: cell (r, c) covers an sy x sx pixel
/// block whose center is ((c+0.5)sx - 0.5, (r+0.5)sy - 0.5).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadGeometry {
    /// (rows, cols) of the heatmap grid.
    pub grid: (usize, usize),
    /// (height, width) of the crop in pixels.
    pub crop: (usize, usize),
}

impl HeadGeometry {
    pub fn cells(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    fn scale(&self) -> (f64, f64) {
        (self.crop.0 as f64 / self.grid.0 as f64, self.crop.1 as f64 / self.grid.1 as f64)
    }

    pub fn cell_to_crop(&self, r: f64, c: f64) -> (f64, f64) {
        let (sy, sx) = self.scale();
        ((c + 0.5) * sx - 0.5, (r + 0.5) * sy - 0.5)
    }

    /// Continuous (row, col) cell coordinates of a crop pixel position.
    pub fn crop_to_cell(&self, x: f64, y: f64) -> (f64, f64) {
        let (sy, sx) = self.scale();
        ((y + 0.5) / sy - 0.5, (x + 0.5) / sx - 0.5)
    }
}

pub fn init<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) {
    let cells = cfg.head_grid.0 * cfg.head_grid.1;
    store.add("head.w", Tensor::randn(vec![cfg.d, cells], 0.02, rng));
}

/// encoder output [L, D] -> heatmap rows [K, cells]. Only the first K rows
/// (the keypoint queries) are consumed.
pub fn project<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound<T>,
    cfg: &ModelConfig,
    encoded: ValueId,
) -> Result<ValueId> {
    let kpt = tape.slice_rows(encoded, 0, cfg.k)?;
    tape.matmul(kpt, bound.get("head.w")?)
}

/// Renders per-joint Gaussian targets from crop-pixel keypoints. Joints with
/// visibility 0 give all-zero rows and `false` in the visibility mask;
/// centers outside the grid are rendered with their in-grid tail.
pub fn render_targets<T: Scalar>(
    keypoints: &[(f64, f64, u8)],
    geom: HeadGeometry,
    sigma: f64,
) -> Result<(Tensor<T>, Vec<bool>)> {
    if !(sigma > 0.0) {
        return Err(Error::config(format!("sigma must be positive, got {sigma}")));
    }
    let (gh, gw) = geom.grid;
    let mut data = Vec::with_capacity(keypoints.len() * gh * gw);
    let mut visible = Vec::with_capacity(keypoints.len());
    for &(x, y, v) in keypoints {
        if v == 0 {
            data.extend(std::iter::repeat(T::zero()).take(gh * gw));
            visible.push(false);
            continue;
        }
        visible.push(true);
        let (vr, uc) = geom.crop_to_cell(x, y);
        for r in 0..gh {
            for c in 0..gw {
                let d2 = (c as f64 - uc).powi(2) + (r as f64 - vr).powi(2);
                data.push(lit::<T>((-d2 / (2.0 * sigma * sigma)).exp()));
            }
        }
    }
    Ok((Tensor::from_vec(vec![keypoints.len(), gh * gw], data)?, visible))
}

/// Mean squared error over all cells of visible rows only.
pub fn mse_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: ValueId,
    gt: &Tensor<T>,
    visible: &[bool],
) -> Result<ValueId> {
    let (k, cells) = match tape.shape(pred) {
        [k, cells] => (*k, *cells),
        s => return Err(Error::shape(format!("heatmap rows must be [k,cells], got {s:?}"))),
    };
    if gt.shape() != [k, cells] || visible.len() != k {
        return Err(Error::shape(format!(
            "target shape {:?} / {} visibility flags vs prediction [{k},{cells}]",
            gt.shape(),
            visible.len()
        )));
    }
    let k_vis = visible.iter().filter(|&&v| v).count();
    if k_vis == 0 {
        return Err(Error::config("loss undefined: no visible keypoints".to_string()));
    }
    let mut mask = Vec::with_capacity(k * cells);
    for &v in visible {
        let row = if v { T::one() } else { T::zero() };
        mask.extend(std::iter::repeat(row).take(cells));
    }
    let gt_id = tape.leaf(gt.clone(), false);
    let mask_id = tape.leaf(Tensor::from_vec(vec![k, cells], mask)?, false);
    let diff = tape.sub(pred, gt_id)?;
    let sq = tape.mul(diff, diff)?;
    let masked = tape.mul(sq, mask_id)?;
    let total = tape.sum_all(masked)?;
    tape.scale(total, lit::<T>(1.0 / (k_vis * cells) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodedKeypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Per row: argmax cell (row-major first on ties), an optional quarter-cell
/// shift toward the higher axis-neighbor, then cell -> crop pixels. Score is
/// the maximum response.
pub fn decode<T: Scalar>(
    heatmap: &Tensor<T>,
    geom: HeadGeometry,
    quarter_shift: bool,
) -> Result<Vec<DecodedKeypoint>> {
    let (gh, gw) = geom.grid;
    let (k, cells) = match heatmap.shape() {
        [k, cells] if *cells == gh * gw => (*k, *cells),
        s => {
            return Err(Error::shape(format!(
                "heatmap shape {s:?} does not match grid {:?}",
                geom.grid
            )))
        }
    };
    let mut out = Vec::with_capacity(k);
    for row in heatmap.data().chunks(cells) {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        let (r, c) = (best / gw, best % gw);
        let (mut rr, mut cc) = (r as f64, c as f64);
        if quarter_shift {
            if c > 0 && c + 1 < gw {
                let (left, right) = (row[best - 1], row[best + 1]);
                cc += 0.25
                    * lit::<f64>(if right > left {
                        1.0
                    } else if left > right {
                        -1.0
                    } else {
                        0.0
                    });
            }
            if r > 0 && r + 1 < gh {
                let (up, down) = (row[best - gw], row[best + gw]);
                rr += 0.25
                    * lit::<f64>(if down > up {
                        1.0
                    } else if up > down {
                        -1.0
                    } else {
                        0.0
                    });
            }
        }
        let (x, y) = geom.cell_to_crop(rr, cc);
        out.push(DecodedKeypoint { x, y, score: row[best].to_f64().unwrap() });
    }
    Ok(out)
}

/// Maps crop-pixel points back to image coordinates through the inverse of
/// the crop transform.
pub fn to_image_coords(points: &[(f64, f64)], crop: &Affine) -> Result<Vec<(f64, f64)>> {
    let inv = crop.inverse()?;
    Ok(points.iter().map(|&p| inv.apply(p)).collect())
}

#[derive(Serialize)]
struct Sidecar<'a> {
    shape: [usize; 3],
    order: &'a str,
    dtype: &'a str,
}

/// Writes `<base>.raw` (H x W x K, channels-last, little-endian f32) and a
/// `<base>.json` sidecar describing the layout.
pub fn export_heatmap<T: Scalar>(
    heatmap: &Tensor<T>,
    geom: HeadGeometry,
    base: &Path,
) -> Result<()> {
    let (gh, gw) = geom.grid;
    let k = match heatmap.shape() {
        [k, cells] if *cells == gh * gw => *k,
        s => {
            return Err(Error::shape(format!(
                "heatmap shape {s:?} does not match grid {:?}",
                geom.grid
            )))
        }
    };
    let mut raw = std::fs::File::create(base.with_extension("raw"))?;
    let data = heatmap.data();
    for r in 0..gh {
        for c in 0..gw {
            for ch in 0..k {
                let v = data[ch * gh * gw + r * gw + c].to_f64().unwrap() as f32;
                raw.write_all(&v.to_le_bytes())?;
            }
        }
    }
    let sidecar = Sidecar { shape: [gh, gw, k], order: "HWC row-major", dtype: "f32le" };
    std::fs::write(base.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}
