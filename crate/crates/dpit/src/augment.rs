//! Scene-level training augmentation: one affine draw (flip, scale and
//! rotation about the image center) applied identically to pixels and
//! keypoints, so a person crop taken afterwards sees a consistent sample.

use crate::data::geometry::{warp, Affine};
use crate::data::skeleton::Skeleton;
use crate::data::PoseInstance;
use crate::error::{Error, Result};
use crate::optim::TrainConfig;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub rotation_deg: f64,
    pub scale: f64,
    pub flip: bool,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        AugmentDraw { rotation_deg: 0.0, scale: 1.0, flip: false }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.scale == 1.0 && !self.flip
    }

    pub fn sample<R: Rng>(cfg: &TrainConfig, rng: &mut R) -> Self {
        if !cfg.augment {
            return AugmentDraw::identity();
        }
        let m = cfg.rotation_max_deg;
        let rotation_deg = if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let (lo, hi) = cfg.scale_range;
        let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let flip = cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob);
        AugmentDraw { rotation_deg, scale, flip }
    }

    /// The image->image map: flip, then scale, then rotate, the latter two
    /// anchored at the pixel-center midpoint so content stays centered.
    pub fn transform(&self, height: usize, width: usize) -> Affine {
        let center = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let mut t = if self.flip { Affine::flip_x(width) } else { Affine::identity() };
        t = Affine::scaling_about(self.scale, center).after(&t);
        t = Affine::rotation_about(self.rotation_deg.to_radians(), center).after(&t);
        t
    }
}

fn in_frame(x: f64, y: f64, width: usize, height: usize) -> bool {
    x >= -0.5 && x < width as f64 - 0.5 && y >= -0.5 && y < height as f64 - 0.5
}

/// Applies `draw` to a scene image and its annotations. Keypoints move under
/// the same affine as the pixels; a horizontal flip additionally swaps the
/// left/right channels via the skeleton's swap table. Keypoints pushed out of
/// frame become invisible (never the reverse). The identity draw returns the
/// sample unchanged.
pub fn augment_scene<T: Scalar>(
    image: &Tensor<T>,
    instances: &[PoseInstance],
    skel: &Skeleton,
    draw: &AugmentDraw,
) -> Result<(Tensor<T>, Vec<PoseInstance>)> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!("expected an [H, W, C] image, got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    for inst in instances {
        if inst.keypoints.len() != skel.k {
            return Err(Error::shape(format!(
                "instance has {} keypoints, skeleton {} expects {}",
                inst.keypoints.len(),
                skel.name,
                skel.k
            )));
        }
    }
    if draw.is_identity() {
        return Ok((image.clone(), instances.to_vec()));
    }

    let t = draw.transform(h, w);
    let warped = warp(image, &t, h, w)?;
    let out = instances
        .iter()
        .map(|inst| {
            let mut keypoints: Vec<(f64, f64, u8)> = inst
                .keypoints
                .iter()
                .map(|&(x, y, v)| {
                    let (nx, ny) = t.apply((x, y));
                    let nv = if v > 0 && in_frame(nx, ny, w, h) { v } else { 0 };
                    (nx, ny, nv)
                })
                .collect();
            if draw.flip {
                skel.swap_lr(&mut keypoints);
            }
            let bbox = transformed_bbox(inst.bbox, &t, w, h);
            PoseInstance { keypoints, area: bbox[2] * bbox[3], bbox }
        })
        .collect();
    Ok((warped, out))
}

/// Axis-aligned hull of the box's transformed corners, clipped to the frame.
/// A box that leaves the frame entirely keeps its unclipped hull; its
/// keypoints are all out of frame, so training skips the instance anyway.
fn transformed_bbox(bbox: [f64; 4], t: &Affine, width: usize, height: usize) -> [f64; 4] {
    let [x, y, w, h] = bbox;
    let corners = [(x, y), (x + w, y), (x, y + h), (x + w, y + h)].map(|p| t.apply(p));
    let min_x = corners.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_x = corners.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = corners.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_y = corners.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let cx0 = min_x.max(-0.5);
    let cy0 = min_y.max(-0.5);
    let cx1 = max_x.min(width as f64 - 0.5);
    let cy1 = max_y.min(height as f64 - 0.5);
    if cx1 > cx0 && cy1 > cy0 {
        [cx0, cy0, cx1 - cx0, cy1 - cy0]
    } else {
        [min_x, min_y, max_x - min_x, max_y - min_y]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blank(h: usize, w: usize) -> Tensor<f64> {
        Tensor::zeros(vec![h, w, 1])
    }

    fn one_person(keypoints: Vec<(f64, f64, u8)>) -> PoseInstance {
        let xs: Vec<f64> = keypoints.iter().filter(|k| k.2 > 0).map(|k| k.0).collect();
        let ys: Vec<f64> = keypoints.iter().filter(|k| k.2 > 0).map(|k| k.1).collect();
        let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let bbox = [min(&xs), min(&ys), max(&xs) - min(&xs) + 1.0, max(&ys) - min(&ys) + 1.0];
        PoseInstance { keypoints, bbox, area: bbox[2] * bbox[3] }
    }

    fn centered_figure(skel: &Skeleton, cx: f64, cy: f64) -> PoseInstance {
        // A small diamond repeated over all channels keeps every keypoint
        // well inside the frame under +-45 degree rotations.
        let offsets = [(0.0, -4.0), (4.0, 0.0), (0.0, 4.0), (-4.0, 0.0)];
        let kps = (0..skel.k)
            .map(|i| {
                let (dx, dy) = offsets[i % 4];
                (cx + dx, cy + dy, 2u8)
            })
            .collect();
        one_person(kps)
    }

    #[test]
    fn identity_draw_returns_the_sample_bitwise() {
        let skel = Skeleton::coco17();
        let mut image = blank(32, 48);
        image.data_mut()[5 * 48 + 7] = 0.6;
        let inst = centered_figure(&skel, 24.0, 16.0);
        let (out_img, out_inst) =
            augment_scene(&image, &[inst.clone()], &skel, &AugmentDraw::identity()).unwrap();
        assert_eq!(out_img, image);
        assert_eq!(out_inst[0].keypoints, inst.keypoints);
        assert_eq!(out_inst[0].bbox, inst.bbox);
    }

    #[test]
    fn flip_maps_x_and_swaps_left_right_channels() {
        let skel = Skeleton::coco17();
        let mut kps = vec![(96.0, 40.0, 2u8); 17];
        kps[5] = (60.0, 80.0, 2); // left shoulder
        kps[6] = (130.0, 80.0, 1); // right shoulder
        let inst = one_person(kps);
        let mut image = blank(96, 192);
        image.data_mut()[7 * 192 + 10] = 1.0;

        let draw = AugmentDraw { rotation_deg: 0.0, scale: 1.0, flip: true };
        let (warped, out) = augment_scene(&image, &[inst], &skel, &draw).unwrap();

        // x -> 191 - x, and the left-shoulder channel now holds the mapped
        // right shoulder: (191-130, 80) keeping its visibility 1.
        assert_eq!(out[0].keypoints[5], (61.0, 80.0, 1));
        assert_eq!(out[0].keypoints[6], (131.0, 80.0, 2));
        assert_eq!(warped.data()[7 * 192 + 181], 1.0);
        assert_eq!(warped.data()[7 * 192 + 10], 0.0);
    }

    #[test]
    fn rotation_round_trip_recovers_keypoints() {
        let skel = Skeleton::coco17();
        let inst = centered_figure(&skel, 24.0, 16.0);
        let image = blank(32, 48);
        let fwd = AugmentDraw { rotation_deg: 45.0, scale: 1.0, flip: false };
        let back = AugmentDraw { rotation_deg: -45.0, scale: 1.0, flip: false };
        let (img1, inst1) = augment_scene(&image, &[inst.clone()], &skel, &fwd).unwrap();
        let (_, inst2) = augment_scene(&img1, &inst1, &skel, &back).unwrap();
        for (got, want) in inst2[0].keypoints.iter().zip(&inst.keypoints) {
            assert!((got.0 - want.0).abs() < 1e-3, "{got:?} vs {want:?}");
            assert!((got.1 - want.1).abs() < 1e-3);
            assert_eq!(got.2, want.2);
        }
    }

    #[test]
    fn out_of_frame_keypoints_become_invisible() {
        let skel = Skeleton::coco17();
        let mut kps = vec![(24.0, 16.0, 2u8); 17];
        kps[0] = (45.0, 16.0, 2); // near the right edge of a 48-wide frame
        kps[1] = (10.0, 10.0, 0); // unlabeled stays unlabeled wherever it lands
        let inst = one_person(kps);
        let image = blank(32, 48);
        let draw = AugmentDraw { rotation_deg: 0.0, scale: 1.6, flip: false };
        let (_, out) = augment_scene(&image, &[inst], &skel, &draw).unwrap();
        // x' = 23.5 + 1.6*(45 - 23.5) = 57.9, outside [-0.5, 47.5)
        assert_eq!(out[0].keypoints[0].2, 0);
        assert!((out[0].keypoints[0].0 - 57.9).abs() < 1e-9);
        assert_eq!(out[0].keypoints[1].2, 0);
        assert_eq!(out[0].keypoints[2].2, 2);
    }

    #[test]
    fn shrunk_boxes_stay_axis_aligned_and_clipped() {
        let t = AugmentDraw { rotation_deg: 0.0, scale: 0.5, flip: false }.transform(32, 48);
        // Box centered anywhere halves its extent about (23.5, 15.5).
        let out = transformed_bbox([11.5, 7.5, 24.0, 16.0], &t, 48, 32);
        assert_eq!(out, [17.5, 11.5, 12.0, 8.0]);
        // A box crossing the frame edge is clipped to it.
        let grow = AugmentDraw { rotation_deg: 0.0, scale: 3.0, flip: false }.transform(32, 48);
        let clipped = transformed_bbox([11.5, 7.5, 24.0, 16.0], &grow, 48, 32);
        assert_eq!(clipped[0], -0.5);
        assert_eq!(clipped[2], 48.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn marker_pixel_tracks_its_keypoint(
            mr in 8usize..40, mc in 8usize..56,
            rot in -45.0f64..45.0, scale in 0.8f64..1.25, flip: bool,
        ) {
            let skel = Skeleton::coco17();
            let (h, w) = (48usize, 64usize);
            let mut image = blank(h, w);
            image.data_mut()[mr * w + mc] = 1.0;
            let inst = one_person(vec![(mc as f64, mr as f64, 2u8); 17]);

            let draw = AugmentDraw { rotation_deg: rot, scale, flip };
            let mapped = draw.transform(h, w).apply((mc as f64, mr as f64));
            prop_assume!(mapped.0 > 2.0 && mapped.0 < w as f64 - 3.0);
            prop_assume!(mapped.1 > 2.0 && mapped.1 < h as f64 - 3.0);

            let (warped, out) = augment_scene(&image, &[inst], &skel, &draw).unwrap();
            let kp = out[0].keypoints[0];
            prop_assert_eq!(kp.2, 2);

            let mut mass = 0.0;
            let (mut sx, mut sy) = (0.0, 0.0);
            for r in 0..h {
                for c in 0..w {
                    let i = warped.data()[r * w + c];
                    mass += i;
                    sx += i * c as f64;
                    sy += i * r as f64;
                }
            }
            prop_assume!(mass > 1e-6);
            let (gx, gy) = (sx / mass, sy / mass);
            let dist = ((gx - kp.0).powi(2) + (gy - kp.1).powi(2)).sqrt();
            prop_assert!(dist <= 1.0, "centroid ({gx:.2}, {gy:.2}) vs keypoint ({:.2}, {:.2})", kp.0, kp.1);
        }
    }
}
