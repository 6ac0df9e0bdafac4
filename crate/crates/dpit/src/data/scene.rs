//! Synthetic multi-person scenes: colored stick figures (solid torso, disc
//! head and joints) on a dark background with exact keypoint annotations. Later figures are drawn over earlier
//! ones, which is what produces occlusion labels. Visibility flags follow
//! the usual keypoint convention: 0 out of frame, 1 occluded, 2 clearly
//! visible.

use super::skeleton::Skeleton;
use super::{PoseInstance, RgbCanvas};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_persons: usize,
    pub max_persons: usize,
    /// Figure height as a fraction of image height.
    pub scale_range: (f64, f64),
    /// Probability that a figure is placed on top of the previous one.
    pub overlap_prob: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 96,
            height: 96,
            min_persons: 1,
            max_persons: 3,
            scale_range: (0.5, 0.9),
            overlap_prob: 0.5,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("scene dimensions must be positive".to_string()));
        }
        if self.min_persons == 0 || self.min_persons > self.max_persons {
            return Err(Error::config(format!(
                "bad person count range {}..{}",
                self.min_persons, self.max_persons
            )));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::config(format!("bad scale range {:?}", self.scale_range)));
        }
        if !(0.0..=1.0).contains(&self.overlap_prob) {
            return Err(Error::config(format!("bad overlap probability {}", self.overlap_prob)));
        }
        Ok(())
    }
}

pub struct GeneratedScene {
    pub image: RgbCanvas,
    pub instances: Vec<PoseInstance>,
}

pub const BACKGROUND: [u8; 3] = [18, 18, 22];

/// Canonical 17-joint figure, pelvis origin, y up, left side at +x. The head
/// disc is centered on the nose.
const CANONICAL: [(f64, f64); 17] = [
    (0.000, 0.540),   // nose
    (0.035, 0.575),   // left_eye
    (-0.035, 0.575),  // right_eye
    (0.080, 0.540),   // left_ear
    (-0.080, 0.540),  // right_ear
    (0.150, 0.400),   // left_shoulder
    (-0.150, 0.400),  // right_shoulder
    (0.230, 0.220),   // left_elbow
    (-0.230, 0.220),  // right_elbow
    (0.250, 0.040),   // left_wrist
    (-0.250, 0.040),  // right_wrist
    (0.100, 0.000),   // left_hip
    (-0.100, 0.000),  // right_hip
    (0.110, -0.260),  // left_knee
    (-0.110, -0.260), // right_knee
    (0.120, -0.520),  // left_ankle
    (-0.120, -0.520), // right_ankle
];
const HEAD_RADIUS: f64 = 0.105;
const FIGURE_SPAN: f64 = 0.540 + HEAD_RADIUS + 0.520; // head top to ankles

pub fn joint_color(person: usize) -> [u8; 3] {
    [255, ((80 + 47 * person) % 256) as u8, ((40 + 83 * person) % 256) as u8]
}

pub fn limb_color(person: usize) -> [u8; 3] {
    [((50 + 61 * person) % 200) as u8, 220, ((90 + 37 * person) % 200) as u8]
}

/// Tracks the tight pixel bounds of one figure while it is drawn.
struct Bounds {
    min_r: usize,
    max_r: usize,
    min_c: usize,
    max_c: usize,
    any: bool,
}

impl Bounds {
    fn new() -> Self {
        Bounds { min_r: usize::MAX, max_r: 0, min_c: usize::MAX, max_c: 0, any: false }
    }

    fn cover(&mut self, r: usize, c: usize) {
        self.min_r = self.min_r.min(r);
        self.max_r = self.max_r.max(r);
        self.min_c = self.min_c.min(c);
        self.max_c = self.max_c.max(c);
        self.any = true;
    }

    fn bbox(&self) -> Option<[f64; 4]> {
        self.any.then(|| {
            [
                self.min_c as f64 - 0.5,
                self.min_r as f64 - 0.5,
                (self.max_c - self.min_c + 1) as f64,
                (self.max_r - self.min_r + 1) as f64,
            ]
        })
    }
}

fn draw_disc(
    canvas: &mut RgbCanvas,
    cx: f64,
    cy: f64,
    radius: f64,
    color: [u8; 3],
    b: &mut Bounds,
) {
    let r0 = ((cy - radius).floor().max(0.0)) as usize;
    let r1 = ((cy + radius).ceil().min(canvas.height as f64 - 1.0)).max(0.0) as usize;
    let c0 = ((cx - radius).floor().max(0.0)) as usize;
    let c1 = ((cx + radius).ceil().min(canvas.width as f64 - 1.0)).max(0.0) as usize;
    if cy + radius < 0.0 || cx + radius < 0.0 {
        return;
    }
    for r in r0..=r1.min(canvas.height.saturating_sub(1)) {
        for c in c0..=c1.min(canvas.width.saturating_sub(1)) {
            let dx = c as f64 - cx;
            let dy = r as f64 - cy;
            if dx * dx + dy * dy <= radius * radius {
                canvas.set(r, c, color);
                b.cover(r, c);
            }
        }
    }
}

fn draw_segment(
    canvas: &mut RgbCanvas,
    p1: (f64, f64),
    p2: (f64, f64),
    halfwidth: f64,
    color: [u8; 3],
    b: &mut Bounds,
) {
    let r0 = (p1.1.min(p2.1) - halfwidth).floor().max(0.0) as usize;
    let r1 =
        ((p1.1.max(p2.1) + halfwidth).ceil().min(canvas.height as f64 - 1.0)).max(0.0) as usize;
    let c0 = (p1.0.min(p2.0) - halfwidth).floor().max(0.0) as usize;
    let c1 = ((p1.0.max(p2.0) + halfwidth).ceil().min(canvas.width as f64 - 1.0)).max(0.0) as usize;
    if p1.1.max(p2.1) + halfwidth < 0.0 || p1.0.max(p2.0) + halfwidth < 0.0 {
        return;
    }
    let (vx, vy) = (p2.0 - p1.0, p2.1 - p1.1);
    let len2 = vx * vx + vy * vy;
    for r in r0..=r1.min(canvas.height.saturating_sub(1)) {
        for c in c0..=c1.min(canvas.width.saturating_sub(1)) {
            let (px, py) = (c as f64 - p1.0, r as f64 - p1.1);
            let t = if len2 > 0.0 { ((px * vx + py * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (dx, dy) = (px - t * vx, py - t * vy);
            if dx * dx + dy * dy <= halfwidth * halfwidth {
                canvas.set(r, c, color);
                b.cover(r, c);
            }
        }
    }
}

/// Renders one scene deterministically from `seed`. Figures are posed by
/// jittering the canonical joints, scaled into `scale_range`, and drawn in
/// order so that each later figure occludes everything beneath it.
pub fn generate_scene(spec: &SceneSpec, skel: &Skeleton, seed: u64) -> Result<GeneratedScene> {
    spec.validate()?;
    if skel.k != CANONICAL.len() {
        return Err(Error::config(format!(
            "scene generator poses {} joints, skeleton {} has {}",
            CANONICAL.len(),
            skel.name,
            skel.k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width, spec.height);
    let mut canvas = RgbCanvas::filled(w, h, BACKGROUND);

    let n_persons = rng.gen_range(spec.min_persons..=spec.max_persons);
    let mut figures: Vec<(Vec<(f64, f64)>, f64)> = Vec::with_capacity(n_persons); // joints px, scale px/unit

    for _ in 0..n_persons {
        let height_px = rng.gen_range(spec.scale_range.0..=spec.scale_range.1) * h as f64;
        let s = height_px / FIGURE_SPAN;
        let lean: f64 = rng.gen_range(-0.22..=0.22);
        let (sin, cos) = lean.sin_cos();
        // Pelvis placement that keeps the whole figure (head top, ankles,
        // swung arms, disc radii) inside the frame; midpoint fallback when
        // the figure barely fits.
        let span = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
            if lo <= hi {
                rng.gen_range(lo..=hi)
            } else {
                (lo + hi) / 2.0
            }
        };
        let (cx, cy) = match figures.last() {
            Some((prev, _)) if rng.gen_bool(spec.overlap_prob) => {
                // Aim this torso at an upper-body joint of the previous
                // figure so the new body lands squarely on top of it. The
                // loose clamp lets crowded figures poke out of frame.
                let target = prev[rng.gen_range(5..13)];
                let jitter = 0.04 * height_px;
                let (mx, my) = (-0.20 * sin, 0.20 * cos); // torso midpoint, rotated
                (
                    (target.0 - mx * s + rng.gen_range(-jitter..=jitter))
                        .clamp(0.15 * w as f64, 0.85 * w as f64),
                    (target.1 + my * s + rng.gen_range(-jitter..=jitter))
                        .clamp(0.35 * h as f64, 0.65 * h as f64),
                )
            }
            _ => (
                span(0.27 * height_px, (w - 1) as f64 - 0.27 * height_px, &mut rng),
                span(0.60 * height_px, (h - 1) as f64 - 0.52 * height_px, &mut rng),
            ),
        };
        let joints: Vec<(f64, f64)> = CANONICAL
            .iter()
            .enumerate()
            .map(|(j, &(x0, y0))| {
                // Arms wander more than the torso and head.
                let jitter = if (7..=10).contains(&j) { 0.05 } else { 0.022 };
                let x = x0 + rng.gen_range(-jitter..=jitter);
                let y = y0 + rng.gen_range(-jitter..=jitter);
                let (rx, ry) = (x * cos - y * sin, x * sin + y * cos);
                (cx + rx * s, cy - ry * s) // y-up canonical to y-down image
            })
            .collect();
        figures.push((joints, s));
    }

    // Draw pass: head disc, limbs, then joint discs, per person in order.
    let mut bounds: Vec<Bounds> = Vec::with_capacity(n_persons);
    for (p, (joints, s)) in figures.iter().enumerate() {
        let mut b = Bounds::new();
        let limb = limb_color(p);
        let joint = joint_color(p);
        let halfwidth = (0.022 * s).max(1.0);
        let joint_radius = (0.03 * s).max(2.0);
        draw_disc(&mut canvas, joints[0].0, joints[0].1, HEAD_RADIUS * s, limb, &mut b);
        // Solid torso: a thick bar from the shoulder midpoint to the hip
        // midpoint. This is what occludes joints of figures underneath.
        let neck = ((joints[5].0 + joints[6].0) / 2.0, (joints[5].1 + joints[6].1) / 2.0);
        let pelvis = ((joints[11].0 + joints[12].0) / 2.0, (joints[11].1 + joints[12].1) / 2.0);
        draw_segment(&mut canvas, neck, pelvis, 0.16 * s, limb, &mut b);
        for pair in &skel.limbs {
            draw_segment(&mut canvas, joints[pair[0]], joints[pair[1]], halfwidth, limb, &mut b);
        }
        for &(x, y) in joints {
            draw_disc(&mut canvas, x, y, joint_radius, joint, &mut b);
        }
        bounds.push(b);
    }

    // Visibility pass against the finished composite.
    let mut instances = Vec::with_capacity(n_persons);
    for (p, (joints, _)) in figures.iter().enumerate() {
        let color = joint_color(p);
        let keypoints: Vec<(f64, f64, u8)> = joints
            .iter()
            .map(|&(x, y)| {
                let in_frame = x >= -0.5 && x <= w as f64 - 0.5 && y >= -0.5 && y <= h as f64 - 0.5;
                if !in_frame {
                    return (x, y, 0);
                }
                let vis = if color_near(&canvas, x, y, 2.0, color) { 2 } else { 1 };
                (x, y, vis)
            })
            .collect();
        let bbox = bounds[p].bbox().ok_or_else(|| {
            Error::numeric(format!("figure {p} rendered no pixels (seed {seed})"))
        })?;
        instances.push(PoseInstance { keypoints, area: bbox[2] * bbox[3], bbox });
    }

    Ok(GeneratedScene { image: canvas, instances })
}

/// True if any pixel within Euclidean `radius` of (x, y) holds `color`.
fn color_near(canvas: &RgbCanvas, x: f64, y: f64, radius: f64, color: [u8; 3]) -> bool {
    let r0 = ((y - radius).floor().max(0.0)) as usize;
    let r1 = ((y + radius).ceil().min(canvas.height as f64 - 1.0)).max(0.0) as usize;
    let c0 = ((x - radius).floor().max(0.0)) as usize;
    let c1 = ((x + radius).ceil().min(canvas.width as f64 - 1.0)).max(0.0) as usize;
    for r in r0..=r1 {
        for c in c0..=c1 {
            let dx = c as f64 - x;
            let dy = r as f64 - y;
            if dx * dx + dy * dy <= radius * radius && canvas.get(r, c) == color {
                return true;
            }
        }
    }
    false
}
