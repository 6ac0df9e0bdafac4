//! Image-space geometry: 2D affine transforms, bilinear warping, person-box
//! crops and letterbox resizing.
//!
//! Coordinate convention used across the crate: pixel (row r, col c) has its
//! center at continuous (x = c, y = r), so pixel i covers [i-0.5, i+0.5].
//! Boxes [x, y, w, h] are edge-based in that system: a box tightly containing
//! pixel columns c0..=c1 has x = c0 - 0.5 and w = c1 - c0 + 1.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How much a person box is grown on each axis before aspect fitting.
pub const BOX_EXPANSION: f64 = 1.25;

/// Row-major 2x3 affine: (x, y) -> (a x + b y + tx, c x + d y + ty).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Affine {
    pub fn identity() -> Self {
        Affine { a: 1.0, b: 0.0, c: 0.0, d: 1.0, tx: 0.0, ty: 0.0 }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Affine { a: 1.0, b: 0.0, c: 0.0, d: 1.0, tx, ty }
    }

    /// Uniform scale about an anchor point.
    pub fn scaling_about(s: f64, anchor: (f64, f64)) -> Self {
        Affine {
            a: s,
            b: 0.0,
            c: 0.0,
            d: s,
            tx: anchor.0 - s * anchor.0,
            ty: anchor.1 - s * anchor.1,
        }
    }

    /// Rotation by `radians` about an anchor point, y-down image sense.
    pub fn rotation_about(radians: f64, anchor: (f64, f64)) -> Self {
        let (sin, cos) = radians.sin_cos();
        let (ax, ay) = anchor;
        Affine {
            a: cos,
            b: -sin,
            c: sin,
            d: cos,
            tx: ax - cos * ax + sin * ay,
            ty: ay - sin * ax - cos * ay,
        }
    }

    /// Horizontal mirror: x -> (width - 1) - x.
    pub fn flip_x(width: usize) -> Self {
        Affine { a: -1.0, b: 0.0, c: 0.0, d: 1.0, tx: (width - 1) as f64, ty: 0.0 }
    }

    /// `self` applied after `first`.
    pub fn after(&self, first: &Affine) -> Affine {
        Affine {
            a: self.a * first.a + self.b * first.c,
            b: self.a * first.b + self.b * first.d,
            c: self.c * first.a + self.d * first.c,
            d: self.c * first.b + self.d * first.d,
            tx: self.a * first.tx + self.b * first.ty + self.tx,
            ty: self.c * first.tx + self.d * first.ty + self.ty,
        }
    }

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        (self.a * p.0 + self.b * p.1 + self.tx, self.c * p.0 + self.d * p.1 + self.ty)
    }

    pub fn inverse(&self) -> Result<Affine> {
        let det = self.a * self.d - self.b * self.c;
        if det.abs() < 1e-12 {
            return Err(Error::numeric(format!("singular transform, det = {det}")));
        }
        let (ia, ib, ic, id) = (self.d / det, -self.b / det, -self.c / det, self.a / det);
        Ok(Affine {
            a: ia,
            b: ib,
            c: ic,
            d: id,
            tx: -(ia * self.tx + ib * self.ty),
            ty: -(ic * self.tx + id * self.ty),
        })
    }
}

fn image_dims<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match image.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(Error::shape(format!("image must be [h,w,c], got {s:?}"))),
    }
}

/// Bilinear sample with zero padding outside the pixel grid.
fn sample_bilinear<T: Scalar>(
    data: &[T],
    h: usize,
    w: usize,
    c: usize,
    x: f64,
    y: f64,
    out: &mut [T],
) {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    out.fill(T::zero());
    for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
        let yy = y0 + dy;
        if yy < 0 || yy >= h as isize || wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
            let xx = x0 + dx;
            if xx < 0 || xx >= w as isize || wx == 0.0 {
                continue;
            }
            let weight = crate::tensor::lit::<T>(wy * wx);
            let base = ((yy as usize) * w + xx as usize) * c;
            for ch in 0..c {
                out[ch] = out[ch] + data[base + ch] * weight;
            }
        }
    }
}

/// Resamples `src` through `transform` (source coords -> output coords) onto
/// an `out_h` x `out_w` grid. Each output pixel pulls from the inverse-mapped
/// source location; out-of-bounds reads are zero.
pub fn warp<T: Scalar>(
    src: &Tensor<T>,
    transform: &Affine,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let (h, w, c) = image_dims(src)?;
    let inv = transform.inverse()?;
    let mut data = vec![T::zero(); out_h * out_w * c];
    let mut px = vec![T::zero(); c];
    for r in 0..out_h {
        for col in 0..out_w {
            let (sx, sy) = inv.apply((col as f64, r as f64));
            sample_bilinear(src.data(), h, w, c, sx, sy, &mut px);
            data[(r * out_w + col) * c..(r * out_w + col + 1) * c].copy_from_slice(&px);
        }
    }
    Tensor::from_vec(vec![out_h, out_w, c], data)
}

/// Expands a person box by [`BOX_EXPANSION`], grows the short side to the
/// target aspect about the center, and resamples. Returns the crop and the
/// image->crop transform.
pub fn crop_to_input<T: Scalar>(
    image: &Tensor<T>,
    bbox: [f64; 4],
    out_h: usize,
    out_w: usize,
) -> Result<(Tensor<T>, Affine)> {
    let transform = crop_transform(bbox, out_h, out_w)?;
    let crop = warp(image, &transform, out_h, out_w)?;
    Ok((crop, transform))
}

/// The image->crop transform of [`crop_to_input`], usable on keypoints alone.
pub fn crop_transform(bbox: [f64; 4], out_h: usize, out_w: usize) -> Result<Affine> {
    let [x, y, w, h] = bbox;
    if !(w > 0.0 && h > 0.0) || !bbox.iter().all(|v| v.is_finite()) {
        return Err(Error::config(format!("degenerate person box {bbox:?}")));
    }
    let cx = x + w / 2.0;
    let cy = y + h / 2.0;
    let mut bw = w * BOX_EXPANSION;
    let mut bh = h * BOX_EXPANSION;
    let target_aspect = out_w as f64 / out_h as f64;
    if bw / bh < target_aspect {
        bw = bh * target_aspect;
    } else {
        bh = bw / target_aspect;
    }
    let s = out_w as f64 / bw;
    debug_assert!((s - out_h as f64 / bh).abs() < 1e-9 * s.abs());
    Ok(Affine {
        a: s,
        b: 0.0,
        c: 0.0,
        d: s,
        tx: (out_w as f64 - 1.0) / 2.0 - s * cx,
        ty: (out_h as f64 - 1.0) / 2.0 - s * cy,
    })
}

/// Letterbox resize of a full scene: uniform scale to fit, centered, zero
/// padding on the short side. Returns the resized image and the
/// image->resized transform.
pub fn resize_full<T: Scalar>(
    image: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<(Tensor<T>, Affine)> {
    let (h, w, _) = image_dims(image)?;
    let s = (out_w as f64 / w as f64).min(out_h as f64 / h as f64);
    let transform = Affine {
        a: s,
        b: 0.0,
        c: 0.0,
        d: s,
        tx: (out_w as f64 - 1.0) / 2.0 - s * (w as f64 - 1.0) / 2.0,
        ty: (out_h as f64 - 1.0) / 2.0 - s * (h as f64 - 1.0) / 2.0,
    };
    let resized = warp(image, &transform, out_h, out_w)?;
    Ok((resized, transform))
}
