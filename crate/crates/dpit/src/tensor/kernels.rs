//! Raw loops shared by forward and backward rules. All buffers are row-major
//! slices; callers guarantee the dimension arguments match the slice lengths.

use super::Scalar;

/// c = a[m,k] * b[k,n]
pub fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &apv) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + apv * bv;
            }
        }
    }
    c
}

/// c = a[m,k] * b[n,k]^T -> [m,n]
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// c = a[k,m]^T * b[k,n] -> [m,n]
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

pub fn acc<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Output extent of one convolution axis; caller has checked the kernel fits.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// x: [h,w,cin], w: [kh,kw,cin,cout] -> [oh,ow,cout]. Zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d<T: Scalar>(
    x: &[T],
    wgt: &[T],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Vec<T> {
    let oh = conv_out_extent(h, kh, stride.0, pad.0);
    let ow = conv_out_extent(w, kw, stride.1, pad.1);
    let mut out = vec![T::zero(); oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let orow = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for ky in 0..kh {
                let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xpix = &x[((iy as usize) * w + ix as usize) * cin..][..cin];
                    let wbase = ((ky * kw + kx) * cin) * cout;
                    for (ci, &xv) in xpix.iter().enumerate() {
                        let wrow = &wgt[wbase + ci * cout..][..cout];
                        for (ov, &wv) in orow.iter_mut().zip(wrow) {
                            *ov = *ov + xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d`] w.r.t. input and weight.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    wgt: &[T],
    g: &[T],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: (usize, usize),
    pad: (usize, usize),
) -> (Vec<T>, Vec<T>) {
    let oh = conv_out_extent(h, kh, stride.0, pad.0);
    let ow = conv_out_extent(w, kw, stride.1, pad.1);
    let mut gx = vec![T::zero(); h * w * cin];
    let mut gw = vec![T::zero(); kh * kw * cin * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let grow = &g[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for ky in 0..kh {
                let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ibase = ((iy as usize) * w + ix as usize) * cin;
                    let wbase = ((ky * kw + kx) * cin) * cout;
                    for ci in 0..cin {
                        let xv = x[ibase + ci];
                        let wrow = &wgt[wbase + ci * cout..][..cout];
                        let gwrow = &mut gw[wbase + ci * cout..][..cout];
                        let mut gxv = T::zero();
                        for ((&gv, &wv), gwv) in grow.iter().zip(wrow).zip(gwrow.iter_mut()) {
                            gxv = gxv + gv * wv;
                            *gwv = *gwv + gv * xv;
                        }
                        gx[ibase + ci] = gx[ibase + ci] + gxv;
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Iterates slices of `shape` along `axis` as (start, stride) pairs through a
/// flat buffer. Used by softmax over an arbitrary axis.
pub fn axis_slices(shape: &[usize], axis: usize) -> Vec<(usize, usize)> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut slices = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            slices.push((o * axis_len * inner + i, inner));
        }
    }
    slices
}
