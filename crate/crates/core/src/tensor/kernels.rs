//! Raw compute kernels shared by the autodiff graph and the value-level
//! transform code. All loops are sequential with a fixed iteration order, so
//! every caller inherits bitwise determinism.

use super::{TensorError, TensorResult};

/// Validated geometry for `conv2d` (cross-correlation, zero padding).
#[derive(Debug, Clone, Copy)]
pub struct Conv2dDims {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv2dDims {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        s: usize,
        p: usize,
    ) -> TensorResult<Self> {
        let (&[n, ci, h, w], &[co, wci, k, k2]) = (x_shape, w_shape) else {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("expected 4-d input and weight, got {x_shape:?} / {w_shape:?}"),
            });
        };
        if wci != ci || k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        if s == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "stride must be >= 1".into(),
            });
        }
        if h + 2 * p < k || w + 2 * p < k {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel {k} exceeds padded extent of {h}x{w} input with pad {p}"),
            });
        }
        Ok(Self {
            n,
            ci,
            h,
            w,
            co,
            k,
            s,
            p,
            oh: (h + 2 * p - k) / s + 1,
            ow: (w + 2 * p - k) / s + 1,
        })
    }
}

/// Validated geometry for `conv2d_transpose`. Input is `[N, Co, h, w]`, weight
/// `[Co, Ci, k, k]` (shared with the paired conv2d), output
/// `[N, Ci, (h-1)s - 2p + k, (w-1)s - 2p + k]`.
#[derive(Debug, Clone, Copy)]
pub struct ConvT2dDims {
    pub n: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
    pub ci: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub th: usize,
    pub tw: usize,
}

impl ConvT2dDims {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        s: usize,
        p: usize,
    ) -> TensorResult<Self> {
        let (&[n, co, h, w], &[wco, ci, k, k2]) = (x_shape, w_shape) else {
            return Err(TensorError::Invalid {
                op: "conv2d_transpose",
                msg: format!("expected 4-d input and weight, got {x_shape:?} / {w_shape:?}"),
            });
        };
        if wco != co || k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_transpose",
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        if s == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d_transpose",
                msg: "stride must be >= 1".into(),
            });
        }
        let th = ((h - 1) * s + k).checked_sub(2 * p);
        let tw = ((w - 1) * s + k).checked_sub(2 * p);
        match (th, tw) {
            (Some(th), Some(tw)) if th > 0 && tw > 0 => Ok(Self {
                n,
                co,
                h,
                w,
                ci,
                k,
                s,
                p,
                th,
                tw,
            }),
            _ => Err(TensorError::Invalid {
                op: "conv2d_transpose",
                msg: format!("non-positive output extent for {h}x{w} input, k={k} s={s} p={p}"),
            }),
        }
    }
}

/// Half-open range of indices `i` with `0 <= i*s + off < limit`, clipped to `count`.
#[inline]
fn stride_bounds(limit: usize, count: usize, s: usize, off: isize) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(s)
    };
    let last = limit as isize - 1 - off;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last as usize / s + 1).min(count);
    (lo, hi.max(lo))
}

pub fn conv2d_fwd(x: &[f32], w: &[f32], bias: Option<&[f32]>, d: Conv2dDims, y: &mut [f32]) {
    debug_assert_eq!(y.len(), d.n * d.co * d.oh * d.ow);
    if let Some(b) = bias {
        for n in 0..d.n {
            for co in 0..d.co {
                let base = (n * d.co + co) * d.oh * d.ow;
                y[base..base + d.oh * d.ow].fill(b[co]);
            }
        }
    } else {
        y.fill(0.0);
    }
    for n in 0..d.n {
        for co in 0..d.co {
            for ci in 0..d.ci {
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let wv = w[((co * d.ci + ci) * d.k + ky) * d.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let offx = kx as isize - d.p as isize;
                        let (lo, hi) = stride_bounds(d.w, d.ow, d.s, offx);
                        for oy in 0..d.oh {
                            let iy = (oy * d.s + ky) as isize - d.p as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let xrow = ((n * d.ci + ci) * d.h + iy as usize) * d.w;
                            let yrow = ((n * d.co + co) * d.oh + oy) * d.ow;
                            for ox in lo..hi {
                                let ix = (ox * d.s) as isize + offx;
                                y[yrow + ox] += wv * x[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the conv2d input: scatter of `gy` through the shared weights.
pub fn conv2d_bwd_input(gy: &[f32], w: &[f32], d: Conv2dDims, gx: &mut [f32]) {
    debug_assert_eq!(gx.len(), d.n * d.ci * d.h * d.w);
    for n in 0..d.n {
        for co in 0..d.co {
            for ci in 0..d.ci {
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let wv = w[((co * d.ci + ci) * d.k + ky) * d.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let offx = kx as isize - d.p as isize;
                        let (lo, hi) = stride_bounds(d.w, d.ow, d.s, offx);
                        for oy in 0..d.oh {
                            let iy = (oy * d.s + ky) as isize - d.p as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let xrow = ((n * d.ci + ci) * d.h + iy as usize) * d.w;
                            let yrow = ((n * d.co + co) * d.oh + oy) * d.ow;
                            for ox in lo..hi {
                                let ix = (ox * d.s) as isize + offx;
                                gx[xrow + ix as usize] += wv * gy[yrow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_bwd_weight(x: &[f32], gy: &[f32], d: Conv2dDims, gw: &mut [f32]) {
    debug_assert_eq!(gw.len(), d.co * d.ci * d.k * d.k);
    for n in 0..d.n {
        for co in 0..d.co {
            for ci in 0..d.ci {
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let offx = kx as isize - d.p as isize;
                        let (lo, hi) = stride_bounds(d.w, d.ow, d.s, offx);
                        let mut acc = 0.0f32;
                        for oy in 0..d.oh {
                            let iy = (oy * d.s + ky) as isize - d.p as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let xrow = ((n * d.ci + ci) * d.h + iy as usize) * d.w;
                            let yrow = ((n * d.co + co) * d.oh + oy) * d.ow;
                            for ox in lo..hi {
                                let ix = (ox * d.s) as isize + offx;
                                acc += gy[yrow + ox] * x[xrow + ix as usize];
                            }
                        }
                        gw[((co * d.ci + ci) * d.k + ky) * d.k + kx] += acc;
                    }
                }
            }
        }
    }
}

pub fn conv2d_bwd_bias(gy: &[f32], d: Conv2dDims, gb: &mut [f32]) {
    debug_assert_eq!(gb.len(), d.co);
    for n in 0..d.n {
        for co in 0..d.co {
            let base = (n * d.co + co) * d.oh * d.ow;
            let mut acc = 0.0f32;
            for v in &gy[base..base + d.oh * d.ow] {
                acc += v;
            }
            gb[co] += acc;
        }
    }
}

pub fn convt2d_fwd(x: &[f32], w: &[f32], bias: Option<&[f32]>, d: ConvT2dDims, y: &mut [f32]) {
    debug_assert_eq!(y.len(), d.n * d.ci * d.th * d.tw);
    if let Some(b) = bias {
        for n in 0..d.n {
            for ci in 0..d.ci {
                let base = (n * d.ci + ci) * d.th * d.tw;
                y[base..base + d.th * d.tw].fill(b[ci]);
            }
        }
    } else {
        y.fill(0.0);
    }
    for n in 0..d.n {
        for co in 0..d.co {
            for ci in 0..d.ci {
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let wv = w[((co * d.ci + ci) * d.k + ky) * d.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let offx = kx as isize - d.p as isize;
                        let (lo, hi) = stride_bounds(d.tw, d.w, d.s, offx);
                        for iy in 0..d.h {
                            let ty = (iy * d.s + ky) as isize - d.p as isize;
                            if ty < 0 || ty >= d.th as isize {
                                continue;
                            }
                            let xrow = ((n * d.co + co) * d.h + iy) * d.w;
                            let yrow = ((n * d.ci + ci) * d.th + ty as usize) * d.tw;
                            for ix in lo..hi {
                                let tx = (ix * d.s) as isize + offx;
                                y[yrow + tx as usize] += wv * x[xrow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the conv2d_transpose input: a strided gather (conv-like).
pub fn convt2d_bwd_input(gy: &[f32], w: &[f32], d: ConvT2dDims, gx: &mut [f32]) {
    debug_assert_eq!(gx.len(), d.n * d.co * d.h * d.w);
    for n in 0..d.n {
        for co in 0..d.co {
            for ci in 0..d.ci {
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let wv = w[((co * d.ci + ci) * d.k + ky) * d.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let offx = kx as isize - d.p as isize;
                        let (lo, hi) = stride_bounds(d.tw, d.w, d.s, offx);
                        for iy in 0..d.h {
                            let ty = (iy * d.s + ky) as isize - d.p as isize;
                            if ty < 0 || ty >= d.th as isize {
                                continue;
                            }
                            let xrow = ((n * d.co + co) * d.h + iy) * d.w;
                            let yrow = ((n * d.ci + ci) * d.th + ty as usize) * d.tw;
                            for ix in lo..hi {
                                let tx = (ix * d.s) as isize + offx;
                                gx[xrow + ix] += wv * gy[yrow + tx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn convt2d_bwd_weight(x: &[f32], gy: &[f32], d: ConvT2dDims, gw: &mut [f32]) {
    debug_assert_eq!(gw.len(), d.co * d.ci * d.k * d.k);
    for n in 0..d.n {
        for co in 0..d.co {
            for ci in 0..d.ci {
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let offx = kx as isize - d.p as isize;
                        let (lo, hi) = stride_bounds(d.tw, d.w, d.s, offx);
                        let mut acc = 0.0f32;
                        for iy in 0..d.h {
                            let ty = (iy * d.s + ky) as isize - d.p as isize;
                            if ty < 0 || ty >= d.th as isize {
                                continue;
                            }
                            let xrow = ((n * d.co + co) * d.h + iy) * d.w;
                            let yrow = ((n * d.ci + ci) * d.th + ty as usize) * d.tw;
                            for ix in lo..hi {
                                let tx = (ix * d.s) as isize + offx;
                                acc += x[xrow + ix] * gy[yrow + tx as usize];
                            }
                        }
                        gw[((co * d.ci + ci) * d.k + ky) * d.k + kx] += acc;
                    }
                }
            }
        }
    }
}

pub fn convt2d_bwd_bias(gy: &[f32], d: ConvT2dDims, gb: &mut [f32]) {
    debug_assert_eq!(gb.len(), d.ci);
    for n in 0..d.n {
        for ci in 0..d.ci {
            let base = (n * d.ci + ci) * d.th * d.tw;
            let mut acc = 0.0f32;
            for v in &gy[base..base + d.th * d.tw] {
                acc += v;
            }
            gb[ci] += acc;
        }
    }
}

// ── bilinear resize (align-corners) ─────────────────────────────────────────

/// Per-axis sample positions: (low index, high index, fraction).
fn axis_table(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    (0..dst)
        .map(|o| {
            let pos = if dst > 1 && src > 1 {
                o as f64 * (src as f64 - 1.0) / (dst as f64 - 1.0)
            } else {
                0.0
            };
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (pos - i0 as f64) as f32)
        })
        .collect()
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    // a + t*(b-a) rather than (1-t)*a + t*b: keeps constants bitwise intact.
    a + t * (b - a)
}

/// `[C, H, W] -> [C, H2, W2]`, align-corners sampling. Exact identity when the
/// dims match, exact on constant images for any dims.
pub fn bilinear_resize(src: &[f32], c: usize, h: usize, w: usize, h2: usize, w2: usize) -> Vec<f32> {
    let ys = axis_table(h, h2);
    let xs = axis_table(w, w2);
    let mut out = vec![0.0f32; c * h2 * w2];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let oplane = &mut out[ch * h2 * w2..(ch + 1) * h2 * w2];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let r0 = &plane[y0 * w..y0 * w + w];
            let r1 = &plane[y1 * w..y1 * w + w];
            let orow = &mut oplane[oy * w2..oy * w2 + w2];
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = lerp(r0[x0], r0[x1], fx);
                let bot = lerp(r1[x0], r1[x1], fx);
                orow[ox] = lerp(top, bot, fy);
            }
        }
    }
    out
}

/// Adjoint scatter for [`bilinear_resize`]: accumulates into `gx` (`[C, H, W]`).
pub fn bilinear_resize_backward(
    gy: &[f32],
    c: usize,
    h2: usize,
    w2: usize,
    h: usize,
    w: usize,
    gx: &mut [f32],
) {
    let ys = axis_table(h, h2);
    let xs = axis_table(w, w2);
    for ch in 0..c {
        let gplane = &gy[ch * h2 * w2..(ch + 1) * h2 * w2];
        let xplane = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = gplane[oy * w2 + ox];
                if g == 0.0 {
                    continue;
                }
                xplane[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                xplane[y0 * w + x1] += g * (1.0 - fy) * fx;
                xplane[y1 * w + x0] += g * fy * (1.0 - fx);
                xplane[y1 * w + x1] += g * fy * fx;
            }
        }
    }
}

// ── dihedral group ───────────────────────────────────────────────────────────

/// Inverse element for each of the 8 dihedral indices (rotations pair 1<->3,
/// every reflection is an involution).
pub const DIHEDRAL_INVERSE: [u8; 8] = [0, 3, 2, 1, 4, 5, 6, 7];

/// Output dims after dihedral element `d` on an `h x w` plane.
pub fn dihedral_dims(d: u8, h: usize, w: usize) -> (usize, usize) {
    match d {
        1 | 3 | 6 | 7 => (w, h),
        _ => (h, w),
    }
}

/// Applies dihedral element `d` to `[C, H, W]` data. Elements: 0 identity,
/// 1/2/3 clockwise rotations by 90/180/270, 4 horizontal flip, 5 vertical
/// flip, 6 anti-transpose, 7 transpose.
pub fn dihedral_apply(src: &[f32], c: usize, h: usize, w: usize, d: u8) -> Vec<f32> {
    let (h2, w2) = dihedral_dims(d, h, w);
    let mut out = vec![0.0f32; c * h2 * w2];
    for ch in 0..c {
        let s = &src[ch * h * w..(ch + 1) * h * w];
        let o = &mut out[ch * h2 * w2..(ch + 1) * h2 * w2];
        for r in 0..h2 {
            for q in 0..w2 {
                let (ir, ic) = match d {
                    0 => (r, q),
                    1 => (h - 1 - q, r),
                    2 => (h - 1 - r, w - 1 - q),
                    3 => (q, w - 1 - r),
                    4 => (r, w - 1 - q),
                    5 => (h - 1 - r, q),
                    6 => (h - 1 - q, w - 1 - r),
                    7 => (q, r),
                    _ => unreachable!("dihedral index must be < 8"),
                };
                o[r * w2 + q] = s[ir * w + ic];
            }
        }
    }
    out
}
