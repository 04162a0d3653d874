//! Raw numeric kernels behind the autodiff ops and the geometry primitives.
//!
//! All kernels work on flat CHW buffers. Parallel loops only ever write
//! disjoint output regions, so results are deterministic for a fixed input
//! regardless of thread count.

use rayon::prelude::*;

use crate::tensor::{lit, Scalar};

/// Output spatial size of a padded strided convolution.
#[inline]
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Direct 2-D convolution. `x` is `(cin, h, w)`, `w` is `(cout, cin, kh, kw)`,
/// `b` is `cout` biases. Zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    wt: &[T],
    cout: usize,
    kh: usize,
    kw: usize,
    b: &[T],
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut out = vec![T::zero(); cout * ho * wo];
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(co, plane)| {
        plane.fill(b[co]);
        for ci in 0..cin {
            let xplane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wt[((co * cin + ci) * kh + ky) * kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        // ox range keeping ix = ox*stride + kx - pad inside [0, w)
                        let kxp = kx as isize - pad as isize;
                        let ox_lo = if kxp < 0 {
                            ((-kxp) as usize).div_ceil(stride)
                        } else {
                            0
                        };
                        let ix_max = w as isize - 1 - kxp;
                        if ix_max < 0 {
                            continue;
                        }
                        let ox_hi = ((ix_max as usize) / stride + 1).min(wo);
                        if stride == 1 {
                            let off = kxp;
                            for ox in ox_lo..ox_hi {
                                let ix = (ox as isize + off) as usize;
                                orow[ox] = orow[ox] + wv * xrow[ix];
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = (ox * stride) as isize + kxp;
                                orow[ox] = orow[ox] + wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient of `conv2d_fwd` w.r.t. its input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_x<T: Scalar>(
    gout: &[T],
    cin: usize,
    h: usize,
    w: usize,
    wt: &[T],
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut dx = vec![T::zero(); cin * h * w];
    dx.par_chunks_mut(h * w).enumerate().for_each(|(ci, plane)| {
        for co in 0..cout {
            let gplane = &gout[co * ho * wo..(co + 1) * ho * wo];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wt[((co * cin + ci) * kh + ky) * kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let kxp = kx as isize - pad as isize;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                        let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let ox_lo = if kxp < 0 {
                            ((-kxp) as usize).div_ceil(stride)
                        } else {
                            0
                        };
                        let ix_max = w as isize - 1 - kxp;
                        if ix_max < 0 {
                            continue;
                        }
                        let ox_hi = ((ix_max as usize) / stride + 1).min(wo);
                        for ox in ox_lo..ox_hi {
                            let ix = ((ox * stride) as isize + kxp) as usize;
                            drow[ix] = drow[ix] + wv * grow[ox];
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Gradient of `conv2d_fwd` w.r.t. the weights.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_w<T: Scalar>(
    gout: &[T],
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut dw = vec![T::zero(); cout * cin * kh * kw];
    dw.par_chunks_mut(cin * kh * kw)
        .enumerate()
        .for_each(|(co, wslab)| {
            let gplane = &gout[co * ho * wo..(co + 1) * ho * wo];
            for ci in 0..cin {
                let xplane = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kxp = kx as isize - pad as isize;
                        let mut acc = T::zero();
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let grow = &gplane[oy * wo..(oy + 1) * wo];
                            let xrow = &xplane[iy as usize * w..(iy as usize + 1) * w];
                            let ox_lo = if kxp < 0 {
                                ((-kxp) as usize).div_ceil(stride)
                            } else {
                                0
                            };
                            let ix_max = w as isize - 1 - kxp;
                            if ix_max < 0 {
                                continue;
                            }
                            let ox_hi = ((ix_max as usize) / stride + 1).min(wo);
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * stride) as isize + kxp) as usize;
                                acc = acc + grow[ox] * xrow[ix];
                            }
                        }
                        wslab[(ci * kh + ky) * kw + kx] = acc;
                    }
                }
            }
        });
    dw
}

pub fn conv2d_bwd_b<T: Scalar>(gout: &[T], cout: usize, ho: usize, wo: usize) -> Vec<T> {
    (0..cout)
        .map(|co| gout[co * ho * wo..(co + 1) * ho * wo].iter().copied().sum())
        .collect()
}

/// Per-pixel sampling plan for a horizontal warp: left tap, right tap,
/// fractional weight, validity.
pub struct WarpPlan<T> {
    pub x0: Vec<u32>,
    pub x1: Vec<u32>,
    pub frac: Vec<T>,
    pub valid: Vec<T>,
}

/// Build the sampling plan for `out(y, x) = src(y, x - d(y, x))`. Samples with
/// any footprint outside `[0, w-1]` are invalid and read as zero.
pub fn warp_plan<T: Scalar>(disp: &[T], h: usize, w: usize) -> WarpPlan<T> {
    let n = h * w;
    let mut x0 = vec![0u32; n];
    let mut x1 = vec![0u32; n];
    let mut frac = vec![T::zero(); n];
    let mut valid = vec![T::zero(); n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let xs = lit::<T>(x as f64) - disp[i];
            if xs >= T::zero() && xs <= lit::<T>((w - 1) as f64) && xs.is_finite() {
                let fl = xs.floor();
                let a = fl.to_f64() as usize;
                let bx = (a + 1).min(w - 1);
                x0[i] = a as u32;
                x1[i] = bx as u32;
                frac[i] = xs - fl;
                valid[i] = T::one();
            }
        }
    }
    WarpPlan { x0, x1, frac, valid }
}

/// Apply a warp plan to every channel of `src`.
pub fn warp_apply<T: Scalar>(src: &[T], c: usize, h: usize, w: usize, plan: &WarpPlan<T>) -> Vec<T> {
    let n = h * w;
    let mut out = vec![T::zero(); c * n];
    out.par_chunks_mut(n).enumerate().for_each(|(ci, plane)| {
        let splane = &src[ci * n..(ci + 1) * n];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if plan.valid[i] > T::zero() {
                    let v0 = splane[y * w + plan.x0[i] as usize];
                    let v1 = splane[y * w + plan.x1[i] as usize];
                    let t = plan.frac[i];
                    plane[i] = (T::one() - t) * v0 + t * v1;
                }
            }
        }
    });
    out
}

/// Backward of the horizontal warp. Returns `(d_src, d_disp)`.
pub fn warp_bwd<T: Scalar>(
    gout: &[T],
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    plan: &WarpPlan<T>,
) -> (Vec<T>, Vec<T>) {
    let n = h * w;
    let mut dsrc = vec![T::zero(); c * n];
    dsrc.par_chunks_mut(n).enumerate().for_each(|(ci, plane)| {
        let gplane = &gout[ci * n..(ci + 1) * n];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if plan.valid[i] > T::zero() {
                    let g = gplane[i];
                    let t = plan.frac[i];
                    let i0 = y * w + plan.x0[i] as usize;
                    let i1 = y * w + plan.x1[i] as usize;
                    plane[i0] = plane[i0] + (T::one() - t) * g;
                    plane[i1] = plane[i1] + t * g;
                }
            }
        }
    });
    let mut ddisp = vec![T::zero(); n];
    for ci in 0..c {
        let splane = &src[ci * n..(ci + 1) * n];
        let gplane = &gout[ci * n..(ci + 1) * n];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if plan.valid[i] > T::zero() {
                    let v0 = splane[y * w + plan.x0[i] as usize];
                    let v1 = splane[y * w + plan.x1[i] as usize];
                    // d out / d disp = -(v1 - v0)
                    ddisp[i] = ddisp[i] + gplane[i] * (v0 - v1);
                }
            }
        }
    }
    (dsrc, ddisp)
}

/// 1-D interpolation taps for align-corners bilinear resizing.
fn resize_taps<T: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    (0..dst)
        .map(|o| {
            if dst == 1 || src == 1 {
                (0, 0, T::zero())
            } else {
                let pos = o as f64 * (src - 1) as f64 / (dst - 1) as f64;
                let fl = pos.floor();
                let i0 = fl as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, lit::<T>(pos - fl))
            }
        })
        .collect()
}

/// Align-corners bilinear resize of a `(c, h, w)` field to `(c, oh, ow)`.
pub fn resize_bilinear_fwd<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ys = resize_taps::<T>(h, oh);
    let xs = resize_taps::<T>(w, ow);
    let mut out = vec![T::zero(); c * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(ci, plane)| {
        let xp = &x[ci * h * w..(ci + 1) * h * w];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            let r0 = &xp[y0 * w..y0 * w + w];
            let r1 = &xp[y1 * w..y1 * w + w];
            let orow = &mut plane[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let top = (T::one() - tx) * r0[x0] + tx * r0[x1];
                let bot = (T::one() - tx) * r1[x0] + tx * r1[x1];
                orow[ox] = (T::one() - ty) * top + ty * bot;
            }
        }
    });
    out
}

/// Backward of the bilinear resize (transpose scatter).
pub fn resize_bilinear_bwd<T: Scalar>(
    gout: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ys = resize_taps::<T>(h, oh);
    let xs = resize_taps::<T>(w, ow);
    let mut dx = vec![T::zero(); c * h * w];
    dx.par_chunks_mut(h * w).enumerate().for_each(|(ci, plane)| {
        let gp = &gout[ci * oh * ow..(ci + 1) * oh * ow];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            let grow = &gp[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let g = grow[ox];
                let g0 = (T::one() - ty) * g;
                let g1 = ty * g;
                plane[y0 * w + x0] = plane[y0 * w + x0] + (T::one() - tx) * g0;
                plane[y0 * w + x1] = plane[y0 * w + x1] + tx * g0;
                plane[y1 * w + x0] = plane[y1 * w + x0] + (T::one() - tx) * g1;
                plane[y1 * w + x1] = plane[y1 * w + x1] + tx * g1;
            }
        }
    });
    dx
}

/// Local horizontal cross-correlation: `out(r + radius, y, x) =
/// mean_c a(c,y,x) * b(c,y,x+r)` for `r` in `[-radius, radius]`; out-of-bounds
/// sample positions contribute zero.
pub fn corr1d_fwd<T: Scalar>(
    a: &[T],
    b: &[T],
    c: usize,
    h: usize,
    w: usize,
    radius: usize,
) -> Vec<T> {
    let jn = 2 * radius + 1;
    let inv_c = T::one() / lit::<T>(c as f64);
    let mut out = vec![T::zero(); jn * h * w];
    out.par_chunks_mut(h * w).enumerate().for_each(|(j, plane)| {
        let delta = j as isize - radius as isize;
        let lo = (-delta).max(0) as usize;
        let hi = ((w as isize - delta).min(w as isize)).max(0) as usize;
        for ci in 0..c {
            let ap = &a[ci * h * w..(ci + 1) * h * w];
            let bp = &b[ci * h * w..(ci + 1) * h * w];
            for y in 0..h {
                let arow = &ap[y * w..(y + 1) * w];
                let brow = &bp[y * w..(y + 1) * w];
                let orow = &mut plane[y * w..(y + 1) * w];
                for x in lo..hi {
                    let bx = (x as isize + delta) as usize;
                    orow[x] = orow[x] + arow[x] * brow[bx];
                }
            }
        }
        for v in plane.iter_mut() {
            *v = *v * inv_c;
        }
    });
    out
}

/// Backward of `corr1d_fwd`; returns `(d_a, d_b)`.
pub fn corr1d_bwd<T: Scalar>(
    gout: &[T],
    a: &[T],
    b: &[T],
    c: usize,
    h: usize,
    w: usize,
    radius: usize,
) -> (Vec<T>, Vec<T>) {
    let jn = 2 * radius + 1;
    let inv_c = T::one() / lit::<T>(c as f64);
    let mut da = vec![T::zero(); c * h * w];
    let mut db = vec![T::zero(); c * h * w];
    da.par_chunks_mut(h * w)
        .zip(db.par_chunks_mut(h * w))
        .enumerate()
        .for_each(|(ci, (dap, dbp))| {
            let ap = &a[ci * h * w..(ci + 1) * h * w];
            let bp = &b[ci * h * w..(ci + 1) * h * w];
            for j in 0..jn {
                let delta = j as isize - radius as isize;
                let gp = &gout[j * h * w..(j + 1) * h * w];
                let lo = (-delta).max(0) as usize;
                let hi = ((w as isize - delta).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let grow = &gp[y * w..(y + 1) * w];
                    for x in lo..hi {
                        let bx = (x as isize + delta) as usize;
                        let g = grow[x] * inv_c;
                        dap[y * w + x] = dap[y * w + x] + g * bp[y * w + bx];
                        dbp[y * w + bx] = dbp[y * w + bx] + g * ap[y * w + x];
                    }
                }
            }
        });
    (da, db)
}

/// Stereo cost volume: `out(k, y, x) = mean_c a(c,y,x) * b(c,y,x-k)` for
/// hypothesis shifts `k = 0..k_n`; positions with `x - k < 0` stay zero.
pub fn cost_volume_fwd<T: Scalar>(
    a: &[T],
    b: &[T],
    c: usize,
    h: usize,
    w: usize,
    k_n: usize,
) -> Vec<T> {
    let inv_c = T::one() / lit::<T>(c as f64);
    let mut out = vec![T::zero(); k_n * h * w];
    out.par_chunks_mut(h * w).enumerate().for_each(|(k, plane)| {
        for ci in 0..c {
            let ap = &a[ci * h * w..(ci + 1) * h * w];
            let bp = &b[ci * h * w..(ci + 1) * h * w];
            for y in 0..h {
                let arow = &ap[y * w..(y + 1) * w];
                let brow = &bp[y * w..(y + 1) * w];
                let orow = &mut plane[y * w..(y + 1) * w];
                for x in k..w {
                    orow[x] = orow[x] + arow[x] * brow[x - k];
                }
            }
        }
        for v in plane.iter_mut() {
            *v = *v * inv_c;
        }
    });
    out
}

/// Backward of `cost_volume_fwd`; returns `(d_a, d_b)`.
pub fn cost_volume_bwd<T: Scalar>(
    gout: &[T],
    a: &[T],
    b: &[T],
    c: usize,
    h: usize,
    w: usize,
    k_n: usize,
) -> (Vec<T>, Vec<T>) {
    let inv_c = T::one() / lit::<T>(c as f64);
    let mut da = vec![T::zero(); c * h * w];
    let mut db = vec![T::zero(); c * h * w];
    da.par_chunks_mut(h * w)
        .zip(db.par_chunks_mut(h * w))
        .enumerate()
        .for_each(|(ci, (dap, dbp))| {
            let ap = &a[ci * h * w..(ci + 1) * h * w];
            let bp = &b[ci * h * w..(ci + 1) * h * w];
            for k in 0..k_n {
                let gp = &gout[k * h * w..(k + 1) * h * w];
                for y in 0..h {
                    let grow = &gp[y * w..(y + 1) * w];
                    for x in k..w {
                        let g = grow[x] * inv_c;
                        dap[y * w + x] = dap[y * w + x] + g * bp[y * w + x - k];
                        dbp[y * w + x - k] = dbp[y * w + x - k] + g * ap[y * w + x];
                    }
                }
            }
        });
    (da, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with weight 1 reproduces the input.
        let x: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let out = conv2d_fwd(&x, 1, 3, 4, &[1.0], 1, 1, 1, &[0.0], 1, 0);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_matches_naive_reference() {
        // Compare against a plain quadruple loop on a random-ish input.
        let cin = 2;
        let (h, w) = (5, 6);
        let cout = 3;
        let (kh, kw) = (3, 3);
        let x: Vec<f64> = (0..cin * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let wt: Vec<f64> = (0..cout * cin * kh * kw)
            .map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.75)
            .collect();
        let b = vec![0.5, -1.0, 0.0];
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let ho = conv_out_dim(h, kh, stride, pad);
            let wo = conv_out_dim(w, kw, stride, pad);
            let fast = conv2d_fwd(&x, cin, h, w, &wt, cout, kh, kw, &b, stride, pad);
            let mut slow = vec![0.0f64; cout * ho * wo];
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += x[(ci * h + iy as usize) * w + ix as usize]
                                            * wt[((co * cin + ci) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        slow[(co * ho + oy) * wo + ox] = acc;
                    }
                }
            }
            for (f, s) in fast.iter().zip(slow.iter()) {
                assert!((f - s).abs() < 1e-12, "stride {stride} pad {pad}: {f} vs {s}");
            }
        }
    }

    #[test]
    fn warp_integer_shift() {
        let src = [10.0f32, 20.0, 30.0, 40.0];
        let disp = [1.0f32; 4];
        let plan = warp_plan(&disp, 1, 4);
        let out = warp_apply(&src, 1, 1, 4, &plan);
        assert_eq!(out, vec![0.0, 10.0, 20.0, 30.0]);
        assert_eq!(plan.valid, vec![0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn resize_row_align_corners() {
        let out = resize_bilinear_fwd(&[0.0f32, 2.0], 1, 1, 2, 1, 3);
        assert_eq!(out, vec![0.0, 1.0, 2.0]);
    }
}
