//! 3D convolution kernels over channels-last feature maps.
//!
//! Two flavours cover everything the backbone needs:
//!
//! * [`tiled_conv_forward`] — dense convolution whose stride equals its
//!   kernel size per axis (non-overlapping tiling). The patchify stem is a
//!   `3x3x3 / stride 3` tiling; stage-transition downsampling is `2x2x2 /
//!   stride 2`, with the kernel clamped to the axis extent so degenerate
//!   1-voxel axes pass through.
//! * [`depthwise_conv_forward`] — per-channel `3x3x3`, stride 1, padding 1.

use super::FeatMap;

/// Output extent of a tiling axis: `floor(dim / k)`.
#[inline]
fn tiled_out(dim: usize, k: usize) -> usize {
    dim / k
}

/// Effective kernel for one axis: the nominal size clamped to the extent.
#[inline]
pub(crate) fn clamp_kernel(dim: usize, k: usize) -> usize {
    k.min(dim).max(1)
}

/// Non-overlapping (stride == kernel) dense convolution.
///
/// `w` is laid out `[c_in][kz*ky*kx][c_out]` so the innermost loop runs over
/// the contiguous `c_out` slice. `k` is the nominal per-axis kernel size;
/// axes shorter than `k` are clamped (kernel taps beyond the clamp are
/// simply never read).
pub fn tiled_conv_forward(x: &FeatMap, k: [usize; 3], c_out: usize, w: &[f64], b: &[f64]) -> FeatMap {
    let (kz, ky, kx) = (clamp_kernel(x.d, k[0]), clamp_kernel(x.h, k[1]), clamp_kernel(x.w, k[2]));
    let (od, oh, ow) = (tiled_out(x.d, kz), tiled_out(x.h, ky), tiled_out(x.w, kx));
    let c_in = x.channels;
    let n_taps = k[0] * k[1] * k[2];
    debug_assert_eq!(w.len(), c_in * n_taps * c_out);
    let mut out = FeatMap::zeros(od, oh, ow, c_out);
    for oz in 0..od {
        for oy in 0..oh {
            for ox in 0..ow {
                let oi = out.pos_index(oz, oy, ox);
                let yr = &mut out.data[oi..oi + c_out];
                yr.copy_from_slice(b);
                for dz in 0..kz {
                    for dy in 0..ky {
                        for dx in 0..kx {
                            let tap = (dz * k[1] + dy) * k[2] + dx;
                            let ii = x.pos_index(oz * kz + dz, oy * ky + dy, ox * kx + dx);
                            let xr = &x.data[ii..ii + c_in];
                            for (ci, &xv) in xr.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                let wrow = &w[(ci * n_taps + tap) * c_out..][..c_out];
                                for (yo, &wv) in yr.iter_mut().zip(wrow) {
                                    *yo += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`tiled_conv_forward`]. Accumulates into `dw`/`db`,
/// overwrites `dx` (which must be zeroed or fresh).
#[allow(clippy::too_many_arguments)]
pub fn tiled_conv_backward(
    x: &FeatMap,
    k: [usize; 3],
    c_out: usize,
    w: &[f64],
    dy: &FeatMap,
    dx: &mut FeatMap,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let (kz, ky, kx) = (clamp_kernel(x.d, k[0]), clamp_kernel(x.h, k[1]), clamp_kernel(x.w, k[2]));
    let c_in = x.channels;
    let n_taps = k[0] * k[1] * k[2];
    for oz in 0..dy.d {
        for oy in 0..dy.h {
            for ox in 0..dy.w {
                let oi = dy.pos_index(oz, oy, ox);
                let dyr = &dy.data[oi..oi + c_out];
                for (dbv, &g) in db.iter_mut().zip(dyr) {
                    *dbv += g;
                }
                for dz in 0..kz {
                    for dyk in 0..ky {
                        for dxk in 0..kx {
                            let tap = (dz * k[1] + dyk) * k[2] + dxk;
                            let ii = x.pos_index(oz * kz + dz, oy * ky + dyk, ox * kx + dxk);
                            let xr = &x.data[ii..ii + c_in];
                            let dxr = &mut dx.data[ii..ii + c_in];
                            for ci in 0..c_in {
                                let wrow = &w[(ci * n_taps + tap) * c_out..][..c_out];
                                let mut acc = 0.0;
                                for (g, wv) in dyr.iter().zip(wrow) {
                                    acc += g * wv;
                                }
                                dxr[ci] += acc;
                                let xv = xr[ci];
                                if xv != 0.0 {
                                    let dwrow = &mut dw[(ci * n_taps + tap) * c_out..][..c_out];
                                    for (dwv, &g) in dwrow.iter_mut().zip(dyr) {
                                        *dwv += xv * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

const DW_K: usize = 3;
const DW_PAD: isize = 1;

/// Depthwise `3x3x3` convolution, stride 1, zero padding 1; shape preserving.
///
/// `w` is laid out `[27][c]` (tap-major) so each tap contributes an
/// elementwise multiply-add over the contiguous channel vector.
pub fn depthwise_conv_forward(x: &FeatMap, w: &[f64], b: &[f64]) -> FeatMap {
    let c = x.channels;
    debug_assert_eq!(w.len(), DW_K * DW_K * DW_K * c);
    let mut out = FeatMap::zeros(x.d, x.h, x.w, c);
    for z in 0..x.d {
        for y in 0..x.h {
            for xx in 0..x.w {
                let oi = out.pos_index(z, y, xx);
                let yr = &mut out.data[oi..oi + c];
                yr.copy_from_slice(b);
                for dz in 0..DW_K {
                    let iz = z as isize + dz as isize - DW_PAD;
                    if iz < 0 || iz >= x.d as isize {
                        continue;
                    }
                    for dy in 0..DW_K {
                        let iy = y as isize + dy as isize - DW_PAD;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for dx in 0..DW_K {
                            let ix = xx as isize + dx as isize - DW_PAD;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let tap = (dz * DW_K + dy) * DW_K + dx;
                            let ii = x.pos_index(iz as usize, iy as usize, ix as usize);
                            let xr = &x.data[ii..ii + c];
                            let wrow = &w[tap * c..(tap + 1) * c];
                            for i in 0..c {
                                yr[i] += xr[i] * wrow[i];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`depthwise_conv_forward`]. Accumulates into `dw`/`db`,
/// overwrites `dx` (which must be zeroed or fresh).
pub fn depthwise_conv_backward(
    x: &FeatMap,
    w: &[f64],
    dy: &FeatMap,
    dx: &mut FeatMap,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let c = x.channels;
    for z in 0..x.d {
        for y in 0..x.h {
            for xx in 0..x.w {
                let oi = dy.pos_index(z, y, xx);
                let dyr = &dy.data[oi..oi + c];
                for (dbv, &g) in db.iter_mut().zip(dyr) {
                    *dbv += g;
                }
                for dz in 0..DW_K {
                    let iz = z as isize + dz as isize - DW_PAD;
                    if iz < 0 || iz >= x.d as isize {
                        continue;
                    }
                    for dy_k in 0..DW_K {
                        let iy = y as isize + dy_k as isize - DW_PAD;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for dx_k in 0..DW_K {
                            let ix = xx as isize + dx_k as isize - DW_PAD;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let tap = (dz * DW_K + dy_k) * DW_K + dx_k;
                            let ii = x.pos_index(iz as usize, iy as usize, ix as usize);
                            let xr = &x.data[ii..ii + c];
                            let dxr = &mut dx.data[ii..ii + c];
                            let wrow = &w[tap * c..(tap + 1) * c];
                            let dwrow = &mut dw[tap * c..(tap + 1) * c];
                            for i in 0..c {
                                dxr[i] += dyr[i] * wrow[i];
                                dwrow[i] += dyr[i] * xr[i];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiled_conv_shapes() {
        let x = FeatMap::zeros(72, 72, 72, 1);
        let w = vec![0.0; 27 * 4];
        let b = vec![0.0; 4];
        let y = tiled_conv_forward(&x, [3, 3, 3], 4, &w, &b);
        assert_eq!((y.d, y.h, y.w, y.channels), (24, 24, 24, 4));
    }

    #[test]
    fn tiled_conv_clamps_degenerate_axes() {
        // 1-voxel axes survive a nominal 2x2x2 downsample untouched.
        let x = FeatMap::from_data(1, 1, 1, 2, vec![3.0, -1.0]);
        let mut w = vec![0.0; 2 * 8 * 2];
        // Only tap 0 is reachable after clamping; identity-ish map.
        w[0 * 8 * 2 + 0 * 2 + 0] = 1.0; // c_in 0 -> c_out 0
        w[1 * 8 * 2 + 0 * 2 + 1] = 2.0; // c_in 1 -> c_out 1
        let y = tiled_conv_forward(&x, [2, 2, 2], 2, &w, &vec![0.0; 2]);
        assert_eq!((y.d, y.h, y.w), (1, 1, 1));
        assert_eq!(y.data, vec![3.0, -2.0]);
    }

    #[test]
    fn depthwise_identity_kernel() {
        let mut x = FeatMap::zeros(3, 3, 3, 2);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = i as f64 * 0.5 - 3.0;
        }
        let mut w = vec![0.0; 27 * 2];
        let center = (1 * 3 + 1) * 3 + 1;
        w[center * 2] = 1.0;
        w[center * 2 + 1] = 1.0;
        let y = depthwise_conv_forward(&x, &w, &[0.0, 0.0]);
        assert_eq!(y.data, x.data);
    }
}
