//! Flat-slice numeric kernels behind the graph ops. All tensors are
//! C-contiguous f64; dims are passed explicitly. Single-threaded by design
//! (the determinism contract fixes the summation order).

use ndarray::{ArrayView2, ArrayViewMut2};

/// C = A·B + beta·C via ndarray's matrixmultiply-backed GEMM.
pub fn gemm(a: ArrayView2<f64>, b: ArrayView2<f64>, beta: f64, mut c: ArrayViewMut2<f64>) {
    ndarray::linalg::general_mat_mul(1.0, &a, &b, beta, &mut c);
}

/// Gather image patches into a column matrix.
///
/// `cols[(c*kh+ki)*kw+kj, i*ow + j] = src[c, i*stride - pad + ki, j*stride - pad + kj]`
/// with zeros where the source index falls outside `(h, w)`.
///
/// Standard convolution forward uses `pad = 0` on a pre-padded input; the
/// transposed-convolution backward pass uses the same gather with `pad > 0`.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    debug_assert_eq!(src.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let p = pad as isize;
    for ch in 0..c {
        let src_ch = &src[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let out_row = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for i in 0..oh {
                    let y = (i * stride) as isize - p + ki as isize;
                    let dst = &mut out_row[i * ow..(i + 1) * ow];
                    if y < 0 || y >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &src_ch[y as usize * w..(y as usize + 1) * w];
                    for (j, d) in dst.iter_mut().enumerate() {
                        let x = (j * stride) as isize - p + kj as isize;
                        *d = if x < 0 || x >= w as isize {
                            0.0
                        } else {
                            src_row[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back into an image: the adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im_add(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dst: &mut [f64],
) {
    debug_assert_eq!(dst.len(), c * h * w);
    let p = pad as isize;
    for ch in 0..c {
        let dst_ch = &mut dst[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let src_row = &cols[row * oh * ow..(row + 1) * oh * ow];
                for i in 0..oh {
                    let y = (i * stride) as isize - p + ki as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst_ch[y as usize * w..(y as usize + 1) * w];
                    for (j, s) in src_row[i * ow..(i + 1) * ow].iter().enumerate() {
                        let x = (j * stride) as isize - p + kj as isize;
                        if x >= 0 && x < w as isize {
                            dst_row[x as usize] += *s;
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 max pooling, stride 2. `h` and `w` must be even.
pub fn maxpool2_forward(src: &[f64], c: usize, h: usize, w: usize, dst: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let s = &src[ch * h * w..(ch + 1) * h * w];
        let d = &mut dst[ch * oh * ow..(ch + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let base = 2 * i * w + 2 * j;
                let m = s[base].max(s[base + 1]).max(s[base + w]).max(s[base + w + 1]);
                d[i * ow + j] = m;
            }
        }
    }
}

/// Route pooled gradients to the first-encountered argmax of each window.
pub fn maxpool2_backward(src: &[f64], grad_out: &[f64], c: usize, h: usize, w: usize, grad_in: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let s = &src[ch * h * w..(ch + 1) * h * w];
        let go = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        let gi = &mut grad_in[ch * h * w..(ch + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let base = 2 * i * w + 2 * j;
                let idx = [base, base + 1, base + w, base + w + 1];
                let mut best = idx[0];
                for &k in &idx[1..] {
                    if s[k] > s[best] {
                        best = k;
                    }
                }
                gi[best] += go[i * ow + j];
            }
        }
    }
}

/// Source coordinate and lerp weight for 2× bilinear upsampling
/// (half-pixel centers, clamped at the borders).
#[inline]
fn up2_src(i: usize, len: usize) -> (usize, usize, f64) {
    let u = (i as f64 + 0.5) / 2.0 - 0.5;
    let u0 = u.floor();
    let t = u - u0;
    let a = (u0 as isize).clamp(0, len as isize - 1) as usize;
    let b = (u0 as isize + 1).clamp(0, len as isize - 1) as usize;
    (a, b, t)
}

/// Bilinear 2× upsampling.
pub fn upsample2_forward(src: &[f64], c: usize, h: usize, w: usize, dst: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        let s = &src[ch * h * w..(ch + 1) * h * w];
        let d = &mut dst[ch * oh * ow..(ch + 1) * oh * ow];
        for i in 0..oh {
            let (y0, y1, ty) = up2_src(i, h);
            for j in 0..ow {
                let (x0, x1, tx) = up2_src(j, w);
                let v00 = s[y0 * w + x0];
                let v01 = s[y0 * w + x1];
                let v10 = s[y1 * w + x0];
                let v11 = s[y1 * w + x1];
                d[i * ow + j] = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01)
                    + ty * ((1.0 - tx) * v10 + tx * v11);
            }
        }
    }
}

/// Adjoint of [`upsample2_forward`].
pub fn upsample2_backward(grad_out: &[f64], c: usize, h: usize, w: usize, grad_in: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        let go = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        let gi = &mut grad_in[ch * h * w..(ch + 1) * h * w];
        for i in 0..oh {
            let (y0, y1, ty) = up2_src(i, h);
            for j in 0..ow {
                let (x0, x1, tx) = up2_src(j, w);
                let g = go[i * ow + j];
                gi[y0 * w + x0] += (1.0 - ty) * (1.0 - tx) * g;
                gi[y0 * w + x1] += (1.0 - ty) * tx * g;
                gi[y1 * w + x0] += ty * (1.0 - tx) * g;
                gi[y1 * w + x1] += ty * tx * g;
            }
        }
    }
}

/// Reflect an out-of-range coordinate back into `[0, len)` without repeating
/// the border sample (`-1 → 1`, `len → len-2`).
#[inline]
pub fn reflect_index(i: isize, len: usize) -> usize {
    let n = len as isize;
    debug_assert!(n > 1 || i == 0);
    let mut t = i;
    loop {
        if t < 0 {
            t = -t;
        } else if t >= n {
            t = 2 * n - 2 - t;
        } else {
            return t as usize;
        }
    }
}

/// Pad each spatial side by `pad`, either with zeros or by reflection.
pub fn pad2d_forward(src: &[f64], c: usize, h: usize, w: usize, pad: usize, reflect: bool, dst: &mut [f64]) {
    let (oh, ow) = (h + 2 * pad, w + 2 * pad);
    for ch in 0..c {
        let s = &src[ch * h * w..(ch + 1) * h * w];
        let d = &mut dst[ch * oh * ow..(ch + 1) * oh * ow];
        for i in 0..oh {
            let yy = i as isize - pad as isize;
            let in_y = yy >= 0 && yy < h as isize;
            for j in 0..ow {
                let xx = j as isize - pad as isize;
                let in_x = xx >= 0 && xx < w as isize;
                d[i * ow + j] = if in_y && in_x {
                    s[yy as usize * w + xx as usize]
                } else if reflect {
                    s[reflect_index(yy, h) * w + reflect_index(xx, w)]
                } else {
                    0.0
                };
            }
        }
    }
}

/// Adjoint of [`pad2d_forward`]: interior slice for zero padding, scatter-add
/// of the reflected border contributions otherwise.
pub fn pad2d_backward(grad_out: &[f64], c: usize, h: usize, w: usize, pad: usize, reflect: bool, grad_in: &mut [f64]) {
    let (oh, ow) = (h + 2 * pad, w + 2 * pad);
    for ch in 0..c {
        let go = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        let gi = &mut grad_in[ch * h * w..(ch + 1) * h * w];
        for i in 0..oh {
            let yy = i as isize - pad as isize;
            for j in 0..ow {
                let xx = j as isize - pad as isize;
                let in_range = yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize;
                if in_range {
                    gi[yy as usize * w + xx as usize] += go[i * ow + j];
                } else if reflect {
                    gi[reflect_index(yy, h) * w + reflect_index(xx, w)] += go[i * ow + j];
                }
            }
        }
    }
}
