//! Raw numeric loops shared by op forward passes and their adjoints.
//!
//! Everything here is plain safe Rust over contiguous slices, shaped so the
//! hot inner loops are dot products or scaled row additions that the
//! compiler can vectorize. All kernels are sequential and deterministic:
//! the same inputs always produce bit-identical outputs.

use crate::scalar::Scalar;

// ---------------------------------------------------------------------------
// matmul family
// ---------------------------------------------------------------------------

/// C[m,n] += A[m,k] * B[k,n]
pub fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T  (rows of both operands are contiguous)
///
/// The dot product runs on eight independent lanes so the loop vectorizes;
/// the summation tree is fixed, keeping results identical across runs.
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut lanes = [T::ZERO; 8];
            let mut ac = a_row.chunks_exact(8);
            let mut bc = b_row.chunks_exact(8);
            for (av, bv) in (&mut ac).zip(&mut bc) {
                for l in 0..8 {
                    lanes[l] = lanes[l] + av[l] * bv[l];
                }
            }
            let mut acc = ((lanes[0] + lanes[4]) + (lanes[2] + lanes[6]))
                + ((lanes[1] + lanes[5]) + (lanes[3] + lanes[7]));
            for (&av, &bv) in ac.remainder().iter().zip(bc.remainder()) {
                acc = acc + av * bv;
            }
            *cv += acc;
        }
    }
}

/// C[k,n] += A[m,k]^T * B[m,n]  (rank-1 updates; rows contiguous)
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for r in 0..m {
        let a_row = &a[r * k..(r + 1) * k];
        let b_row = &b[r * n..(r + 1) * n];
        for (i, &a_ri) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ri * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// True when a convolution plane is the identity gather, i.e. the column
/// matrix would equal the input plane itself.
fn conv_is_pointwise(kh: usize, kw: usize, stride: usize, pad: usize) -> bool {
    kh == 1 && kw == 1 && stride == 1 && pad == 0
}

/// Unfolds one [cin, h, w] image into a [cin*kh*kw, oh*ow] column matrix
/// whose row order matches the flattened weight layout, so a convolution
/// becomes one matrix product per image.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    col: &mut [T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let ohw = oh * ow;
    for ci in 0..cin {
        let xp = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row_idx = (ci * kh + ky) * kw + kx;
                let crow = &mut col[row_idx * ohw..(row_idx + 1) * ohw];
                for oy in 0..oh {
                    let iy = oy * stride + ky;
                    let dst = &mut crow[oy * ow..(oy + 1) * ow];
                    if iy < pad || iy >= h + pad {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let xrow = &xp[(iy - pad) * w..(iy - pad + 1) * w];
                    if stride == 1 {
                        let lo = pad.saturating_sub(kx);
                        let hi = (w + pad - kx).min(ow);
                        dst[..lo.min(ow)].fill(T::ZERO);
                        if lo < hi {
                            dst[lo..hi].copy_from_slice(&xrow[lo + kx - pad..hi + kx - pad]);
                        }
                        let tail = hi.max(lo).min(ow);
                        dst[tail..].fill(T::ZERO);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox * stride + kx;
                            *d = if ix < pad || ix >= w + pad { T::ZERO } else { xrow[ix - pad] };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds a column-matrix gradient back onto the
/// image, accumulating where output windows overlap.
#[allow(clippy::too_many_arguments)]
fn col2im_acc<T: Scalar>(
    col: &[T],
    dx: &mut [T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let ohw = oh * ow;
    for ci in 0..cin {
        let dxp = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row_idx = (ci * kh + ky) * kw + kx;
                let crow = &col[row_idx * ohw..(row_idx + 1) * ohw];
                for oy in 0..oh {
                    let iy = oy * stride + ky;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let dxrow = &mut dxp[(iy - pad) * w..(iy - pad + 1) * w];
                    let csrc = &crow[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        let lo = pad.saturating_sub(kx);
                        let hi = (w + pad - kx).min(ow);
                        if lo < hi {
                            for (d, &s) in dxrow[lo + kx - pad..hi + kx - pad].iter_mut().zip(&csrc[lo..hi]) {
                                *d += s;
                            }
                        }
                    } else {
                        for (ox, &s) in csrc.iter().enumerate() {
                            let ix = ox * stride + kx;
                            if ix >= pad && ix < w + pad {
                                dxrow[ix - pad] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2d convolution. `x` is [n, cin, h, w], `w` is [cout, cin/g, kh, kw],
/// `y` is [n, cout, oh, ow]. Stride-1 uses shifted-row additions; other
/// strides fall back to a direct loop.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    y: &mut [T],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    debug_assert_eq!(y.len(), n * cout * oh * ow);
    let cin_g = cin / groups;
    let cout_g = cout / groups;

    if let Some(b) = bias {
        for ni in 0..n {
            for co in 0..cout {
                let base = (ni * cout + co) * oh * ow;
                y[base..base + oh * ow].fill(b[co]);
            }
        }
    }

    if groups == 1 {
        // ungrouped convs run as one matrix product per image; the column
        // matrix is skipped entirely for pointwise convolutions
        let ohw = oh * ow;
        let kdim = cin * kh * kw;
        let pointwise = conv_is_pointwise(kh, kw, stride, pad);
        let mut col = if pointwise { Vec::new() } else { vec![T::ZERO; kdim * ohw] };
        for ni in 0..n {
            let x_img = &x[ni * cin * h * wd..(ni + 1) * cin * h * wd];
            let y_img = &mut y[ni * cout * ohw..(ni + 1) * cout * ohw];
            if pointwise {
                mm_nn(w, x_img, cout, cin, ohw, y_img);
            } else {
                im2col(x_img, &mut col, cin, h, wd, kh, kw, stride, pad, oh, ow);
                mm_nn(w, &col, cout, kdim, ohw, y_img);
            }
        }
        return;
    }

    for ni in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            let y_plane = &mut y[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
            for cig in 0..cin_g {
                let ci = g * cin_g + cig;
                let x_plane = &x[(ni * cin + ci) * h * wd..(ni * cin + ci + 1) * h * wd];
                let w_plane = &w[((co * cin_g) + cig) * kh * kw..((co * cin_g) + cig + 1) * kh * kw];
                if stride == 1 {
                    conv_plane_s1(x_plane, w_plane, y_plane, h, wd, kh, kw, pad);
                } else {
                    conv_plane_strided(x_plane, w_plane, y_plane, h, wd, kh, kw, stride, pad, oh, ow);
                }
            }
        }
    }
}

/// One (input plane, kernel plane) contribution at stride 1: for each kernel
/// tap, a scaled copy of a contiguous input row segment is added to the
/// output row.
fn conv_plane_s1<T: Scalar>(
    x: &[T],
    w: &[T],
    y: &mut [T],
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) {
    let oh = h + 2 * pad - kh + 1;
    let ow = wd + 2 * pad - kw + 1;
    for oy in 0..oh {
        let y_row = &mut y[oy * ow..(oy + 1) * ow];
        for ky in 0..kh {
            let iy = oy + ky;
            if iy < pad || iy >= h + pad {
                continue;
            }
            let x_row = &x[(iy - pad) * wd..(iy - pad + 1) * wd];
            for kx in 0..kw {
                let wv = w[ky * kw + kx];
                // ox + kx - pad must land in [0, wd)
                let lo = pad.saturating_sub(kx);
                let hi = (wd + pad - kx).min(ow);
                if lo >= hi {
                    continue;
                }
                let src = &x_row[lo + kx - pad..hi + kx - pad];
                for (yv, &xv) in y_row[lo..hi].iter_mut().zip(src) {
                    *yv += wv * xv;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_plane_strided<T: Scalar>(
    x: &[T],
    w: &[T],
    y: &mut [T],
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = T::ZERO;
            for ky in 0..kh {
                let iy = oy * stride + ky;
                if iy < pad || iy >= h + pad {
                    continue;
                }
                let x_row = &x[(iy - pad) * wd..(iy - pad + 1) * wd];
                for kx in 0..kw {
                    let ix = ox * stride + kx;
                    if ix < pad || ix >= wd + pad {
                        continue;
                    }
                    acc = acc + w[ky * kw + kx] * x_row[ix - pad];
                }
            }
            y[oy * ow + ox] += acc;
        }
    }
}

/// d_x for conv2d: the transpose of the forward map, written as a gather so
/// each input element is produced exactly once.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_input<T: Scalar>(
    dy: &[T],
    w: &[T],
    dx: &mut [T],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    let cin_g = cin / groups;
    let cout_g = cout / groups;

    if groups == 1 {
        let ohw = oh * ow;
        let kdim = cin * kh * kw;
        let pointwise = conv_is_pointwise(kh, kw, stride, pad);
        let mut col = if pointwise { Vec::new() } else { vec![T::ZERO; kdim * ohw] };
        for ni in 0..n {
            let dy_img = &dy[ni * cout * ohw..(ni + 1) * cout * ohw];
            let dx_img = &mut dx[ni * cin * h * wd..(ni + 1) * cin * h * wd];
            if pointwise {
                mm_tn(w, dy_img, cout, cin, ohw, dx_img);
            } else {
                col.fill(T::ZERO);
                mm_tn(w, dy_img, cout, kdim, ohw, &mut col);
                col2im_acc(&col, dx_img, cin, h, wd, kh, kw, stride, pad, oh, ow);
            }
        }
        return;
    }

    for ni in 0..n {
        for ci in 0..cin {
            let g = ci / cin_g;
            let cig = ci % cin_g;
            let dx_plane = &mut dx[(ni * cin + ci) * h * wd..(ni * cin + ci + 1) * h * wd];
            for cog in 0..cout_g {
                let co = g * cout_g + cog;
                let dy_plane = &dy[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
                let w_plane = &w[((co * cin_g) + cig) * kh * kw..((co * cin_g) + cig + 1) * kh * kw];
                if stride == 1 {
                    // dx[iy][ix] += dy[iy + pad - ky][ix + pad - kx] * w[ky][kx]
                    for iy in 0..h {
                        let dx_row = &mut dx_plane[iy * wd..(iy + 1) * wd];
                        for ky in 0..kh {
                            let oy = iy + pad;
                            if oy < ky || oy - ky >= oh {
                                continue;
                            }
                            let dy_row = &dy_plane[(oy - ky) * ow..(oy - ky + 1) * ow];
                            for kx in 0..kw {
                                let wv = w_plane[ky * kw + kx];
                                // ox = ix + pad - kx in [0, ow)
                                let lo = kx.saturating_sub(pad);
                                let hi = (ow + kx).min(wd + pad).saturating_sub(pad).min(wd);
                                if lo >= hi {
                                    continue;
                                }
                                let src = &dy_row[lo + pad - kx..hi + pad - kx];
                                for (dv, &gv) in dx_row[lo..hi].iter_mut().zip(src) {
                                    *dv += wv * gv;
                                }
                            }
                        }
                    }
                } else {
                    for iy in 0..h {
                        for ix in 0..wd {
                            let mut acc = T::ZERO;
                            for ky in 0..kh {
                                let t = iy + pad;
                                if t < ky || (t - ky) % stride != 0 {
                                    continue;
                                }
                                let oy = (t - ky) / stride;
                                if oy >= oh {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let s = ix + pad;
                                    if s < kx || (s - kx) % stride != 0 {
                                        continue;
                                    }
                                    let ox = (s - kx) / stride;
                                    if ox >= ow {
                                        continue;
                                    }
                                    acc = acc + dy_plane[oy * ow + ox] * w_plane[ky * kw + kx];
                                }
                            }
                            dx_plane[iy * wd + ix] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// d_w for conv2d: correlation of input with the output gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_weight<T: Scalar>(
    x: &[T],
    dy: &[T],
    dw: &mut [T],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    let cin_g = cin / groups;
    let cout_g = cout / groups;

    if groups == 1 {
        let ohw = oh * ow;
        let kdim = cin * kh * kw;
        let pointwise = conv_is_pointwise(kh, kw, stride, pad);
        let mut col = if pointwise { Vec::new() } else { vec![T::ZERO; kdim * ohw] };
        for ni in 0..n {
            let x_img = &x[ni * cin * h * wd..(ni + 1) * cin * h * wd];
            let dy_img = &dy[ni * cout * ohw..(ni + 1) * cout * ohw];
            if pointwise {
                mm_nt(dy_img, x_img, cout, ohw, cin, dw);
            } else {
                im2col(x_img, &mut col, cin, h, wd, kh, kw, stride, pad, oh, ow);
                mm_nt(dy_img, &col, cout, ohw, kdim, dw);
            }
        }
        return;
    }

    for co in 0..cout {
        let g = co / cout_g;
        for cig in 0..cin_g {
            let ci = g * cin_g + cig;
            let dw_plane = &mut dw[((co * cin_g) + cig) * kh * kw..((co * cin_g) + cig + 1) * kh * kw];
            for ni in 0..n {
                let x_plane = &x[(ni * cin + ci) * h * wd..(ni * cin + ci + 1) * h * wd];
                let dy_plane = &dy[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = T::ZERO;
                        for oy in 0..oh {
                            let iy = oy * stride + ky;
                            if iy < pad || iy >= h + pad {
                                continue;
                            }
                            let x_row = &x_plane[(iy - pad) * wd..(iy - pad + 1) * wd];
                            let dy_row = &dy_plane[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let lo = pad.saturating_sub(kx);
                                let hi = (wd + pad - kx).min(ow);
                                if lo >= hi {
                                    continue;
                                }
                                let xs = &x_row[lo + kx - pad..hi + kx - pad];
                                for (&gv, &xv) in dy_row[lo..hi].iter().zip(xs) {
                                    acc = acc + gv * xv;
                                }
                            } else {
                                for ox in 0..ow {
                                    let ix = ox * stride + kx;
                                    if ix < pad || ix >= wd + pad {
                                        continue;
                                    }
                                    acc = acc + dy_row[ox] * x_row[ix - pad];
                                }
                            }
                        }
                        dw_plane[ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
}

pub fn conv2d_bwd_bias<T: Scalar>(dy: &[T], db: &mut [T], n: usize, cout: usize, plane: usize) {
    for ni in 0..n {
        for co in 0..cout {
            let base = (ni * cout + co) * plane;
            let mut acc = T::ZERO;
            for &v in &dy[base..base + plane] {
                acc = acc + v;
            }
            db[co] += acc;
        }
    }
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

pub fn gelu<T: Scalar>(x: T) -> T {
    let c0 = T::from_f64(GELU_C0);
    let c1 = T::from_f64(GELU_C1);
    let half = T::from_f64(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (T::ONE + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c0 = T::from_f64(GELU_C0);
    let c1 = T::from_f64(GELU_C1);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c0 * (T::ONE + three * c1 * x * x)
}

/// Numerically stable logistic function; never overflows.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// softplus(x) = ln(1 + e^x), branchless in magnitude: max(x,0) + ln1p(e^-|x|)
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max_s(T::ZERO) + (-x.abs()).exp().ln_1p()
}

/// In-place row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(data: &mut [T], rows: usize, cols: usize) {
    debug_assert_eq!(data.len(), rows * cols);
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        let mut m = row[0];
        for &v in row.iter() {
            m = m.max_s(v);
        }
        let mut sum = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        let inv = T::ONE / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

// ---------------------------------------------------------------------------
// resampling and pooling
// ---------------------------------------------------------------------------

/// Source coordinate and lerp weight for one output index under
/// align_corners=false sampling.
fn resize_coord(o: usize, scale: f64, limit: usize) -> (usize, usize, f64) {
    let s = (o as f64 + 0.5) * scale - 0.5;
    let s = s.clamp(0.0, (limit - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(limit - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resize of [n, c, h, w] planes to (oh, ow), align_corners=false.
#[allow(clippy::too_many_arguments)]
pub fn bilinear_fwd<T: Scalar>(
    x: &[T],
    y: &mut [T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let yp = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, ty) = resize_coord(oy, sy, h);
            let ty = T::from_f64(ty);
            for ox in 0..ow {
                let (x0, x1, tx) = resize_coord(ox, sx, w);
                let tx = T::from_f64(tx);
                let a = xp[y0 * w + x0];
                let b = xp[y0 * w + x1];
                let c = xp[y1 * w + x0];
                let d = xp[y1 * w + x1];
                let top = a + tx * (b - a);
                let bot = c + tx * (d - c);
                yp[oy * ow + ox] = top + ty * (bot - top);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn bilinear_bwd<T: Scalar>(
    dy: &[T],
    dx: &mut [T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for p in 0..planes {
        let dyp = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dxp = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, ty) = resize_coord(oy, sy, h);
            let ty = T::from_f64(ty);
            for ox in 0..ow {
                let (x0, x1, tx) = resize_coord(ox, sx, w);
                let tx = T::from_f64(tx);
                let g = dyp[oy * ow + ox];
                let wy0 = T::ONE - ty;
                let wx0 = T::ONE - tx;
                dxp[y0 * w + x0] += g * wy0 * wx0;
                dxp[y0 * w + x1] += g * wy0 * tx;
                dxp[y1 * w + x0] += g * ty * wx0;
                dxp[y1 * w + x1] += g * ty * tx;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// layout permutations
// ---------------------------------------------------------------------------

/// [n, l, d] tokens -> [n, d, h, w] map with l = h*w.
pub fn tokens_to_map<T: Scalar>(t: &[T], m: &mut [T], n: usize, h: usize, w: usize, d: usize) {
    let l = h * w;
    for ni in 0..n {
        for li in 0..l {
            let src = &t[(ni * l + li) * d..(ni * l + li + 1) * d];
            for (di, &v) in src.iter().enumerate() {
                m[((ni * d + di) * l) + li] = v;
            }
        }
    }
}

/// [n, d, h, w] map -> [n, l, d] tokens with l = h*w.
pub fn map_to_tokens<T: Scalar>(m: &[T], t: &mut [T], n: usize, h: usize, w: usize, d: usize) {
    let l = h * w;
    for ni in 0..n {
        for di in 0..d {
            let src = &m[(ni * d + di) * l..(ni * d + di + 1) * l];
            for (li, &v) in src.iter().enumerate() {
                t[(ni * l + li) * d + di] = v;
            }
        }
    }
}

/// [n, c, h, w] -> [n*(h/p)*(w/p), c, p, p], patches in row-major grid order.
pub fn partition_patches<T: Scalar>(x: &[T], y: &mut [T], n: usize, c: usize, h: usize, w: usize, p: usize) {
    let gh = h / p;
    let gw = w / p;
    let mut out = 0usize;
    for ni in 0..n {
        for gy in 0..gh {
            for gx in 0..gw {
                for ci in 0..c {
                    let src_plane = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for py in 0..p {
                        let row = &src_plane[(gy * p + py) * w + gx * p..(gy * p + py) * w + gx * p + p];
                        y[out..out + p].copy_from_slice(row);
                        out += p;
                    }
                }
            }
        }
    }
}

/// Inverse of [`partition_patches`].
pub fn merge_patches<T: Scalar>(x: &[T], y: &mut [T], n: usize, c: usize, h: usize, w: usize, p: usize) {
    let gh = h / p;
    let gw = w / p;
    let mut inp = 0usize;
    for ni in 0..n {
        for gy in 0..gh {
            for gx in 0..gw {
                for ci in 0..c {
                    let dst_plane = &mut y[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for py in 0..p {
                        let row = &mut dst_plane
                            [(gy * p + py) * w + gx * p..(gy * p + py) * w + gx * p + p];
                        row.copy_from_slice(&x[inp..inp + p]);
                        inp += p;
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
    fn mm_variants_agree() {
        // A: 2x3, B: 3x2
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f32, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0f32; 4];
        mm_nn(&a, &b, 2, 3, 2, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // B^T stored row-major is 2x3: [[7,9,11],[8,10,12]]
        let bt = [7.0f32, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0f32; 4];
        mm_nt(&a, &bt, 2, 3, 2, &mut c2);
        assert_eq!(c, c2);

        // A^T stored row-major is 3x2 -> mm_tn(A_as_3x2 ...) recovers nn
        let at = [1.0f32, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2, transpose of a
        let mut c3 = [0.0f32; 4];
        mm_tn(&at, &b, 3, 2, 2, &mut c3);
        assert_eq!(c, c3);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f32), 0.5);
        assert_eq!(sigmoid(-1.0e4f32), 0.0);
        assert_eq!(sigmoid(1.0e4f32), 1.0);
        assert!(softplus(-1.0e4f32) == 0.0);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn patch_roundtrip_is_exact() {
        let n = 1;
        let (c, h, w, p) = (3, 8, 16, 4);
        let x: Vec<f32> = (0..n * c * h * w).map(|i| i as f32 * 0.5 - 7.0).collect();
        let mut patches = vec![0.0f32; x.len()];
        let mut back = vec![0.0f32; x.len()];
        partition_patches(&x, &mut patches, n, c, h, w, p);
        merge_patches(&patches, &mut back, n, c, h, w, p);
        assert_eq!(x, back);
    }

    #[test]
    fn token_map_roundtrip_is_exact() {
        let (n, h, w, d) = (2, 3, 4, 5);
        let t: Vec<f32> = (0..n * h * w * d).map(|i| i as f32).collect();
        let mut m = vec![0.0f32; t.len()];
        let mut back = vec![0.0f32; t.len()];
        tokens_to_map(&t, &mut m, n, h, w, d);
        map_to_tokens(&m, &mut back, n, h, w, d);
        assert_eq!(t, back);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let x = vec![3.25f32; 5 * 7];
        let mut y = vec![0.0f32; 13 * 3];
        bilinear_fwd(&x, &mut y, 1, 5, 7, 13, 3);
        assert!(y.iter().all(|&v| (v - 3.25).abs() < 1e-6));
    }
}
