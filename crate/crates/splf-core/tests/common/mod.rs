//! Shared 64-bit reference implementations for the oracle suites.
//!
//! Everything here is coded naively and independently of the library's
//! kernels: quadruple-loop transforms and convolutions, textbook metric
//! formulas, a scalar optimizer trace. Slow is fine; inputs stay small.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

pub fn uniform_f32(r: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn max_abs_diff_f32(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((*x as f64 - y).abs()))
}

// ---------------------------------------------------------------------------
// discrete Fourier transform, direct O(p^4) double sum
// ---------------------------------------------------------------------------

/// Forward unnormalized 2d DFT of a real p*p plane by the definition:
/// X[u,v] = sum_{r,c} x[r,c] * exp(-2*pi*i*(u*r + v*c)/p).
pub fn dft2(x: &[f64], p: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; p * p];
    let mut im = vec![0.0; p * p];
    for u in 0..p {
        for v in 0..p {
            let mut sr = 0.0;
            let mut si = 0.0;
            for r in 0..p {
                for c in 0..p {
                    let ang = -std::f64::consts::TAU * ((u * r + v * c) as f64) / p as f64;
                    sr += x[r * p + c] * ang.cos();
                    si += x[r * p + c] * ang.sin();
                }
            }
            re[u * p + v] = sr;
            im[u * p + v] = si;
        }
    }
    (re, im)
}

/// Inverse 2d DFT (real part) with the 1/p^2 factor, again by definition.
pub fn idft2_real(re: &[f64], im: &[f64], p: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * p];
    for r in 0..p {
        for c in 0..p {
            let mut acc = 0.0;
            for u in 0..p {
                for v in 0..p {
                    let ang = std::f64::consts::TAU * ((u * r + v * c) as f64) / p as f64;
                    acc += re[u * p + v] * ang.cos() - im[u * p + v] * ang.sin();
                }
            }
            out[r * p + c] = acc / (p * p) as f64;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// convolution and matrix products, straightforward loops
// ---------------------------------------------------------------------------

/// Grouped 2d convolution, quadruple loop over every output element.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_ref(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
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
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let mut y = vec![0.0; n * cout * oh * ow];
    for ni in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[co]);
                    for cig in 0..cin_g {
                        let ci = g * cin_g + cig;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((ni * cin + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((co * cin_g + cig) * kh + ky) * kw + kx;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    y[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    y
}

/// Plain [m,k] x [k,n] product.
pub fn matmul_ref(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i * k + t] * b[t * n + j];
            }
            y[i * n + j] = acc;
        }
    }
    y
}

/// Bilinear resample with align_corners=false pixel-center sampling.
pub fn bilinear_ref(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut y = vec![0.0; planes * oh * ow];
    let coord = |o: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(src - 1), s - i0 as f64)
    };
    for p in 0..planes {
        for oy in 0..oh {
            let (y0, y1, ty) = coord(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1, tx) = coord(ox, w, ow);
                let a = x[p * h * w + y0 * w + x0];
                let b = x[p * h * w + y0 * w + x1];
                let c = x[p * h * w + y1 * w + x0];
                let d = x[p * h * w + y1 * w + x1];
                y[p * oh * ow + oy * ow + ox] =
                    a * (1.0 - ty) * (1.0 - tx) + b * (1.0 - ty) * tx + c * ty * (1.0 - tx) + d * ty * tx;
            }
        }
    }
    y
}

/// Per-patch frequency filtering of [c, h, w] planes: each p*p tile is
/// transformed, multiplied bin-wise by the channel's complex kernel, and
/// inverse transformed.
pub fn spectral_filter_ref(x: &[f64], kre: &[f64], kim: &[f64], c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for ty in 0..h / p {
            for tx in 0..w / p {
                let mut tile = vec![0.0f64; p * p];
                for py in 0..p {
                    for px in 0..p {
                        tile[py * p + px] = x[(ci * h + ty * p + py) * w + tx * p + px];
                    }
                }
                let (fre, fim) = dft2(&tile, p);
                let mut mre = vec![0.0f64; p * p];
                let mut mim = vec![0.0f64; p * p];
                for i in 0..p * p {
                    let (kr, ki) = (kre[ci * p * p + i], kim[ci * p * p + i]);
                    mre[i] = fre[i] * kr - fim[i] * ki;
                    mim[i] = fre[i] * ki + fim[i] * kr;
                }
                let back = idft2_real(&mre, &mim, p);
                for py in 0..p {
                    for px in 0..p {
                        out[(ci * h + ty * p + py) * w + tx * p + px] = back[py * p + px];
                    }
                }
            }
        }
    }
    out
}

pub fn gelu_ref(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn sigmoid_ref(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Looks a parameter up by the tail of its name and returns it as f64.
pub fn param_by_suffix(params: &[splf_core::Param], suffix: &str) -> Vec<f64> {
    let hits: Vec<_> = params.iter().filter(|p| p.name().ends_with(suffix)).collect();
    assert_eq!(hits.len(), 1, "parameter suffix {suffix} matched {} names", hits.len());
    hits[0].value().iter().map(|&v| v as f64).collect()
}

/// The multi-scale fusion block in naive form: 1x1 channel adapter, four
/// depthwise convolutions at k = 1,3,5,7, 1x1 fuse, residual shortcut.
pub struct MfbRefParams {
    pub pre_w: Vec<f64>,
    pub pre_b: Vec<f64>,
    pub dw: Vec<(usize, Vec<f64>, Vec<f64>)>,
    pub fuse_w: Vec<f64>,
    pub fuse_b: Vec<f64>,
}

impl MfbRefParams {
    pub fn from_params(params: &[splf_core::Param], prefix: &str) -> Self {
        MfbRefParams {
            pre_w: param_by_suffix(params, &format!("{prefix}.pre.weight")),
            pre_b: param_by_suffix(params, &format!("{prefix}.pre.bias")),
            dw: [1usize, 3, 5, 7]
                .iter()
                .map(|&k| {
                    (
                        k,
                        param_by_suffix(params, &format!("{prefix}.dw.{k}.weight")),
                        param_by_suffix(params, &format!("{prefix}.dw.{k}.bias")),
                    )
                })
                .collect(),
            fuse_w: param_by_suffix(params, &format!("{prefix}.fuse.weight")),
            fuse_b: param_by_suffix(params, &format!("{prefix}.fuse.bias")),
        }
    }
}

pub fn mfb_ref(x: &[f64], p: &MfbRefParams, n: usize, cin: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let pre = conv2d_ref(x, &p.pre_w, Some(&p.pre_b), n, cin, h, w, c, 1, 1, 1, 0, 1);
    let mut cat = Vec::with_capacity(4 * pre.len());
    let mut branches = Vec::new();
    for (k, wt, b) in &p.dw {
        branches.push(conv2d_ref(&pre, wt, Some(b), n, c, h, w, c, *k, *k, 1, *k / 2, c));
    }
    // concat along channels per image
    for ni in 0..n {
        for br in &branches {
            cat.extend_from_slice(&br[ni * c * h * w..(ni + 1) * c * h * w]);
        }
    }
    let fused = conv2d_ref(&cat, &p.fuse_w, Some(&p.fuse_b), n, 4 * c, h, w, c, 1, 1, 1, 0, 1);
    let shortcut = if cin == c { x } else { &pre };
    fused.iter().zip(shortcut).map(|(a, b)| a + b).collect()
}

// ---------------------------------------------------------------------------
// losses and the optimizer, scalar references
// ---------------------------------------------------------------------------

/// Numerically stable binary cross-entropy with logits for one element:
/// max(z,0) - z*y + ln(1 + exp(-|z|)).
pub fn bce_ref(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// One AdamW step on a scalar, decoupled decay, matching the published
/// update rule exactly in 64-bit arithmetic.
pub struct AdamwRef {
    pub theta: f64,
    m: f64,
    v: f64,
    t: u64,
    lr: f64,
    wd: f64,
}

impl AdamwRef {
    pub fn new(theta: f64, lr: f64, wd: f64) -> Self {
        AdamwRef { theta, m: 0.0, v: 0.0, t: 0, lr, wd }
    }

    pub fn step(&mut self, grad: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        self.m = B1 * self.m + (1.0 - B1) * grad;
        self.v = B2 * self.v + (1.0 - B2) * grad * grad;
        let mh = self.m / (1.0 - B1.powi(self.t as i32));
        let vh = self.v / (1.0 - B2.powi(self.t as i32));
        self.theta -= self.lr * (mh / (vh.sqrt() + EPS) + self.wd * self.theta);
    }
}

// ---------------------------------------------------------------------------
// evaluation metrics, textbook formulas in 64-bit
// ---------------------------------------------------------------------------

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn mae_ref(pred: &[f64], gt: &[f64]) -> f64 {
    pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64
}

pub fn fbeta_ref(pred: &[f64], gt: &[f64]) -> f64 {
    let thr = (2.0 * mean(pred)).min(1.0);
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fng = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let bp = *p >= thr;
        let bg = *g > 0.5;
        if bp && bg {
            tp += 1.0;
        } else if bp {
            fp += 1.0;
        } else if bg {
            fng += 1.0;
        }
    }
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fng);
    1.3 * precision * recall / (0.3 * precision + recall)
}

fn ssim_block(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let mp = mean(pred);
    let mg = mean(gt);
    // single-sample blocks carry no variance information
    let (vp, vg, cov) = if n < 2.0 {
        (0.0, 0.0, 0.0)
    } else {
        (
            pred.iter().map(|p| (p - mp) * (p - mp)).sum::<f64>() / (n - 1.0),
            gt.iter().map(|g| (g - mg) * (g - mg)).sum::<f64>() / (n - 1.0),
            pred.iter().zip(gt).map(|(p, g)| (p - mp) * (g - mg)).sum::<f64>() / (n - 1.0),
        )
    };
    let alpha = 4.0 * mp * mg * cov;
    let beta = (mp * mp + mg * mg) * (vp + vg);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn round_half_even_ref(v: f64) -> f64 {
    let f = v.floor();
    let frac = v - f;
    if frac > 0.5 {
        f + 1.0
    } else if frac < 0.5 {
        f
    } else if (f as i64) % 2 == 0 {
        f
    } else {
        f + 1.0
    }
}

/// Structure measure with alpha = 0.5, region part splitting at the mask
/// centroid with banker's rounding, object part weighting foreground by the
/// mask mean.
pub fn smeasure_ref(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    let mu = mean(gt);
    if mu == 0.0 {
        return 1.0 - mean(pred);
    }
    if mu == 1.0 {
        return mean(pred);
    }

    // object part: complementary foreground/background similarity
    let score = |vals: &[f64]| -> f64 {
        if vals.is_empty() {
            return 0.0;
        }
        let m = mean(vals);
        let n = vals.len() as f64;
        let sd = if n < 2.0 {
            0.0
        } else {
            (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        2.0 * m / (m * m + 1.0 + sd + f64::EPSILON)
    };
    let fg: Vec<f64> = pred.iter().zip(gt).filter(|(_, g)| **g > 0.5).map(|(p, _)| *p).collect();
    let bg: Vec<f64> = pred.iter().zip(gt).filter(|(_, g)| **g <= 0.5).map(|(p, _)| 1.0 - *p).collect();
    let so = mu * score(&fg) + (1.0 - mu) * score(&bg);

    // region part: centroid of the mask, banker's rounding, four blocks
    let total: f64 = gt.iter().sum();
    let mut cy = 0.0;
    let mut cx = 0.0;
    for r in 0..h {
        for c in 0..w {
            cy += r as f64 * gt[r * w + c];
            cx += c as f64 * gt[r * w + c];
        }
    }
    let cy = (round_half_even_ref(cy / total + 0.5) as usize).clamp(1, h - 1);
    let cx = (round_half_even_ref(cx / total + 0.5) as usize).clamp(1, w - 1);

    let cut = |v: &[f64], r0: usize, r1: usize, c0: usize, c1: usize| -> Vec<f64> {
        let mut out = Vec::new();
        for r in r0..r1 {
            for c in c0..c1 {
                out.push(v[r * w + c]);
            }
        }
        out
    };
    let quads = [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)];
    let mut sr = 0.0;
    let mut wacc = 0.0;
    for (i, (r0, r1, c0, c1)) in quads.iter().enumerate() {
        let gq = cut(gt, *r0, *r1, *c0, *c1);
        let pq = cut(pred, *r0, *r1, *c0, *c1);
        let wt = if i == 3 {
            1.0 - wacc
        } else {
            let wt = gq.len() as f64 / (h * w) as f64;
            wacc += wt;
            wt
        };
        sr += wt * ssim_block(&pq, &gq);
    }

    (0.5 * so + 0.5 * sr).clamp(0.0, 1.0)
}

/// Enhanced-alignment measure on the adaptively binarized prediction,
/// averaged over all pixels.
pub fn emeasure_ref(pred: &[f64], gt: &[f64]) -> f64 {
    let thr = (2.0 * mean(pred)).min(1.0);
    let bin: Vec<f64> = pred.iter().map(|p| if *p >= thr { 1.0 } else { 0.0 }).collect();
    let mg = mean(gt);
    if mg == 0.0 {
        return mean(&bin.iter().map(|b| 1.0 - b).collect::<Vec<_>>());
    }
    if mg == 1.0 {
        return mean(&bin);
    }
    let mb = mean(&bin);
    let mut acc = 0.0;
    for (b, g) in bin.iter().zip(gt) {
        let pp = b - mb;
        let gg = g - mg;
        let align = 2.0 * pp * gg / (pp * pp + gg * gg + f64::EPSILON);
        let enhanced = (align + 1.0) * (align + 1.0) / 4.0;
        acc += enhanced;
    }
    acc / bin.len() as f64
}
