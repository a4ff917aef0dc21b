//! Saliency evaluation metrics, all computed in f64: mean absolute error,
//! adaptively thresholded F-measure, structure measure, and enhanced
//! alignment measure. Predictions are probabilities in [0, 1]; ground
//! truth is a binary mask.

/// Small constant guarding exact-zero denominators. Machine epsilon keeps
/// the perfect-prediction scores within 1e-6 of 1 even on sparse masks,
/// where a larger guard would visibly bias the alignment term.
const EPS: f64 = f64::EPSILON;

pub fn mae(pred: &[f64], gt: &[f64]) -> f64 {
    assert_eq!(pred.len(), gt.len());
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum();
    sum / pred.len() as f64
}

/// Twice the mean prediction, capped at 1. Pixels at or above it count as
/// foreground.
pub fn adaptive_threshold(pred: &[f64]) -> f64 {
    let mean = pred.iter().sum::<f64>() / pred.len() as f64;
    (2.0 * mean).min(1.0)
}

/// F-measure with beta^2 = 0.3 at the adaptive threshold. Returns 0 when
/// either precision or recall is undefined or the overlap is empty.
pub fn f_beta(pred: &[f64], gt: &[f64]) -> f64 {
    assert_eq!(pred.len(), gt.len());
    let thr = adaptive_threshold(pred);
    let mut tp = 0.0f64;
    let mut fp = 0.0f64;
    let mut fneg = 0.0f64;
    for (&p, &g) in pred.iter().zip(gt) {
        let b = p >= thr;
        let fg = g > 0.5;
        match (b, fg) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            (false, false) => {}
        }
    }
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fneg);
    const BETA2: f64 = 0.3;
    (1.0 + BETA2) * precision * recall / (BETA2 * precision + recall)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Sample standard deviation (n-1 normalization); 0 for fewer than two
/// values.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    var.sqrt()
}

/// Dissimilarity-penalized foreground score: peaks at 1 when the values
/// sit at 1 with no spread.
fn object_score(vals: &[f64]) -> f64 {
    let m = mean(vals);
    let s = std_dev(vals);
    2.0 * m / (m * m + 1.0 + s + EPS)
}

fn ssim_region(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    let mx = mean(pred);
    let my = mean(gt);
    let (mut vx, mut vy, mut cov) = (0.0f64, 0.0, 0.0);
    if n >= 2 {
        for (&p, &g) in pred.iter().zip(gt) {
            vx += (p - mx) * (p - mx);
            vy += (g - my) * (g - my);
            cov += (p - mx) * (g - my);
        }
        let d = (n - 1) as f64;
        vx /= d;
        vy /= d;
        cov /= d;
    }
    let alpha = 4.0 * mx * my * cov;
    let beta = (mx * mx + my * my) * (vx + vy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn round_half_even(x: f64) -> f64 {
    let floor = x.floor();
    if x - floor == 0.5 {
        if (floor as i64) % 2 == 0 {
            floor
        } else {
            floor + 1.0
        }
    } else {
        x.round()
    }
}

/// Foreground centroid split point along one axis: the centroid cell
/// boundary, rounded to even on ties so mirrored masks split at mirrored
/// positions, clamped so both sides stay nonempty.
fn centroid_cut(first_moment: f64, mass: f64, dim: usize) -> usize {
    let center = first_moment / mass;
    let cut = round_half_even(center + 0.5);
    (cut.max(1.0) as usize).min(dim - 1)
}

/// Structure measure: equal blend of an object-aware score (foreground and
/// background treated separately, weighted by foreground prevalence) and a
/// region-aware score (SSIM over the four quadrants around the mask
/// centroid, weighted by quadrant area), clamped to [0, 1].
pub fn s_measure(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    assert_eq!(pred.len(), h * w);
    assert_eq!(gt.len(), h * w);
    let mu = mean(gt);
    if mu == 0.0 {
        return 1.0 - mean(pred);
    }
    if mu == 1.0 {
        return mean(pred);
    }

    let fg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| g > 0.5).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| g <= 0.5).map(|(&p, _)| 1.0 - p).collect();
    let s_object = mu * object_score(&fg) + (1.0 - mu) * object_score(&bg);

    let (mut mass, mut mi, mut mj) = (0.0f64, 0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let g = gt[i * w + j];
            mass += g;
            mi += i as f64 * g;
            mj += j as f64 * g;
        }
    }
    let cut_i = centroid_cut(mi, mass, h);
    let cut_j = centroid_cut(mj, mass, w);

    let mut s_region = 0.0;
    let total = (h * w) as f64;
    let mut acc_weight = 0.0;
    let bounds = [(0, cut_i, 0, cut_j), (0, cut_i, cut_j, w), (cut_i, h, 0, cut_j), (cut_i, h, cut_j, w)];
    for (qi, &(i0, i1, j0, j1)) in bounds.iter().enumerate() {
        let mut qp = Vec::with_capacity((i1 - i0) * (j1 - j0));
        let mut qg = Vec::with_capacity(qp.capacity());
        for i in i0..i1 {
            for j in j0..j1 {
                qp.push(pred[i * w + j]);
                qg.push(gt[i * w + j]);
            }
        }
        // last weight by remainder so the four sum to exactly 1
        let weight = if qi == 3 { 1.0 - acc_weight } else { qp.len() as f64 / total };
        acc_weight += weight;
        s_region += weight * ssim_region(&qp, &qg);
    }

    let s = 0.5 * s_object + 0.5 * s_region;
    s.clamp(0.0, 1.0)
}

/// Enhanced alignment measure: the prediction is binarized at the adaptive
/// threshold, both maps are mean-centered, and the per-pixel alignment is
/// enhanced quadratically and averaged. All-foreground and all-background
/// masks fall back to plain agreement with the binarized prediction.
pub fn e_measure(pred: &[f64], gt: &[f64]) -> f64 {
    assert_eq!(pred.len(), gt.len());
    let thr = adaptive_threshold(pred);
    let bin: Vec<f64> = pred.iter().map(|&p| if p >= thr { 1.0 } else { 0.0 }).collect();
    let n = gt.len() as f64;
    let mu_g = mean(gt);
    if mu_g == 0.0 {
        return bin.iter().map(|b| 1.0 - b).sum::<f64>() / n;
    }
    if mu_g == 1.0 {
        return bin.iter().sum::<f64>() / n;
    }
    let mu_b = mean(&bin);
    let mut sum = 0.0;
    for (&b, &g) in bin.iter().zip(gt) {
        let pp = b - mu_b;
        let pg = g - mu_g;
        let align = 2.0 * pp * pg / (pp * pp + pg * pg + EPS);
        let enhanced = (align + 1.0) * (align + 1.0) / 4.0;
        sum += enhanced;
    }
    sum / n
}

/// The four per-image scores, bundled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub s_alpha: f64,
    pub f_beta: f64,
    pub e_phi: f64,
    pub mae: f64,
}

pub fn report(pred: &[f64], gt: &[f64], h: usize, w: usize) -> MetricsReport {
    MetricsReport {
        s_alpha: s_measure(pred, gt, h, w),
        f_beta: f_beta(pred, gt),
        e_phi: e_measure(pred, gt),
        mae: mae(pred, gt),
    }
}

pub fn mean_reports(reports: &[MetricsReport]) -> MetricsReport {
    let n = reports.len().max(1) as f64;
    MetricsReport {
        s_alpha: reports.iter().map(|r| r.s_alpha).sum::<f64>() / n,
        f_beta: reports.iter().map(|r| r.f_beta).sum::<f64>() / n,
        e_phi: reports.iter().map(|r| r.e_phi).sum::<f64>() / n,
        mae: reports.iter().map(|r| r.mae).sum::<f64>() / n,
    }
}
