//! Segmentation evaluation metrics: MAE, weighted F-measure, S-measure,
//! E-measure, Dice, IoU.
//!
//! Each metric has a twin in [`reference`] that transcribes the published
//! formula with no algorithmic shortcuts; the implementations here must
//! match those twins to 1e-6 absolute (exercised by the acceptance suite
//! on hundreds of seeded maps).
//!
//! Pinned conventions (toolkits disagree on the edges, so they are fixed
//! here and mirrored exactly in the reference twins):
//! - inputs: `pred` in `[0,1]`, `gt` strictly binary, same shape;
//! - weighted F-measure: beta^2 = 1, 7x7 Gaussian (sigma 5) renormalized
//!   over in-bounds taps at the borders, errors off the target copied
//!   from the nearest target pixel (Euclidean, ties broken by smallest
//!   copied error, which keeps the metric transposition-invariant);
//!   empty gt maps score 1 for an identically-zero prediction, else 0;
//! - S-measure: alpha = 0.5; gt all zeros scores `1 - mean(pred)`, all
//!   ones scores `mean(pred)`; result clamped to `[0,1]`;
//! - E-measure: mean over 256 thresholds `(k+1)/256`, binarized with
//!   `>=`; per-threshold alignment normalized by the pixel count so a
//!   perfect map scores exactly 1; an adaptive-threshold variant
//!   (`2*mean(pred)` clamped to 1) is also provided;
//! - Dice/IoU: prediction binarized at 0.5 (`>=`); empty-vs-empty is a
//!   perfect match, scoring (1, 1).

pub mod reference;

use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub(crate) const EPS: f64 = f64::EPSILON;

pub(crate) fn check_pair(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Contract(format!(
            "pred shape {:?} != gt shape {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if pred.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("pred values must lie in [0, 1]".into()));
    }
    if gt.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::Input("gt must be strictly binary".into()));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    check_pair(pred, gt)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(gt.iter())
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / n)
}

// ---------------------------------------------------------------------------
// weighted F-measure
// ---------------------------------------------------------------------------

/// For every off-target pixel: squared Euclidean distance to the nearest
/// gt pixel and the error value copied from it (equidistant candidates
/// resolve to the smallest error). Rows are scanned outward from each
/// pixel and pruned once their minimum possible distance strictly exceeds
/// the current best, which preserves the exact `(distance^2, error)`
/// lexicographic minimum.
fn nearest_gt_error(gt: &Array2<f64>, e: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = gt.dim();
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); h];
    for ((r, c), v) in gt.indexed_iter() {
        if *v == 1.0 {
            rows[r].push(c);
        }
    }
    let mut dist2 = Array2::<f64>::zeros((h, w));
    let mut copied = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            if gt[[r, c]] == 1.0 {
                continue;
            }
            let mut best_d2 = u64::MAX;
            let mut best_e = f64::INFINITY;
            // candidate rows ordered by |dr|
            let mut offsets: Vec<usize> = Vec::with_capacity(h);
            offsets.push(r);
            for d in 1..h {
                if r >= d {
                    offsets.push(r - d);
                }
                if r + d < h {
                    offsets.push(r + d);
                }
            }
            for rr in offsets {
                let dr = rr.abs_diff(r) as u64;
                if dr * dr > best_d2 {
                    break;
                }
                for &cc in &rows[rr] {
                    let dc = cc.abs_diff(c) as u64;
                    let d2 = dr * dr + dc * dc;
                    let ev = e[[rr, cc]];
                    if d2 < best_d2 || (d2 == best_d2 && ev < best_e) {
                        best_d2 = d2;
                        best_e = ev;
                    }
                }
            }
            dist2[[r, c]] = best_d2 as f64;
            copied[[r, c]] = best_e;
        }
    }
    (dist2, copied)
}

pub(crate) fn gaussian_kernel_7x5() -> [f64; 7] {
    let sigma = 5.0f64;
    let mut k = [0.0; 7];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - 3.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
    }
    k
}

/// Separable 7x7 Gaussian blur (sigma 5). Border windows renormalize over
/// the in-bounds taps, so a constant map blurs to itself exactly. The
/// rectangular window makes the renormalization separable per axis.
fn gaussian_blur(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let k1 = gaussian_kernel_7x5();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (i, kv) in k1.iter().enumerate() {
                let cc = c as isize + i as isize - 3;
                if cc >= 0 && (cc as usize) < w {
                    acc += kv * x[[r, cc as usize]];
                    norm += kv;
                }
            }
            tmp[[r, c]] = acc / norm;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (i, kv) in k1.iter().enumerate() {
                let rr = r as isize + i as isize - 3;
                if rr >= 0 && (rr as usize) < h {
                    acc += kv * tmp[[rr as usize, c]];
                    norm += kv;
                }
            }
            out[[r, c]] = acc / norm;
        }
    }
    out
}

/// Weighted F-measure with dependency-aware error spreading and
/// distance-decayed background weighting.
pub fn weighted_fmeasure(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    check_pair(pred, gt)?;
    let n_fg: f64 = gt.sum();
    if n_fg == 0.0 {
        return Ok(if pred.iter().all(|v| *v == 0.0) { 1.0 } else { 0.0 });
    }
    let (h, w) = gt.dim();
    let e = {
        let mut e = Array2::<f64>::zeros((h, w));
        for ((r, c), v) in pred.indexed_iter() {
            e[[r, c]] = (v - gt[[r, c]]).abs();
        }
        e
    };
    let (dist2, copied) = nearest_gt_error(gt, &e);
    // off-target error replaced by the error at the nearest target pixel
    let mut et = e.clone();
    for ((r, c), v) in gt.indexed_iter() {
        if *v == 0.0 {
            et[[r, c]] = copied[[r, c]];
        }
    }
    let ea = gaussian_blur(&et);
    // on-target: keep the smaller of raw and blurred error
    let mut min_e_ea = e.clone();
    for ((r, c), v) in gt.indexed_iter() {
        if *v == 1.0 && ea[[r, c]] < e[[r, c]] {
            min_e_ea[[r, c]] = ea[[r, c]];
        }
    }
    // distance-decayed importance off target
    let ln_half_over5 = 0.5f64.ln() / 5.0;
    let mut tp_w = n_fg;
    let mut fp_w = 0.0;
    let mut err_fg = 0.0;
    for ((r, c), v) in gt.indexed_iter() {
        if *v == 1.0 {
            err_fg += min_e_ea[[r, c]];
        } else {
            let b = 2.0 - (ln_half_over5 * dist2[[r, c]].sqrt()).exp();
            fp_w += min_e_ea[[r, c]] * b;
        }
    }
    tp_w -= err_fg;
    let recall = 1.0 - err_fg / n_fg;
    let precision = tp_w / (EPS + tp_w + fp_w);
    Ok((2.0 * recall * precision) / (EPS + recall + precision))
}

// ---------------------------------------------------------------------------
// S-measure
// ---------------------------------------------------------------------------

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    2.0 * mean / (mean * mean + 1.0 + var.sqrt() + EPS)
}

fn region_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    if pred.is_empty() {
        return 0.0;
    }
    let mx = pred.iter().sum::<f64>() / n;
    let my = gt.iter().sum::<f64>() / n;
    let denom = n - 1.0 + EPS;
    let sx = pred.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / denom;
    let sy = gt.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / denom;
    let sxy = pred
        .iter()
        .zip(gt.iter())
        .map(|(p, g)| (p - mx) * (g - my))
        .sum::<f64>()
        / denom;
    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Foreground centroid of gt, rounded; map center when gt is empty.
pub(crate) fn gt_centroid(gt: &Array2<f64>) -> (usize, usize) {
    let (h, w) = gt.dim();
    let area: f64 = gt.sum();
    if area == 0.0 {
        return (h / 2, w / 2);
    }
    let mut ry = 0.0;
    let mut cx = 0.0;
    for ((r, c), v) in gt.indexed_iter() {
        ry += *v * r as f64;
        cx += *v * c as f64;
    }
    (
        (ry / area).round() as usize,
        (cx / area).round() as usize,
    )
}

fn quadrant(
    m: &Array2<f64>,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for r in rows {
        for c in cols.clone() {
            out.push(m[[r, c]]);
        }
    }
    out
}

/// Structure measure: object-aware plus region-aware structural
/// similarity, `alpha = 0.5`.
pub fn s_measure(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    check_pair(pred, gt)?;
    let n = gt.len() as f64;
    let y = gt.sum() / n;
    let mean_pred = pred.sum() / n;
    if y == 0.0 {
        return Ok(1.0 - mean_pred);
    }
    if y == 1.0 {
        return Ok(mean_pred);
    }

    // object-aware term over foreground and complemented background
    let fg: Vec<f64> = pred
        .iter()
        .zip(gt.iter())
        .filter(|(_, g)| **g == 1.0)
        .map(|(p, _)| *p)
        .collect();
    let bg: Vec<f64> = pred
        .iter()
        .zip(gt.iter())
        .filter(|(_, g)| **g == 0.0)
        .map(|(p, _)| 1.0 - *p)
        .collect();
    let s_object = y * object_score(&fg) + (1.0 - y) * object_score(&bg);

    // region-aware term: split both maps at the gt centroid
    let (h, w) = gt.dim();
    let (cy, cx) = gt_centroid(gt);
    let (ry, rx) = (cy + 1, cx + 1); // centroid row/col belongs to the upper-left parts
    let splits = [
        (0..ry, 0..rx),
        (0..ry, rx..w),
        (ry..h, 0..rx),
        (ry..h, rx..w),
    ];
    let mut s_region = 0.0;
    for (rows, cols) in splits {
        let weight = (rows.len() * cols.len()) as f64 / n;
        if weight == 0.0 {
            continue;
        }
        let pq = quadrant(pred, rows.clone(), cols.clone());
        let gq = quadrant(gt, rows, cols);
        s_region += weight * region_ssim(&pq, &gq);
    }

    Ok((0.5 * s_object + 0.5 * s_region).clamp(0.0, 1.0))
}

// ---------------------------------------------------------------------------
// E-measure
// ---------------------------------------------------------------------------

pub(crate) fn emeasure_thresholds() -> Vec<f64> {
    (0..256).map(|k| (k + 1) as f64 / 256.0).collect()
}

/// Enhanced alignment for one binarized prediction, from confusion counts.
fn enhanced_from_counts(n: f64, n1: f64, tp: f64, fp: f64) -> f64 {
    let n0 = n - n1;
    if n1 == 0.0 {
        // gt empty: enhanced matrix is 1 - fm
        return (n - (tp + fp)) / n;
    }
    if n0 == 0.0 {
        // gt full: enhanced matrix is fm
        return (tp + fp) / n;
    }
    let mu_f = (tp + fp) / n;
    let mu_g = n1 / n;
    let cells = [
        (tp, 1.0 - mu_f, 1.0 - mu_g),
        (fp, 1.0 - mu_f, -mu_g),
        (n1 - tp, -mu_f, 1.0 - mu_g),
        (n0 - fp, -mu_f, -mu_g),
    ];
    let mut total = 0.0;
    for (count, a, b) in cells {
        let align = 2.0 * a * b / (a * a + b * b + EPS);
        let enhanced = (align + 1.0) * (align + 1.0) / 4.0;
        total += count * enhanced;
    }
    total / n
}

fn emeasure_at(pred: &Array2<f64>, gt: &Array2<f64>, threshold: f64) -> f64 {
    let n = gt.len() as f64;
    let n1 = gt.sum();
    let mut tp = 0.0;
    let mut fp = 0.0;
    for (p, g) in pred.iter().zip(gt.iter()) {
        if *p >= threshold {
            if *g == 1.0 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
    }
    enhanced_from_counts(n, n1, tp, fp)
}

/// Mean enhanced-alignment measure over 256 thresholds.
pub fn e_measure(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    check_pair(pred, gt)?;
    let n = gt.len() as f64;
    let n1 = gt.sum();
    let thresholds = emeasure_thresholds();
    // count, per threshold, how many fg/bg pixels survive binarization
    let count_ge = |values: Vec<f64>| -> Vec<f64> {
        let mut sorted = values;
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        thresholds
            .iter()
            .map(|t| (sorted.len() - sorted.partition_point(|v| v < t)) as f64)
            .collect()
    };
    let fg_vals: Vec<f64> = pred
        .iter()
        .zip(gt.iter())
        .filter(|(_, g)| **g == 1.0)
        .map(|(p, _)| *p)
        .collect();
    let bg_vals: Vec<f64> = pred
        .iter()
        .zip(gt.iter())
        .filter(|(_, g)| **g == 0.0)
        .map(|(p, _)| *p)
        .collect();
    let tp_per_t = count_ge(fg_vals);
    let fp_per_t = count_ge(bg_vals);
    let mut total = 0.0;
    for k in 0..thresholds.len() {
        total += enhanced_from_counts(n, n1, tp_per_t[k], fp_per_t[k]);
    }
    Ok(total / thresholds.len() as f64)
}

/// Enhanced-alignment measure at the adaptive threshold
/// `min(2 * mean(pred), 1)`.
pub fn e_measure_adaptive(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    check_pair(pred, gt)?;
    let threshold = (2.0 * pred.sum() / pred.len() as f64).min(1.0);
    Ok(emeasure_at(pred, gt, threshold))
}

// ---------------------------------------------------------------------------
// Dice / IoU
// ---------------------------------------------------------------------------

/// Dice and IoU of the prediction binarized at 0.5.
pub fn dice_iou(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<(f64, f64)> {
    check_pair(pred, gt)?;
    let mut inter = 0.0;
    let mut p_sum = 0.0;
    let g_sum = gt.sum();
    for (p, g) in pred.iter().zip(gt.iter()) {
        let pb = f64::from(*p >= 0.5);
        p_sum += pb;
        inter += pb * g;
    }
    if p_sum == 0.0 && g_sum == 0.0 {
        return Ok((1.0, 1.0));
    }
    let dice = 2.0 * inter / (p_sum + g_sum);
    let union = p_sum + g_sum - inter;
    let iou = if union == 0.0 { 1.0 } else { inter / union };
    Ok((dice, iou))
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Metrics for one evaluated sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub mae: f64,
    pub f_w: f64,
    pub s_m: f64,
    pub e_phi: f64,
    pub dice: f64,
    pub iou: f64,
}

/// Dataset-level report: per-sample rows plus arithmetic means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_samples: usize,
    pub mae: f64,
    pub f_w: f64,
    pub s_m: f64,
    pub e_phi: f64,
    pub dice: f64,
    pub iou: f64,
    pub samples: Vec<SampleMetrics>,
}

impl MetricReport {
    pub fn from_samples(samples: Vec<SampleMetrics>) -> MetricReport {
        let n = samples.len().max(1) as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
        MetricReport {
            n_samples: samples.len(),
            mae: mean(|s| s.mae),
            f_w: mean(|s| s.f_w),
            s_m: mean(|s| s.s_m),
            e_phi: mean(|s| s.e_phi),
            dice: mean(|s| s.dice),
            iou: mean(|s| s.iou),
            samples,
        }
    }

    pub fn evaluate_sample(id: &str, pred: &Array2<f64>, gt: &Array2<f64>) -> Result<SampleMetrics> {
        let (dice, iou) = dice_iou(pred, gt)?;
        Ok(SampleMetrics {
            id: id.to_string(),
            mae: mae(pred, gt)?,
            f_w: weighted_fmeasure(pred, gt)?,
            s_m: s_measure(pred, gt)?,
            e_phi: e_measure(pred, gt)?,
            dice,
            iou,
        })
    }

    /// CSV with one row per sample plus a mean row; column order MAE,
    /// F^w, S_m, E_phi, Dice, IoU.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,mae,f_w,s_m,e_phi,dice,iou\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                s.id, s.mae, s.f_w, s.s_m, s.e_phi, s.dice, s.iou
            ));
        }
        out.push_str(&format!(
            "mean,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            self.mae, self.f_w, self.s_m, self.e_phi, self.dice, self.iou
        ));
        out
    }
}
