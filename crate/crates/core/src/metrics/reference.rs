//! Literal-formula reference implementations of every metric.
//!
//! These transcribe the published definitions as direct per-pixel loops
//! with no algorithmic shortcuts: the distance transform scans every
//! target pixel, the Gaussian spreading is a dense 49-tap convolution,
//! and the E-measure materializes a binarized map per threshold. They are
//! deliberately slow and exist as independent oracles for the optimized
//! implementations in the parent module. Keep them independent: they must
//! not call into the optimized code paths.

use super::{check_pair, emeasure_thresholds, gt_centroid, EPS};
use crate::error::Result;
use ndarray::Array2;

pub fn mae_ref(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    check_pair(pred, gt)?;
    let mut total = 0.0;
    let mut n = 0.0;
    for ((r, c), p) in pred.indexed_iter() {
        total += (p - gt[[r, c]]).abs();
        n += 1.0;
    }
    Ok(total / n)
}

pub fn weighted_fmeasure_ref(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    check_pair(pred, gt)?;
    let (h, w) = gt.dim();
    let n_fg: f64 = gt.sum();
    if n_fg == 0.0 {
        return Ok(if pred.iter().all(|v| *v == 0.0) { 1.0 } else { 0.0 });
    }

    let mut e = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            e[[r, c]] = (pred[[r, c]] - gt[[r, c]]).abs();
        }
    }

    // nearest target pixel by full scan; equidistant ties take the
    // smallest copied error
    let mut et = e.clone();
    let mut dist = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            if gt[[r, c]] == 1.0 {
                continue;
            }
            let mut best_d2 = u64::MAX;
            let mut best_e = f64::INFINITY;
            for rr in 0..h {
                for cc in 0..w {
                    if gt[[rr, cc]] == 1.0 {
                        let dr = rr.abs_diff(r) as u64;
                        let dc = cc.abs_diff(c) as u64;
                        let d2 = dr * dr + dc * dc;
                        if d2 < best_d2 || (d2 == best_d2 && e[[rr, cc]] < best_e) {
                            best_d2 = d2;
                            best_e = e[[rr, cc]];
                        }
                    }
                }
            }
            et[[r, c]] = best_e;
            dist[[r, c]] = (best_d2 as f64).sqrt();
        }
    }

    // dense 7x7 Gaussian, sigma 5, renormalized over in-bounds taps
    let k1 = super::gaussian_kernel_7x5();
    let mut kernel = [[0.0f64; 7]; 7];
    for i in 0..7 {
        for j in 0..7 {
            kernel[i][j] = k1[i] * k1[j];
        }
    }
    let mut ea = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (i, krow) in kernel.iter().enumerate() {
                for (j, kv) in krow.iter().enumerate() {
                    let rr = r as isize + i as isize - 3;
                    let cc = c as isize + j as isize - 3;
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        acc += kv * et[[rr as usize, cc as usize]];
                        norm += kv;
                    }
                }
            }
            ea[[r, c]] = acc / norm;
        }
    }

    let mut min_e_ea = e.clone();
    for r in 0..h {
        for c in 0..w {
            if gt[[r, c]] == 1.0 && ea[[r, c]] < e[[r, c]] {
                min_e_ea[[r, c]] = ea[[r, c]];
            }
        }
    }

    let ln_half_over5 = 0.5f64.ln() / 5.0;
    let mut err_fg = 0.0;
    let mut fp_w = 0.0;
    for r in 0..h {
        for c in 0..w {
            if gt[[r, c]] == 1.0 {
                err_fg += min_e_ea[[r, c]];
            } else {
                let b = 2.0 - (ln_half_over5 * dist[[r, c]]).exp();
                fp_w += min_e_ea[[r, c]] * b;
            }
        }
    }
    let tp_w = n_fg - err_fg;
    let recall = 1.0 - err_fg / n_fg;
    let precision = tp_w / (EPS + tp_w + fp_w);
    Ok((2.0 * recall * precision) / (EPS + recall + precision))
}

fn mean_of(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn object_ref(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let x = mean_of(values);
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / (values.len() as f64 - 1.0)
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + var.sqrt() + EPS)
}

fn ssim_ref(pred: &[f64], gt: &[f64]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let n = pred.len() as f64;
    let x = mean_of(pred);
    let y = mean_of(gt);
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for i in 0..pred.len() {
        sx += (pred[i] - x) * (pred[i] - x);
        sy += (gt[i] - y) * (gt[i] - y);
        sxy += (pred[i] - x) * (gt[i] - y);
    }
    sx /= n - 1.0 + EPS;
    sy /= n - 1.0 + EPS;
    sxy /= n - 1.0 + EPS;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn s_measure_ref(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    check_pair(pred, gt)?;
    let (h, w) = gt.dim();
    let n = (h * w) as f64;
    let y = gt.sum() / n;
    if y == 0.0 {
        return Ok(1.0 - pred.sum() / n);
    }
    if y == 1.0 {
        return Ok(pred.sum() / n);
    }

    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if gt[[r, c]] == 1.0 {
                fg.push(pred[[r, c]]);
            } else {
                bg.push(1.0 - pred[[r, c]]);
            }
        }
    }
    let s_object = y * object_ref(&fg) + (1.0 - y) * object_ref(&bg);

    let (cy, cx) = gt_centroid(gt);
    let (ry, rx) = (cy + 1, cx + 1);
    let mut s_region = 0.0;
    let bounds = [
        (0, ry, 0, rx),
        (0, ry, rx, w),
        (ry, h, 0, rx),
        (ry, h, rx, w),
    ];
    for (r0, r1, c0, c1) in bounds {
        let count = (r1 - r0) * (c1 - c0);
        if count == 0 {
            continue;
        }
        let mut pq = Vec::with_capacity(count);
        let mut gq = Vec::with_capacity(count);
        for r in r0..r1 {
            for c in c0..c1 {
                pq.push(pred[[r, c]]);
                gq.push(gt[[r, c]]);
            }
        }
        s_region += count as f64 / n * ssim_ref(&pq, &gq);
    }

    Ok((0.5 * s_object + 0.5 * s_region).clamp(0.0, 1.0))
}

fn enhanced_matrix(fm: &Array2<f64>, gt: &Array2<f64>) -> Array2<f64> {
    let (h, w) = gt.dim();
    let n = (h * w) as f64;
    if gt.sum() == 0.0 {
        return fm.mapv(|v| 1.0 - v);
    }
    if gt.sum() == n {
        return fm.clone();
    }
    let mu_f = fm.sum() / n;
    let mu_g = gt.sum() / n;
    let mut out = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let a = fm[[r, c]] - mu_f;
            let b = gt[[r, c]] - mu_g;
            let align = 2.0 * a * b / (a * a + b * b + EPS);
            out[[r, c]] = (align + 1.0) * (align + 1.0) / 4.0;
        }
    }
    out
}

pub fn e_measure_ref(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    check_pair(pred, gt)?;
    let (h, w) = gt.dim();
    let n = (h * w) as f64;
    let thresholds = emeasure_thresholds();
    let mut total = 0.0;
    for t in &thresholds {
        let mut fm = Array2::<f64>::zeros((h, w));
        for r in 0..h {
            for c in 0..w {
                fm[[r, c]] = f64::from(pred[[r, c]] >= *t);
            }
        }
        total += enhanced_matrix(&fm, gt).sum() / n;
    }
    Ok(total / thresholds.len() as f64)
}

pub fn e_measure_adaptive_ref(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    check_pair(pred, gt)?;
    let (h, w) = gt.dim();
    let n = (h * w) as f64;
    let t = (2.0 * pred.sum() / n).min(1.0);
    let mut fm = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            fm[[r, c]] = f64::from(pred[[r, c]] >= t);
        }
    }
    Ok(enhanced_matrix(&fm, gt).sum() / n)
}

pub fn dice_iou_ref(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<(f64, f64)> {
    check_pair(pred, gt)?;
    let mut inter = 0usize;
    let mut p_count = 0usize;
    let mut g_count = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.iter().zip(gt.iter()) {
        let pb = *p >= 0.5;
        let gb = *g == 1.0;
        if pb {
            p_count += 1;
        }
        if gb {
            g_count += 1;
        }
        if pb && gb {
            inter += 1;
        }
        if pb || gb {
            union += 1;
        }
    }
    if p_count == 0 && g_count == 0 {
        return Ok((1.0, 1.0));
    }
    Ok((
        2.0 * inter as f64 / (p_count + g_count) as f64,
        if union == 0 { 1.0 } else { inter as f64 / union as f64 },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Smaller version of the acceptance-level oracle sweep.
    #[test]
    fn optimized_matches_reference_on_seeded_maps() {
        for seed in 0..60u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let pred = Array2::from_shape_fn((8, 8), |_| rng.random::<f64>());
            let density = 0.15 + 0.7 * rng.random::<f64>();
            let gt = Array2::from_shape_fn((8, 8), |_| f64::from(rng.random::<f64>() < density));

            let cases = [
                (metrics::mae(&pred, &gt).unwrap(), mae_ref(&pred, &gt).unwrap(), "mae"),
                (
                    metrics::weighted_fmeasure(&pred, &gt).unwrap(),
                    weighted_fmeasure_ref(&pred, &gt).unwrap(),
                    "f_w",
                ),
                (
                    metrics::s_measure(&pred, &gt).unwrap(),
                    s_measure_ref(&pred, &gt).unwrap(),
                    "s_m",
                ),
                (
                    metrics::e_measure(&pred, &gt).unwrap(),
                    e_measure_ref(&pred, &gt).unwrap(),
                    "e_phi",
                ),
                (
                    metrics::e_measure_adaptive(&pred, &gt).unwrap(),
                    e_measure_adaptive_ref(&pred, &gt).unwrap(),
                    "e_phi_adaptive",
                ),
            ];
            for (fast, slow, name) in cases {
                assert!(
                    (fast - slow).abs() < 1e-6,
                    "seed {seed}: {name} {fast} vs reference {slow}"
                );
            }
            let (d1, i1) = metrics::dice_iou(&pred, &gt).unwrap();
            let (d2, i2) = dice_iou_ref(&pred, &gt).unwrap();
            assert!((d1 - d2).abs() < 1e-12 && (i1 - i2).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_handles_empty_and_full_gt() {
        let pred = Array2::from_elem((6, 6), 0.4);
        let empty = Array2::zeros((6, 6));
        let full = Array2::from_elem((6, 6), 1.0);
        assert_eq!(weighted_fmeasure_ref(&pred, &empty).unwrap(), 0.0);
        assert!((e_measure_ref(&pred, &full).unwrap() - e_measure_ref(&pred, &full).unwrap()).abs() < 1e-12);
        assert!((s_measure_ref(&pred, &empty).unwrap() - 0.6).abs() < 1e-12);
    }
}
