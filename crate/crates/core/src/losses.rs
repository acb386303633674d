//! Training objectives: complementary supervision for the self-prompt
//! generator, the composite mask loss (BCE + soft-IoU + L1), and the
//! weighted total.
//!
//! All reductions are means over every element. BCE is always evaluated
//! in the stable logit form. Soft-IoU carries an additive smoothing
//! epsilon in numerator and denominator, so the empty-target /
//! empty-prediction limit is a perfect match (loss 0).

use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear, Tensor};
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

const IOU_SMOOTH: f64 = 1e-7;

/// Fixed weight of the auxiliary lateral-inhibition penalty when the
/// lateral toggle is on.
pub const LATERAL_WEIGHT: f64 = 0.1;

/// Scalar view of one training step's objective.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_spg: f64,
    pub l_mask_coarse: f64,
    pub l_mask_refined: f64,
    pub l_lateral: f64,
    pub total: f64,
    pub coarse_components: MaskLossComponents,
    pub refined_components: MaskLossComponents,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MaskLossComponents {
    pub bce: f64,
    pub iou: f64,
    pub l1: f64,
}

fn require_binary(y: &Array2<f64>) -> Result<()> {
    if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::Input("target mask must be strictly binary".into()));
    }
    Ok(())
}

/// Nearest-neighbor resize of a binary map (keeps it binary).
pub fn resize_mask_nearest(y: &Array2<f64>, h2: usize, w2: usize) -> Array2<f64> {
    let (h, w) = y.dim();
    Array2::from_shape_fn((h2, w2), |(r, c)| {
        let sr = (((r as f64 + 0.5) * h as f64 / h2 as f64) as usize).min(h - 1);
        let sc = (((c as f64 + 0.5) * w as f64 / w2 as f64) as usize).min(w - 1);
        y[[sr, sc]]
    })
}

fn to_dyn_3d(y: &Array2<f64>) -> ArrayD<f64> {
    let (h, w) = y.dim();
    ArrayD::from_shape_vec(IxDyn(&[1, h, w]), y.iter().copied().collect()).unwrap()
}

/// Complementary supervision: BCE of the positive dense logits against
/// the target plus BCE of the negative logits against its complement.
/// The target is nearest-neighbor resized to the logits' resolution.
pub fn spg_loss(p_pos: &Tensor, p_neg: &Tensor, y: &Array2<f64>) -> Result<Tensor> {
    require_binary(y)?;
    let shape = p_pos.shape();
    if shape.len() != 3 || shape[0] != 1 || p_neg.shape() != shape {
        return Err(Error::Contract(format!(
            "dense prompt logits must both be [1, h, w], got {:?} and {:?}",
            shape,
            p_neg.shape()
        )));
    }
    let y_small = resize_mask_nearest(y, shape[1], shape[2]);
    let y_pos = to_dyn_3d(&y_small);
    let y_neg = y_pos.mapv(|v| 1.0 - v);
    Ok(p_pos
        .bce_with_logits_mean(&y_pos)
        .add(&p_neg.bce_with_logits_mean(&y_neg)))
}

/// Composite mask loss on logits: mean BCE + smoothed soft-IoU + mean L1,
/// each with unit weight. Logits are bilinearly upsampled to the target
/// resolution first.
pub fn mask_loss(m_logits: &Tensor, y: &Array2<f64>) -> Result<(Tensor, MaskLossComponents)> {
    require_binary(y)?;
    let shape = m_logits.shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::Contract(format!(
            "mask logits must be [1, h, w], got {shape:?}"
        )));
    }
    let (hy, wy) = y.dim();
    let m_full = resize_bilinear(m_logits, hy, wy);
    let y_dyn = to_dyn_3d(y);

    let bce = m_full.bce_with_logits_mean(&y_dyn);

    let p = m_full.sigmoid();
    let y_t = Tensor::constant(y_dyn.clone());
    let inter = p.mul(&y_t).sum();
    let denom = p.sum().add(&Tensor::scalar(y_dyn.sum())).sub(&inter);
    let iou = Tensor::scalar(1.0).sub(
        &inter
            .add_scalar(IOU_SMOOTH)
            .div(&denom.add_scalar(IOU_SMOOTH)),
    );

    let l1 = p.sub(&y_t).abs().mean();

    let components = MaskLossComponents {
        bce: bce.item(),
        iou: iou.item(),
        l1: l1.item(),
    };
    Ok((bce.add(&iou).add(&l1), components))
}

/// Inputs to the weighted total; absent terms are simply not included.
pub struct LossTerms {
    pub spg: Option<Tensor>,
    pub mask_coarse: Tensor,
    pub coarse_components: MaskLossComponents,
    pub mask_refined: Option<Tensor>,
    pub refined_components: MaskLossComponents,
    pub lateral: Option<Tensor>,
}

/// Weighted sum `lambda_spg*L_spg + lambda_c*L_c + lambda_r*L_r` plus the
/// fixed-weight lateral penalty when present. Returns the total as a tape
/// node along with the scalar breakdown.
pub fn total_loss(
    terms: &LossTerms,
    weights: &crate::config::LossWeights,
    refine_enabled: bool,
) -> Result<(Tensor, LossBreakdown)> {
    if weights.lambda_r > 0.0 && !refine_enabled {
        return Err(Error::Config(
            "lambda_r > 0 requires the refinement head to be enabled".into(),
        ));
    }
    let mut total = terms.mask_coarse.scale(weights.lambda_c);
    let mut breakdown = LossBreakdown {
        l_mask_coarse: terms.mask_coarse.item(),
        coarse_components: terms.coarse_components,
        refined_components: terms.refined_components,
        ..LossBreakdown::default()
    };
    if let Some(spg) = &terms.spg {
        breakdown.l_spg = spg.item();
        total = total.add(&spg.scale(weights.lambda_spg));
    }
    if weights.lambda_r > 0.0 {
        if let Some(refined) = &terms.mask_refined {
            breakdown.l_mask_refined = refined.item();
            total = total.add(&refined.scale(weights.lambda_r));
        }
    }
    if let Some(lat) = &terms.lateral {
        breakdown.l_lateral = lat.item();
        total = total.add(&lat.scale(LATERAL_WEIGHT));
    }
    breakdown.total = total.item();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LossWeights;
    use ndarray::{Array2, ArrayD, IxDyn};

    fn logits_from(y: &Array2<f64>, pos: f64, neg: f64) -> Tensor {
        let (h, w) = y.dim();
        let data = ArrayD::from_shape_fn(IxDyn(&[1, h, w]), |ix| {
            if y[[ix[1], ix[2]]] == 1.0 {
                pos
            } else {
                neg
            }
        });
        Tensor::constant(data)
    }

    fn checkerboard(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, n), |(r, c)| ((r + c) % 2) as f64)
    }

    #[test]
    fn spg_loss_saturated_logits_vanish() {
        let y = checkerboard(8);
        let p_pos = logits_from(&y, 50.0, -50.0);
        let p_neg = logits_from(&y, -50.0, 50.0);
        let loss = spg_loss(&p_pos, &p_neg, &y).unwrap().item();
        assert!(loss <= 1e-20, "saturated loss {loss}");
    }

    #[test]
    fn spg_loss_at_zero_logits_is_two_ln_two() {
        let y = checkerboard(8);
        let zero = Tensor::zeros(&[1, 8, 8]);
        let loss = spg_loss(&zero, &zero, &y).unwrap().item();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn spg_loss_swap_symmetry_is_exact() {
        let y = Array2::from_shape_fn((8, 8), |(r, c)| f64::from((r * 3 + c) % 5 < 2));
        let y_inv = y.mapv(|v| 1.0 - v);
        let a = logits_from(&y, 3.0, -1.0);
        let b = logits_from(&y, -2.0, 0.5);
        let lhs = spg_loss(&a, &b, &y).unwrap().item();
        let rhs = spg_loss(&b, &a, &y_inv).unwrap().item();
        assert_eq!(lhs.to_bits(), rhs.to_bits());
    }

    #[test]
    fn spg_loss_rejects_nonbinary_targets() {
        let y = Array2::from_elem((8, 8), 0.5);
        let zero = Tensor::zeros(&[1, 8, 8]);
        assert!(matches!(
            spg_loss(&zero, &zero, &y),
            Err(crate::Error::Input(_))
        ));
    }

    #[test]
    fn mask_loss_perfect_prediction_vanishes() {
        let y = checkerboard(8);
        let m = logits_from(&y, 50.0, -50.0);
        let (loss, parts) = mask_loss(&m, &y).unwrap();
        assert!(loss.item() <= 1e-9);
        assert!(parts.bce <= 1e-9 && parts.iou <= 1e-9 && parts.l1 <= 1e-9);
    }

    #[test]
    fn mask_loss_hand_case_two_by_two() {
        // Y = [1,1,0,0], M = 0 so p = 0.5: bce = ln 2, l1 = 0.5,
        // soft-IoU = 1/3 so the IoU term is 2/3
        let y = Array2::from_shape_vec((2, 2), vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let m = Tensor::zeros(&[1, 2, 2]);
        let (loss, parts) = mask_loss(&m, &y).unwrap();
        assert!((parts.bce - std::f64::consts::LN_2).abs() < 1e-9);
        assert!((parts.l1 - 0.5).abs() < 1e-12);
        assert!((parts.iou - 2.0 / 3.0).abs() < 1e-6);
        assert!((loss.item() - 1.859814).abs() < 1e-5);
    }

    #[test]
    fn mask_loss_empty_target_saturated_negative_vanishes() {
        let y = Array2::zeros((4, 4));
        let m = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 4, 4]), -50.0));
        let (loss, _) = mask_loss(&m, &y).unwrap();
        assert!(loss.item() <= 1e-9, "degenerate-IoU case loss {}", loss.item());
    }

    #[test]
    fn mask_loss_upsamples_to_target_resolution() {
        let y = Array2::from_shape_fn((8, 8), |(r, _)| f64::from(r < 4));
        let m = logits_from(&resize_mask_nearest(&y, 2, 2), 50.0, -50.0);
        let (loss, _) = mask_loss(&m, &y).unwrap();
        // coarse 2x2 logits bilinearly upsampled blur the boundary band
        assert!(loss.item() > 0.0 && loss.item() < 1.0);
    }

    #[test]
    fn total_loss_is_the_weighted_sum() {
        let y = checkerboard(4);
        let m = logits_from(&y, 2.0, -2.0);
        let (coarse, cc) = mask_loss(&m, &y).unwrap();
        let (refined, rc) = mask_loss(&m.scale(0.5), &y).unwrap();
        let spg = spg_loss(&m, &m.neg(), &y).unwrap();
        let weights = LossWeights {
            lambda_spg: 1.0,
            lambda_c: 1.0,
            lambda_r: 1.0,
        };
        let terms = LossTerms {
            spg: Some(spg.clone()),
            mask_coarse: coarse.clone(),
            coarse_components: cc,
            mask_refined: Some(refined.clone()),
            refined_components: rc,
            lateral: None,
        };
        let (total, breakdown) = total_loss(&terms, &weights, true).unwrap();
        let expected = spg.item() + coarse.item() + refined.item();
        assert!((total.item() - expected).abs() < 1e-12);
        assert!((breakdown.total - expected).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weighted_arithmetic() {
        let one = Tensor::scalar(0.5);
        let terms = LossTerms {
            spg: Some(Tensor::scalar(0.5)),
            mask_coarse: Tensor::scalar(0.3),
            coarse_components: MaskLossComponents::default(),
            mask_refined: Some(Tensor::scalar(0.2)),
            refined_components: MaskLossComponents::default(),
            lateral: None,
        };
        let weights = LossWeights {
            lambda_spg: 1.0,
            lambda_c: 1.0,
            lambda_r: 1.0,
        };
        let (total, _) = total_loss(&terms, &weights, true).unwrap();
        assert!((total.item() - 1.0).abs() < 1e-12);
        drop(one);
    }

    #[test]
    fn lambda_r_without_refine_is_config_error() {
        let terms = LossTerms {
            spg: None,
            mask_coarse: Tensor::scalar(0.3),
            coarse_components: MaskLossComponents::default(),
            mask_refined: None,
            refined_components: MaskLossComponents::default(),
            lateral: None,
        };
        let weights = LossWeights {
            lambda_spg: 1.0,
            lambda_c: 1.0,
            lambda_r: 1.0,
        };
        assert!(matches!(
            total_loss(&terms, &weights, false),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn zero_lambda_r_makes_total_independent_of_refined() {
        let weights = LossWeights {
            lambda_spg: 1.0,
            lambda_c: 1.0,
            lambda_r: 0.0,
        };
        let mk = |refined: f64| {
            let terms = LossTerms {
                spg: None,
                mask_coarse: Tensor::scalar(0.3),
                coarse_components: MaskLossComponents::default(),
                mask_refined: Some(Tensor::scalar(refined)),
                refined_components: MaskLossComponents::default(),
                lateral: None,
            };
            total_loss(&terms, &weights, true).unwrap().0.item()
        };
        assert_eq!(mk(0.1), mk(123.0));
    }

    #[test]
    fn losses_are_permutation_invariant_over_pixels() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let y = Array2::from_shape_fn((4, 4), |(r, c)| f64::from((r + 2 * c) % 3 == 0));
        let logits: Vec<f64> = (0..16).map(|i| (i as f64) * 0.3 - 2.0).collect();
        let m = Tensor::constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 4, 4]), logits.clone()).unwrap(),
        );
        let (base, _) = mask_loss(&m, &y).unwrap();

        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        let mut perm: Vec<usize> = (0..16).collect();
        perm.shuffle(&mut rng);
        let y_p = Array2::from_shape_fn((4, 4), |(r, c)| {
            let src = perm[r * 4 + c];
            y[[src / 4, src % 4]]
        });
        let m_p = Tensor::constant(
            ArrayD::from_shape_vec(
                IxDyn(&[1, 4, 4]),
                perm.iter().map(|&i| logits[i]).collect(),
            )
            .unwrap(),
        );
        let (shuffled, _) = mask_loss(&m_p, &y_p).unwrap();
        assert!((base.item() - shuffled.item()).abs() < 1e-12);
    }

    #[test]
    fn fd_gradient_of_mask_and_spg_losses() {
        let y = checkerboard(4);
        let base = ArrayD::from_shape_fn(IxDyn(&[1, 4, 4]), |ix| {
            ((ix[1] * 5 + ix[2] * 3) % 7) as f64 * 0.4 - 1.2
        });
        let x = Tensor::param(base.clone());
        let (loss, _) = mask_loss(&x, &y).unwrap();
        loss.backward();
        let analytic = x.grad().unwrap();
        let h = 1e-6;
        for idx in 0..16 {
            let mut plus = base.clone();
            let mut minus = base.clone();
            *plus.iter_mut().nth(idx).unwrap() += h;
            *minus.iter_mut().nth(idx).unwrap() -= h;
            let fp = mask_loss(&Tensor::constant(plus), &y).unwrap().0.item();
            let fm = mask_loss(&Tensor::constant(minus), &y).unwrap().0.item();
            let numeric = (fp - fm) / (2.0 * h);
            let a = *analytic.iter().nth(idx).unwrap();
            assert!(
                (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8) < 1e-4,
                "mask_loss fd mismatch at {idx}: {a} vs {numeric}"
            );
        }
    }
}
