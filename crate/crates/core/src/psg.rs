//! Prompt-space gating: the negative dense prompt embedding drives a
//! suppressive gate over the positive embedding, the suppressed feature
//! is fused with transformed background cues, and a residual anchored to
//! the original positive embedding turns the fusion branch into a pure
//! noise-cancellation predictor.
//!
//! Besides the main asymmetric gate, all fusion variants from the design
//! ablation are available (`none`, `subtraction`, `concatenation`,
//! `cross_attn`, and anchoring the residual to the suppressed feature).
//! Each variant only instantiates its own parameters.

use crate::config::PsgVariant;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, LayerNorm2d, Linear};
use crate::tensor::{concat, Tensor};

/// Gating internals kept for losses, inspection, and tests.
pub struct GatedCondition {
    /// `[1, H, W]`, strictly inside (0, 1).
    pub gate: Tensor,
    /// Suppressed positive embedding `Z+ o (1 - G)`.
    pub z_suppressed: Tensor,
    /// Conditioned prompt embedding fed to the decoder.
    pub z_out: Tensor,
    /// Per-pixel L2 norm of `z_out - z_pos` over channels, `[1, H, W]`.
    pub energy_delta: Tensor,
}

struct GateNet {
    conv1: Conv2d, // C -> C/4, 3x3
    conv2: Conv2d, // C/4 -> 1, 1x1
}

struct FuseNet {
    conv1: Conv2d, // 2C -> C, 3x3
    norm: LayerNorm2d,
    conv2: Conv2d, // C -> C, 1x1, zero-init so gating starts as identity
}

struct CrossAttnFuse {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear, // zero-init
    dim: usize,
}

pub struct Psg {
    pub variant: PsgVariant,
    gate: Option<GateNet>,
    feat: Option<Conv2d>, // C -> C, 3x3 (background feature transform)
    fuse: Option<FuseNet>,
    concat_proj: Option<Conv2d>,
    xattn: Option<CrossAttnFuse>,
    dim: usize,
}

impl Psg {
    pub fn new(init: &mut Init, dim: usize, variant: PsgVariant) -> Psg {
        let mut psg = Psg {
            variant,
            gate: None,
            feat: None,
            fuse: None,
            concat_proj: None,
            xattn: None,
            dim,
        };
        match variant {
            PsgVariant::AsymGate | PsgVariant::AnchorSuppressed => {
                psg.gate = Some(GateNet {
                    conv1: Conv2d::new(init, "psg.gate.conv1", dim, dim / 4, 3, 1, 1),
                    conv2: Conv2d::new(init, "psg.gate.conv2", dim / 4, 1, 1, 1, 0),
                });
                psg.feat = Some(Conv2d::new(init, "psg.feat", dim, dim, 3, 1, 1));
                psg.fuse = Some(FuseNet {
                    conv1: Conv2d::new(init, "psg.fuse.conv1", 2 * dim, dim, 3, 1, 1),
                    norm: LayerNorm2d::new(init, "psg.fuse.norm", dim),
                    conv2: Conv2d::new_zeroed(init, "psg.fuse.conv2", dim, dim, 1, 1, 0),
                });
            }
            PsgVariant::None | PsgVariant::Subtraction => {}
            PsgVariant::Concatenation => {
                psg.concat_proj = Some(Conv2d::new(init, "psg.concat_proj", 2 * dim, dim, 1, 1, 0));
            }
            PsgVariant::CrossAttn => {
                psg.xattn = Some(CrossAttnFuse {
                    q: Linear::new(init, "psg.xattn.q", dim, dim),
                    k: Linear::new(init, "psg.xattn.k", dim, dim),
                    v: Linear::new(init, "psg.xattn.v", dim, dim),
                    out: {
                        let lin = Linear::new(init, "psg.xattn.out", dim, dim);
                        lin.w.set_data(ndarray::ArrayD::zeros(ndarray::IxDyn(&[dim, dim])));
                        lin
                    },
                    dim,
                });
            }
        }
        psg
    }

    pub fn forward(&self, z_pos: &Tensor, z_neg: &Tensor) -> Result<GatedCondition> {
        let shape = z_pos.shape();
        if shape.len() != 3 || z_neg.shape() != shape {
            return Err(Error::Contract(format!(
                "gating inputs must share [C, H, W]: {:?} vs {:?}",
                shape,
                z_neg.shape()
            )));
        }
        if shape[0] != self.dim {
            return Err(Error::Contract(format!(
                "expected {} channels, got {}",
                self.dim, shape[0]
            )));
        }
        let (h, w) = (shape[1], shape[2]);

        let half_gate = || Tensor::constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, h, w]), 0.5));

        let (gate, z_suppressed, z_out) = match self.variant {
            PsgVariant::AsymGate | PsgVariant::AnchorSuppressed => {
                let gate_net = self.gate.as_ref().unwrap();
                let pre = gate_net.conv2.forward(&gate_net.conv1.forward(z_neg).gelu());
                let gate = pre.sigmoid();
                let z_tilde = z_pos.mul(&gate.neg().add_scalar(1.0));
                let bg = self.feat.as_ref().unwrap().forward(z_neg).gelu();
                let fuse = self.fuse.as_ref().unwrap();
                let fused = fuse
                    .conv2
                    .forward(&fuse.norm.forward(&fuse.conv1.forward(&concat(0, &[&z_tilde, &bg]))).gelu());
                let anchor = match self.variant {
                    PsgVariant::AsymGate => z_pos.clone(),
                    _ => z_tilde.clone(),
                };
                (gate, z_tilde, fused.add(&anchor))
            }
            PsgVariant::None => (half_gate(), z_pos.clone(), z_pos.clone()),
            PsgVariant::Subtraction => (half_gate(), z_pos.clone(), z_pos.sub(z_neg)),
            PsgVariant::Concatenation => {
                let z = self
                    .concat_proj
                    .as_ref()
                    .unwrap()
                    .forward(&concat(0, &[z_pos, z_neg]));
                (half_gate(), z_pos.clone(), z)
            }
            PsgVariant::CrossAttn => {
                let xa = self.xattn.as_ref().unwrap();
                let q_tok = crate::backbone::map_to_tokens(z_pos);
                let k_tok = crate::backbone::map_to_tokens(z_neg);
                let q = xa.q.forward(&q_tok);
                let k = xa.k.forward(&k_tok);
                let v = xa.v.forward(&k_tok);
                let scores = q
                    .matmul(&k.t())
                    .scale(1.0 / (xa.dim as f64).sqrt())
                    .softmax_last();
                let ctx = xa.out.forward(&scores.matmul(&v));
                let delta = crate::backbone::tokens_to_map(&ctx, self.dim, h, w);
                (half_gate(), z_pos.clone(), z_pos.add(&delta))
            }
        };

        let diff = z_out.sub(z_pos);
        let energy_delta = diff.mul(&diff).sum_axis_keep(0).sqrt();
        Ok(GatedCondition { gate, z_suppressed, z_out, energy_delta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_map(seed: u64) -> Tensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[16, 4, 4]), |_| {
            rng.random::<f64>() * 2.0 - 1.0
        }))
    }

    fn build(variant: PsgVariant, seed: u64) -> (Psg, Vec<(String, Tensor)>) {
        let mut init = Init::new(seed);
        let psg = Psg::new(&mut init, 16, variant);
        let params = init.into_params();
        (psg, params)
    }

    fn set_param(params: &[(String, Tensor)], name: &str, value: f64) {
        let t = &params.iter().find(|(n, _)| n == name).unwrap().1;
        t.update_data(|d| d.fill(value));
    }

    #[test]
    fn anchored_residual_is_identity_at_zero_init() {
        // psi's final conv is zero-initialized, so Z == Z+ bit-exactly
        let (psg, _) = build(PsgVariant::AsymGate, 1);
        for seed in 0..10 {
            let z_pos = rand_map(seed * 2 + 100);
            let z_neg = rand_map(seed * 2 + 101);
            let out = psg.forward(&z_pos, &z_neg).unwrap();
            assert_eq!(out.z_out.array(), z_pos.array());
            assert!(out.energy_delta.array().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn zero_gate_preactivation_halves_z_pos() {
        let (psg, params) = build(PsgVariant::AsymGate, 2);
        set_param(&params, "psg.gate.conv1.w", 0.0);
        set_param(&params, "psg.gate.conv1.b", 0.0);
        set_param(&params, "psg.gate.conv2.w", 0.0);
        set_param(&params, "psg.gate.conv2.b", 0.0);
        let z_pos = rand_map(7);
        let out = psg.forward(&z_pos, &rand_map(8)).unwrap();
        assert!(out.gate.array().iter().all(|v| *v == 0.5));
        let expected = z_pos.array().mapv(|v| 0.5 * v);
        assert_eq!(out.z_suppressed.array(), expected);
    }

    #[test]
    fn saturated_gate_suppresses_to_sigmoid_bound() {
        let (psg, params) = build(PsgVariant::AsymGate, 3);
        set_param(&params, "psg.gate.conv1.w", 0.0);
        set_param(&params, "psg.gate.conv1.b", 0.0);
        set_param(&params, "psg.gate.conv2.w", 0.0);
        set_param(&params, "psg.gate.conv2.b", 20.0);
        let z_pos = rand_map(9);
        let out = psg.forward(&z_pos, &rand_map(10)).unwrap();
        let sup_inf = out
            .z_suppressed
            .array()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let pos_inf = z_pos.array().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // 1 - sigmoid(20) = sigmoid(-20) <= 2.1e-9
        assert!(sup_inf <= 2.1e-9 * pos_inf, "{sup_inf} vs {pos_inf}");
    }

    #[test]
    fn gate_lies_strictly_inside_unit_interval() {
        let (psg, _) = build(PsgVariant::AsymGate, 4);
        let out = psg.forward(&rand_map(20), &rand_map(21)).unwrap();
        assert!(out.gate.array().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn subtraction_of_equal_inputs_is_zero() {
        let (psg, _) = build(PsgVariant::Subtraction, 5);
        let z = rand_map(30);
        let out = psg.forward(&z, &z).unwrap();
        assert!(out.z_out.array().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn none_variant_passes_z_pos_through_with_no_params() {
        let (psg, params) = build(PsgVariant::None, 6);
        assert!(params.is_empty());
        let z = rand_map(31);
        let out = psg.forward(&z, &rand_map(32)).unwrap();
        assert_eq!(out.z_out.array(), z.array());
        assert!(out.gate.array().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn cross_attn_is_identity_at_zero_init_but_parametrized() {
        let (psg, params) = build(PsgVariant::CrossAttn, 7);
        assert!(!params.is_empty());
        let z = rand_map(33);
        let out = psg.forward(&z, &rand_map(34)).unwrap();
        // zero-init output projection: delta starts at zero
        assert_eq!(out.z_out.array(), z.array());
    }

    #[test]
    fn gating_is_asymmetric_for_generic_inputs() {
        let (psg, params) = build(PsgVariant::AsymGate, 8);
        // randomize the zero-init fusion output so the branch is active
        let t = &params.iter().find(|(n, _)| n == "psg.fuse.conv2.w").unwrap().1;
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        t.update_data(|d| d.mapv_inplace(|_| rng.random::<f64>() * 0.2 - 0.1));
        let a = rand_map(40);
        let b = rand_map(41);
        let ab = psg.forward(&a, &b).unwrap().z_out.array();
        let ba = psg.forward(&b, &a).unwrap().z_out.array();
        let max_diff = ab
            .iter()
            .zip(ba.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-6, "forward is symmetric: {max_diff}");
    }

    #[test]
    fn gate_monotonicity_suppresses_harder() {
        // raising the gate pre-activation pointwise must strictly shrink
        // |z_suppressed| wherever z_pos is nonzero
        let (psg, params) = build(PsgVariant::AsymGate, 9);
        set_param(&params, "psg.gate.conv1.w", 0.0);
        set_param(&params, "psg.gate.conv1.b", 0.0);
        set_param(&params, "psg.gate.conv2.w", 0.0);
        let z_pos = rand_map(50);
        let z_neg = rand_map(51);
        set_param(&params, "psg.gate.conv2.b", -1.0);
        let low = psg.forward(&z_pos, &z_neg).unwrap().z_suppressed.array();
        set_param(&params, "psg.gate.conv2.b", 1.5);
        let high = psg.forward(&z_pos, &z_neg).unwrap().z_suppressed.array();
        for ((l, h), p) in low.iter().zip(high.iter()).zip(z_pos.array().iter()) {
            if *p != 0.0 {
                assert!(h.abs() < l.abs());
            }
        }
    }

    #[test]
    fn energy_delta_zero_iff_fusion_silent() {
        let (psg, params) = build(PsgVariant::AsymGate, 10);
        let z_pos = rand_map(60);
        let z_neg = rand_map(61);
        let silent = psg.forward(&z_pos, &z_neg).unwrap();
        assert!(silent.energy_delta.array().iter().all(|v| *v == 0.0));
        set_param(&params, "psg.fuse.conv2.b", 0.3);
        let active = psg.forward(&z_pos, &z_neg).unwrap();
        assert!(active.energy_delta.array().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let (psg, _) = build(PsgVariant::AsymGate, 11);
        let a = rand_map(70);
        let b = Tensor::zeros(&[16, 8, 8]);
        assert!(matches!(psg.forward(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn all_variants_gradcheck_against_finite_differences() {
        for (variant, seed) in [
            (PsgVariant::AsymGate, 21u64),
            (PsgVariant::AnchorSuppressed, 22),
            (PsgVariant::Subtraction, 23),
            (PsgVariant::Concatenation, 24),
            (PsgVariant::CrossAttn, 25),
            (PsgVariant::None, 26),
        ] {
            let (psg, params) = build(variant, seed);
            // perturb zero-initialized heads so input gradients are live
            let mut rng = ChaCha20Rng::seed_from_u64(seed + 1000);
            for (name, t) in &params {
                if name.ends_with("fuse.conv2.w") || name.ends_with("xattn.out.w") {
                    t.update_data(|d| d.mapv_inplace(|_| rng.random::<f64>() * 0.4 - 0.2));
                }
            }
            let weights = ArrayD::from_shape_fn(IxDyn(&[16, 4, 4]), |_| rng.random::<f64>() - 0.5);
            let base_pos = ArrayD::from_shape_fn(IxDyn(&[16, 4, 4]), |_| rng.random::<f64>() - 0.5);
            let base_neg = ArrayD::from_shape_fn(IxDyn(&[16, 4, 4]), |_| rng.random::<f64>() - 0.5);
            let f = |zp: &ArrayD<f64>, zn: &ArrayD<f64>| {
                psg.forward(&Tensor::constant(zp.clone()), &Tensor::constant(zn.clone()))
                    .unwrap()
                    .z_out
                    .mul(&Tensor::constant(weights.clone()))
                    .sum()
                    .item()
            };
            let zp = Tensor::param(base_pos.clone());
            let zn = Tensor::param(base_neg.clone());
            let loss = psg
                .forward(&zp, &zn)
                .unwrap()
                .z_out
                .mul(&Tensor::constant(weights.clone()))
                .sum();
            loss.backward();
            let zeros = ArrayD::zeros(IxDyn(&[16, 4, 4]));
            let gp = zp.grad().unwrap_or_else(|| zeros.clone());
            let gn = zn.grad().unwrap_or(zeros);
            let h = 1e-6;
            for idx in (0..256).step_by(37) {
                let mut p1 = base_pos.clone();
                let mut p2 = base_pos.clone();
                *p1.iter_mut().nth(idx).unwrap() += h;
                *p2.iter_mut().nth(idx).unwrap() -= h;
                let numeric = (f(&p1, &base_neg) - f(&p2, &base_neg)) / (2.0 * h);
                let a = *gp.iter().nth(idx).unwrap();
                assert!(
                    (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8) < 1e-4
                        || (a - numeric).abs() < 1e-8,
                    "{variant:?} d/dz_pos at {idx}: {a} vs {numeric}"
                );
                let mut n1 = base_neg.clone();
                let mut n2 = base_neg.clone();
                *n1.iter_mut().nth(idx).unwrap() += h;
                *n2.iter_mut().nth(idx).unwrap() -= h;
                let numeric = (f(&base_pos, &n1) - f(&base_pos, &n2)) / (2.0 * h);
                let a = *gn.iter().nth(idx).unwrap();
                assert!(
                    (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8) < 1e-4
                        || (a - numeric).abs() < 1e-8,
                    "{variant:?} d/dz_neg at {idx}: {a} vs {numeric}"
                );
            }
        }
    }
}
