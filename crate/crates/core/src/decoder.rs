//! Task-specific mask decoder (trained from scratch) plus the optional
//! lateral-inhibition regularizer and the zero-initialized pixel
//! refinement head.
//!
//! The decoder follows the familiar prompt-conditioned layout: the dense
//! condition is added elementwise to the image embedding, a short token
//! sequence `[iou; mask tokens; U+; U-]` runs through a two-way
//! transformer against the image, transposed convolutions upscale the
//! image features 4x, and per-token hypernetwork MLPs produce the mask
//! logits. The propagated tokens from the self-prompt generator replace
//! the decoder's own mask tokens unless explicitly withheld.

use crate::backbone::{map_to_tokens, tokens_to_map, FpnLevel};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_pe_2d, Conv2d, ConvTranspose2d, Init, LayerNorm2d, Mlp3};
use crate::psg::GatedCondition;
use crate::tensor::{concat, resize_bilinear, Tensor};
use crate::twoway::TwoWayTransformer;

/// Decoder output bundle.
pub struct MaskPrediction {
    /// Coarse logits `[1, 4H, 4W]` (always mask token 0).
    pub m_coarse: Tensor,
    /// Refined logits; the same node as `m_coarse` when refinement is off.
    pub m_refined: Tensor,
    /// `[K_m, 4H, 4W]`
    pub per_token_masks: Tensor,
    /// `[K_m]`, interface-compatible IoU prediction (unsupervised).
    pub iou_pred: Tensor,
    /// Gating internals when prompt-space gating ran.
    pub gated: Option<GatedCondition>,
}

pub struct DecodeInputs<'a> {
    pub image_top: &'a Tensor,
    pub dense_condition: &'a Tensor,
    pub u_pos: Option<&'a Tensor>,
    pub u_neg: Option<&'a Tensor>,
    /// Propagated output tokens; `None` falls back to the decoder's own
    /// learnable mask tokens.
    pub t_prop: Option<&'a Tensor>,
}

pub struct MaskDecoder {
    iou_token: Tensor,
    default_mask_tokens: Tensor,
    transformer: TwoWayTransformer,
    up1: ConvTranspose2d,
    up_norm: LayerNorm2d,
    up2: ConvTranspose2d,
    hyper: Vec<Mlp3>,
    iou_head: Mlp3,
    dim: usize,
    mask_token_count: usize,
}

impl MaskDecoder {
    pub fn new(
        init: &mut Init,
        dim: usize,
        heads: usize,
        mlp_dim: usize,
        mask_tokens: usize,
    ) -> MaskDecoder {
        MaskDecoder {
            iou_token: init.trunc_normal("decoder.iou_token", &[1, dim], 0.02),
            default_mask_tokens: init.trunc_normal("decoder.mask_tokens", &[mask_tokens, dim], 0.02),
            transformer: TwoWayTransformer::new(init, "decoder.transformer", 2, dim, heads, mlp_dim),
            up1: ConvTranspose2d::new(init, "decoder.up1", dim, dim / 2, 2, 2),
            up_norm: LayerNorm2d::new(init, "decoder.up_norm", dim / 2),
            up2: ConvTranspose2d::new(init, "decoder.up2", dim / 2, dim / 4, 2, 2),
            hyper: (0..mask_tokens)
                .map(|i| Mlp3::new(init, &format!("decoder.hyper.{i}"), dim, dim, dim / 4))
                .collect(),
            iou_head: Mlp3::new(init, "decoder.iou_head", dim, dim, mask_tokens),
            dim,
            mask_token_count: mask_tokens,
        }
    }

    /// Expected token sequence length for `k` sparse slots per branch:
    /// `1 + K_m + 2k`.
    pub fn token_sequence_len(&self, sparse_slots: usize) -> usize {
        1 + self.mask_token_count + 2 * sparse_slots
    }

    pub fn decode(&self, inputs: &DecodeInputs) -> Result<MaskPrediction> {
        let s = inputs.image_top.shape();
        if s.len() != 3 || s[0] != self.dim {
            return Err(Error::Contract(format!(
                "image embedding must be [{}, H, W], got {s:?}",
                self.dim
            )));
        }
        if inputs.dense_condition.shape() != s {
            return Err(Error::Contract(format!(
                "dense condition shape {:?} must match image embedding {s:?}",
                inputs.dense_condition.shape()
            )));
        }
        let (h, w) = (s[1], s[2]);

        let mask_tokens = match inputs.t_prop {
            Some(t) => {
                if t.shape() != vec![self.mask_token_count, self.dim] {
                    return Err(Error::Contract(format!(
                        "propagated tokens must be [{}, {}], got {:?}",
                        self.mask_token_count,
                        self.dim,
                        t.shape()
                    )));
                }
                t.clone()
            }
            None => self.default_mask_tokens.clone(),
        };
        let mut parts: Vec<Tensor> = vec![self.iou_token.clone(), mask_tokens];
        for sparse in [inputs.u_pos, inputs.u_neg].into_iter().flatten() {
            let ss = sparse.shape();
            if ss.len() != 2 || ss[1] != self.dim {
                return Err(Error::Contract(format!(
                    "sparse condition must be [K, {}], got {ss:?}",
                    self.dim
                )));
            }
            parts.push(sparse.clone());
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let tokens = concat(0, &refs);

        // dense condition enters by elementwise addition to the embedding
        let src = inputs.image_top.add(inputs.dense_condition);
        let keys = map_to_tokens(&src);
        let key_pe = Tensor::constant(sinusoidal_pe_2d(self.dim, h, w));
        let (q, k) = self.transformer.forward(&tokens, &keys, &tokens, &key_pe);

        let src_map = tokens_to_map(&k, self.dim, h, w);
        let up = self.up_norm.forward(&self.up1.forward(&src_map)).gelu();
        let up = self.up2.forward(&up).gelu(); // [C/4, 4H, 4W]
        let up_flat = up.reshape(&[self.dim / 4, 4 * h * 4 * w]);

        let mut token_masks = Vec::with_capacity(self.mask_token_count);
        for (i, head) in self.hyper.iter().enumerate() {
            let state = q.slice(0, 1 + i, 1);
            let weight = head.forward(&state); // [1, C/4]
            token_masks.push(weight.matmul(&up_flat).reshape(&[1, 4 * h, 4 * w]));
        }
        let mask_refs: Vec<&Tensor> = token_masks.iter().collect();
        let per_token_masks = concat(0, &mask_refs);
        let m_coarse = per_token_masks.slice(0, 0, 1);

        let iou_state = q.slice(0, 0, 1);
        let iou_pred = self.iou_head.forward(&iou_state).reshape(&[self.mask_token_count]);

        Ok(MaskPrediction {
            m_refined: m_coarse.clone(),
            m_coarse,
            per_token_masks,
            iou_pred,
            gated: None,
        })
    }
}

/// Lateral inhibition: the detached coarse mask soft-gates every feature
/// pyramid level, followed by a per-level 1x1 projection. The stride-4
/// output feeds the refinement head and the auxiliary energy penalty.
pub struct LateralHead {
    convs: Vec<(usize, Conv2d)>,
}

impl LateralHead {
    pub fn new(init: &mut Init, dim: usize, strides: &[usize]) -> LateralHead {
        LateralHead {
            convs: strides
                .iter()
                .map(|s| (*s, Conv2d::new(init, &format!("lateral.conv{s}"), dim, dim, 1, 1, 0)))
                .collect(),
        }
    }

    /// Gate each level with `sigmoid(M_c)` resized to its resolution.
    /// `m_coarse` is detached first: no gradient reaches the decoder
    /// through this path.
    pub fn gate(&self, fpn: &[FpnLevel], m_coarse: &Tensor) -> Vec<Tensor> {
        let probe = m_coarse.detach().sigmoid();
        fpn.iter()
            .zip(&self.convs)
            .map(|(level, (stride, conv))| {
                debug_assert_eq!(level.stride, *stride);
                let ls = level.feat.shape();
                let g = resize_bilinear(&probe, ls[1], ls[2]);
                conv.forward(&level.feat.mul(&g))
            })
            .collect()
    }

    /// Channel-mean logit map of the gated stride-4 level, `[1, S/4, S/4]`.
    pub fn energy_logits(&self, gated_stride4: &Tensor) -> Tensor {
        gated_stride4.mean_axis_keep(0)
    }
}

/// Pixel refinement: fuses coarse mask, dense condition, and gated image
/// features through a bottleneck; the final 1x1 conv is zero-initialized
/// so `M == M_c` at creation.
pub struct RefineHead {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl RefineHead {
    pub fn new(init: &mut Init, dim: usize) -> RefineHead {
        RefineHead {
            conv1: Conv2d::new(init, "refine.conv1", 1 + 2 * dim, dim / 4, 3, 1, 1),
            conv2: Conv2d::new_zeroed(init, "refine.conv2", dim / 4, 1, 1, 1, 0),
        }
    }

    /// `m_coarse: [1, 4H, 4W]`, `z: [C, H, W]`, `feats: [C, 4H, 4W]`.
    pub fn forward(&self, m_coarse: &Tensor, z: &Tensor, feats: &Tensor) -> Result<Tensor> {
        let ms = m_coarse.shape();
        let fs = feats.shape();
        if ms.len() != 3 || ms[0] != 1 {
            return Err(Error::Contract(format!("coarse mask must be [1, h, w], got {ms:?}")));
        }
        if fs[1] != ms[1] || fs[2] != ms[2] {
            return Err(Error::Contract(format!(
                "refine features {fs:?} must match mask grid {ms:?}"
            )));
        }
        let z_up = resize_bilinear(z, ms[1], ms[2]);
        let fused = concat(0, &[m_coarse, &z_up, feats]);
        let r = self.conv2.forward(&self.conv1.forward(&fused).gelu());
        Ok(m_coarse.add(&r))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Tensor::constant(ArrayD::from_shape_fn(IxDyn(shape), |_| {
            rng.random::<f64>() - 0.5
        }))
    }

    fn build(seed: u64) -> (MaskDecoder, Vec<(String, Tensor)>) {
        let mut init = Init::new(seed);
        let dec = MaskDecoder::new(&mut init, 16, 4, 32, 4);
        (dec, init.into_params())
    }

    #[test]
    fn token_sequence_arithmetic() {
        let (dec, _) = build(1);
        assert_eq!(dec.token_sequence_len(2), 9);
        assert_eq!(dec.token_sequence_len(0), 5);
    }

    #[test]
    fn coarse_mask_shape_and_determinism() {
        let (dec, _) = build(2);
        let e = rand_tensor(&[16, 4, 4], 3);
        let z = rand_tensor(&[16, 4, 4], 4);
        let u_pos = rand_tensor(&[2, 16], 5);
        let u_neg = rand_tensor(&[2, 16], 6);
        let t_prop = rand_tensor(&[4, 16], 7);
        let inputs = DecodeInputs {
            image_top: &e,
            dense_condition: &z,
            u_pos: Some(&u_pos),
            u_neg: Some(&u_neg),
            t_prop: Some(&t_prop),
        };
        let out1 = dec.decode(&inputs).unwrap();
        let out2 = dec.decode(&inputs).unwrap();
        assert_eq!(out1.m_coarse.shape(), vec![1, 16, 16]);
        assert_eq!(out1.per_token_masks.shape(), vec![4, 16, 16]);
        assert_eq!(out1.iou_pred.shape(), vec![4]);
        assert_eq!(out1.m_coarse.array(), out2.m_coarse.array());
        // coarse mask is always token 0's map
        let stacked = out1.per_token_masks.array();
        let coarse = out1.m_coarse.array();
        for r in 0..16 {
            for c in 0..16 {
                assert_eq!(stacked[IxDyn(&[0, r, c])], coarse[IxDyn(&[0, r, c])]);
            }
        }
    }

    #[test]
    fn default_tokens_change_the_mask() {
        let (dec, _) = build(8);
        let e = rand_tensor(&[16, 4, 4], 9);
        let z = rand_tensor(&[16, 4, 4], 10);
        let t_prop = rand_tensor(&[4, 16], 11);
        let with_prop = dec
            .decode(&DecodeInputs {
                image_top: &e,
                dense_condition: &z,
                u_pos: None,
                u_neg: None,
                t_prop: Some(&t_prop),
            })
            .unwrap();
        let with_default = dec
            .decode(&DecodeInputs {
                image_top: &e,
                dense_condition: &z,
                u_pos: None,
                u_neg: None,
                t_prop: None,
            })
            .unwrap();
        let max_diff = with_prop
            .m_coarse
            .array()
            .iter()
            .zip(with_default.m_coarse.array().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-6, "token substitution had no effect");
    }

    #[test]
    fn wrong_token_count_is_contract_error() {
        let (dec, _) = build(12);
        let e = rand_tensor(&[16, 4, 4], 13);
        let z = rand_tensor(&[16, 4, 4], 14);
        let bad = rand_tensor(&[3, 16], 15);
        assert!(matches!(
            dec.decode(&DecodeInputs {
                image_top: &e,
                dense_condition: &z,
                u_pos: None,
                u_neg: None,
                t_prop: Some(&bad),
            }),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn lateral_gate_scales_and_detaches() {
        let mut init = Init::new(20);
        let lat = LateralHead::new(&mut init, 16, &[4, 8, 16]);
        // identity projections isolate the gating arithmetic
        for (name, t) in init.params() {
            if name.starts_with("lateral.conv") && name.ends_with(".w") {
                t.update_data(|d| {
                    d.fill(0.0);
                    for c in 0..16 {
                        d[IxDyn(&[c, c, 0, 0])] = 1.0;
                    }
                });
            }
        }
        let fpn = vec![
            FpnLevel { stride: 4, feat: rand_tensor(&[16, 16, 16], 21) },
            FpnLevel { stride: 8, feat: rand_tensor(&[16, 8, 8], 22) },
            FpnLevel { stride: 16, feat: rand_tensor(&[16, 4, 4], 23) },
        ];
        // saturated positive logits: gate ~ 1, features pass through
        let big = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 16, 16]), 50.0));
        let gated = lat.gate(&fpn, &big);
        for (g, level) in gated.iter().zip(&fpn) {
            let (a, b) = (g.array(), level.feat.array());
            let rel = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y).abs() / y.abs().max(1e-9))
                .fold(0.0f64, f64::max);
            assert!(rel < 1e-9, "saturated gate should be transparent: {rel}");
        }
        // zero logits: exactly half amplitude
        let zero = Tensor::zeros(&[1, 16, 16]);
        let gated = lat.gate(&fpn, &zero);
        for (g, level) in gated.iter().zip(&fpn) {
            let (a, b) = (g.array(), level.feat.array());
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - 0.5 * y).abs() < 1e-12);
            }
        }
        // detach contract: no gradient flows back into the coarse mask
        let m = Tensor::param(ArrayD::from_elem(IxDyn(&[1, 16, 16]), 0.2));
        let gated = lat.gate(&fpn, &m);
        gated[0].sum().backward();
        assert!(m.grad().is_none(), "lateral path leaked gradient into M_c");
    }

    #[test]
    fn refine_is_identity_at_init_and_responds_to_features() {
        let mut init = Init::new(30);
        let refine = RefineHead::new(&mut init, 16);
        let m = rand_tensor(&[1, 16, 16], 31);
        let z = rand_tensor(&[16, 4, 4], 32);
        let feats = rand_tensor(&[16, 16, 16], 33);
        let out = refine.forward(&m, &z, &feats).unwrap();
        assert_eq!(out.array(), m.array());

        // unlock the zero-init conv: perturbing features must now change
        // M while M_c is untouched by construction
        init.params()
            .iter()
            .find(|(n, _)| n == "refine.conv2.w")
            .unwrap()
            .1
            .update_data(|d| d.fill(0.05));
        let out1 = refine.forward(&m, &z, &feats).unwrap();
        let out2 = refine.forward(&m, &z, &feats.add_scalar(0.5)).unwrap();
        let diff = out1
            .array()
            .iter()
            .zip(out2.array().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff > 1e-9);
    }

    #[test]
    fn refine_gradcheck_against_finite_differences() {
        let mut init = Init::new(40);
        let refine = RefineHead::new(&mut init, 16);
        let params = init.into_params();
        let conv2_w = &params.iter().find(|(n, _)| n == "refine.conv2.w").unwrap().1;
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        conv2_w.update_data(|d| d.mapv_inplace(|_| rng.random::<f64>() * 0.2 - 0.1));

        let m = rand_tensor(&[1, 8, 8], 42);
        let z = rand_tensor(&[16, 2, 2], 43);
        let feats = rand_tensor(&[16, 8, 8], 44);
        let weights = ArrayD::from_shape_fn(IxDyn(&[1, 8, 8]), |_| rng.random::<f64>() - 0.5);

        let functional = || {
            refine
                .forward(&m, &z, &feats)
                .unwrap()
                .mul(&Tensor::constant(weights.clone()))
                .sum()
        };
        functional().backward();
        let conv1_w = &params.iter().find(|(n, _)| n == "refine.conv1.w").unwrap().1;
        let analytic = conv1_w.grad().unwrap();
        let h = 1e-6;
        let base = conv1_w.array();
        for idx in (0..base.len()).step_by(131) {
            let mut plus = base.clone();
            let mut minus = base.clone();
            *plus.iter_mut().nth(idx).unwrap() += h;
            *minus.iter_mut().nth(idx).unwrap() -= h;
            conv1_w.set_data(plus);
            let fp = functional().item();
            conv1_w.set_data(minus);
            let fm = functional().item();
            conv1_w.set_data(base.clone());
            let numeric = (fp - fm) / (2.0 * h);
            let a = *analytic.iter().nth(idx).unwrap();
            assert!(
                (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8) < 1e-4,
                "refine fd mismatch at {idx}: {a} vs {numeric}"
            );
        }
    }
}
