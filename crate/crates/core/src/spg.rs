//! Self-prompt generator: a dual-branch query-driven two-way transformer
//! that distills the image embedding into complementary dense prompt
//! logits, continuous sparse prompt tokens, and propagated output tokens
//! for the decoder.
//!
//! One shared trunk runs over a single concatenated query set; the first
//! half of the queries drives the positive branch, the second half the
//! negative branch. Dense logits come from a hypernetwork head per
//! branch: the branch's first mask-token state is projected to a weight
//! vector whose inner product with 4x-upsampled key features yields the
//! per-pixel logit.

use crate::backbone::{map_to_tokens, tokens_to_map};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_pe_2d, Conv2d, Init, LayerNorm2d, Mlp3};
use crate::tensor::{resize_bilinear, Tensor};
use crate::twoway::TwoWayTransformer;

/// The generator's output bundle.
pub struct SelfPrompts {
    /// Dense logits `[1, 4H, 4W]`, real-valued and unbounded.
    pub p_pos: Tensor,
    pub p_neg: Tensor,
    /// Continuous sparse tokens `[K, C]`.
    pub s_pos: Tensor,
    pub s_neg: Tensor,
    /// Propagated output tokens `[K_m, C]`.
    pub t_prop: Tensor,
}

impl SelfPrompts {
    /// Assemble a bundle from plain arrays (test probes, prompt
    /// injection).
    pub fn from_arrays(
        p_pos: ndarray::ArrayD<f64>,
        p_neg: ndarray::ArrayD<f64>,
        s_pos: ndarray::ArrayD<f64>,
        s_neg: ndarray::ArrayD<f64>,
        t_prop: ndarray::ArrayD<f64>,
    ) -> SelfPrompts {
        SelfPrompts {
            p_pos: Tensor::param(p_pos),
            p_neg: Tensor::param(p_neg),
            s_pos: Tensor::param(s_pos),
            s_neg: Tensor::param(s_neg),
            t_prop: Tensor::param(t_prop),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Pos,
    Neg,
}

pub struct Spg {
    /// `[2 (K + K_m), C]` learnable queries; they double as the query
    /// positional encoding.
    queries: Tensor,
    trunk: TwoWayTransformer,
    up_conv1: Conv2d,
    up_norm: LayerNorm2d,
    up_conv2: Conv2d,
    hyper_pos: Mlp3,
    hyper_neg: Mlp3,
    sparse_slots: usize,
    mask_tokens: usize,
    dim: usize,
}

impl Spg {
    pub fn new(
        init: &mut Init,
        dim: usize,
        heads: usize,
        mlp_dim: usize,
        sparse_slots: usize,
        mask_tokens: usize,
    ) -> Spg {
        let n = 2 * (sparse_slots + mask_tokens);
        Spg {
            queries: init.trunc_normal("spg.queries", &[n, dim], 0.02),
            trunk: TwoWayTransformer::new(init, "spg.trunk", 2, dim, heads, mlp_dim),
            up_conv1: Conv2d::new(init, "spg.up.conv1", dim, dim / 2, 3, 1, 1),
            up_norm: LayerNorm2d::new(init, "spg.up.norm", dim / 2),
            up_conv2: Conv2d::new(init, "spg.up.conv2", dim / 2, dim / 4, 3, 1, 1),
            hyper_pos: Mlp3::new(init, "spg.hyper_pos", dim, dim, dim / 4),
            hyper_neg: Mlp3::new(init, "spg.hyper_neg", dim, dim, dim / 4),
            sparse_slots,
            mask_tokens,
            dim,
        }
    }

    pub fn query_count(&self) -> usize {
        2 * (self.sparse_slots + self.mask_tokens)
    }

    /// Bilinear x2, conv, then x2 again: `[C, H, W] -> [C/4, 4H, 4W]`.
    fn upscale_keys(&self, keys_map: &Tensor) -> Tensor {
        let s = keys_map.shape();
        let (h, w) = (s[1], s[2]);
        let x = resize_bilinear(keys_map, 2 * h, 2 * w);
        let x = self.up_norm.forward(&self.up_conv1.forward(&x)).gelu();
        let x = resize_bilinear(&x, 4 * h, 4 * w);
        self.up_conv2.forward(&x).gelu()
    }

    fn project(&self, branch: Branch, token_state: &Tensor, feats: &Tensor) -> Tensor {
        let hyper = match branch {
            Branch::Pos => &self.hyper_pos,
            Branch::Neg => &self.hyper_neg,
        };
        let s = feats.shape();
        let (c4, h4, w4) = (s[0], s[1], s[2]);
        let weight = hyper.forward(token_state); // [1, C/4]
        weight
            .matmul(&feats.reshape(&[c4, h4 * w4]))
            .reshape(&[1, h4, w4])
    }

    /// Per-branch dense head: upsampled key features projected by the
    /// token's hypernetwork weight. `token_state: [1, C]`,
    /// `keys_map: [C, H, W] -> [1, 4H, 4W]`.
    pub fn dense_head(&self, branch: Branch, token_state: &Tensor, keys_map: &Tensor) -> Tensor {
        let feats = self.upscale_keys(keys_map);
        self.project(branch, token_state, &feats)
    }

    /// Run the generator over the image embedding `[C, H, W]`.
    pub fn generate(&self, e_top: &Tensor) -> Result<SelfPrompts> {
        let s = e_top.shape();
        if s.len() != 3 || s[0] != self.dim {
            return Err(Error::Contract(format!(
                "image embedding must be [{}, H, W], got {s:?}",
                self.dim
            )));
        }
        if !e_top.all_finite() {
            return Err(Error::Input("image embedding contains non-finite values".into()));
        }
        let (h, w) = (s[1], s[2]);
        let keys = map_to_tokens(e_top);
        let key_pe = Tensor::constant(sinusoidal_pe_2d(self.dim, h, w));
        let (q, k) = self.trunk.forward(&self.queries, &keys, &self.queries, &key_pe);

        // query layout: [pos sparse K][pos mask K_m][neg sparse K][neg mask K_m]
        let (ks, km) = (self.sparse_slots, self.mask_tokens);
        let s_pos = q.slice(0, 0, ks);
        let t_prop = q.slice(0, ks, km);
        let s_neg = q.slice(0, ks + km, ks);
        let neg_mask = q.slice(0, 2 * ks + km, km);

        let keys_map = tokens_to_map(&k, self.dim, h, w);
        let feats = self.upscale_keys(&keys_map);
        let p_pos = self.project(Branch::Pos, &t_prop.slice(0, 0, 1), &feats);
        let p_neg = self.project(Branch::Neg, &neg_mask.slice(0, 0, 1), &feats);

        Ok(SelfPrompts { p_pos, p_neg, s_pos, s_neg, t_prop })
    }
}
