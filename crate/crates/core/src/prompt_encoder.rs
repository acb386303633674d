//! Strictly frozen prompt encoder: a stride-4 downsampling stack embeds
//! dense prompt logits into `[C, H, W]`, and frozen polarity type
//! embeddings turn continuous sparse tokens into encoded sparse
//! conditions.
//!
//! "Frozen" is a training contract, not a graph property: gradients flow
//! through these layers to the prompt logits, but the optimizer never
//! touches any parameter in the `prompt_encoder` group, and the training
//! loop hashes the group's bytes to enforce it.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, LayerNorm2d};
use crate::tensor::Tensor;
use std::cell::RefCell;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Pos,
    Neg,
}

/// Dense and sparse prompt embeddings produced by the frozen encoder.
pub struct EncodedPrompts {
    pub z_pos: Tensor,
    pub z_neg: Tensor,
    pub u_pos: Tensor,
    pub u_neg: Tensor,
}

pub struct PromptEncoder {
    conv1: Conv2d,
    ln1: LayerNorm2d,
    conv2: Conv2d,
    ln2: LayerNorm2d,
    conv3: Conv2d,
    type_pos: Tensor,
    type_neg: Tensor,
    dim: usize,
    /// `(h, w) -> encoding of the all-zero logit map`, computed once.
    null_cache: RefCell<HashMap<(usize, usize), ndarray::ArrayD<f64>>>,
}

impl PromptEncoder {
    pub fn new(init: &mut Init, dim: usize) -> PromptEncoder {
        let c4 = dim / 4;
        let c2 = dim / 2;
        PromptEncoder {
            conv1: Conv2d::new(init, "prompt_encoder.conv1", 1, c4, 2, 2, 0),
            ln1: LayerNorm2d::new(init, "prompt_encoder.ln1", c4),
            conv2: Conv2d::new(init, "prompt_encoder.conv2", c4, c2, 2, 2, 0),
            ln2: LayerNorm2d::new(init, "prompt_encoder.ln2", c2),
            conv3: Conv2d::new(init, "prompt_encoder.conv3", c2, dim, 1, 1, 0),
            type_pos: init.trunc_normal("prompt_encoder.type_pos", &[1, dim], 0.02),
            type_neg: init.trunc_normal("prompt_encoder.type_neg", &[1, dim], 0.02),
            dim,
            null_cache: RefCell::new(HashMap::new()),
        }
    }

    /// Embed continuous dense logits `[1, 4H, 4W] -> [C, H, W]`. Logits
    /// are consumed as-is: no binarization, no temperature.
    pub fn encode_dense(&self, p: &Tensor) -> Result<Tensor> {
        let s = p.shape();
        if s.len() != 3 || s[0] != 1 || s[1] % 4 != 0 || s[2] % 4 != 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::Contract(format!(
                "dense prompt must be [1, 4H, 4W], got {s:?}"
            )));
        }
        if !p.all_finite() {
            return Err(Error::Input("dense prompt contains non-finite values".into()));
        }
        let h = self.ln1.forward(&self.conv1.forward(p)).gelu();
        let h = self.ln2.forward(&self.conv2.forward(&h)).gelu();
        Ok(self.conv3.forward(&h))
    }

    /// Encoding of the all-zero logit map at `[C, h, w]`, cached. Used by
    /// the deterministic null-prompt protocol.
    pub fn null_dense(&self, h: usize, w: usize) -> Tensor {
        if let Some(cached) = self.null_cache.borrow().get(&(h, w)) {
            return Tensor::constant(cached.clone());
        }
        let zeros = Tensor::zeros(&[1, 4 * h, 4 * w]);
        let encoded = self.encode_dense(&zeros).expect("zero map is valid").array();
        self.null_cache.borrow_mut().insert((h, w), encoded.clone());
        Tensor::constant(encoded)
    }

    /// `U = S + type_embed[polarity]`, broadcast over rows.
    pub fn encode_sparse(&self, s: &Tensor, polarity: Polarity) -> Result<Tensor> {
        let shape = s.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::Contract(format!(
                "sparse tokens must be [K, {}], got {shape:?}",
                self.dim
            )));
        }
        if !s.all_finite() {
            return Err(Error::Input("sparse tokens contain non-finite values".into()));
        }
        let embed = match polarity {
            Polarity::Pos => &self.type_pos,
            Polarity::Neg => &self.type_neg,
        };
        Ok(s.add(embed))
    }
}
