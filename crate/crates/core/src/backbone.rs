//! Miniature hierarchical image encoder: stride-16 patch embedding, two
//! stages of windowless transformer blocks separated by a stride-2
//! pooling, and a lightweight top-down neck emitting feature maps at
//! strides 4, 8, and 16. Every block exposes named `qkv` and `out`
//! projection sites for low-rank adapters.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraSite, SiteKind};
use crate::nn::{
    merge_heads, sinusoidal_pe_2d, split_heads, Conv2d, Init, LayerNorm, LayerNorm2d, Linear, Mlp,
    BACKBONE_STD,
};
use crate::tensor::{avg_pool2, resize_bilinear, Tensor};
use ndarray::Array3;

/// Backbone output: the top embedding at 1/16 resolution plus the
/// three-level feature pyramid.
pub struct ImageEmbedding {
    /// `[C, H, W]` with `H = W = input/16`.
    pub top: Tensor,
    /// Strides 4, 8, 16 in that order.
    pub fpn_levels: Vec<FpnLevel>,
    pub input_resolution: (usize, usize),
}

pub struct FpnLevel {
    pub stride: usize,
    pub feat: Tensor,
}

/// Pre-norm transformer block with a fused qkv projection and optional
/// LoRA adapters on the qkv and out sites.
pub struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    out_proj: Linear,
    norm2: LayerNorm,
    mlp: Mlp,
    heads: usize,
    dim: usize,
    pub qkv_lora: Option<LoraAdapter>,
    pub out_lora: Option<LoraAdapter>,
}

impl Block {
    fn new(init: &mut Init, name: &str, dim: usize, heads: usize, mlp_dim: usize) -> Block {
        // backbone projections pin truncated-normal std 0.02
        Block {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), dim),
            qkv: Linear::with_std(init, &format!("{name}.qkv"), dim, 3 * dim, BACKBONE_STD),
            out_proj: Linear::with_std(init, &format!("{name}.out"), dim, dim, BACKBONE_STD),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), dim),
            mlp: Mlp::with_std(init, &format!("{name}.mlp"), dim, mlp_dim, BACKBONE_STD),
            heads,
            dim,
            qkv_lora: None,
            out_lora: None,
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let h = self.norm1.forward(x);
        let mut qkv = self.qkv.forward(&h);
        if let Some(adapter) = &self.qkv_lora {
            qkv = qkv.add(&adapter.delta(&h));
        }
        let q = qkv.slice(1, 0, self.dim);
        let k = qkv.slice(1, self.dim, self.dim);
        let v = qkv.slice(1, 2 * self.dim, self.dim);

        let dh = self.dim / self.heads;
        let qh = split_heads(&q, self.heads);
        let kh = split_heads(&k, self.heads);
        let vh = split_heads(&v, self.heads);
        let scores = qh
            .batch_matmul(&kh.permute(&[0, 2, 1]))
            .scale(1.0 / (dh as f64).sqrt());
        let ctx = scores.softmax_last().batch_matmul(&vh);
        let merged = merge_heads(&ctx, self.dim);
        let mut attn_out = self.out_proj.forward(&merged);
        if let Some(adapter) = &self.out_lora {
            attn_out = attn_out.add(&adapter.delta(&merged));
        }
        let x = x.add(&attn_out);
        let h2 = self.norm2.forward(&x);
        x.add(&self.mlp.forward(&h2))
    }
}

pub struct Backbone {
    patch: Conv2d,
    pub blocks: Vec<Block>,
    lat16: Conv2d,
    lat32: Conv2d,
    out8: Conv2d,
    out4: Conv2d,
    norm16: LayerNorm2d,
    norm8: LayerNorm2d,
    norm4: LayerNorm2d,
    dim: usize,
}

impl Backbone {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Backbone {
        let d = &cfg.model;
        let c = d.embed_dim;
        let conv = |init: &mut Init, name: &str, cin: usize, k: usize, stride: usize| {
            Conv2d::with_std(init, name, cin, c, k, stride, 0, BACKBONE_STD)
        };
        Backbone {
            patch: conv(init, "backbone.patch", 3, 16, 16),
            blocks: (0..d.num_blocks)
                .map(|i| Block::new(init, &format!("backbone.blocks.{i}"), c, d.heads, d.mlp_dim))
                .collect(),
            lat16: conv(init, "backbone.neck.lat16", c, 1, 1),
            lat32: conv(init, "backbone.neck.lat32", c, 1, 1),
            out8: conv(init, "backbone.neck.out8", c, 1, 1),
            out4: conv(init, "backbone.neck.out4", c, 1, 1),
            // channel-wise norms keep the pyramid at unit scale so
            // positional encodings do not drown the content downstream
            norm16: LayerNorm2d::new(init, "backbone.neck.norm16", c),
            norm8: LayerNorm2d::new(init, "backbone.neck.norm8", c),
            norm4: LayerNorm2d::new(init, "backbone.neck.norm4", c),
            dim: c,
        }
    }

    /// All LoRA attachment sites: `(block, {qkv, out})` per block.
    pub fn lora_sites(&self) -> Vec<LoraSite> {
        (0..self.blocks.len())
            .flat_map(|block| {
                [
                    LoraSite { block, kind: SiteKind::Qkv },
                    LoraSite { block, kind: SiteKind::Out },
                ]
            })
            .collect()
    }

    pub fn has_adapters(&self) -> bool {
        self.blocks
            .iter()
            .any(|b| b.qkv_lora.is_some() || b.out_lora.is_some())
    }

    pub fn attach(&mut self, adapter: LoraAdapter) -> Result<()> {
        let block = self
            .blocks
            .get_mut(adapter.site.block)
            .ok_or_else(|| Error::Config(format!("no block {}", adapter.site.block)))?;
        let slot = match adapter.site.kind {
            SiteKind::Qkv => &mut block.qkv_lora,
            SiteKind::Out => &mut block.out_lora,
        };
        if slot.is_some() {
            return Err(Error::State(format!(
                "adapter already attached at block {} site {}",
                adapter.site.block,
                adapter.site.kind.as_str()
            )));
        }
        *slot = Some(adapter);
        Ok(())
    }

    /// Encode an image `[3, S, S]` with values in `[0, 1]`.
    pub fn encode(&self, image: &Array3<f64>) -> Result<ImageEmbedding> {
        let (ch, s_h, s_w) = image.dim();
        if ch != 3 {
            return Err(Error::Input(format!("expected 3 channels, got {ch}")));
        }
        if s_h % 16 != 0 || s_w % 16 != 0 || s_h == 0 || s_w == 0 {
            return Err(Error::Config(format!(
                "input dims {s_h}x{s_w} must be positive multiples of 16"
            )));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("image contains non-finite values".into()));
        }
        let (h, w) = (s_h / 16, s_w / 16);
        let c = self.dim;

        let x = Tensor::constant(image.clone().into_dyn());
        let mut tokens = map_to_tokens(&self.patch.forward(&x));
        tokens = tokens.add(&Tensor::constant(sinusoidal_pe_2d(c, h, w)));

        let half = self.blocks.len() / 2;
        for block in &self.blocks[..half] {
            tokens = block.forward(&tokens);
        }
        let stage1 = tokens_to_map(&tokens, c, h, w);

        let pooled = avg_pool2(&stage1);
        let (h2, w2) = (pooled.shape()[1], pooled.shape()[2]);
        let mut tokens2 = map_to_tokens(&pooled);
        tokens2 = tokens2.add(&Tensor::constant(sinusoidal_pe_2d(c, h2, w2)));
        for block in &self.blocks[half..] {
            tokens2 = block.forward(&tokens2);
        }
        let stage2 = tokens_to_map(&tokens2, c, h2, w2);

        // top-down neck
        let top = self.norm16.forward(
            &self
                .lat16
                .forward(&stage1)
                .add(&resize_bilinear(&self.lat32.forward(&stage2), h, w)),
        );
        let level8 = self
            .norm8
            .forward(&self.out8.forward(&resize_bilinear(&top, s_h / 8, s_w / 8)));
        let level4 = self
            .norm4
            .forward(&self.out4.forward(&resize_bilinear(&level8, s_h / 4, s_w / 4)));

        Ok(ImageEmbedding {
            top: top.clone(),
            fpn_levels: vec![
                FpnLevel { stride: 4, feat: level4 },
                FpnLevel { stride: 8, feat: level8 },
                FpnLevel { stride: 16, feat: top },
            ],
            input_resolution: (s_h, s_w),
        })
    }
}

/// `[C, H, W] -> [H*W, C]`
pub fn map_to_tokens(map: &Tensor) -> Tensor {
    let s = map.shape();
    map.reshape(&[s[0], s[1] * s[2]]).permute(&[1, 0])
}

/// `[H*W, C] -> [C, H, W]`
pub fn tokens_to_map(tokens: &Tensor, c: usize, h: usize, w: usize) -> Tensor {
    tokens.permute(&[1, 0]).reshape(&[c, h, w])
}
