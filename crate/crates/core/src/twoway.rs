//! Two-way transformer: alternating token<->image attention blocks with a
//! final token-to-image attention, shared by the self-prompt generator
//! and the mask decoder.

use crate::nn::{Attention, Init, LayerNorm, Mlp};
use crate::tensor::Tensor;

/// One two-way block: query self-attention, query-to-key cross-attention,
/// query MLP, then key-to-query cross-attention, each with residual and
/// LayerNorm. Positional encodings are re-added to queries and keys at
/// every attention.
pub struct TwoWayLayer {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_token_to_image: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    cross_image_to_token: Attention,
    norm4: LayerNorm,
}

impl TwoWayLayer {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize, mlp_dim: usize) -> TwoWayLayer {
        TwoWayLayer {
            self_attn: Attention::new(init, &format!("{name}.self_attn"), dim, heads),
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), dim),
            cross_token_to_image: Attention::new(init, &format!("{name}.cross_ti"), dim, heads),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(init, &format!("{name}.mlp"), dim, mlp_dim),
            norm3: LayerNorm::new(init, &format!("{name}.norm3"), dim),
            cross_image_to_token: Attention::new(init, &format!("{name}.cross_it"), dim, heads),
            norm4: LayerNorm::new(init, &format!("{name}.norm4"), dim),
        }
    }

    /// `queries: [N, C]`, `keys: [M, C]`; output shapes equal input shapes.
    pub fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        query_pe: &Tensor,
        key_pe: &Tensor,
    ) -> (Tensor, Tensor) {
        let q = queries.add(query_pe);
        let attn = self.self_attn.forward(&q, &q, queries);
        let queries = self.norm1.forward(&queries.add(&attn));

        let q = queries.add(query_pe);
        let k = keys.add(key_pe);
        let attn = self.cross_token_to_image.forward(&q, &k, keys);
        let queries = self.norm2.forward(&queries.add(&attn));

        let queries = self.norm3.forward(&queries.add(&self.mlp.forward(&queries)));

        let q = queries.add(query_pe);
        let k = keys.add(key_pe);
        let attn = self.cross_image_to_token.forward(&k, &q, &queries);
        let keys = self.norm4.forward(&keys.add(&attn));

        (queries, keys)
    }
}

/// Stack of two-way layers plus a final token-to-image attention.
pub struct TwoWayTransformer {
    pub layers: Vec<TwoWayLayer>,
    final_attn: Attention,
    norm_final: LayerNorm,
}

impl TwoWayTransformer {
    pub fn new(
        init: &mut Init,
        name: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        mlp_dim: usize,
    ) -> TwoWayTransformer {
        TwoWayTransformer {
            layers: (0..depth)
                .map(|i| TwoWayLayer::new(init, &format!("{name}.layers.{i}"), dim, heads, mlp_dim))
                .collect(),
            final_attn: Attention::new(init, &format!("{name}.final_attn"), dim, heads),
            norm_final: LayerNorm::new(init, &format!("{name}.norm_final"), dim),
        }
    }

    pub fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        query_pe: &Tensor,
        key_pe: &Tensor,
    ) -> (Tensor, Tensor) {
        let mut q = queries.clone();
        let mut k = keys.clone();
        for layer in &self.layers {
            let (nq, nk) = layer.forward(&q, &k, query_pe, key_pe);
            q = nq;
            k = nk;
        }
        let qq = q.add(query_pe);
        let kk = k.add(key_pe);
        let attn = self.final_attn.forward(&qq, &kk, &k);
        let q = self.norm_final.forward(&q.add(&attn));
        (q, k)
    }
}
