//! Low-rank adaptation: adapter math, the five injection strategies over
//! the backbone's attention projection sites, and trainable/frozen
//! partitioning of the whole parameter set.

use crate::config::LoraStrategy;
use crate::error::{Error, Result};
use crate::nn::Init;
use crate::tensor::Tensor;
use ndarray::{ArrayD, Ix2};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SiteKind {
    Qkv,
    Out,
}

impl SiteKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SiteKind::Qkv => "qkv",
            SiteKind::Out => "out",
        }
    }
}

/// A named attention-projection site a LoRA adapter can attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct LoraSite {
    pub block: usize,
    pub kind: SiteKind,
}

/// Additive low-rank delta `scale * B A x` next to a frozen base weight.
pub struct LoraAdapter {
    /// `[rank, d_in]`
    pub a: Tensor,
    /// `[d_out, rank]`, zero-initialized so the delta starts at exactly zero.
    pub b: Tensor,
    pub alpha: f64,
    pub rank: usize,
    pub site: LoraSite,
}

impl LoraAdapter {
    pub fn new(
        init: &mut Init,
        name: &str,
        site: LoraSite,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
    ) -> LoraAdapter {
        assert!(rank >= 1, "lora rank must be >= 1");
        LoraAdapter {
            a: init.normal(&format!("{name}.lora.a"), &[rank, d_in], 1.0 / rank as f64),
            b: init.zeros(&format!("{name}.lora.b"), &[d_out, rank]),
            alpha,
            rank,
            site,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Low-rank delta for `x: [N, d_in] -> [N, d_out]`.
    pub fn delta(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.a.t()).matmul(&self.b.t()).scale(self.scale())
    }
}

/// Adapter-path forward: `y = x W^T + b + scale * (x A^T) B^T`.
pub fn lora_forward(x: &Tensor, w: &Tensor, bias: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(Error::Contract(format!(
            "lora_forward shapes: x {xs:?} vs w {ws:?}"
        )));
    }
    if adapter.a.shape()[1] != ws[1] || adapter.b.shape()[0] != ws[0] {
        return Err(Error::Contract(format!(
            "adapter factors {:?}/{:?} do not match weight {ws:?}",
            adapter.a.shape(),
            adapter.b.shape()
        )));
    }
    Ok(x.matmul(&w.t()).add(bias).add(&adapter.delta(x)))
}

/// Merged weight `W' = W + scale * B A` as a plain array (no tape).
pub fn merge_lora(w: &ArrayD<f64>, adapter: &LoraAdapter) -> Result<ArrayD<f64>> {
    let w2 = w
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Contract("merge_lora expects a rank-2 weight".into()))?;
    let a = adapter.a.array().into_dimensionality::<Ix2>().unwrap();
    let b = adapter.b.array().into_dimensionality::<Ix2>().unwrap();
    if b.shape()[0] != w2.shape()[0] || a.shape()[1] != w2.shape()[1] {
        return Err(Error::Contract(format!(
            "merge_lora factor shapes {:?} x {:?} vs weight {:?}",
            b.shape(),
            a.shape(),
            w2.shape()
        )));
    }
    let delta = b.dot(&a).mapv(|v| v * adapter.scale());
    Ok((&w2 + &delta).into_dyn())
}

/// Sites selected by each injection strategy, over `num_blocks` blocks.
pub fn strategy_sites(strategy: LoraStrategy, num_blocks: usize) -> Vec<LoraSite> {
    let both = |block: usize| {
        [
            LoraSite { block, kind: SiteKind::Qkv },
            LoraSite { block, kind: SiteKind::Out },
        ]
    };
    match strategy {
        LoraStrategy::Full => (0..num_blocks).flat_map(both).collect(),
        LoraStrategy::QkvOnly => (0..num_blocks)
            .map(|block| LoraSite { block, kind: SiteKind::Qkv })
            .collect(),
        LoraStrategy::Deep => (num_blocks / 2..num_blocks).flat_map(both).collect(),
        LoraStrategy::Shallow => (0..num_blocks / 2).flat_map(both).collect(),
        LoraStrategy::Sparse50 => (0..num_blocks).step_by(2).flat_map(both).collect(),
    }
}

// ---------------------------------------------------------------------------
// parameter partition
// ---------------------------------------------------------------------------

/// Module group a named parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    BackboneLora,
    BackboneBase,
    PromptEncoder,
    Spg,
    Psg,
    Decoder,
    Lateral,
    Refine,
}

impl ParamGroup {
    pub fn classify(name: &str) -> ParamGroup {
        if name.contains(".lora.") {
            ParamGroup::BackboneLora
        } else if name.starts_with("backbone.") {
            ParamGroup::BackboneBase
        } else if name.starts_with("prompt_encoder.") {
            ParamGroup::PromptEncoder
        } else if name.starts_with("spg.") {
            ParamGroup::Spg
        } else if name.starts_with("psg.") {
            ParamGroup::Psg
        } else if name.starts_with("lateral.") {
            ParamGroup::Lateral
        } else if name.starts_with("refine.") {
            ParamGroup::Refine
        } else {
            ParamGroup::Decoder
        }
    }

    pub fn is_trainable(&self) -> bool {
        !matches!(self, ParamGroup::BackboneBase | ParamGroup::PromptEncoder)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ParamGroup::BackboneLora => "backbone_lora",
            ParamGroup::BackboneBase => "backbone_base",
            ParamGroup::PromptEncoder => "prompt_encoder",
            ParamGroup::Spg => "spg",
            ParamGroup::Psg => "psg",
            ParamGroup::Decoder => "decoder",
            ParamGroup::Lateral => "lateral",
            ParamGroup::Refine => "refine",
        }
    }
}

/// Disjoint, exhaustive split of named parameters into trainable and
/// frozen sets, with per-group scalar counts.
#[derive(Debug, Clone)]
pub struct ParamPartition {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    /// group -> number of scalar parameters
    pub counts: BTreeMap<ParamGroup, usize>,
}

impl ParamPartition {
    pub fn build(params: &[(String, Tensor)]) -> ParamPartition {
        let mut trainable = Vec::new();
        let mut frozen = Vec::new();
        let mut counts: BTreeMap<ParamGroup, usize> = BTreeMap::new();
        for (name, tensor) in params {
            let group = ParamGroup::classify(name);
            *counts.entry(group).or_default() += tensor.numel();
            if group.is_trainable() {
                trainable.push(name.clone());
            } else {
                frozen.push(name.clone());
            }
        }
        ParamPartition { trainable, frozen, counts }
    }

    pub fn trainable_count(&self) -> usize {
        self.counts
            .iter()
            .filter(|(g, _)| g.is_trainable())
            .map(|(_, n)| n)
            .sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.counts
            .iter()
            .filter(|(g, _)| !g.is_trainable())
            .map(|(_, n)| n)
            .sum()
    }

    pub fn group_count(&self, group: ParamGroup) -> usize {
        self.counts.get(&group).copied().unwrap_or(0)
    }
}
