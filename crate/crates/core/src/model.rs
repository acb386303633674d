//! Full model assembly: backbone, self-prompt generator, frozen prompt
//! encoder, prompt-space gating, decoder, and the optional heads, wired
//! according to the configuration toggles.
//!
//! Two forward protocols exist. The intrinsic protocol synthesizes
//! prompts from the image itself; the null-prompt protocol bypasses
//! prompt generation entirely and feeds the encoded all-zero mask with no
//! sparse tokens (the deterministic prompt-absent baseline).

use crate::backbone::{Backbone, ImageEmbedding};
use crate::config::{EvalProtocol, ModelConfig};
use crate::decoder::{DecodeInputs, LateralHead, MaskDecoder, MaskPrediction, RefineHead};
use crate::error::{Error, Result};
use crate::lora::{strategy_sites, LoraAdapter, ParamPartition, SiteKind};
use crate::losses::{self, LossBreakdown, LossTerms};
use crate::nn::Init;
use crate::prompt_encoder::{EncodedPrompts, Polarity, PromptEncoder};
use crate::psg::Psg;
use crate::spg::{SelfPrompts, Spg};
use crate::tensor::Tensor;
use ndarray::{Array2, Array3};

pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub prompt_encoder: PromptEncoder,
    pub spg: Option<Spg>,
    pub psg: Option<Psg>,
    pub decoder: MaskDecoder,
    pub lateral: Option<LateralHead>,
    pub refine: Option<RefineHead>,
    params: Vec<(String, Tensor)>,
}

/// Everything one forward pass produced, kept as live tape nodes so the
/// losses can extend the graph.
pub struct ForwardOutput {
    pub embedding: ImageEmbedding,
    pub prompts: Option<SelfPrompts>,
    pub encoded: Option<EncodedPrompts>,
    pub prediction: MaskPrediction,
    /// Logit map for the auxiliary lateral penalty, `[1, S/4, S/4]`.
    pub lateral_energy: Option<Tensor>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Model> {
        let cfg = cfg.validated()?;
        if cfg.toggles.psg && !cfg.toggles.spg {
            return Err(Error::Config(
                "prompt-space gating requires the self-prompt generator".into(),
            ));
        }
        let d = cfg.model;
        let mut init = Init::new(cfg.seed);
        let backbone = Backbone::new(&mut init, &cfg);
        let prompt_encoder = PromptEncoder::new(&mut init, d.embed_dim);
        let spg = cfg.toggles.spg.then(|| {
            Spg::new(
                &mut init,
                d.embed_dim,
                d.heads,
                d.mlp_dim,
                d.sparse_slots,
                d.mask_tokens,
            )
        });
        let psg = cfg
            .toggles
            .psg
            .then(|| Psg::new(&mut init, d.embed_dim, cfg.psg_variant));
        let decoder = MaskDecoder::new(&mut init, d.embed_dim, d.heads, d.mlp_dim, d.mask_tokens);
        let lateral = cfg
            .toggles
            .lateral
            .then(|| LateralHead::new(&mut init, d.embed_dim, &[4, 8, 16]));
        let refine = cfg.toggles.refine.then(|| RefineHead::new(&mut init, d.embed_dim));

        let mut model = Model {
            backbone,
            prompt_encoder,
            spg,
            psg,
            decoder,
            lateral,
            refine,
            params: init.into_params(),
            cfg,
        };
        if model.cfg.lora.enabled {
            let (strategy, rank, alpha) = (
                model.cfg.lora.strategy,
                model.cfg.lora.rank,
                model.cfg.lora.alpha_value(),
            );
            model.inject_lora(strategy, rank, alpha)?;
        }
        Ok(model)
    }

    /// Attach low-rank adapters at the sites selected by `strategy`.
    /// Returns the number of adapters attached.
    pub fn inject_lora(
        &mut self,
        strategy: crate::config::LoraStrategy,
        rank: usize,
        alpha: f64,
    ) -> Result<usize> {
        if rank == 0 {
            return Err(Error::Config("lora rank must be >= 1".into()));
        }
        if self.backbone.has_adapters() {
            return Err(Error::State("adapters already attached".into()));
        }
        let dim = self.cfg.model.embed_dim;
        let sites = strategy_sites(strategy, self.cfg.model.num_blocks);
        let mut init = Init::new(self.cfg.seed);
        for site in &sites {
            let (d_in, d_out) = match site.kind {
                SiteKind::Qkv => (dim, 3 * dim),
                SiteKind::Out => (dim, dim),
            };
            let name = format!("backbone.blocks.{}.{}", site.block, site.kind.as_str());
            let adapter = LoraAdapter::new(&mut init, &name, *site, d_in, d_out, rank, alpha);
            self.backbone.attach(adapter)?;
        }
        self.params.extend(init.into_params());
        Ok(sites.len())
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find_map(|(n, t)| (n == name).then_some(t))
    }

    pub fn partition(&self) -> ParamPartition {
        ParamPartition::build(&self.params)
    }

    /// Protocol implied by the toggles: intrinsic prompting when the
    /// generator exists, the null-prompt baseline otherwise.
    pub fn training_protocol(&self) -> EvalProtocol {
        if self.cfg.toggles.spg {
            EvalProtocol::Intrinsic
        } else {
            EvalProtocol::NullPromptBaseline
        }
    }

    pub fn encode_image(&self, image: &Array3<f64>) -> Result<ImageEmbedding> {
        self.backbone.encode(image)
    }

    pub fn forward(&self, image: &Array3<f64>, protocol: EvalProtocol) -> Result<ForwardOutput> {
        let emb = self.encode_image(image)?;
        self.forward_from_embedding(emb, protocol)
    }

    pub fn forward_from_embedding(
        &self,
        emb: ImageEmbedding,
        protocol: EvalProtocol,
    ) -> Result<ForwardOutput> {
        match protocol {
            EvalProtocol::Intrinsic => {
                let spg = self.spg.as_ref().ok_or_else(|| {
                    Error::Config("intrinsic protocol requires the self-prompt generator".into())
                })?;
                let prompts = spg.generate(&emb.top)?;
                self.forward_from_prompts(emb, prompts)
            }
            EvalProtocol::NullPromptBaseline => self.forward_null(emb),
        }
    }

    /// Intrinsic path from an explicit prompt bundle (also the hook for
    /// prompt-injection probes).
    pub fn forward_from_prompts(
        &self,
        emb: ImageEmbedding,
        prompts: SelfPrompts,
    ) -> Result<ForwardOutput> {
        let z_pos = self.prompt_encoder.encode_dense(&prompts.p_pos)?;
        let z_neg = self.prompt_encoder.encode_dense(&prompts.p_neg)?;
        let u_pos = self.prompt_encoder.encode_sparse(&prompts.s_pos, Polarity::Pos)?;
        let u_neg = self.prompt_encoder.encode_sparse(&prompts.s_neg, Polarity::Neg)?;

        let (z, gated) = match &self.psg {
            Some(psg) => {
                let g = psg.forward(&z_pos, &z_neg)?;
                (g.z_out.clone(), Some(g))
            }
            None => (z_pos.clone(), None),
        };

        let t_prop = (!self.cfg.use_default_mask_tokens).then_some(&prompts.t_prop);
        let mut prediction = self.decoder.decode(&DecodeInputs {
            image_top: &emb.top,
            dense_condition: &z,
            u_pos: Some(&u_pos),
            u_neg: Some(&u_neg),
            t_prop,
        })?;
        prediction.gated = gated;

        let (prediction, lateral_energy) = self.apply_heads(&emb, &z, prediction)?;
        Ok(ForwardOutput {
            embedding: emb,
            prompts: Some(prompts),
            encoded: Some(EncodedPrompts { z_pos, z_neg, u_pos, u_neg }),
            prediction,
            lateral_energy,
        })
    }

    /// Deterministic prompt-absent baseline: encoded all-zero mask, no
    /// sparse tokens, the decoder's own mask tokens.
    fn forward_null(&self, emb: ImageEmbedding) -> Result<ForwardOutput> {
        let s = emb.top.shape();
        let z = self.prompt_encoder.null_dense(s[1], s[2]);
        let prediction = self.decoder.decode(&DecodeInputs {
            image_top: &emb.top,
            dense_condition: &z,
            u_pos: None,
            u_neg: None,
            t_prop: None,
        })?;
        let (prediction, lateral_energy) = self.apply_heads(&emb, &z, prediction)?;
        Ok(ForwardOutput {
            embedding: emb,
            prompts: None,
            encoded: None,
            prediction,
            lateral_energy,
        })
    }

    fn apply_heads(
        &self,
        emb: &ImageEmbedding,
        z: &Tensor,
        mut prediction: MaskPrediction,
    ) -> Result<(MaskPrediction, Option<Tensor>)> {
        let mut gated_stride4: Option<Tensor> = None;
        let mut lateral_energy = None;
        if let Some(lat) = &self.lateral {
            let gated = lat.gate(&emb.fpn_levels, &prediction.m_coarse);
            lateral_energy = Some(lat.energy_logits(&gated[0]));
            gated_stride4 = gated.into_iter().next();
        }
        if let Some(refine) = &self.refine {
            let feats = match &gated_stride4 {
                Some(g) => g.clone(),
                None => emb.fpn_levels[0].feat.clone(),
            };
            prediction.m_refined = refine.forward(&prediction.m_coarse, z, &feats)?;
        }
        Ok((prediction, lateral_energy))
    }

    /// Assemble the training objective for one sample.
    pub fn compute_losses(
        &self,
        out: &ForwardOutput,
        target: &Array2<f64>,
    ) -> Result<(Tensor, LossBreakdown)> {
        let spg_term = match &out.prompts {
            Some(p) => Some(losses::spg_loss(&p.p_pos, &p.p_neg, target)?),
            None => None,
        };
        let (coarse, coarse_components) = losses::mask_loss(&out.prediction.m_coarse, target)?;
        let (refined, refined_components) = if self.refine.is_some() {
            let (r, rc) = losses::mask_loss(&out.prediction.m_refined, target)?;
            (Some(r), rc)
        } else {
            (None, Default::default())
        };
        let lateral = match &out.lateral_energy {
            Some(energy) => {
                let es = energy.shape();
                let y_small = losses::resize_mask_nearest(target, es[1], es[2]);
                let y_dyn = ndarray::ArrayD::from_shape_vec(
                    ndarray::IxDyn(&[1, es[1], es[2]]),
                    y_small.iter().copied().collect(),
                )
                .unwrap();
                Some(energy.bce_with_logits_mean(&y_dyn))
            }
            None => None,
        };
        losses::total_loss(
            &LossTerms {
                spg: spg_term,
                mask_coarse: coarse,
                coarse_components,
                mask_refined: refined,
                refined_components,
                lateral,
            },
            &self.cfg.loss,
            self.refine.is_some(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{LoraStrategy, Toggles};
    use crate::datagen::{synth_sample, SynthConfig};
    use crate::lora::ParamGroup;

    fn desk_cfg() -> ModelConfig {
        ModelConfig::default()
    }

    fn sample() -> crate::datagen::Sample {
        let sc = SynthConfig {
            resolution: 64,
            delta: 0.5,
            coverage: (0.1, 0.3),
            seed: 21,
        };
        synth_sample(&sc, 0).unwrap()
    }

    #[test]
    fn full_forward_shapes() {
        let model = Model::new(desk_cfg()).unwrap();
        let s = sample();
        let out = model.forward(&s.image, EvalProtocol::Intrinsic).unwrap();
        assert_eq!(out.prediction.m_coarse.shape(), vec![1, 16, 16]);
        assert_eq!(out.prediction.m_refined.shape(), vec![1, 16, 16]);
        assert!(out.prediction.gated.is_some());
        assert!(out.lateral_energy.is_some());
        let encoded = out.encoded.as_ref().unwrap();
        assert_eq!(encoded.z_pos.shape(), vec![16, 4, 4]);
        assert_eq!(encoded.u_pos.shape(), vec![2, 16]);
    }

    #[test]
    fn null_protocol_runs_without_prompts() {
        let model = Model::new(desk_cfg()).unwrap();
        let s = sample();
        let out = model
            .forward(&s.image, EvalProtocol::NullPromptBaseline)
            .unwrap();
        assert!(out.prompts.is_none());
        assert!(out.encoded.is_none());
        assert_eq!(out.prediction.m_coarse.shape(), vec![1, 16, 16]);
    }

    #[test]
    fn table_lattice_configs_are_constructible_and_increasing() {
        let lattice = [
            Toggles { spg: false, psg: false, lateral: false, refine: false },
            Toggles { spg: true, psg: false, lateral: false, refine: false },
            Toggles { spg: true, psg: true, lateral: false, refine: false },
            Toggles { spg: true, psg: true, lateral: true, refine: false },
            Toggles { spg: true, psg: true, lateral: true, refine: true },
        ];
        let mut last = 0usize;
        for toggles in lattice {
            let mut cfg = desk_cfg();
            cfg.toggles = toggles;
            let model = Model::new(cfg).unwrap();
            let count = model.partition().trainable_count();
            assert!(count > last, "T-Param not strictly increasing: {count} after {last}");
            last = count;
            // forward-pass clean under the protocol the toggles imply
            let s = sample();
            model.forward(&s.image, model.training_protocol()).unwrap();
        }
    }

    #[test]
    fn partition_is_disjoint_and_exhaustive_for_all_toggles() {
        for bits in 0..16u32 {
            let toggles = Toggles {
                spg: bits & 1 != 0,
                psg: bits & 2 != 0,
                lateral: bits & 4 != 0,
                refine: bits & 8 != 0,
            };
            if toggles.psg && !toggles.spg {
                continue; // rejected combination
            }
            let mut cfg = desk_cfg();
            cfg.toggles = toggles;
            let model = Model::new(cfg).unwrap();
            let p = model.partition();
            let total = p.trainable.len() + p.frozen.len();
            assert_eq!(total, model.params().len());
            let t: std::collections::BTreeSet<_> = p.trainable.iter().collect();
            let f: std::collections::BTreeSet<_> = p.frozen.iter().collect();
            assert!(t.is_disjoint(&f));
            // the prompt encoder group is always entirely frozen
            assert!(p
                .frozen
                .iter()
                .any(|n| n.starts_with("prompt_encoder.")));
            assert!(!p.trainable.iter().any(|n| n.starts_with("prompt_encoder.")));
        }
    }

    #[test]
    fn refine_off_removes_the_group_entirely() {
        let mut cfg = desk_cfg();
        cfg.toggles.refine = false;
        let model = Model::new(cfg).unwrap();
        assert_eq!(model.partition().group_count(ParamGroup::Refine), 0);
    }

    #[test]
    fn psg_without_spg_is_rejected() {
        let mut cfg = desk_cfg();
        cfg.toggles.spg = false;
        cfg.toggles.psg = true;
        assert!(matches!(Model::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn injection_counts_per_strategy() {
        let mut cfg = desk_cfg();
        cfg.lora.enabled = false;
        for (strategy, expected) in [
            (LoraStrategy::Full, 8usize),
            (LoraStrategy::QkvOnly, 4),
            (LoraStrategy::Deep, 4),
            (LoraStrategy::Shallow, 4),
            (LoraStrategy::Sparse50, 4),
        ] {
            let mut model = Model::new(cfg.clone()).unwrap();
            assert_eq!(model.inject_lora(strategy, 4, 4.0).unwrap(), expected);
            assert!(matches!(
                model.inject_lora(strategy, 4, 4.0),
                Err(Error::State(_))
            ));
        }
    }

    #[test]
    fn losses_cover_enabled_terms() {
        let model = Model::new(desk_cfg()).unwrap();
        let s = sample();
        let out = model.forward(&s.image, EvalProtocol::Intrinsic).unwrap();
        let (total, breakdown) = model.compute_losses(&out, &s.mask).unwrap();
        assert!(total.item() > 0.0 && total.item().is_finite());
        assert!(breakdown.l_spg > 0.0);
        assert!(breakdown.l_mask_coarse > 0.0);
        // zero-init refine head: refined loss equals coarse loss exactly
        assert_eq!(breakdown.l_mask_refined, breakdown.l_mask_coarse);
        assert!(breakdown.l_lateral > 0.0);
        let expected = breakdown.l_spg
            + breakdown.l_mask_coarse
            + breakdown.l_mask_refined
            + crate::losses::LATERAL_WEIGHT * breakdown.l_lateral;
        assert!((breakdown.total - expected).abs() < 1e-12);
    }

    #[test]
    fn default_token_mode_is_wired_through() {
        let mut cfg = desk_cfg();
        cfg.use_default_mask_tokens = true;
        let with_default = Model::new(cfg).unwrap();
        let with_prop = Model::new(desk_cfg()).unwrap();
        let s = sample();
        let a = with_default
            .forward(&s.image, EvalProtocol::Intrinsic)
            .unwrap()
            .prediction
            .m_coarse
            .array();
        let b = with_prop
            .forward(&s.image, EvalProtocol::Intrinsic)
            .unwrap()
            .prediction
            .m_coarse
            .array();
        let diff = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(diff > 1e-9, "withholding propagated tokens changed nothing");
    }
}
