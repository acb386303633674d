//! Ablation sweeps: train and evaluate each row configuration of an axis
//! on shared data, averaging metrics over the requested model seeds.
//!
//! Axes mirror the design-space study: the cumulative core-component
//! lattice, the gating operator and residual anchoring, propagated-token
//! substitution, and the LoRA injection strategy.

use crate::config::{LoraStrategy, PsgVariant, RunConfig};
use crate::datagen::{self, Sample, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::run_eval;
use crate::model::Model;
use crate::train::train_model;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Core,
    PsgOperator,
    Tokens,
    Lora,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<AblationAxis> {
        match s {
            "core" => Ok(AblationAxis::Core),
            "psg_operator" => Ok(AblationAxis::PsgOperator),
            "tokens" => Ok(AblationAxis::Tokens),
            "lora" => Ok(AblationAxis::Lora),
            other => Err(Error::Config(format!(
                "unknown ablation axis `{other}` (core, psg_operator, tokens, lora)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub t_param: usize,
    pub mae: f64,
    pub f_w: f64,
    pub s_m: f64,
    pub e_phi: f64,
    pub mae_std: f64,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,t_param,mae,f_w,s_m,e_phi,mae_std\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.label, r.t_param, r.mae, r.f_w, r.s_m, r.e_phi, r.mae_std
            ));
        }
        out
    }
}

impl std::fmt::Display for AblationTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<24} {:>9} {:>8} {:>8} {:>8} {:>8}",
            "config", "T-Param", "MAE", "F^w", "S_m", "E_phi"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<24} {:>9} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                r.label, r.t_param, r.mae, r.f_w, r.s_m, r.e_phi
            )?;
        }
        Ok(())
    }
}

fn axis_rows(axis: AblationAxis, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut rows = Vec::new();
    let mut push = |label: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        rows.push((label.to_string(), cfg));
    };
    match axis {
        AblationAxis::Core => {
            push("baseline", &|c| {
                c.toggles.spg = false;
                c.toggles.psg = false;
                c.toggles.lateral = false;
                c.toggles.refine = false;
            });
            push("+spg", &|c| {
                c.toggles.spg = true;
                c.toggles.psg = false;
                c.toggles.lateral = false;
                c.toggles.refine = false;
            });
            push("+psg", &|c| {
                c.toggles.spg = true;
                c.toggles.psg = true;
                c.toggles.lateral = false;
                c.toggles.refine = false;
            });
            push("+lateral", &|c| {
                c.toggles.spg = true;
                c.toggles.psg = true;
                c.toggles.lateral = true;
                c.toggles.refine = false;
            });
            push("+refine", &|c| {
                c.toggles.spg = true;
                c.toggles.psg = true;
                c.toggles.lateral = true;
                c.toggles.refine = true;
            });
        }
        AblationAxis::PsgOperator => {
            for variant in [
                PsgVariant::None,
                PsgVariant::Subtraction,
                PsgVariant::Concatenation,
                PsgVariant::CrossAttn,
                PsgVariant::AnchorSuppressed,
                PsgVariant::AsymGate,
            ] {
                let label = format!("psg_{}", variant_name(variant));
                let mut cfg = base.clone();
                cfg.psg.variant = variant;
                rows.push((label, cfg));
            }
        }
        AblationAxis::Tokens => {
            push("no_psg_refine_kept", &|c| c.toggles.psg = false);
            push("default_mask_tokens", &|c| c.use_default_mask_tokens = true);
            push("full", &|_| {});
        }
        AblationAxis::Lora => {
            for strategy in [
                LoraStrategy::QkvOnly,
                LoraStrategy::Deep,
                LoraStrategy::Shallow,
                LoraStrategy::Sparse50,
                LoraStrategy::Full,
            ] {
                let label = format!("lora_{strategy:?}").to_lowercase();
                let mut cfg = base.clone();
                cfg.lora.strategy = strategy;
                rows.push((label, cfg));
            }
        }
    }
    rows
}

fn variant_name(v: PsgVariant) -> &'static str {
    match v {
        PsgVariant::AsymGate => "asym_gate",
        PsgVariant::AnchorSuppressed => "anchor_suppressed",
        PsgVariant::None => "none",
        PsgVariant::Subtraction => "subtraction",
        PsgVariant::Concatenation => "concatenation",
        PsgVariant::CrossAttn => "cross_attn",
    }
}

/// Shared train/test data for the sweep: explicit directories when
/// configured, otherwise synthetic sets on disjoint index ranges.
pub fn ablation_data(base: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if let (Some(train), Some(eval)) = (&base.data.train_dir, &base.data.eval_dir) {
        return Ok((
            datagen::load_dataset(Path::new(train), base.model.image_size, None)?,
            datagen::load_dataset(Path::new(eval), base.model.image_size, None)?,
        ));
    }
    let sc = SynthConfig::from_section(&base.synth, base.model.image_size, base.seed);
    let train = datagen::synth_dataset(&sc, base.synth.n_train)?;
    let n_eval = if base.synth.n_eval == 0 { 8 } else { base.synth.n_eval };
    let eval = (0..n_eval as u64)
        .map(|i| datagen::synth_sample(&sc, base.synth.n_train as u64 + i))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, eval))
}

/// Train and evaluate one configuration for one model seed.
pub fn train_eval_once(
    cfg: &RunConfig,
    seed: u64,
    train: &[Sample],
    test: &[Sample],
    out_dir: &Path,
) -> Result<(usize, crate::metrics::MetricReport)> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let cfg = cfg.validated()?;
    let mut model = Model::new(cfg.model_config()?)?;
    let t_param = model.partition().trainable_count();
    train_model(&mut model, &cfg, train, out_dir)?;
    let report = run_eval(&model, test, model.training_protocol())?;
    Ok((t_param, report))
}

/// Run a full ablation axis. Rows share the data; metrics are averaged
/// over `seeds`.
pub fn run_ablation(base: &RunConfig, axis: AblationAxis, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let (train, test) = ablation_data(base)?;
    let out_root = Path::new(&base.output.dir);
    let mut rows = Vec::new();
    for (label, cfg) in axis_rows(axis, base) {
        let mut maes = Vec::new();
        let mut fws = Vec::new();
        let mut sms = Vec::new();
        let mut ephis = Vec::new();
        let mut t_param = 0;
        for &seed in seeds {
            let out_dir = out_root.join(format!("ablate_{label}_seed{seed}"));
            std::fs::create_dir_all(&out_dir)?;
            let (tp, report) = train_eval_once(&cfg, seed, &train, &test, &out_dir)?;
            t_param = tp;
            maes.push(report.mae);
            fws.push(report.f_w);
            sms.push(report.s_m);
            ephis.push(report.e_phi);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mae_mean = mean(&maes);
        let mae_std = (maes.iter().map(|v| (v - mae_mean) * (v - mae_mean)).sum::<f64>()
            / maes.len() as f64)
            .sqrt();
        rows.push(AblationRow {
            label,
            t_param,
            mae: mae_mean,
            f_w: mean(&fws),
            s_m: mean(&sms),
            e_phi: mean(&ephis),
            mae_std,
            seeds: seeds.to_vec(),
        });
    }
    Ok(AblationTable { axis, rows })
}
