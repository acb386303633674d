//! Training loop: decoupled-weight-decay Adam over the trainable
//! partition, JSON-lines step logging, divergence abort with a last-good
//! checkpoint, and a hard frozen-parameter assertion at the end of every
//! run.

use crate::checkpoint::{frozen_hash, Checkpoint, OptimizerState, TensorRecord};
use crate::config::RunConfig;
use crate::datagen::{self, Sample, SynthConfig};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::Model;
use crate::tensor::Tensor;
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// AdamW over named tensors.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
    params: Vec<(String, Tensor)>,
}

impl AdamW {
    pub fn new(params: Vec<(String, Tensor)>, lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> AdamW {
        AdamW {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            params,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn step(&mut self) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, param) in &self.params {
            let Some(grad) = param.grad() else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            m.zip_mut_with(&grad, |mv, gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            v.zip_mut_with(&grad, |vv, gv| *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv);
            let (lr, eps, wd) = (self.lr, self.eps, self.weight_decay);
            param.update_data(|data| {
                ndarray::Zip::from(data)
                    .and(&*m)
                    .and(&*v)
                    .for_each(|d, mv, vv| {
                        let m_hat = mv / bc1;
                        let v_hat = vv / bc2;
                        *d -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *d);
                    });
            });
            param.zero_grad();
        }
        for (_, param) in &self.params {
            param.zero_grad();
        }
    }

    pub fn state(&self) -> OptimizerState {
        let record = |map: &BTreeMap<String, ArrayD<f64>>| {
            map.iter()
                .map(|(k, a)| {
                    (
                        k.clone(),
                        TensorRecord {
                            shape: a.shape().to_vec(),
                            data: a.iter().copied().collect(),
                        },
                    )
                })
                .collect()
        };
        OptimizerState {
            step: self.step,
            m: record(&self.m),
            v: record(&self.v),
        }
    }

    pub fn load_state(&mut self, state: &OptimizerState) -> Result<()> {
        let restore = |records: &BTreeMap<String, TensorRecord>| -> Result<BTreeMap<String, ArrayD<f64>>> {
            records
                .iter()
                .map(|(k, r)| {
                    ArrayD::from_shape_vec(IxDyn(&r.shape), r.data.clone())
                        .map(|a| (k.clone(), a))
                        .map_err(|e| Error::Serialization(e.to_string()))
                })
                .collect()
        };
        self.step = state.step;
        self.m = restore(&state.m)?;
        self.v = restore(&state.v)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
struct StepLog<'a> {
    step: u64,
    epoch: usize,
    sample: &'a str,
    #[serde(flatten)]
    loss: &'a LossBreakdown,
}

pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub initial_total: f64,
    pub final_total: f64,
    pub steps: u64,
}

/// Training data: explicit directory if configured, synthetic otherwise.
pub fn training_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    match &cfg.data.train_dir {
        Some(dir) => datagen::load_dataset(Path::new(dir), cfg.model.image_size, None),
        None => {
            let sc = SynthConfig::from_section(&cfg.synth, cfg.model.image_size, cfg.seed);
            datagen::synth_dataset(&sc, cfg.synth.n_train)
        }
    }
}

/// Train a fresh model under `cfg`, writing a JSON-lines log and the
/// final checkpoint under `cfg.output.dir`.
pub fn run_train(cfg: &RunConfig) -> Result<TrainResult> {
    let cfg = cfg.clone().validated()?;
    let samples = training_samples(&cfg)?;
    if samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut model = Model::new(cfg.model_config()?)?;
    let out_dir = PathBuf::from(&cfg.output.dir);
    std::fs::create_dir_all(&out_dir)?;
    let result = train_model(&mut model, &cfg, &samples, &out_dir)?;
    Ok(result)
}

/// Inner loop over an existing model (ablations reuse it).
pub fn train_model(
    model: &mut Model,
    cfg: &RunConfig,
    samples: &[Sample],
    out_dir: &Path,
) -> Result<TrainResult> {
    let hash_at_start = frozen_hash(model);
    let partition = model.partition();
    let trainable: Vec<(String, Tensor)> = model
        .params()
        .iter()
        .filter(|(name, _)| partition.trainable.contains(name))
        .cloned()
        .collect();
    let mut optimizer = AdamW::new(
        trainable,
        cfg.optimizer.lr,
        cfg.optimizer.beta1,
        cfg.optimizer.beta2,
        cfg.optimizer.weight_decay,
    );

    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    let ckpt_path = out_dir.join("checkpoint.json");

    let protocol = model.training_protocol();
    let mut initial_total = None;
    let mut final_total = 0.0;
    let mut last_good: Option<Checkpoint> = None;
    let max_steps = if cfg.train.max_steps == 0 {
        u64::MAX
    } else {
        cfg.train.max_steps as u64
    };

    'epochs: for epoch in 0..cfg.train.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        if cfg.train.shuffle {
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
            order.shuffle(&mut rng);
        }
        for batch in order.chunks(cfg.train.batch_size) {
            if optimizer.step_count() >= max_steps {
                break 'epochs;
            }
            // mean loss over the batch; gradients accumulate on the tape
            let mut batch_total: Option<Tensor> = None;
            let mut breakdown = LossBreakdown::default();
            let scale = 1.0 / batch.len() as f64;
            let mut sample_id = String::new();
            for &idx in batch {
                let sample = &samples[idx];
                sample_id = sample.id.clone();
                let out = model.forward(&sample.image, protocol)?;
                let (loss, bd) = model.compute_losses(&out, &sample.mask)?;
                let scaled = loss.scale(scale);
                batch_total = Some(match batch_total {
                    Some(acc) => acc.add(&scaled),
                    None => scaled,
                });
                breakdown = bd;
            }
            let total = batch_total.expect("non-empty batch");
            let total_value = total.item();
            if !total_value.is_finite() {
                if let Some(ckpt) = last_good {
                    ckpt.save(&ckpt_path)?;
                }
                return Err(Error::Diverged(format!(
                    "non-finite loss at step {}; last good checkpoint at {}",
                    optimizer.step_count(),
                    ckpt_path.display()
                )));
            }
            total.backward();
            optimizer.step();

            if initial_total.is_none() {
                initial_total = Some(total_value);
            }
            final_total = total_value;
            let entry = StepLog {
                step: optimizer.step_count(),
                epoch,
                sample: &sample_id,
                loss: &breakdown,
            };
            serde_json::to_writer(&mut log, &entry)?;
            log.write_all(b"\n")?;

            if optimizer.step_count() % 50 == 0 {
                last_good = Some(Checkpoint::capture(
                    model,
                    optimizer.step_count(),
                    &hash_at_start,
                    None,
                ));
            }
        }
    }
    log.flush()?;

    // hard frozen contract: bytes unchanged after any amount of training
    let hash_at_end = frozen_hash(model);
    if hash_at_end != hash_at_start {
        return Err(Error::FrozenViolation(format!(
            "frozen parameter hash changed: {hash_at_start} -> {hash_at_end}"
        )));
    }

    let checkpoint = Checkpoint::capture(
        model,
        optimizer.step_count(),
        &hash_at_start,
        Some(optimizer.state()),
    );
    checkpoint.save(&ckpt_path)?;
    Ok(TrainResult {
        checkpoint,
        checkpoint_path: ckpt_path,
        log_path,
        initial_total: initial_total.unwrap_or(0.0),
        final_total,
        steps: optimizer.step_count(),
    })
}
