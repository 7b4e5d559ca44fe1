//! Training loop: batching, augmentation, learning-rate schedule, gradient
//! accumulation, optimizer steps, validation metrics, and checkpointing.

pub mod adam;
pub mod augment;
pub mod loss;
pub mod metrics;

use std::io::Write;
use std::path::Path;

use adapt_tensor::Real;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::encoder::Mode;
use crate::model::{AdaptModel, ModelError, Setting};
use crate::scene::Scene;
use adam::Adam;
use augment::augment_scene;
use metrics::{MetricAccumulator, MetricReport};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training aborted at step {step}: non-finite loss{}", match .op {
        Some(op) => format!(" (first non-finite value produced by op {op:?})"),
        None => String::new(),
    })]
    NonFinite { step: usize, op: Option<String> },
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("log io: {0}")]
    Io(#[from] std::io::Error),
}

/// Parameter precision for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

fn default_batch_size() -> usize {
    64
}
fn default_epochs() -> usize {
    36
}
fn default_anneal_factor() -> f64 {
    0.15
}
fn default_milestones() -> [f64; 2] {
    [0.7, 0.9]
}
fn default_scale_range() -> [f64; 2] {
    [0.75, 1.25]
}
fn default_agent_drop() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Base learning rate; when absent, 1e-4 in the single-agent setting and
    /// 2e-4 in the multi-agent setting.
    pub base_lr: Option<f64>,
    pub anneal_factor: f64,
    /// Fractions of total steps at which the rate is multiplied by the
    /// anneal factor (boundary inclusive).
    pub anneal_milestones: [f64; 2],
    pub augment: bool,
    pub scale_range: [f64; 2],
    pub agent_drop: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Per-epoch progress lines on standard error.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            base_lr: None,
            anneal_factor: default_anneal_factor(),
            anneal_milestones: default_milestones(),
            augment: default_true(),
            scale_range: default_scale_range(),
            agent_drop: default_agent_drop(),
            seed: 0,
            precision: Precision::default(),
            verbose: default_true(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: &str| Err(TrainError::Config(msg.into()));
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.epochs == 0 {
            return fail("epochs must be positive");
        }
        if let Some(lr) = self.base_lr {
            if lr.is_nan() || lr <= 0.0 {
                return fail("base_lr must be positive");
            }
        }
        if !(self.anneal_factor > 0.0 && self.anneal_factor < 1.0) {
            return fail("anneal_factor must lie in (0, 1)");
        }
        let [m1, m2] = self.anneal_milestones;
        if m1.is_nan() || m2.is_nan() || m1 >= m2 {
            return fail("anneal milestones must be strictly increasing");
        }
        if !(0.0 < self.scale_range[0] && self.scale_range[0] <= self.scale_range[1]) {
            return fail("scale_range must satisfy 0 < lo <= hi");
        }
        if !(0.0..1.0).contains(&self.agent_drop) {
            return fail("agent_drop must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn resolved_lr(&self, setting: Setting) -> f64 {
        self.base_lr.unwrap_or(match setting {
            Setting::SingleAgent => 1e-4,
            Setting::MultiAgent => 2e-4,
        })
    }
}

/// Piecewise-constant schedule: `base` before the first milestone,
/// `base·factor` from it (inclusive), `base·factor²` from the second.
pub fn lr_at(step: usize, total_steps: usize, base: f64, factor: f64, milestones: [f64; 2]) -> f64 {
    let s = step as f64;
    let t = total_steps as f64;
    if s >= milestones[1] * t {
        base * factor * factor
    } else if s >= milestones[0] * t {
        base * factor
    } else {
        base
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic 90/10 split by scene index hash: returns (train, val)
/// index lists.
pub fn val_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for i in 0..n {
        if splitmix64(i as u64).is_multiple_of(10) {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

/// Evaluate a frozen model over scenes with ground-truth futures,
/// aggregating per-agent metrics.
pub fn evaluate<T: Real>(
    model: &AdaptModel<T>,
    scenes: &[Scene],
) -> Result<MetricReport, ModelError> {
    let mut acc = MetricAccumulator::new();
    for scene in scenes {
        for pred in model.predict(scene)? {
            if let Some(gt) = scene.future.get(&pred.agent_id) {
                acc.add(&pred.trajectories, &pred.scores, gt);
            }
        }
    }
    Ok(acc.report())
}

/// Progress counters returned by the loop (and fed back in on resume).
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainProgress {
    pub epochs_done: usize,
    pub global_step: usize,
}

/// Run epochs `progress.epochs_done .. cfg.epochs`. Writes one JSON line per
/// optimizer step (`{step, lr, loss, l_end, l_traj, l_cls}`) plus one per
/// validation pass (`{epoch, val}`) to `log`; saves a checkpoint (with
/// optimizer state) to `ckpt_path` after every epoch when given.
/// `stop_after` ends the invocation early (absolute epoch count) without
/// shortening the learning-rate schedule, so a later call with the same
/// config resumes bit-for-bit.
#[allow(clippy::too_many_arguments)]
pub fn train_loop<T: Real>(
    model: &mut AdaptModel<T>,
    optimizer: &mut Adam,
    train_scenes: &[Scene],
    val_scenes: &[Scene],
    cfg: &TrainConfig,
    mut progress: TrainProgress,
    stop_after: Option<usize>,
    ckpt_path: Option<&Path>,
    log: &mut dyn Write,
) -> Result<TrainProgress, TrainError> {
    cfg.validate()?;
    if train_scenes.is_empty() {
        return Err(TrainError::Config("no training scenes".into()));
    }
    let base_lr = cfg.resolved_lr(model.config.setting);
    let batches_per_epoch = train_scenes.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let end_epoch = stop_after.map_or(cfg.epochs, |e| e.min(cfg.epochs));

    for epoch in progress.epochs_done..end_epoch {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1 + epoch as u64);
        let mut order: Vec<usize> = (0..train_scenes.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Vec<f64>> = model
                .params
                .ids()
                .map(|id| vec![0.0; model.params.value(id).numel()])
                .collect();
            let mut sums = loss::LossValues::default();
            for &idx in batch {
                let scene = if cfg.augment {
                    augment_scene(&train_scenes[idx], &mut rng, cfg.scale_range, cfg.agent_drop)
                } else {
                    train_scenes[idx].clone()
                };
                let mut mode = Mode::Train {
                    dropout: model.config.dropout,
                    rng: &mut rng,
                };
                let mut bf = model.build_forward(&scene, &mut mode, None)?;
                let (nodes, values) = loss::scene_loss(&mut bf)?;
                if !values.total.is_finite() {
                    return Err(TrainError::NonFinite {
                        step: progress.global_step,
                        op: bf.graph.first_nan().map(|(_, name)| name.to_string()),
                    });
                }
                bf.graph
                    .backward(nodes.total)
                    .map_err(|e| TrainError::Model(ModelError::Tensor(e)))?;
                for (i, acc) in grads.iter_mut().enumerate() {
                    if let Some(grad) = bf.graph.grad(bf.params[i]) {
                        for (a, &g) in acc.iter_mut().zip(grad.data()) {
                            *a += Real::to_f64(g);
                        }
                    }
                }
                sums.total += values.total;
                sums.l_end += values.l_end;
                sums.l_traj += values.l_traj;
                sums.l_cls += values.l_cls;
            }
            let inv = 1.0 / batch.len() as f64;
            for acc in &mut grads {
                for a in acc.iter_mut() {
                    *a *= inv;
                }
            }
            let lr = lr_at(
                progress.global_step,
                total_steps,
                base_lr,
                cfg.anneal_factor,
                cfg.anneal_milestones,
            );
            optimizer.step(&mut model.params, &grads, lr);
            epoch_loss += sums.total * inv;
            writeln!(
                log,
                "{}",
                serde_json::json!({
                    "step": progress.global_step,
                    "lr": lr,
                    "loss": sums.total * inv,
                    "l_end": sums.l_end * inv,
                    "l_traj": sums.l_traj * inv,
                    "l_cls": sums.l_cls * inv,
                })
            )?;
            progress.global_step += 1;
        }
        progress.epochs_done = epoch + 1;

        let val_report = if val_scenes.is_empty() {
            None
        } else {
            let report = evaluate(model, val_scenes)?;
            writeln!(
                log,
                "{}",
                serde_json::json!({ "epoch": epoch, "val": report })
            )?;
            Some(report)
        };
        if cfg.verbose {
            let mean = epoch_loss / batches_per_epoch as f64;
            match &val_report {
                Some(r) => eprintln!(
                    "epoch {epoch}: mean loss {mean:.6}, val mFDE_k {:.4}",
                    r.mfde_k
                ),
                None => eprintln!("epoch {epoch}: mean loss {mean:.6}"),
            }
        }
        if let Some(path) = ckpt_path {
            Checkpoint::capture(
                model,
                progress.epochs_done,
                progress.global_step,
                Some(optimizer.state().clone()),
            )
            .save(path)?;
        }
        // A parameter blow-up surfaces as non-finite loss next epoch; fail
        // fast if the parameters themselves went non-finite.
        for id in model.params.ids() {
            if model
                .params
                .value(id)
                .data()
                .iter()
                .any(|v| !Real::to_f64(*v).is_finite())
            {
                return Err(TrainError::NonFinite {
                    step: progress.global_step,
                    op: Some(format!("parameter {:?}", model.params.name(id))),
                });
            }
        }
    }
    Ok(progress)
}
