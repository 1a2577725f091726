//! Two-stage training: pretraining on clean utterances (units and target
//! from the same sample), then finetuning with units from degraded speech
//! and the clean mel as target. AdamW with linear warmup and linear decay.

mod checkpoint;
mod data;
mod run;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{plan_epoch, Dataset, Example, ExampleCond};
pub use run::{run_stage, RunOptions, StageOutcome, FINAL_CHECKPOINT, METRICS_FILE, METRICS_HEADER};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cfm::{make_flow_batch_with, Conditioning, MaskSpec, PathConfig};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};
use crate::units::pad_to_frames;
use crate::vfnet::{CondInput, FieldNet, InputMode, ModelParams};

use data::pad_rows;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_updates: u64,
    /// Frame budget per batch (sequences x longest sequence).
    pub batch_frames: usize,
    pub seed: u64,
    #[serde(default)]
    pub mask: MaskSpec,
    #[serde(default)]
    pub path: PathConfig,
    #[serde(default)]
    pub ablation_mode: InputMode,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::adam_eps")]
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "defaults::log_every")]
    pub log_every: u64,
    /// 0 writes only the final checkpoint.
    #[serde(default = "defaults::checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default = "defaults::keep_checkpoints")]
    pub keep_checkpoints: usize,
}

mod defaults {
    pub fn weight_decay() -> f64 {
        0.01
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
    pub fn grad_clip() -> f64 {
        1.0
    }
    pub fn log_every() -> u64 {
        10
    }
    pub fn checkpoint_every() -> u64 {
        1000
    }
    pub fn keep_checkpoints() -> usize {
        2
    }
}

impl TrainConfig {
    fn base(stage: Stage, peak_lr: f64, warmup_steps: u64, total_updates: u64, batch_frames: usize) -> Self {
        Self {
            stage,
            peak_lr,
            warmup_steps,
            total_updates,
            batch_frames,
            seed: 0,
            mask: MaskSpec::default(),
            path: PathConfig::default(),
            ablation_mode: InputMode::Units,
            weight_decay: defaults::weight_decay(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            adam_eps: defaults::adam_eps(),
            grad_clip: defaults::grad_clip(),
            log_every: defaults::log_every(),
            checkpoint_every: defaults::checkpoint_every(),
            keep_checkpoints: defaults::keep_checkpoints(),
        }
    }

    /// Published base-model pretraining schedule: peak 7.5e-5, 20k warmup,
    /// 600k updates.
    pub fn paper_pretrain() -> Self {
        Self::base(Stage::Pretrain, 7.5e-5, 20_000, 600_000, 4096)
    }

    /// Published base-model finetuning schedule: peak 1e-5, 10k warmup,
    /// 400k updates.
    pub fn paper_finetune() -> Self {
        Self::base(Stage::Finetune, 1e-5, 10_000, 400_000, 4096)
    }

    /// Desk-scale schedule for the toy corpus.
    pub fn tiny(stage: Stage) -> Self {
        Self::base(stage, 3e-3, 200, 2000, 512)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return fail(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if self.warmup_steps >= self.total_updates {
            return fail(format!(
                "warmup_steps {} must be below total_updates {}",
                self.warmup_steps, self.total_updates
            ));
        }
        if self.batch_frames == 0 || self.log_every == 0 {
            return fail("batch_frames and log_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return fail("AdamW betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return fail("weight_decay and grad_clip must be non-negative".into());
        }
        self.mask.validate()?;
        self.path.validate()
    }
}

/// Linear warmup from 0 to the peak, then linear decay to 0 at
/// `total_updates`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_updates {
        return 0.0;
    }
    let left = (cfg.total_updates - step) as f64;
    let span = (cfg.total_updates - cfg.warmup_steps) as f64;
    cfg.peak_lr * left / span
}

/// Parameters, AdamW moments and loop position.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: FieldNet<f32>,
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
    /// Completed updates.
    pub step: u64,
    /// Position in the deterministic batch plan.
    pub epoch: u64,
    pub cursor: usize,
    pub loss_history: Vec<(u64, f64)>,
    /// Wall-clock seconds spent in earlier sessions of this run.
    pub wall_s: f64,
}

impl TrainState {
    pub fn new(params: ModelParams<f32>) -> Self {
        let m = params.zeros_like();
        let v = params.zeros_like();
        Self {
            net: FieldNet::new(params),
            m,
            v,
            step: 0,
            epoch: 0,
            cursor: 0,
            loss_history: Vec::new(),
            wall_s: 0.0,
        }
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.net.params
    }
}

/// One sequence prepared for the network, padded to the batch length.
struct Prepared {
    x_t: Array2<f32>,
    x_ctx: Array2<f32>,
    u_t: Array2<f32>,
    mask: Vec<bool>,
    cond: Conditioning,
    t: f32,
    target_len: usize,
    valid_len: usize,
}

fn prepare(ex: &Example, k: usize, cfg: &TrainConfig, seed: u64) -> Result<Prepared> {
    let mut rng = rng_for(seed, 0);
    let t_len = ex.target.nrows();
    let (x1, cond) = match &ex.cond {
        ExampleCond::Units(u) => (ex.target.clone(), Conditioning::Units(pad_to_frames(u, t_len, k)?)),
        ExampleCond::Mel(m) => (pad_rows(&ex.target, ex.seq_len()), Conditioning::Mel(m.clone())),
    };
    let fb = make_flow_batch_with(x1.view(), t_len, cond, &cfg.mask, &cfg.path, &mut rng)?;
    Ok(Prepared {
        valid_len: fb.x1.nrows(),
        x_t: fb.x_t,
        x_ctx: fb.x_ctx,
        u_t: fb.u_t,
        mask: fb.mask,
        cond: fb.cond,
        t: fb.t,
        target_len: t_len,
    })
}

/// FNV-1a of an example id: per-example draws do not depend on which batch
/// or slot the example lands in.
fn id_hash(id: &str) -> u64 {
    id.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01B3))
}

/// Mean masked loss of a batch and its gradient (scaled to that mean).
/// Sequences are padded to the longest one; padding rows carry the
/// batch-pad unit id, are hidden from attention and never enter the loss.
pub fn batch_gradient(
    net: &FieldNet<f32>,
    batch: &[&Example],
    k: usize,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(f64, ModelParams<f32>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let step_seed = derive_seed(cfg.seed, step);
    let prepared: Vec<Prepared> = batch
        .iter()
        .map(|ex| prepare(ex, k, cfg, derive_seed(step_seed, id_hash(&ex.id))))
        .collect::<Result<_>>()?;
    let len = prepared.iter().map(|p| p.valid_len).max().expect("non-empty batch");
    let mel_dim = net.config().mel_dim;
    let total: usize = prepared.iter().map(|p| p.mask.iter().filter(|&&m| m).count()).sum::<usize>() * mel_dim;
    let scale = 1.0 / total as f32;
    let mut grads = net.params.zeros_like();
    let mut sq_err = 0.0f64;
    for p in &prepared {
        let mut mask = p.mask.clone();
        mask.resize(len, false);
        let (x_t, x_ctx, u_t) = (pad_rows(&p.x_t, len), pad_rows(&p.x_ctx, len), pad_rows(&p.u_t, len));
        let ids;
        let cond = match &p.cond {
            Conditioning::Units(u) => {
                let mut padded = u.ids.clone();
                padded.resize(len, k + 1);
                ids = padded;
                CondInput::Units(&ids)
            }
            Conditioning::Mel(m) => CondInput::Mel(m.view(), p.target_len),
        };
        let g = net.accumulate_grad(
            x_t.view(),
            x_ctx.view(),
            cond,
            p.t,
            p.valid_len,
            u_t.view(),
            &mask,
            scale,
            &mut grads,
        )?;
        sq_err += g.sq_err as f64;
    }
    Ok((sq_err / total as f64, grads))
}

/// One AdamW update on the batch loss at learning rate
/// `lr_schedule(step + 1)`. A non-finite loss or gradient leaves the state
/// untouched and reports divergence.
pub fn train_step(state: &mut TrainState, batch: &[&Example], k: usize, cfg: &TrainConfig) -> Result<f64> {
    let (loss, mut grads) = batch_gradient(&state.net, batch, k, cfg, state.step)?;
    let next = state.step + 1;
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::Divergence { step: next, loss });
    }
    if cfg.grad_clip > 0.0 {
        let norm = grads.global_norm() as f64;
        if norm > cfg.grad_clip {
            grads.scale((cfg.grad_clip / norm) as f32);
        }
    }
    adamw_update(state, &grads, lr_schedule(next, cfg), cfg);
    state.step = next;
    state.loss_history.push((next, loss));
    Ok(loss)
}

/// Decoupled weight decay on every tensor, bias-corrected moments.
pub fn adamw_update(state: &mut TrainState, grads: &ModelParams<f32>, lr: f64, cfg: &TrainConfig) {
    let n = (state.step + 1) as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 / (1.0 - b1.powi(n));
    let c2 = 1.0 / (1.0 - b2.powi(n));
    let decay = (1.0 - lr * cfg.weight_decay) as f32;
    let (b1f, b2f, c1f, c2f) = (b1 as f32, b2 as f32, c1 as f32, c2 as f32);
    let (lrf, eps) = (lr as f32, cfg.adam_eps as f32);
    let params = state.net.params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, m), v), g) in params.iter_mut().zip(ms).zip(vs).zip(grads.tensors()) {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1f * m.data[i] + (1.0 - b1f) * gi;
            v.data[i] = b2f * v.data[i] + (1.0 - b2f) * gi * gi;
            let step = (m.data[i] * c1f) / ((v.data[i] * c2f).sqrt() + eps);
            p.data[i] = p.data[i] * decay - lrf * step;
        }
    }
}

#[cfg(test)]
mod tests;
