use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};

use super::{load_checkpoint, lr_schedule, plan_epoch, save_checkpoint, train_step, Dataset, Stage, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::vfnet::{InputMode, ModelConfig, ModelParams};

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "step,loss,lr,wall_s";
pub const FINAL_CHECKPOINT: &str = "final.ufckp";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Starting weights; finetuning normally starts from the pretrained
    /// checkpoint. Optimizer moments and the step counter start fresh.
    pub init: Option<PathBuf>,
    /// Continue an interrupted run of this stage exactly where it stopped.
    pub resume: Option<PathBuf>,
    /// Let finetuning start from random weights.
    pub allow_scratch: bool,
    /// Stop after this many updates in this call (the schedule still runs
    /// to `total_updates`).
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub state: TrainState,
}

fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:08}.ufckp")
}

fn check_setup(data: &Dataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    model.validate()?;
    if model.input_mode != cfg.ablation_mode || data.mode != cfg.ablation_mode {
        return Err(Error::Config(format!(
            "input modes disagree: model {:?}, training {:?}, data {:?}",
            model.input_mode, cfg.ablation_mode, data.mode
        )));
    }
    if model.input_mode == InputMode::Units && model.unit_vocab != data.k + 2 {
        return Err(Error::Config(format!(
            "unit_vocab {} does not match a codebook of {} units (+2)",
            model.unit_vocab, data.k
        )));
    }
    if let Some(e) = data.examples.iter().find(|e| e.seq_len() > model.max_frames) {
        return Err(Error::invalid(format!(
            "example {} has {} frames, above max_frames {}",
            e.id,
            e.seq_len(),
            model.max_frames
        )));
    }
    Ok(())
}

fn initial_state(model: &ModelConfig, cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainState> {
    if let Some(path) = &opts.resume {
        let ckpt = load_checkpoint(path)?;
        ckpt.check_model(model)?;
        if ckpt.meta.train.stage != cfg.stage {
            return Err(Error::IncompatibleCheckpoint(format!(
                "cannot resume a {:?} run as {:?}",
                ckpt.meta.train.stage, cfg.stage
            )));
        }
        return Ok(ckpt.state);
    }
    if let Some(path) = &opts.init {
        let ckpt = load_checkpoint(path)?;
        ckpt.check_model(model)?;
        return Ok(TrainState::new(ckpt.state.net.params));
    }
    if cfg.stage == Stage::Finetune && !opts.allow_scratch {
        return Err(Error::IncompatibleCheckpoint(
            "finetuning needs a pretrained checkpoint (or an explicit scratch override)".into(),
        ));
    }
    Ok(TrainState::new(ModelParams::init(model, cfg.seed)?))
}

/// Keeps the header and rows up to `step` of an existing log.
fn reset_metrics(path: &Path, step: u64, resuming: bool) -> Result<()> {
    let mut text = format!("{METRICS_HEADER}\n");
    if resuming && path.exists() {
        let old = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for line in old.lines().skip(1) {
            let row_step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
            if row_step.is_some_and(|s| s <= step) {
                text.push_str(line);
                text.push('\n');
            }
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn rotate(dir: &Path, keep: usize) -> Result<()> {
    let mut old: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt-") && n.ends_with(".ufckp"))
        })
        .collect();
    old.sort();
    let excess = old.len().saturating_sub(keep.max(1));
    for p in &old[..excess] {
        fs::remove_file(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

/// Trains one stage, writing `metrics.csv`, periodic `ckpt-*.ufckp` files
/// and `final.ufckp` into `opts.out_dir`.
pub fn run_stage(data: &Dataset, model: &ModelConfig, cfg: &TrainConfig, opts: &RunOptions) -> Result<StageOutcome> {
    check_setup(data, model, cfg)?;
    let mut state = initial_state(model, cfg, opts)?;
    let dir = &opts.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics = dir.join(METRICS_FILE);
    reset_metrics(&metrics, state.step, opts.resume.is_some())?;
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&metrics)
        .map_err(|e| Error::io(&metrics, e))?;

    let lengths: Vec<usize> = data.examples.iter().map(|e| e.seq_len()).collect();
    let mut plan = plan_epoch(&lengths, cfg.batch_frames, cfg.seed, state.epoch);
    let started = Instant::now();
    let wall_before = state.wall_s;
    let stop_at = opts
        .stop_after
        .map_or(cfg.total_updates, |n| (state.step + n).min(cfg.total_updates));
    info!(
        "{:?} stage: {} examples, {} parameters, steps {}..{}",
        cfg.stage,
        data.len(),
        state.params().num_params(),
        state.step,
        stop_at
    );

    while state.step < stop_at {
        if state.cursor >= plan.len() {
            state.epoch += 1;
            state.cursor = 0;
            plan = plan_epoch(&lengths, cfg.batch_frames, cfg.seed, state.epoch);
        }
        let batch: Vec<_> = plan[state.cursor].iter().map(|&i| &data.examples[i]).collect();
        let loss = train_step(&mut state, &batch, data.k, cfg)?;
        state.cursor += 1;
        state.wall_s = wall_before + started.elapsed().as_secs_f64();
        let step = state.step;
        if step % cfg.log_every == 0 || step == cfg.total_updates {
            writeln!(log, "{step},{loss},{},{:.3}", lr_schedule(step, cfg), state.wall_s)
                .map_err(|e| Error::io(&metrics, e))?;
            debug!("step {step} loss {loss:.5}");
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.total_updates {
            save_checkpoint(&dir.join(checkpoint_name(step)), &state, cfg, data.k)?;
            rotate(dir, cfg.keep_checkpoints)?;
        }
    }
    let checkpoint = if state.step >= cfg.total_updates {
        dir.join(FINAL_CHECKPOINT)
    } else {
        dir.join(checkpoint_name(state.step))
    };
    save_checkpoint(&checkpoint, &state, cfg, data.k)?;
    info!("{:?} stage stopped at step {}", cfg.stage, state.step);
    Ok(StageOutcome {
        checkpoint,
        metrics,
        state,
    })
}
