//! Two-phase training loop: AdamW with decoupled weight decay, per-phase
//! warmup plus cosine learning-rate schedule, checkpointing and exact resume.
//!
//! Every step draws from its own generator keyed by `(seed, step)`, so a run
//! resumed from a checkpoint replays the same batches as an uninterrupted one.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{draw_flow, flow_loss_and_grad};
use crate::net::{load_checkpoint, save_checkpoint, AdamState, Checkpoint, Parameters, TrainingMeta};
use crate::rng::{rng_from, stream};
use crate::signal::{random_shift, sample_mask, shift_augment, ModelSequence, TrainingExample};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Independent drop probability of each condition.
    pub cond_drop_prob: f64,
    /// Masked share of each example, percent, drawn uniformly.
    pub mask_pct_lo: f64,
    pub mask_pct_hi: f64,
    /// Transposition augmentation range in semitones.
    pub max_shift: i32,
    /// Phase 1 trains without the voicing condition.
    pub phase1_steps: u64,
    pub phase2_steps: u64,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Random training window in frames; 0 uses whole examples.
    pub crop_frames: usize,
    pub log_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            cond_drop_prob: 0.5,
            mask_pct_lo: 70.0,
            mask_pct_hi: 100.0,
            max_shift: 4,
            phase1_steps: 100_000,
            phase2_steps: 90_000,
            lr_phase1: 1e-4,
            lr_phase2: 1e-5,
            warmup_steps: 5_000,
            batch_size: 512,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            crop_frames: 0,
            log_every: 100,
            checkpoint_every: 5_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("train.{m}")));
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return bad("cond_drop_prob must lie in [0, 1]");
        }
        if !(0.0 <= self.mask_pct_lo && self.mask_pct_lo <= self.mask_pct_hi && self.mask_pct_hi <= 100.0) {
            return bad("mask percentages must satisfy 0 <= lo <= hi <= 100");
        }
        if !(0..=4).contains(&self.max_shift) {
            return bad("max_shift must lie in [0, 4]");
        }
        if !(self.lr_phase1 > 0.0 && self.lr_phase2 > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("beta1/beta2 must lie in [0, 1) and adam_eps be positive");
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("weight_decay and grad_clip must be non-negative");
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.phase1_steps + self.phase2_steps
    }
}

/// Learning rate and phase (1 or 2) for a global step: linear warmup to the
/// phase peak, then cosine decay to zero at the end of the phase.
pub fn lr_at(cfg: &TrainConfig, step: u64) -> (f64, u8) {
    let (s, len, peak, phase) = if step < cfg.phase1_steps {
        (step, cfg.phase1_steps, cfg.lr_phase1, 1)
    } else {
        (step - cfg.phase1_steps, cfg.phase2_steps, cfg.lr_phase2, 2)
    };
    let warm = cfg.warmup_steps.min(len);
    let lr = if s < warm {
        peak * s as f64 / warm as f64
    } else if len == warm {
        peak
    } else {
        peak * 0.5 * (1.0 + (PI * (s - warm) as f64 / (len - warm) as f64).cos())
    };
    (lr, phase)
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn update(&self, params: &mut [f32], grads: &[f32], state: &mut AdamState, lr: f64) {
        state.step += 1;
        let k = state.step as i32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let bc1 = (1.0 - self.beta1.powi(k)) as f32;
        let bc2 = (1.0 - self.beta2.powi(k)) as f32;
        let (lr, eps, wd) = (lr as f32, self.eps as f32, self.weight_decay as f32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let step = (*m / bc1) / ((*v / bc2).sqrt() + eps);
            *p -= lr * (step + wd * *p);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: Parameters<f32>,
    pub opt: AdamState,
    /// Steps completed.
    pub step: u64,
    pub uses_unvoiced: bool,
}

impl TrainState {
    pub fn new(params: Parameters<f32>) -> Self {
        let opt = AdamState::new(params.data.len());
        Self {
            params,
            opt,
            step: 0,
            uses_unvoiced: false,
        }
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            meta: TrainingMeta {
                step: self.step,
                seed: cfg.seed,
                uses_unvoiced: self.uses_unvoiced,
                settings: serde_json::to_value(cfg).expect("train config serializes"),
            },
            optimizer: Some(self.opt.clone()),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let n = ck.params.data.len();
        let opt = ck.optimizer.unwrap_or_else(|| AdamState::new(n));
        if opt.step != ck.meta.step {
            return Err(Error::CorruptCheckpoint(format!(
                "optimizer step {} differs from training step {}",
                opt.step, ck.meta.step
            )));
        }
        Ok(Self {
            params: ck.params,
            opt,
            step: ck.meta.step,
            uses_unvoiced: ck.meta.uses_unvoiced,
        })
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub phase: u8,
}

/// Assembles one batch, accumulates gradients and applies an AdamW update.
pub fn train_step(state: &mut TrainState, data: &[ModelSequence], cfg: &TrainConfig) -> Result<TraceRow> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let step = state.step;
    let (lr, phase) = lr_at(cfg, step);
    let mut rng = rng_from(cfg.seed, &[stream::TRAIN_STEP, step]);
    let mut grads = vec![0.0f32; state.params.data.len()];
    let mut loss_sum = 0.0f64;
    let mut fed_unvoiced = false;
    for _ in 0..cfg.batch_size {
        let src = &data[rng.gen_range(0..data.len())];
        let seq = if cfg.crop_frames > 0 && src.len() > cfg.crop_frames {
            let start = rng.gen_range(0..=src.len() - cfg.crop_frames);
            src.slice(start..start + cfg.crop_frames)
        } else {
            src.clone()
        };
        let (seq, _) = shift_augment(&seq, random_shift(cfg.max_shift, &mut rng));
        let mask = sample_mask(seq.len(), cfg.mask_pct_lo, cfg.mask_pct_hi, &mut rng)?;
        let draw = draw_flow::<f32, _>(seq.len(), cfg.cond_drop_prob, phase == 1, &mut rng);
        fed_unvoiced |= !draw.drop.drop_u;
        let example = TrainingExample::new(seq, mask)?;
        loss_sum += f64::from(flow_loss_and_grad(&state.params, &example, &draw, &mut grads)?);
    }
    let loss = loss_sum / cfg.batch_size as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at step {step}")));
    }
    let inv = 1.0 / cfg.batch_size as f32;
    let mut norm_sq = 0.0f64;
    for g in &mut grads {
        *g *= inv;
        norm_sq += f64::from(*g) * f64::from(*g);
    }
    if !norm_sq.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient at step {step}")));
    }
    let norm = norm_sq.sqrt();
    if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        let s = (cfg.grad_clip / norm) as f32;
        for g in &mut grads {
            *g *= s;
        }
    }
    AdamW::from_config(cfg).update(&mut state.params.data, &grads, &mut state.opt, lr);
    if !state.params.is_finite() {
        return Err(Error::Numeric(format!("parameters became non-finite at step {step}")));
    }
    state.step += 1;
    state.uses_unvoiced |= fed_unvoiced;
    Ok(TraceRow { step, loss, lr, phase })
}

/// Files written under a training output directory.
pub struct TrainPaths {
    pub root: PathBuf,
}

impl TrainPaths {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn trace(&self) -> PathBuf {
        self.root.join("loss.csv")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints().join(format!("step_{step:08}"))
    }

    /// Final weights, ready for inference.
    pub fn model(&self) -> PathBuf {
        self.root.join("model")
    }

    /// Completed checkpoint steps, ascending.
    pub fn checkpoint_steps(&self) -> Result<Vec<u64>> {
        let dir = self.checkpoints();
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut steps: Vec<u64> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_prefix("step_")?.parse().ok()
            })
            .collect();
        steps.sort_unstable();
        Ok(steps)
    }
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::parse(path.display().to_string(), e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::parse(path.display().to_string(), e))?;
    crate::io::write_bytes(path, &bytes)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text = crate::io::read_to_string(path)?;
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::parse(path.display().to_string(), e))
}

/// Loads the newest checkpoint under `paths` and the trace rows logged before it.
/// A corrupt newest checkpoint is an error, never skipped.
pub fn resume(paths: &TrainPaths) -> Result<Option<(TrainState, Vec<TraceRow>, TrainConfig)>> {
    let Some(&last) = paths.checkpoint_steps()?.last() else {
        return Ok(None);
    };
    let ck = load_checkpoint(&paths.checkpoint(last))?;
    let cfg: TrainConfig = serde_json::from_value(ck.meta.settings.clone())
        .map_err(|e| Error::CorruptCheckpoint(format!("training settings: {e}")))?;
    let state = TrainState::from_checkpoint(ck)?;
    let trace = if paths.trace().exists() {
        read_trace(&paths.trace())?
            .into_iter()
            .filter(|r| r.step < state.step)
            .collect()
    } else {
        Vec::new()
    };
    Ok(Some((state, trace, cfg)))
}

/// Trains until `cfg.total_steps()` (or `stop_at`, whichever is first).
/// With `out`, logged rows go to `loss.csv`, checkpoints are written every
/// `checkpoint_every` steps (the two newest are kept) and the finished model
/// lands in `model/`. A failing step leaves earlier checkpoints untouched.
pub fn run_training(
    state: &mut TrainState,
    data: &[ModelSequence],
    cfg: &TrainConfig,
    out: Option<&TrainPaths>,
    stop_at: Option<u64>,
    trace: &mut Vec<TraceRow>,
) -> Result<()> {
    cfg.validate()?;
    let total = cfg.total_steps();
    let end = stop_at.map_or(total, |s| s.min(total));
    while state.step < end {
        let row = train_step(state, data, cfg)?;
        if row.step % cfg.log_every == 0 || row.step + 1 == total {
            info!("step {} phase {} loss {:.5} lr {:.3e}", row.step, row.phase, row.loss, row.lr);
            trace.push(row);
            if let Some(paths) = out {
                write_trace(&paths.trace(), trace)?;
            }
        }
        if let Some(paths) = out {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                save_rotating(paths, state, cfg)?;
            }
        }
    }
    if let Some(paths) = out {
        if paths.checkpoint_steps()?.last() != Some(&state.step) {
            save_rotating(paths, state, cfg)?;
        }
        if state.step == total {
            let mut ck = state.to_checkpoint(cfg);
            ck.optimizer = None;
            save_checkpoint(&paths.model(), &ck)?;
            if cfg.phase2_steps == 0 && state.uses_unvoiced {
                warn!("voicing condition used although phase 2 is empty");
            }
        }
    }
    Ok(())
}

fn save_rotating(paths: &TrainPaths, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    save_checkpoint(&paths.checkpoint(state.step), &state.to_checkpoint(cfg))?;
    let steps = paths.checkpoint_steps()?;
    for &old in steps.iter().rev().skip(2) {
        let dir = paths.checkpoint(old);
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ModelConfig;
    use crate::synth::gen_dataset;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            phase1_steps: 100,
            phase2_steps: 100,
            lr_phase1: 2e-3,
            lr_phase2: 1e-3,
            warmup_steps: 20,
            batch_size: 4,
            log_every: 1,
            checkpoint_every: 0,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = small_cfg();
        assert_eq!(lr_at(&cfg, 0), (0.0, 1));
        assert_eq!(lr_at(&cfg, 20).0, 2e-3);
        assert_eq!(lr_at(&cfg, 100), (0.0, 2));
        assert_eq!(lr_at(&cfg, 120).0, 1e-3);
        assert!(lr_at(&cfg, 199).0 < 1e-5);
        assert!(lr_at(&cfg, 60).0 < 2e-3 && lr_at(&cfg, 60).0 > 0.0);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = vec![1.0f32, -1.0];
        let mut st = AdamState::new(2);
        let opt = AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        opt.update(&mut p, &[0.5, -3.0], &mut st, 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    fn dataset(n: usize, frames: usize) -> Vec<ModelSequence> {
        gen_dataset(n, frames, 50.0, 3).unwrap().into_iter().map(|e| e.seq).collect()
    }

    #[test]
    fn overfits_four_examples() {
        let data = dataset(4, 64);
        let cfg = small_cfg();
        let params = Parameters::init(ModelConfig::tiny(), &mut rng_from(1, &[stream::INIT])).unwrap();
        let mut state = TrainState::new(params);
        let mut trace = Vec::new();
        run_training(&mut state, &data, &cfg, None, None, &mut trace).unwrap();
        assert_eq!(trace.len(), 200);
        let mean = |rows: &[TraceRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
        let (first, last) = (mean(&trace[..20]), mean(&trace[180..]));
        assert!(last < 0.5 * first, "smoothed loss {first} -> {last}");
    }

    #[test]
    fn phase_one_never_feeds_voicing() {
        let data = dataset(2, 64);
        let cfg = TrainConfig {
            phase1_steps: 30,
            phase2_steps: 0,
            batch_size: 2,
            ..small_cfg()
        };
        let params = Parameters::init(ModelConfig::tiny(), &mut rng_from(1, &[])).unwrap();
        let mut state = TrainState::new(params);
        run_training(&mut state, &data, &cfg, None, None, &mut Vec::new()).unwrap();
        assert!(!state.uses_unvoiced);
        let more = TrainConfig {
            phase2_steps: 5,
            ..cfg
        };
        more.validate().unwrap();
        run_training(&mut state, &data, &more, None, None, &mut Vec::new()).unwrap();
        assert!(state.uses_unvoiced);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = dataset(3, 64);
        let cfg = TrainConfig {
            phase1_steps: 12,
            phase2_steps: 8,
            batch_size: 2,
            log_every: 3,
            checkpoint_every: 5,
            ..small_cfg()
        };
        let init = || TrainState::new(Parameters::init(ModelConfig::tiny(), &mut rng_from(4, &[])).unwrap());
        let tmp = tempfile::tempdir().unwrap();
        let full = TrainPaths::new(&tmp.path().join("full"));
        let mut a = init();
        let mut trace_a = Vec::new();
        run_training(&mut a, &data, &cfg, Some(&full), None, &mut trace_a).unwrap();

        let split = TrainPaths::new(&tmp.path().join("split"));
        let mut b = init();
        run_training(&mut b, &data, &cfg, Some(&split), Some(13), &mut Vec::new()).unwrap();
        let (mut b, mut trace_b, cfg_b) = resume(&split).unwrap().unwrap();
        assert_eq!(b.step, 13);
        assert_eq!(cfg_b, cfg);
        run_training(&mut b, &data, &cfg, Some(&split), None, &mut trace_b).unwrap();
        assert_eq!(trace_a, trace_b);
        assert_eq!(a.params.data, b.params.data);
        assert_eq!(fs::read(full.trace()).unwrap(), fs::read(split.trace()).unwrap());
    }
}
