//! Multi-task optimization: schedules, batching, the training loop, and
//! training-state checkpoints.
//!
//! One step draws a batch per scheduled task, accumulates gradients across
//! the per-task tapes (gradients of a weighted sum are the weighted sum of
//! gradients), and applies a single Adam update. Batch composition is a pure
//! function of `(seed, task, step)`, so a run resumed from a checkpoint
//! replays the uninterrupted run bit for bit.

mod metrics;

pub use metrics::{
    average_precision_50, brute_force_ap50, eval_frame_batch, evaluate_acre, evaluate_cater,
    evaluate_count, evaluate_detection, evaluate_snitch, iou, AcreEval, Ap50Result, CaterEval,
    GtSet, MetricRecord, MetricsLog,
};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, ValueId};
use crate::checkpoint::{read_container_file, write_container_file, CheckpointError};
use crate::codec::{
    encode_answer, encode_detection, AnswerLabel, CodecError, DetectMode, Task, TokenSeq, Vocab,
    PAD,
};
use crate::model::{BindMode, Model, ModelConfig};
use crate::optim::{adam_apply, lr_at, OptimConfig, OptimState};
use crate::rng::stream;
use crate::tensor::{Tensor, TensorError};
use crate::worldgen::{sample_frames, AcreEpisode, SampleMode, VideoSample, WorldgenError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Worldgen(#[from] WorldgenError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("train: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Checkpoint/eval hook cadence in steps; 0 disables mid-run hooks.
    pub eval_cadence: u64,
    /// Frames drawn per video sample during training.
    pub frames_per_sample: usize,
    /// Frames used by evaluation (evenly spaced).
    pub eval_frames: usize,
    /// Detection-target cap; scenes with more objects fail at encode time.
    pub max_objects: usize,
    /// Loss-logging cadence in steps.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            total_steps: 3500,
            warmup_steps: 1750,
            base_lr: 3e-4,
            weight_decay: 0.05,
            seed: 0,
            eval_cadence: 500,
            frames_per_sample: 8,
            eval_frames: 8,
            max_objects: 6,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> OptimConfig {
        OptimConfig {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            weight_decay: self.weight_decay,
            ..OptimConfig::default()
        }
    }
}

/// Task scheduling across steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Schedule {
    /// Every task every step, losses summed with task weights.
    Joint,
    /// Step s optimizes task (s / interval) mod ntasks.
    Alternating { interval: u64 },
    /// Task 0 for `pretrain_steps`, then task 1 to completion.
    SingleSwitch { pretrain_steps: u64 },
}

impl Schedule {
    pub fn validate(&self, num_tasks: usize, total_steps: u64) -> Result<(), TrainError> {
        match *self {
            Schedule::Joint => Ok(()),
            Schedule::Alternating { interval } if interval == 0 => {
                Err(TrainError::Invalid("alternating interval must be >= 1".into()))
            }
            Schedule::Alternating { .. } => Ok(()),
            Schedule::SingleSwitch { pretrain_steps } => {
                if num_tasks != 2 {
                    return Err(TrainError::Invalid(format!(
                        "single-switch needs exactly 2 tasks, got {num_tasks}"
                    )));
                }
                if pretrain_steps >= total_steps {
                    return Err(TrainError::Invalid(
                        "pretrain steps must be below total steps".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Task indices optimized at `step`.
    pub fn tasks_at(&self, step: u64, num_tasks: usize) -> Vec<usize> {
        match *self {
            Schedule::Joint => (0..num_tasks).collect(),
            Schedule::Alternating { interval } => {
                vec![((step / interval) % num_tasks as u64) as usize]
            }
            Schedule::SingleSwitch { pretrain_steps } => {
                vec![if step < pretrain_steps { 0 } else { 1 }]
            }
        }
    }

    /// Closed-form per-task step counts over a whole run.
    pub fn expected_counts(&self, num_tasks: usize, total_steps: u64) -> Vec<u64> {
        let mut counts = vec![0u64; num_tasks];
        match *self {
            Schedule::Joint => counts.fill(total_steps),
            Schedule::Alternating { interval } => {
                let n = num_tasks as u64;
                let full_cycles = total_steps / (interval * n);
                let rem = total_steps % (interval * n);
                for (i, c) in counts.iter_mut().enumerate() {
                    let i = i as u64;
                    *c = full_cycles * interval
                        + rem.saturating_sub(i * interval).min(interval);
                }
            }
            Schedule::SingleSwitch { pretrain_steps } => {
                counts[0] = pretrain_steps.min(total_steps);
                counts[1] = total_steps.saturating_sub(pretrain_steps);
            }
        }
        counts
    }
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub task: Task,
    pub weight: f64,
}

impl TaskSpec {
    pub fn new(task: Task) -> Self {
        Self { task, weight: 1.0 }
    }
}

/// Dataset handle for one task.
#[derive(Clone, Copy)]
pub enum TaskData<'a> {
    /// Single-frame recognition scenes.
    Frames(&'a [VideoSample]),
    /// Multi-frame tracking episodes.
    Videos(&'a [VideoSample]),
    Acre(&'a [AcreEpisode]),
}

impl TaskData<'_> {
    fn len(&self) -> usize {
        match self {
            TaskData::Frames(v) | TaskData::Videos(v) => v.len(),
            TaskData::Acre(v) => v.len(),
        }
    }
}

/// Epoch-permuted sample indices for (task, step): position `step*batch + i`
/// indexes a fresh shuffle of the dataset per epoch, so exhaustion reshuffles
/// with a step-derived stream.
fn batch_indices(seed: u64, task: Task, step: u64, batch: usize, len: usize) -> Vec<usize> {
    let mut perm_cache: Option<(u64, Vec<usize>)> = None;
    (0..batch)
        .map(|i| {
            let global = step * batch as u64 + i as u64;
            let epoch = global / len as u64;
            let offset = (global % len as u64) as usize;
            if perm_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut perm: Vec<usize> = (0..len).collect();
                let mut rng = stream(seed, &format!("perm-{}", task.name()), epoch);
                for k in (1..len).rev() {
                    let j = rng.gen_range(0..=k);
                    perm.swap(k, j);
                }
                perm_cache = Some((epoch, perm));
            }
            perm_cache.as_ref().unwrap().1[offset]
        })
        .collect()
}

/// Target sequence for a recognition task on a single-frame sample.
pub fn frame_target(
    task: Task,
    sample: &VideoSample,
    vocab: &Vocab,
    max_objects: usize,
) -> Result<TokenSeq, CodecError> {
    let ann = &sample.anns[0];
    match task {
        Task::DetectAll => encode_detection(&ann.boxes, DetectMode::All, max_objects, vocab),
        Task::DetectVisible => encode_detection(&ann.boxes, DetectMode::Visible, max_objects, vocab),
        Task::CountAll => encode_answer(task, AnswerLabel::Count(sample.count_all()), vocab),
        Task::CountUnique => encode_answer(task, AnswerLabel::Count(sample.count_unique()), vocab),
        Task::Snitch => encode_answer(
            task,
            AnswerLabel::SnitchBox(ann.boxes[sample.snitch_index].bbox),
            vocab,
        ),
        other => Err(CodecError::InvalidLabel {
            task: other,
            msg: "not a single-frame recognition task".into(),
        }),
    }
}

/// One teacher-forced batch: stacked frames and per-sample targets.
pub struct Batch {
    pub frames: Tensor<f32>,
    pub targets: Vec<TokenSeq>,
}

pub fn build_batch(
    cfg: &TrainConfig,
    task: Task,
    data: &TaskData,
    vocab: &Vocab,
    step: u64,
) -> Result<Batch, TrainError> {
    let len = data.len();
    if len == 0 {
        return Err(TrainError::Invalid(format!("empty dataset for task {task}")));
    }
    let idxs = batch_indices(cfg.seed, task, step, cfg.batch, len);
    match data {
        TaskData::Frames(samples) => {
            let fshape = samples[0].frames[0].shape().to_vec();
            let mut stacked = Vec::with_capacity(cfg.batch * samples[0].frames[0].numel());
            let mut targets = Vec::with_capacity(cfg.batch);
            for &si in &idxs {
                let s = &samples[si];
                stacked.extend_from_slice(s.frames[0].data());
                targets.push(frame_target(task, s, vocab, cfg.max_objects)?);
            }
            let frames = Tensor::new(
                vec![cfg.batch, 1, fshape[0], fshape[1], fshape[2]],
                stacked,
            )?;
            Ok(Batch { frames, targets })
        }
        TaskData::Videos(samples) => {
            let n = cfg.frames_per_sample;
            let fshape = samples[0].frames[0].shape().to_vec();
            let mut stacked = Vec::with_capacity(cfg.batch * n * samples[0].frames[0].numel());
            let mut targets = Vec::with_capacity(cfg.batch);
            for (i, &si) in idxs.iter().enumerate() {
                let s = &samples[si];
                let mut rng = stream(
                    cfg.seed,
                    &format!("frame-pick-{}", task.name()),
                    step * cfg.batch as u64 + i as u64,
                );
                let picked = sample_frames(s.num_frames(), n.min(s.num_frames()), SampleMode::Train, &mut rng)?;
                for &t in &picked {
                    stacked.extend_from_slice(s.frames[t].data());
                }
                targets.push(encode_answer(task, AnswerLabel::Cell(s.snitch_cell), vocab)?);
            }
            let frames = Tensor::new(
                vec![cfg.batch, n, fshape[0], fshape[1], fshape[2]],
                stacked,
            )?;
            Ok(Batch { frames, targets })
        }
        TaskData::Acre(episodes) => {
            let f = episodes[0].frames.len();
            let fshape = episodes[0].frames[0].shape().to_vec();
            let mut stacked = Vec::with_capacity(cfg.batch * f * episodes[0].frames[0].numel());
            let mut targets = Vec::with_capacity(cfg.batch);
            for &si in &idxs {
                let e = &episodes[si];
                for frame in &e.frames {
                    stacked.extend_from_slice(frame.data());
                }
                targets.push(encode_answer(Task::Acre, AnswerLabel::Acre(e.label), vocab)?);
            }
            let frames = Tensor::new(vec![cfg.batch, f, fshape[0], fshape[1], fshape[2]], stacked)?;
            Ok(Batch { frames, targets })
        }
    }
}

/// Decoder inputs, flattened targets, and the loss mask for a padded batch.
/// The input row is the prompt followed by the target shifted right; loss is
/// taken only at target (non-pad) positions.
pub fn assemble_teacher_forcing(
    prompt: usize,
    targets: &[TokenSeq],
) -> (Vec<Vec<usize>>, Vec<usize>, Vec<bool>) {
    let max_len = targets.iter().map(TokenSeq::len).max().unwrap_or(1);
    let mut inputs = Vec::with_capacity(targets.len());
    let mut flat_targets = Vec::with_capacity(targets.len() * max_len);
    let mut mask = Vec::with_capacity(targets.len() * max_len);
    for t in targets {
        let l = t.len();
        let mut row = Vec::with_capacity(max_len);
        row.push(prompt);
        row.extend_from_slice(&t.ids[..l - 1]);
        row.resize(max_len, PAD);
        inputs.push(row);
        for p in 0..max_len {
            if p < l {
                flat_targets.push(t.ids[p]);
                mask.push(true);
            } else {
                flat_targets.push(PAD);
                mask.push(false);
            }
        }
    }
    (inputs, flat_targets, mask)
}

/// Mean token cross-entropy over masked positions of (B, L, V) logits.
pub fn masked_seq_loss(
    tape: &mut Tape<f32>,
    logits: ValueId,
    targets: &[usize],
    mask: &[bool],
) -> Result<ValueId, TensorError> {
    let s = tape.shape(logits).to_vec();
    let flat = tape.reshape(logits, &[s[0] * s[1], s[2]])?;
    tape.masked_cross_entropy(flat, targets, mask)
}

pub struct TrainRun<'a> {
    pub config: TrainConfig,
    pub schedule: Schedule,
    pub tasks: Vec<TaskSpec>,
    pub data: Vec<TaskData<'a>>,
    pub vocab: Vocab,
}

#[derive(Debug)]
pub struct TrainReport {
    pub metrics: MetricsLog,
    pub realized_counts: Vec<u64>,
    /// Most recent loss per task.
    pub last_losses: Vec<Option<f64>>,
}

/// Runs the loop from `start_step` to `config.total_steps`. The checkpoint
/// hook fires every `eval_cadence` steps and once at the end.
pub fn train<F>(
    model: &mut Model<f32>,
    optim: &mut OptimState<f32>,
    run: &TrainRun,
    start_step: u64,
    mut on_checkpoint: F,
) -> Result<TrainReport, TrainError>
where
    F: FnMut(u64, &Model<f32>, &OptimState<f32>, &MetricsLog) -> Result<(), TrainError>,
{
    let cfg = &run.config;
    run.schedule.validate(run.tasks.len(), cfg.total_steps)?;
    if run.tasks.len() != run.data.len() {
        return Err(TrainError::Invalid("tasks and datasets are misaligned".into()));
    }
    if optim.step != start_step {
        return Err(TrainError::Invalid(format!(
            "optimizer step {} does not match start step {start_step}",
            optim.step
        )));
    }
    let mut metrics = MetricsLog::default();
    let mut realized = vec![0u64; run.tasks.len()];
    let mut last_losses = vec![None; run.tasks.len()];
    let shapes = model.param_shapes();

    for step in start_step..cfg.total_steps {
        let mut grads: Vec<Tensor<f32>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        for ti in run.schedule.tasks_at(step, run.tasks.len()) {
            let spec = &run.tasks[ti];
            if spec.weight == 0.0 {
                continue;
            }
            let batch = build_batch(cfg, spec.task, &run.data[ti], &run.vocab, step)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, BindMode::Trainable);
            let memory = model.encode_video(&mut tape, &bound, batch.frames)?;
            let (inputs, targets, mask) =
                assemble_teacher_forcing(run.vocab.prompt(spec.task), &batch.targets);
            let logits = model.decode_teacher_forced(&mut tape, &bound, memory, &inputs)?;
            let loss = masked_seq_loss(&mut tape, logits, &targets, &mask)?;
            let weighted = tape.scale(loss, spec.weight)?;
            tape.backward(weighted)?;
            for (slot, id) in model.trainable_ids(&bound).into_iter().enumerate() {
                let g = tape.grad(id);
                for (o, &v) in grads[slot].data_mut().iter_mut().zip(g.data()) {
                    *o += v;
                }
            }
            let loss_value = f64::from(tape.value(loss).item());
            last_losses[ti] = Some(loss_value);
            realized[ti] += 1;
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                metrics.push(step, spec.task.name(), "loss", loss_value);
                metrics.push(step, spec.task.name(), "lr", lr_at(step, &optim.config));
            }
        }
        adam_apply(model.tensors_mut(), &grads, optim)?;
        if cfg.eval_cadence > 0 && (step + 1) % cfg.eval_cadence == 0 && step + 1 < cfg.total_steps
        {
            on_checkpoint(step + 1, model, optim, &metrics)?;
        }
    }
    on_checkpoint(cfg.total_steps, model, optim, &metrics)?;
    Ok(TrainReport { metrics, realized_counts: realized, last_losses })
}

/// Everything needed to resume bit-exactly or to evaluate later.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_config: ModelConfig,
    pub vocab: Vocab,
    pub optim_config: OptimConfig,
    pub step: u64,
    pub seed: u64,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(
    path: &std::path::Path,
    model: &Model<f32>,
    optim: &OptimState<f32>,
    meta: &CheckpointMeta,
) -> Result<(), TrainError> {
    let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
    for (name, t) in model.param_names().iter().zip(model.tensors()) {
        tensors.push((format!("param.{name}"), t));
    }
    for (name, m) in model.param_names().iter().zip(&optim.moments) {
        tensors.push((format!("optim.m.{name}"), &m.m));
    }
    for (name, m) in model.param_names().iter().zip(&optim.moments) {
        tensors.push((format!("optim.v.{name}"), &m.v));
    }
    let metadata = serde_json::to_value(meta).map_err(CheckpointError::from)?;
    write_container_file(path, &tensors, metadata)?;
    Ok(())
}

pub fn load_checkpoint(
    path: &std::path::Path,
) -> Result<(Model<f32>, OptimState<f32>, CheckpointMeta), TrainError> {
    let (manifest, tensors) = read_container_file(path)?;
    let meta: CheckpointMeta =
        serde_json::from_value(manifest.metadata).map_err(CheckpointError::from)?;
    let mut model = Model::<f32>::init(meta.model_config.clone(), meta.vocab.size(), 0)?;
    let mut optim = OptimState::new(meta.optim_config, &model.param_shapes());
    optim.step = meta.step;
    let lookup = |prefix: &str, name: &str| -> Result<Tensor<f32>, TrainError> {
        tensors
            .iter()
            .find(|(n, _)| n == &format!("{prefix}.{name}"))
            .map(|(_, t)| t.clone())
            .ok_or_else(|| TrainError::Invalid(format!("checkpoint missing {prefix}.{name}")))
    };
    for name in model.param_names().to_vec() {
        let value = lookup("param", &name)?;
        model.set(&name, value)?;
    }
    for (i, name) in model.param_names().to_vec().into_iter().enumerate() {
        optim.moments[i].m = lookup("optim.m", &name)?;
        optim.moments[i].v = lookup("optim.v", &name)?;
    }
    Ok((model, optim, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alternating_schedule_cycles_tasks() {
        let s = Schedule::Alternating { interval: 100 };
        assert_eq!(s.tasks_at(0, 2), vec![0]);
        assert_eq!(s.tasks_at(99, 2), vec![0]);
        assert_eq!(s.tasks_at(100, 2), vec![1]);
        assert_eq!(s.tasks_at(199, 2), vec![1]);
        assert_eq!(s.tasks_at(200, 2), vec![0]);
        assert_eq!(s.expected_counts(2, 300), vec![200, 100]);
    }

    #[test]
    fn single_switch_splits_exactly() {
        let s = Schedule::SingleSwitch { pretrain_steps: 5000 };
        assert_eq!(s.tasks_at(4999, 2), vec![0]);
        assert_eq!(s.tasks_at(5000, 2), vec![1]);
        assert_eq!(s.expected_counts(2, 7000), vec![5000, 2000]);
        assert!(s.validate(2, 7000).is_ok());
        assert!(s.validate(3, 7000).is_err());
        assert!(s.validate(2, 5000).is_err());
    }

    #[test]
    fn joint_schedule_runs_every_task() {
        let s = Schedule::Joint;
        assert_eq!(s.tasks_at(17, 3), vec![0, 1, 2]);
        assert_eq!(s.expected_counts(3, 42), vec![42, 42, 42]);
    }

    #[test]
    fn alternating_counts_match_simulation() {
        for &(interval, ntasks, total) in
            &[(1u64, 2usize, 17u64), (3, 3, 100), (7, 2, 50), (100, 4, 1000)]
        {
            let s = Schedule::Alternating { interval };
            let mut counts = vec![0u64; ntasks];
            for step in 0..total {
                for ti in s.tasks_at(step, ntasks) {
                    counts[ti] += 1;
                }
            }
            assert_eq!(counts, s.expected_counts(ntasks, total), "interval {interval}");
        }
    }

    #[test]
    fn batch_indices_cover_epochs_without_repeats() {
        let len = 7;
        let mut seen = vec![0usize; len];
        for step in 0..7 {
            for idx in batch_indices(3, Task::Cater, step, 2, len) {
                seen[idx] += 1;
            }
        }
        // 14 draws over a 7-sample set = exactly two epochs.
        assert!(seen.iter().all(|&c| c == 2), "{seen:?}");
    }

    #[test]
    fn teacher_forcing_layout_shifts_and_masks() {
        let targets = vec![
            TokenSeq::bare(vec![10, 11, 2]),
            TokenSeq::bare(vec![20, 2]),
        ];
        let (inputs, flat, mask) = assemble_teacher_forcing(99, &targets);
        assert_eq!(inputs[0], vec![99, 10, 11]);
        assert_eq!(inputs[1], vec![99, 20, PAD]);
        assert_eq!(flat, vec![10, 11, 2, 20, 2, PAD]);
        assert_eq!(mask, vec![true, true, true, true, true, false]);
    }
}
