//! Frozen-encoder probing.
//!
//! A trained encoder is loaded and frozen; a fresh decoder of the same
//! architecture is trained to read a *single* slot vector per iteration
//! (slot index drawn uniformly), so whatever it learns to decode must
//! already live inside individual slots. Reporting then generates
//! detections from each slot separately, flags true positives against
//! ground truth, and renders per-slot overlay images.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::codec::{decode_detection, BBox, Detection, Task, Vocab};
use crate::model::{BindMode, Model};
use crate::optim::OptimState;
use crate::par;
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::trainer::{
    assemble_teacher_forcing, frame_target, iou, masked_seq_loss, TrainConfig, TrainError,
};
use crate::worldgen::VideoSample;

use rand::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// What the probe decoder is trained to emit.
    pub task: Task,
    /// Detections below this generation probability are dropped from reports.
    pub threshold: f64,
    pub steps: u64,
    pub batch: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub seed: u64,
    pub max_objects: usize,
    /// Optional restriction of the slots probed (default: all).
    pub slot_subset: Option<Vec<usize>>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            task: Task::DetectAll,
            threshold: 0.90,
            steps: 400,
            batch: 16,
            base_lr: 3e-4,
            warmup_steps: 100,
            weight_decay: 0.05,
            seed: 0,
            max_objects: 6,
            slot_subset: None,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0 < self.threshold && self.threshold < 1.0) {
            return Err(TrainError::Invalid(format!("threshold {} outside (0,1)", self.threshold)));
        }
        if !matches!(self.task, Task::DetectAll | Task::DetectVisible | Task::Snitch) {
            return Err(TrainError::Invalid(format!(
                "probing task must be a detection variant or snitch, got {}",
                self.task
            )));
        }
        Ok(())
    }

    fn train_config(&self, total_steps: u64) -> TrainConfig {
        TrainConfig {
            batch: self.batch,
            total_steps,
            warmup_steps: self.warmup_steps,
            base_lr: self.base_lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
            eval_cadence: 0,
            frames_per_sample: 1,
            eval_frames: 1,
            max_objects: self.max_objects,
            log_every: 25,
        }
    }

    fn slots(&self, total: usize) -> Vec<usize> {
        match &self.slot_subset {
            Some(s) => s.iter().copied().filter(|&i| i < total).collect(),
            None => (0..total).collect(),
        }
    }
}

/// Runs the frozen encoder over single frames and returns per-frame slot
/// vectors as plain tensors (one (S, D) tensor per sample). The base model
/// is bound as constants, so no gradient can reach it.
fn frozen_slots(base: &Model<f32>, frames: &[&VideoSample]) -> Vec<Tensor<f32>> {
    par::map_collect(frames.len(), |i| {
        let sample = frames[i];
        let mut tape = Tape::new();
        let bound = base.bind(&mut tape, BindMode::Frozen);
        let f0 = &sample.frames[0];
        let s = f0.shape();
        let img = Tensor::new(vec![1, s[0], s[1], s[2]], f0.data().to_vec()).unwrap();
        let slots = base.encode_frames(&mut tape, &bound, img).expect("frozen encode");
        assert!(!tape.is_tracked(slots), "frozen encoder produced a tracked value");
        let v = tape.value(slots);
        Tensor::new(vec![base.config.slots, base.config.dim], v.data().to_vec()).unwrap()
    })
}

/// Trains a fresh decoder against single-slot memories drawn from the frozen
/// `base` encoder. Returns the probe model, its optimizer state, and the
/// slot-index draw sequence.
pub fn train_probe(
    base: &Model<f32>,
    cfg: &ProbeConfig,
    dataset: &[VideoSample],
    vocab: &Vocab,
) -> Result<(Model<f32>, OptimState<f32>, Vec<usize>), TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Invalid("empty probe dataset".into()));
    }
    let encoder_before: Vec<Tensor<f32>> = base.tensors().to_vec();
    let mut probe = Model::<f32>::init(base.config.clone(), vocab.size(), cfg.seed ^ 0x9e37)?;
    let tcfg = cfg.train_config(cfg.steps);
    let mut optim = OptimState::new(tcfg.optimizer(), &probe.param_shapes());
    let slots = cfg.slots(base.config.slots);
    if slots.is_empty() {
        return Err(TrainError::Invalid("slot subset selects nothing".into()));
    }
    let mut slot_draws = Vec::with_capacity(cfg.steps as usize);
    let shapes = probe.param_shapes();

    for step in 0..cfg.steps {
        // One slot index per iteration, uniform over the probed set.
        let slot = slots[stream(cfg.seed, "probe-slot", step).gen_range(0..slots.len())];
        slot_draws.push(slot);
        let mut idx_rng = stream(cfg.seed, "probe-batch", step);
        let batch_samples: Vec<&VideoSample> =
            (0..cfg.batch).map(|_| &dataset[idx_rng.gen_range(0..dataset.len())]).collect();
        let slot_vecs = frozen_slots(base, &batch_samples);

        // Memory = the selected slot vector alone, length-1 per sample.
        let d = base.config.dim;
        let mut mem_data = Vec::with_capacity(cfg.batch * d);
        for sv in &slot_vecs {
            mem_data.extend_from_slice(&sv.data()[slot * d..(slot + 1) * d]);
        }
        let memory_tensor = Tensor::new(vec![cfg.batch, 1, d], mem_data)?;

        let mut tape = Tape::new();
        let bound = probe.bind(&mut tape, BindMode::Trainable);
        let memory = tape.constant(memory_tensor);
        let targets: Result<Vec<_>, _> = batch_samples
            .iter()
            .map(|s| frame_target(cfg.task, s, vocab, cfg.max_objects))
            .collect();
        let targets = targets?;
        let (inputs, flat_targets, mask) =
            assemble_teacher_forcing(vocab.prompt(Task::Probe), &targets);
        let logits = probe.decode_teacher_forced(&mut tape, &bound, memory, &inputs)?;
        let loss = masked_seq_loss(&mut tape, logits, &flat_targets, &mask)?;
        tape.backward(loss)?;
        let mut grads: Vec<Tensor<f32>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        for (gi, id) in probe.trainable_ids(&bound).into_iter().enumerate() {
            grads[gi] = tape.grad(id);
        }
        crate::optim::adam_apply(probe.tensors_mut(), &grads, &mut optim)?;
    }

    // Frozen-encoder invariant: bitwise equality across the whole run.
    for (before, after) in encoder_before.iter().zip(base.tensors()) {
        if before != after {
            return Err(TrainError::Invalid("frozen encoder changed during probing".into()));
        }
    }
    Ok((probe, optim, slot_draws))
}

/// One kept detection from one slot on one frame.
#[derive(Debug, Clone, Serialize)]
pub struct SlotDetection {
    pub frame: usize,
    pub slot: usize,
    pub det: Detection,
    pub tp: bool,
    /// Index of the matched ground-truth object, when tp.
    pub matched: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub threshold: f64,
    pub detections: Vec<SlotDetection>,
    /// tp_counts[slot] = (class id, count) pairs.
    pub tp_counts: Vec<Vec<(usize, usize)>>,
    /// Fraction of ground-truth objects matched by at least one slot.
    pub coverage: f64,
    /// overlap[a][b] = ground-truth objects claimed by both slots a and b.
    pub overlap: Vec<Vec<usize>>,
    pub gt_total: usize,
}

/// Greedy score-descending TP matching of one slot's detections against one
/// frame's ground truth, mirroring the AP evaluator's matcher.
pub fn match_slot(dets: &[Detection], gt: &[(BBox, usize)]) -> Vec<(bool, Option<usize>)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut used = vec![false; gt.len()];
    let mut flags = vec![(false, None); dets.len()];
    for di in order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gbox, gclass)) in gt.iter().enumerate() {
            if used[gi] || *gclass != dets[di].class_id {
                continue;
            }
            let v = iou(&dets[di].bbox, gbox);
            if v >= 0.5 && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            used[gi] = true;
            flags[di] = (true, Some(gi));
        }
    }
    flags
}

/// Generates detections from every probed slot of every frame, keeps those
/// at or above `threshold`, and aggregates coverage and slot overlap.
pub fn probe_report(
    base: &Model<f32>,
    probe: &Model<f32>,
    cfg: &ProbeConfig,
    dataset: &[VideoSample],
    vocab: &Vocab,
) -> Result<ProbeReport, TrainError> {
    cfg.validate()?;
    let slots = cfg.slots(base.config.slots);
    let refs: Vec<&VideoSample> = dataset.iter().collect();
    let slot_vecs = frozen_slots(base, &refs);
    let d = base.config.dim;
    let visible_only = cfg.task == Task::DetectVisible;

    // (frame, slot) work items, embarrassingly parallel.
    let per_cell: Vec<Vec<SlotDetection>> = par::map_collect(dataset.len() * slots.len(), |w| {
        let fi = w / slots.len();
        let slot = slots[w % slots.len()];
        let sv = &slot_vecs[fi];
        let mem = Tensor::new(vec![1, 1, d], sv.data()[slot * d..(slot + 1) * d].to_vec()).unwrap();
        let mut tape = Tape::new();
        let bound = probe.bind(&mut tape, BindMode::Frozen);
        let memory = tape.constant(mem);
        let gen = probe
            .generate(&mut tape, &bound, memory, &[vocab.prompt(Task::Probe)], 5 * cfg.max_objects + 1)
            .expect("probe generate");
        let (dets, _) = decode_detection(&gen.seq, vocab);
        let kept: Vec<Detection> = dets.into_iter().filter(|dt| dt.score >= cfg.threshold).collect();
        let gt: Vec<(BBox, usize)> = dataset[fi].anns[0]
            .boxes
            .iter()
            .filter(|b| !visible_only || b.visible)
            .map(|b| (b.bbox, b.class_id))
            .collect();
        let flags = match_slot(&kept, &gt);
        kept.into_iter()
            .zip(flags)
            .map(|(det, (tp, matched))| SlotDetection { frame: fi, slot, det, tp, matched })
            .collect()
    });

    let detections: Vec<SlotDetection> = per_cell.into_iter().flatten().collect();
    let max_slot = slots.iter().copied().max().unwrap_or(0) + 1;
    let mut tp_class_counts: Vec<std::collections::BTreeMap<usize, usize>> =
        vec![Default::default(); max_slot];
    // claims[frame][gt index] = slots that matched that object.
    let mut gt_total = 0usize;
    let mut claims: Vec<Vec<Vec<usize>>> = dataset
        .iter()
        .map(|s| {
            let n = s.anns[0].boxes.iter().filter(|b| !visible_only || b.visible).count();
            gt_total += n;
            vec![Vec::new(); n]
        })
        .collect();
    for sd in &detections {
        if sd.tp {
            *tp_class_counts[sd.slot].entry(sd.det.class_id).or_default() += 1;
            if let Some(gi) = sd.matched {
                claims[sd.frame][gi].push(sd.slot);
            }
        }
    }
    let covered = claims.iter().flatten().filter(|c| !c.is_empty()).count();
    let mut overlap = vec![vec![0usize; max_slot]; max_slot];
    for per_gt in claims.iter().flatten() {
        for (i, &a) in per_gt.iter().enumerate() {
            for &b in &per_gt[i..] {
                overlap[a][b] += 1;
                if a != b {
                    overlap[b][a] += 1;
                }
            }
        }
    }
    Ok(ProbeReport {
        threshold: cfg.threshold,
        detections,
        tp_counts: tp_class_counts.into_iter().map(|m| m.into_iter().collect()).collect(),
        coverage: if gt_total == 0 { 0.0 } else { covered as f64 / gt_total as f64 },
        overlap,
        gt_total,
    })
}

/// Fraction of frames where the probe's generated snitch box reaches
/// IoU ≥ 0.5, taking each frame's best slot. The measurable form of "the
/// slot encodes where the snitch is".
pub fn snitch_probe_accuracy(
    base: &Model<f32>,
    probe: &Model<f32>,
    cfg: &ProbeConfig,
    dataset: &[VideoSample],
    vocab: &Vocab,
) -> Result<f64, TrainError> {
    let slots = cfg.slots(base.config.slots);
    let refs: Vec<&VideoSample> = dataset.iter().collect();
    let slot_vecs = frozen_slots(base, &refs);
    let d = base.config.dim;
    let hits = par::map_collect(dataset.len(), |fi| {
        let gt = dataset[fi].anns[0].boxes[dataset[fi].snitch_index].bbox;
        slots.iter().any(|&slot| {
            let sv = &slot_vecs[fi];
            let mem =
                Tensor::new(vec![1, 1, d], sv.data()[slot * d..(slot + 1) * d].to_vec()).unwrap();
            let mut tape = Tape::new();
            let bound = probe.bind(&mut tape, BindMode::Frozen);
            let memory = tape.constant(mem);
            let gen = probe
                .generate(&mut tape, &bound, memory, &[vocab.prompt(Task::Probe)], 5)
                .expect("probe generate");
            let bins: Vec<usize> = gen
                .seq
                .ids
                .iter()
                .take(4)
                .filter_map(|&id| match vocab.role_of(id) {
                    Some(crate::codec::TokenRole::Coord(b)) => Some(b),
                    _ => None,
                })
                .collect();
            if bins.len() != 4 {
                return false;
            }
            let b = vocab.config.bins;
            let pred = BBox {
                ymin: crate::codec::dequantize(bins[0], b),
                xmin: crate::codec::dequantize(bins[1], b),
                ymax: crate::codec::dequantize(bins[2], b),
                xmax: crate::codec::dequantize(bins[3], b),
            };
            iou(&pred, &gt) >= 0.5
        })
    });
    Ok(hits.iter().filter(|&&h| h).count() as f64 / dataset.len().max(1) as f64)
}

const COLOR_TP: [u8; 3] = [0, 200, 0];
const COLOR_FP: [u8; 3] = [230, 40, 40];

/// 3×5 bitmap glyphs for class abbreviations.
fn glyph(ch: char) -> [u8; 15] {
    match ch {
        'C' => [1, 1, 1, 1, 0, 0, 1, 0, 0, 1, 0, 0, 1, 1, 1],
        'I' => [1, 1, 1, 0, 1, 0, 0, 1, 0, 0, 1, 0, 1, 1, 1],
        'R' => [1, 1, 0, 1, 0, 1, 1, 1, 0, 1, 0, 1, 1, 0, 1],
        'S' => [1, 1, 1, 1, 0, 0, 1, 1, 1, 0, 0, 1, 1, 1, 1],
        'Q' => [1, 1, 1, 1, 0, 1, 1, 0, 1, 1, 1, 1, 0, 0, 1],
        'U' => [1, 0, 1, 1, 0, 1, 1, 0, 1, 1, 0, 1, 1, 1, 1],
        'T' => [1, 1, 1, 0, 1, 0, 0, 1, 0, 0, 1, 0, 0, 1, 0],
        'O' => [1, 1, 1, 1, 0, 1, 1, 0, 1, 1, 0, 1, 1, 1, 1],
        'N' => [1, 0, 1, 1, 1, 1, 1, 1, 1, 1, 0, 1, 1, 0, 1],
        _ => [0; 15],
    }
}

fn class_abbrev(class_id: usize) -> &'static str {
    match crate::worldgen::Shape::from_class_id(class_id) {
        Some(crate::worldgen::Shape::Circle) => "CIR",
        Some(crate::worldgen::Shape::Square) => "SQU",
        Some(crate::worldgen::Shape::Triangle) => "TRI",
        Some(crate::worldgen::Shape::Cone) => "CON",
        Some(crate::worldgen::Shape::Snitch) => "SNI",
        None => "",
    }
}

fn draw_rect(img: &mut image::RgbImage, bb: &BBox, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let y0 = (bb.ymin * h as f64).round() as i64;
    let y1 = ((bb.ymax * h as f64).round() as i64 - 1).max(y0);
    let x0 = (bb.xmin * w as f64).round() as i64;
    let x1 = ((bb.xmax * w as f64).round() as i64 - 1).max(x0);
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

fn draw_label(img: &mut image::RgbImage, text: &str, x0: i64, y0: i64, color: [u8; 3]) {
    for (ci, ch) in text.chars().enumerate() {
        let g = glyph(ch);
        for gy in 0..5i64 {
            for gx in 0..3i64 {
                if g[(gy * 3 + gx) as usize] == 1 {
                    let (x, y) = (x0 + ci as i64 * 4 + gx, y0 + gy);
                    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
                        img.put_pixel(x as u32, y as u32, image::Rgb(color));
                    }
                }
            }
        }
    }
}

/// Writes one overlay per slot (`slot_{i}.png`) plus a machine-readable
/// `report.json` describing every kept box on this frame.
pub fn emit_visualization(
    frame: &Tensor<f32>,
    frame_index: usize,
    report: &ProbeReport,
    slots: &[usize],
    out_dir: &std::path::Path,
    scale: usize,
) -> Result<Vec<std::path::PathBuf>, TrainError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| TrainError::Invalid(format!("cannot create {}: {e}", out_dir.display())))?;
    let base_img = crate::worldgen::frame_to_rgb8(frame);
    let scaled = image::imageops::resize(
        &base_img,
        base_img.width() * scale as u32,
        base_img.height() * scale as u32,
        image::imageops::FilterType::Nearest,
    );
    let mut written = Vec::new();
    for &slot in slots {
        let mut img = scaled.clone();
        for sd in report.detections.iter().filter(|s| s.frame == frame_index && s.slot == slot) {
            let color = if sd.tp { COLOR_TP } else { COLOR_FP };
            draw_rect(&mut img, &sd.det.bbox, color);
            let x0 = (sd.det.bbox.xmin * img.width() as f64).round() as i64;
            let y0 = (sd.det.bbox.ymin * img.height() as f64).round() as i64 - 6;
            draw_label(&mut img, class_abbrev(sd.det.class_id), x0, y0.max(0), color);
        }
        let path = out_dir.join(format!("slot_{slot}.png"));
        img.save(&path)
            .map_err(|e| TrainError::Invalid(format!("png write {}: {e}", path.display())))?;
        written.push(path);
    }
    let report_path = out_dir.join("report.json");
    let frame_dets: Vec<&SlotDetection> =
        report.detections.iter().filter(|s| s.frame == frame_index).collect();
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&frame_dets)
            .map_err(|e| TrainError::Invalid(format!("report json: {e}")))?,
    )
    .map_err(|e| TrainError::Invalid(format!("report write: {e}")))?;
    written.push(report_path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_draws_are_reproducible() {
        let draw = |seed: u64| -> Vec<usize> {
            (0..20)
                .map(|step| stream(seed, "probe-slot", step).gen_range(0..10usize))
                .collect()
        };
        assert_eq!(draw(5), draw(5));
        assert!(draw(5).iter().any(|&s| s != draw(5)[0]), "degenerate draw sequence");
    }

    #[test]
    fn threshold_and_task_validation() {
        let mut cfg = ProbeConfig { threshold: 1.01, ..ProbeConfig::default() };
        assert!(cfg.validate().is_err());
        cfg.threshold = 0.5;
        assert!(cfg.validate().is_ok());
        cfg.task = Task::Cater;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_slot_policy_is_constant() {
        let cfg = ProbeConfig::default();
        assert_eq!(cfg.slots(1), vec![0]);
    }

    #[test]
    fn match_slot_flags_tp_against_same_class_gt() {
        let gt = vec![(BBox { ymin: 0.1, xmin: 0.1, ymax: 0.3, xmax: 0.3 }, 2)];
        let dets = vec![
            Detection { bbox: gt[0].0, class_id: 2, score: 0.95 },
            Detection { bbox: gt[0].0, class_id: 2, score: 0.80 }, // duplicate → FP
            Detection { bbox: gt[0].0, class_id: 1, score: 0.99 }, // wrong class → FP
        ];
        let flags = match_slot(&dets, &gt);
        assert_eq!(flags[0], (true, Some(0)));
        assert_eq!(flags[1], (false, None));
        assert_eq!(flags[2], (false, None));
    }
}
