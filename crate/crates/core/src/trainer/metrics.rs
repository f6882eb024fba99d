//! Evaluation metrics: IoU, pooled AP50 with greedy matching, task
//! accuracies, and the append-only metrics log.

use serde::Serialize;

use crate::codec::{
    decode_detection, prompt_for, BBox, Detection, Light, Task, TokenRole, Vocab,
};
use crate::model::{BindMode, Model};
use crate::autograd::Tape;
use crate::par;
use crate::tensor::Tensor;
use crate::worldgen::{AcreEpisode, QuestionType, SampleMode, VideoSample, ALL_QUESTION_TYPES};

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iy = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let ix = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let inter = iy * ix;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Ground truth for one image: (box, class) pairs.
pub type GtSet = Vec<(BBox, usize)>;

#[derive(Debug, Clone, Serialize)]
pub struct Ap50Result {
    pub mean_ap: f64,
    /// (class id, ap) for classes present in the ground truth.
    pub per_class: Vec<(usize, f64)>,
    /// Set when there was nothing to evaluate (no GT and no detections).
    pub undefined: bool,
}

/// Matches pooled detections to ground truth greedily in descending score
/// order (IoU ≥ 0.5, same class, one match per GT), then computes all-point
/// interpolated average precision per class and averages over the classes
/// present.
pub fn average_precision_50(samples: &[(Vec<Detection>, GtSet)]) -> Ap50Result {
    let total_gt: usize = samples.iter().map(|(_, gt)| gt.len()).sum();
    let total_det: usize = samples.iter().map(|(d, _)| d.len()).sum();
    if total_gt == 0 && total_det == 0 {
        return Ap50Result { mean_ap: 1.0, per_class: vec![], undefined: true };
    }

    // (score, sample, det index) pooled and sorted by score descending;
    // stable sort keeps pool order deterministic on ties.
    let mut pooled: Vec<(f64, usize, usize)> = samples
        .iter()
        .enumerate()
        .flat_map(|(si, (dets, _))| dets.iter().enumerate().map(move |(di, d)| (d.score, si, di)))
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut matched: Vec<Vec<bool>> = samples.iter().map(|(_, gt)| vec![false; gt.len()]).collect();
    // Per pooled detection: (class, is_tp)
    let mut flags: Vec<(usize, bool)> = Vec::with_capacity(pooled.len());
    for &(_, si, di) in &pooled {
        let det = &samples[si].0[di];
        let gt = &samples[si].1;
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gbox, gclass)) in gt.iter().enumerate() {
            if matched[si][gi] || *gclass != det.class_id {
                continue;
            }
            let v = iou(&det.bbox, gbox);
            if v >= 0.5 && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[si][gi] = true;
                flags.push((det.class_id, true));
            }
            None => flags.push((det.class_id, false)),
        }
    }

    let mut classes: Vec<usize> =
        samples.iter().flat_map(|(_, gt)| gt.iter().map(|&(_, c)| c)).collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_class = Vec::with_capacity(classes.len());
    for &c in &classes {
        let class_gt: usize =
            samples.iter().map(|(_, gt)| gt.iter().filter(|&&(_, gc)| gc == c).count()).sum();
        let mut tps = 0usize;
        let mut fps = 0usize;
        let mut pr: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
        for &(fc, tp) in &flags {
            if fc != c {
                continue;
            }
            if tp {
                tps += 1;
            } else {
                fps += 1;
            }
            pr.push((tps as f64 / class_gt as f64, tps as f64 / (tps + fps) as f64));
        }
        per_class.push((c, all_point_ap(&pr)));
    }
    let mean_ap = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|&(_, ap)| ap).sum::<f64>() / per_class.len() as f64
    };
    Ap50Result { mean_ap, per_class, undefined: false }
}

/// All-point interpolation: ∫ max-precision-at-recall≥r dr over steps.
fn all_point_ap(pr: &[(f64, f64)]) -> f64 {
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in pr.iter().enumerate() {
        if r > prev_recall {
            let p_max =
                pr[i..].iter().map(|&(_, p)| p).fold(0.0f64, f64::max);
            ap += (r - prev_recall) * p_max;
            prev_recall = r;
        }
    }
    ap
}

/// Exhaustive oracle for small instances: the best AP over every valid
/// assignment (each detection to at most one same-class GT with IoU ≥ 0.5).
pub fn brute_force_ap50(dets: &[Detection], gt: &GtSet) -> f64 {
    // Detections in score order, as in the greedy evaluator.
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let admissible: Vec<Vec<Option<usize>>> = order
        .iter()
        .map(|&di| {
            let mut opts: Vec<Option<usize>> = vec![None];
            for (gi, (gbox, gclass)) in gt.iter().enumerate() {
                if *gclass == dets[di].class_id && iou(&dets[di].bbox, gbox) >= 0.5 {
                    opts.push(Some(gi));
                }
            }
            opts
        })
        .collect();
    let mut best = f64::NEG_INFINITY;
    let mut assignment = vec![0usize; order.len()];
    loop {
        // Check validity: no GT claimed twice.
        let mut used = vec![false; gt.len()];
        let mut valid = true;
        let mut flags = Vec::with_capacity(order.len());
        for (k, &slot) in assignment.iter().enumerate() {
            match admissible[k][slot] {
                Some(gi) => {
                    if used[gi] {
                        valid = false;
                        break;
                    }
                    used[gi] = true;
                    flags.push((dets[order[k]].class_id, true));
                }
                None => flags.push((dets[order[k]].class_id, false)),
            }
        }
        if valid {
            let ap = ap_from_flags(&flags, gt);
            if ap > best {
                best = ap;
            }
        }
        // Next assignment in mixed radix.
        let mut k = 0;
        loop {
            if k == assignment.len() {
                return if best == f64::NEG_INFINITY { ap_from_flags(&[], gt) } else { best };
            }
            assignment[k] += 1;
            if assignment[k] < admissible[k].len() {
                break;
            }
            assignment[k] = 0;
            k += 1;
        }
    }
}

fn ap_from_flags(flags: &[(usize, bool)], gt: &GtSet) -> f64 {
    let mut classes: Vec<usize> = gt.iter().map(|&(_, c)| c).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let mut per = Vec::new();
    for &c in &classes {
        let class_gt = gt.iter().filter(|&&(_, gc)| gc == c).count();
        let mut tps = 0usize;
        let mut fps = 0usize;
        let mut pr = Vec::new();
        for &(fc, tp) in flags {
            if fc != c {
                continue;
            }
            if tp {
                tps += 1;
            } else {
                fps += 1;
            }
            pr.push((tps as f64 / class_gt as f64, tps as f64 / (tps + fps) as f64));
        }
        per.push(all_point_ap(&pr));
    }
    per.iter().sum::<f64>() / per.len() as f64
}

/// Stacks eval-sampled frames of a video into a (1, F, 3, H, W) batch.
pub fn eval_frame_batch(sample: &VideoSample, n_frames: usize) -> Tensor<f32> {
    let mut rng = crate::rng::stream(0, "eval-frames", 0);
    let n = n_frames.min(sample.num_frames());
    let picked = crate::worldgen::sample_frames(sample.num_frames(), n, SampleMode::Eval, &mut rng)
        .expect("eval frame count");
    let fshape = sample.frames[0].shape().to_vec();
    let mut data = Vec::with_capacity(n * sample.frames[0].numel());
    for &t in &picked {
        data.extend_from_slice(sample.frames[t].data());
    }
    Tensor::new(vec![1, n, fshape[0], fshape[1], fshape[2]], data).unwrap()
}

#[derive(Debug, Clone, Serialize)]
pub struct CaterEval {
    pub top1: f64,
    pub total: usize,
    /// Episodes whose first generated token was not a cell token.
    pub non_cell_answers: usize,
}

/// Top-1 accuracy of the generated cell token against the snitch cell.
pub fn evaluate_cater(
    model: &Model<f32>,
    dataset: &[VideoSample],
    vocab: &Vocab,
    n_frames: usize,
) -> CaterEval {
    let results = par::map_collect(dataset.len(), |i| {
        let sample = &dataset[i];
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, BindMode::Frozen);
        let frames = eval_frame_batch(sample, n_frames);
        let memory = model.encode_video(&mut tape, &bound, frames).expect("encode");
        let prompt = prompt_for(Task::Cater, vocab);
        let gen = model.generate(&mut tape, &bound, memory, &prompt.ids, 2).expect("generate");
        match gen.seq.ids.first().map(|&id| vocab.role_of(id)) {
            Some(Some(TokenRole::Cell(k))) => (k == sample.snitch_cell, false),
            _ => (false, true),
        }
    });
    let correct = results.iter().filter(|&&(c, _)| c).count();
    let non_cell = results.iter().filter(|&&(_, f)| f).count();
    CaterEval {
        top1: correct as f64 / dataset.len().max(1) as f64,
        total: dataset.len(),
        non_cell_answers: non_cell,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AcreEval {
    pub overall: f64,
    pub total: usize,
    pub per_type: Vec<(QuestionType, f64, usize)>,
    pub non_answer_tokens: usize,
}

/// Overall and per-question-type accuracy of the generated answer token.
pub fn evaluate_acre(model: &Model<f32>, dataset: &[AcreEpisode], vocab: &Vocab) -> AcreEval {
    let results = par::map_collect(dataset.len(), |i| {
        let ep = &dataset[i];
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, BindMode::Frozen);
        let fshape = ep.frames[0].shape().to_vec();
        let mut data = Vec::new();
        for f in &ep.frames {
            data.extend_from_slice(f.data());
        }
        let frames =
            Tensor::new(vec![1, ep.frames.len(), fshape[0], fshape[1], fshape[2]], data).unwrap();
        let memory = model.encode_video(&mut tape, &bound, frames).expect("encode");
        let prompt = prompt_for(Task::Acre, vocab);
        let gen = model.generate(&mut tape, &bound, memory, &prompt.ids, 2).expect("generate");
        let answer: Option<Light> = match gen.seq.ids.first().map(|&id| vocab.role_of(id)) {
            Some(Some(TokenRole::Answer(l))) => Some(l),
            _ => None,
        };
        (answer == Some(ep.label), answer.is_none(), ep.question_type)
    });
    let total = dataset.len();
    let correct = results.iter().filter(|r| r.0).count();
    let non_answer = results.iter().filter(|r| r.1).count();
    let per_type = ALL_QUESTION_TYPES
        .iter()
        .map(|&qt| {
            let of_type: Vec<_> = results.iter().filter(|r| r.2 == qt).collect();
            let acc = if of_type.is_empty() {
                0.0
            } else {
                of_type.iter().filter(|r| r.0).count() as f64 / of_type.len() as f64
            };
            (qt, acc, of_type.len())
        })
        .collect();
    AcreEval {
        overall: correct as f64 / total.max(1) as f64,
        total,
        per_type,
        non_answer_tokens: non_answer,
    }
}

/// Generates detections for every frame sample and scores pooled AP50
/// against ground truth filtered by `mode`.
pub fn evaluate_detection(
    model: &Model<f32>,
    dataset: &[VideoSample],
    vocab: &Vocab,
    task: Task,
    max_objects: usize,
) -> Ap50Result {
    let visible_only = task == Task::DetectVisible;
    let samples: Vec<(Vec<Detection>, GtSet)> = par::map_collect(dataset.len(), |i| {
        let sample = &dataset[i];
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, BindMode::Frozen);
        let frames = eval_frame_batch(sample, 1);
        let memory = model.encode_video(&mut tape, &bound, frames).expect("encode");
        let prompt = prompt_for(task, vocab);
        let gen = model
            .generate(&mut tape, &bound, memory, &prompt.ids, 5 * max_objects + 1)
            .expect("generate");
        let (dets, _) = decode_detection(&gen.seq, vocab);
        let gt: GtSet = sample.anns[0]
            .boxes
            .iter()
            .filter(|b| !visible_only || b.visible)
            .map(|b| (b.bbox, b.class_id))
            .collect();
        (dets, gt)
    });
    average_precision_50(&samples)
}

/// Fraction of frames whose generated snitch box reaches IoU ≥ 0.5.
pub fn evaluate_snitch(model: &Model<f32>, dataset: &[VideoSample], vocab: &Vocab) -> f64 {
    let hits = par::map_collect(dataset.len(), |i| {
        let sample = &dataset[i];
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, BindMode::Frozen);
        let frames = eval_frame_batch(sample, 1);
        let memory = model.encode_video(&mut tape, &bound, frames).expect("encode");
        let prompt = prompt_for(Task::Snitch, vocab);
        let gen = model.generate(&mut tape, &bound, memory, &prompt.ids, 5).expect("generate");
        let bins: Vec<usize> = gen
            .seq
            .ids
            .iter()
            .take(4)
            .filter_map(|&id| match vocab.role_of(id) {
                Some(TokenRole::Coord(b)) => Some(b),
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
        let gt = sample.anns[0].boxes[sample.snitch_index].bbox;
        iou(&pred, &gt) >= 0.5
    });
    hits.iter().filter(|&&h| h).count() as f64 / dataset.len().max(1) as f64
}

/// Accuracy of the generated count token for either counting task.
pub fn evaluate_count(model: &Model<f32>, dataset: &[VideoSample], vocab: &Vocab, task: Task) -> f64 {
    let hits = par::map_collect(dataset.len(), |i| {
        let sample = &dataset[i];
        let expected = match task {
            Task::CountUnique => sample.count_unique(),
            _ => sample.count_all(),
        };
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, BindMode::Frozen);
        let frames = eval_frame_batch(sample, 1);
        let memory = model.encode_video(&mut tape, &bound, frames).expect("encode");
        let prompt = prompt_for(task, vocab);
        let gen = model.generate(&mut tape, &bound, memory, &prompt.ids, 2).expect("generate");
        matches!(
            gen.seq.ids.first().map(|&id| vocab.role_of(id)),
            Some(Some(TokenRole::Count(n))) if n == expected
        )
    });
    hits.iter().filter(|&&h| h).count() as f64 / dataset.len().max(1) as f64
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricRecord {
    pub step: u64,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

/// Append-only training/eval log, serialized as JSON lines.
#[derive(Debug, Clone, Default, Serialize)]
pub struct MetricsLog {
    pub records: Vec<MetricRecord>,
}

impl MetricsLog {
    pub fn push(&mut self, step: u64, task: &str, metric: &str, value: f64) {
        self.records.push(MetricRecord {
            step,
            task: task.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("metric record"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_jsonl())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(ymin: f64, xmin: f64, ymax: f64, xmax: f64) -> BBox {
        BBox { ymin, xmin, ymax, xmax }
    }

    fn det(b: BBox, class_id: usize, score: f64) -> Detection {
        Detection { bbox: b, class_id, score }
    }

    #[test]
    fn iou_identical_disjoint_and_partial() {
        let a = bb(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(2.0, 2.0, 3.0, 3.0)), 0.0);
        // Areas 1.0 and 1.0, overlap 0.5 → 0.5 / 1.5 = 1/3.
        let b = bb(0.0, 0.5, 1.0, 1.5);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_detections_score_ap_one() {
        let gt: GtSet = vec![(bb(0.1, 0.1, 0.3, 0.3), 0), (bb(0.5, 0.5, 0.8, 0.8), 1)];
        let dets =
            vec![det(gt[0].0, 0, 1.0), det(gt[1].0, 1, 1.0)];
        let r = average_precision_50(&[(dets, gt)]);
        assert_eq!(r.mean_ap, 1.0);
        assert!(!r.undefined);
    }

    #[test]
    fn one_tp_one_fp_over_two_gt_gives_half() {
        // PR points: (0.5, 1.0) then (0.5, 0.5) → AP = 0.5 * 1.0 = 0.5.
        let gt: GtSet = vec![(bb(0.1, 0.1, 0.3, 0.3), 0), (bb(0.5, 0.5, 0.8, 0.8), 0)];
        let dets = vec![
            det(gt[0].0, 0, 0.9),
            det(bb(0.0, 0.6, 0.1, 0.9), 0, 0.8), // matches nothing
        ];
        let r = average_precision_50(&[(dets.clone(), gt.clone())]);
        assert_eq!(r.mean_ap, 0.5);
        assert_eq!(brute_force_ap50(&dets, &gt), 0.5);
    }

    #[test]
    fn duplicate_detection_counts_as_fp() {
        let gt: GtSet = vec![(bb(0.1, 0.1, 0.3, 0.3), 0)];
        let dets = vec![det(gt[0].0, 0, 0.9), det(gt[0].0, 0, 0.8)];
        let r = average_precision_50(&[(dets, gt)]);
        // First matches (recall 1, precision 1), duplicate is FP.
        assert_eq!(r.mean_ap, 1.0);
        let gt2: GtSet = vec![(bb(0.1, 0.1, 0.3, 0.3), 0), (bb(0.6, 0.6, 0.9, 0.9), 0)];
        let dets2 = vec![
            det(gt2[0].0, 0, 0.9),
            det(gt2[0].0, 0, 0.8),
            det(gt2[1].0, 0, 0.7),
        ];
        let r2 = average_precision_50(&[(dets2, gt2)]);
        // TP, FP, TP → AP = 0.5*1.0 + 0.5*(2/3)
        assert!((r2.mean_ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn empty_everything_is_flagged_undefined() {
        let r = average_precision_50(&[(vec![], vec![])]);
        assert!(r.undefined);
        assert_eq!(r.mean_ap, 1.0);
    }

    #[test]
    fn metrics_log_serializes_one_record_per_line() {
        let mut log = MetricsLog::default();
        log.push(10, "cater", "top1", 0.5);
        log.push(20, "acre", "overall", 0.25);
        let text = log.to_jsonl();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().next().unwrap().contains("\"step\":10"));
    }
}
