//! Shared token vocabulary and the mapping between structured task data and
//! the token sequences the decoder predicts.
//!
//! One vocabulary serves every task; a task is selected purely by its prompt
//! token. Coordinates are uniformly quantized to `bins` levels over [0, 1].

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("too many objects to encode: {got} > max {max}")]
    TooManyObjects { got: usize, max: usize },
    #[error("invalid label for {task:?}: {msg}")]
    InvalidLabel { task: Task, msg: String },
}

/// Task prompts, one token each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    DetectAll,
    DetectVisible,
    CountAll,
    CountUnique,
    Snitch,
    Cater,
    Acre,
    Probe,
}

pub const ALL_TASKS: [Task; 8] = [
    Task::DetectAll,
    Task::DetectVisible,
    Task::CountAll,
    Task::CountUnique,
    Task::Snitch,
    Task::Cater,
    Task::Acre,
    Task::Probe,
];

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::DetectAll => "detect_all",
            Task::DetectVisible => "detect_visible",
            Task::CountAll => "count_all",
            Task::CountUnique => "count_unique",
            Task::Snitch => "snitch",
            Task::Cater => "cater",
            Task::Acre => "acre",
            Task::Probe => "probe",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        ALL_TASKS.iter().copied().find(|t| t.name() == s)
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Platform answer for the causal-inference task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Light {
    On,
    Off,
    Undetermined,
}

/// Axis-aligned box in normalized [0,1] image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub ymin: f64,
    pub xmin: f64,
    pub ymax: f64,
    pub xmax: f64,
}

impl BBox {
    pub fn area(&self) -> f64 {
        (self.ymax - self.ymin).max(0.0) * (self.xmax - self.xmin).max(0.0)
    }
}

/// One annotated object: box, shape class, and whether it shows pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub bbox: BBox,
    pub class_id: usize,
    pub visible: bool,
}

pub type BoxSet = Vec<BoxAnnotation>;

/// A decoded detection; `score` is the generation probability of the
/// group's class token (1.0 when probabilities are absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Token ids plus, for generated sequences, the per-position probability of
/// the emitted id.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub probs: Option<Vec<f64>>,
}

impl TokenSeq {
    pub fn bare(ids: Vec<usize>) -> Self {
        Self { ids, probs: None }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabConfig {
    /// Coordinate quantization levels.
    pub bins: usize,
    /// Shape classes.
    pub num_classes: usize,
    /// Grid cells for the tracking answer (K²).
    pub grid_cells: usize,
    /// Largest count token.
    pub count_max: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self { bins: 64, num_classes: 5, grid_cells: 16, count_max: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    Pad,
    Bos,
    Eos,
    Coord(usize),
    Class(usize),
    Cell(usize),
    Answer(Light),
    Count(usize),
    Prompt(Task),
}

/// Fixed token-id layout derived from a [`VocabConfig`]. Ranges are laid out
/// back to back, so disjointness holds by construction; `role_of` is total
/// over `0..size()`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub config: VocabConfig,
    coord_base: usize,
    class_base: usize,
    cell_base: usize,
    answer_base: usize,
    count_base: usize,
    prompt_base: usize,
    size: usize,
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

impl Vocab {
    pub fn new(config: VocabConfig) -> Self {
        assert!(config.bins >= 2, "need at least two coordinate bins");
        let coord_base = 3;
        let class_base = coord_base + config.bins;
        let cell_base = class_base + config.num_classes;
        let answer_base = cell_base + config.grid_cells;
        let count_base = answer_base + 3;
        let prompt_base = count_base + config.count_max + 1;
        let size = prompt_base + ALL_TASKS.len();
        Self { config, coord_base, class_base, cell_base, answer_base, count_base, prompt_base, size }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn coord(&self, bin: usize) -> usize {
        assert!(bin < self.config.bins);
        self.coord_base + bin
    }

    pub fn class(&self, class_id: usize) -> usize {
        assert!(class_id < self.config.num_classes);
        self.class_base + class_id
    }

    pub fn cell(&self, k: usize) -> usize {
        assert!(k < self.config.grid_cells);
        self.cell_base + k
    }

    pub fn answer(&self, light: Light) -> usize {
        self.answer_base
            + match light {
                Light::On => 0,
                Light::Off => 1,
                Light::Undetermined => 2,
            }
    }

    pub fn count(&self, n: usize) -> usize {
        assert!(n <= self.config.count_max);
        self.count_base + n
    }

    pub fn prompt(&self, task: Task) -> usize {
        self.prompt_base + ALL_TASKS.iter().position(|&t| t == task).unwrap()
    }

    pub fn role_of(&self, id: usize) -> Option<TokenRole> {
        match id {
            PAD => Some(TokenRole::Pad),
            BOS => Some(TokenRole::Bos),
            EOS => Some(TokenRole::Eos),
            _ if id >= self.coord_base && id < self.class_base => {
                Some(TokenRole::Coord(id - self.coord_base))
            }
            _ if id >= self.class_base && id < self.cell_base => {
                Some(TokenRole::Class(id - self.class_base))
            }
            _ if id >= self.cell_base && id < self.answer_base => {
                Some(TokenRole::Cell(id - self.cell_base))
            }
            _ if id >= self.answer_base && id < self.count_base => Some(TokenRole::Answer(
                [Light::On, Light::Off, Light::Undetermined][id - self.answer_base],
            )),
            _ if id >= self.count_base && id < self.prompt_base => {
                Some(TokenRole::Count(id - self.count_base))
            }
            _ if id >= self.prompt_base && id < self.size => {
                Some(TokenRole::Prompt(ALL_TASKS[id - self.prompt_base]))
            }
            _ => None,
        }
    }
}

/// Uniform quantization of `x ∈ [0,1]` to `bins` levels; ties round away
/// from zero, out-of-range values clamp with a warning.
pub fn quantize(x: f64, bins: usize) -> usize {
    debug_assert!(bins >= 2);
    let clamped = if (0.0..=1.0).contains(&x) {
        x
    } else {
        log::warn!("quantize: coordinate {x} outside [0,1], clamping");
        x.clamp(0.0, 1.0)
    };
    // f64::round rounds half away from zero.
    (clamped * (bins - 1) as f64).round() as usize
}

pub fn dequantize(bin: usize, bins: usize) -> f64 {
    debug_assert!(bins >= 2);
    bin as f64 / (bins - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectMode {
    All,
    Visible,
}

/// Deterministic detection target: objects filtered by `mode`, sorted by
/// (ymin, xmin, class), each emitted as [ymin, xmin, ymax, xmax, class],
/// then EOS.
pub fn encode_detection(
    boxes: &BoxSet,
    mode: DetectMode,
    max_objects: usize,
    vocab: &Vocab,
) -> Result<TokenSeq, CodecError> {
    let mut kept: Vec<&BoxAnnotation> =
        boxes.iter().filter(|b| mode == DetectMode::All || b.visible).collect();
    if kept.len() > max_objects {
        return Err(CodecError::TooManyObjects { got: kept.len(), max: max_objects });
    }
    kept.sort_by(|a, b| {
        a.bbox
            .ymin
            .total_cmp(&b.bbox.ymin)
            .then(a.bbox.xmin.total_cmp(&b.bbox.xmin))
            .then(a.class_id.cmp(&b.class_id))
    });
    let b = vocab.config.bins;
    let mut ids = Vec::with_capacity(kept.len() * 5 + 1);
    for ann in kept {
        ids.push(vocab.coord(quantize(ann.bbox.ymin, b)));
        ids.push(vocab.coord(quantize(ann.bbox.xmin, b)));
        ids.push(vocab.coord(quantize(ann.bbox.ymax, b)));
        ids.push(vocab.coord(quantize(ann.bbox.xmax, b)));
        ids.push(vocab.class(ann.class_id));
    }
    ids.push(EOS);
    Ok(TokenSeq::bare(ids))
}

/// Why decoding stopped, plus per-group repairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ParseReport {
    pub groups: usize,
    pub stopped_at_eos: bool,
    /// Indices of groups whose coordinates had to be reordered.
    pub reordered: Vec<usize>,
    pub note: Option<String>,
}

/// Greedy inverse of [`encode_detection`], robust to arbitrary model output.
/// Consumes 5-token groups until EOS, a malformed group, or the end.
pub fn decode_detection(seq: &TokenSeq, vocab: &Vocab) -> (Vec<Detection>, ParseReport) {
    let mut dets = Vec::new();
    let mut report = ParseReport::default();
    let mut pos = 0usize;
    while pos < seq.ids.len() {
        if seq.ids[pos] == EOS {
            report.stopped_at_eos = true;
            break;
        }
        if pos + 5 > seq.ids.len() || seq.ids[pos..pos + 5].contains(&EOS) {
            report.note = Some("truncated group".into());
            break;
        }
        let group = &seq.ids[pos..pos + 5];
        let mut coords = [0usize; 4];
        let mut ok = true;
        for (i, &id) in group[..4].iter().enumerate() {
            match vocab.role_of(id) {
                Some(TokenRole::Coord(bin)) => coords[i] = bin,
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        let class_id = match vocab.role_of(group[4]) {
            Some(TokenRole::Class(c)) if ok => c,
            _ => {
                report.note = Some("malformed group".into());
                break;
            }
        };
        let b = vocab.config.bins;
        let (mut ymin, mut xmin, mut ymax, mut xmax) = (
            dequantize(coords[0], b),
            dequantize(coords[1], b),
            dequantize(coords[2], b),
            dequantize(coords[3], b),
        );
        if ymin > ymax || xmin > xmax {
            if ymin > ymax {
                std::mem::swap(&mut ymin, &mut ymax);
            }
            if xmin > xmax {
                std::mem::swap(&mut xmin, &mut xmax);
            }
            report.reordered.push(report.groups);
        }
        let score = seq.probs.as_ref().map_or(1.0, |p| p[pos + 4]);
        dets.push(Detection { bbox: BBox { ymin, xmin, ymax, xmax }, class_id, score });
        report.groups += 1;
        pos += 5;
    }
    (dets, report)
}

/// Answer payload for [`encode_answer`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnswerLabel {
    Cell(usize),
    Acre(Light),
    Count(usize),
    SnitchBox(BBox),
}

/// Target sequence for a non-detection task: the answer tokens plus EOS.
pub fn encode_answer(task: Task, label: AnswerLabel, vocab: &Vocab) -> Result<TokenSeq, CodecError> {
    let bad = |msg: String| CodecError::InvalidLabel { task, msg };
    let ids = match (task, label) {
        (Task::Cater, AnswerLabel::Cell(k)) => {
            if k >= vocab.config.grid_cells {
                return Err(bad(format!("cell {k} >= {}", vocab.config.grid_cells)));
            }
            vec![vocab.cell(k), EOS]
        }
        (Task::Acre, AnswerLabel::Acre(light)) => vec![vocab.answer(light), EOS],
        (Task::CountAll | Task::CountUnique, AnswerLabel::Count(n)) => {
            if n > vocab.config.count_max {
                return Err(bad(format!("count {n} > {}", vocab.config.count_max)));
            }
            vec![vocab.count(n), EOS]
        }
        (Task::Snitch, AnswerLabel::SnitchBox(bb)) => {
            for v in [bb.ymin, bb.xmin, bb.ymax, bb.xmax] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(bad(format!("coordinate {v} outside [0,1]")));
                }
            }
            let b = vocab.config.bins;
            vec![
                vocab.coord(quantize(bb.ymin, b)),
                vocab.coord(quantize(bb.xmin, b)),
                vocab.coord(quantize(bb.ymax, b)),
                vocab.coord(quantize(bb.xmax, b)),
                EOS,
            ]
        }
        (task, label) => return Err(bad(format!("label {label:?} does not fit task {task:?}"))),
    };
    Ok(TokenSeq::bare(ids))
}

/// The single prompt token selecting `task`.
pub fn prompt_for(task: Task, vocab: &Vocab) -> TokenSeq {
    TokenSeq::bare(vec![vocab.prompt(task)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(VocabConfig::default())
    }

    fn ann(ymin: f64, xmin: f64, ymax: f64, xmax: f64, class_id: usize, visible: bool) -> BoxAnnotation {
        BoxAnnotation { bbox: BBox { ymin, xmin, ymax, xmax }, class_id, visible }
    }

    #[test]
    fn quantize_endpoints_and_tie() {
        assert_eq!(quantize(0.0, 100), 0);
        assert_eq!(quantize(1.0, 100), 99);
        // 0.5 * 99 = 49.5, ties round away from zero.
        assert_eq!(quantize(0.5, 100), 50);
    }

    #[test]
    fn quantize_clamps_out_of_range() {
        assert_eq!(quantize(-0.2, 64), 0);
        assert_eq!(quantize(1.7, 64), 63);
    }

    #[test]
    fn roles_are_total_and_disjoint() {
        let v = vocab();
        for id in 0..v.size() {
            assert!(v.role_of(id).is_some(), "id {id} has no role");
        }
        assert_eq!(v.role_of(v.size()), None);
    }

    #[test]
    fn prompts_are_pairwise_distinct_and_stable() {
        let v = vocab();
        for (i, &a) in ALL_TASKS.iter().enumerate() {
            assert_eq!(prompt_for(a, &v).ids, prompt_for(a, &v).ids);
            for &b in &ALL_TASKS[i + 1..] {
                assert_ne!(v.prompt(a), v.prompt(b));
            }
        }
    }

    #[test]
    fn empty_boxset_encodes_to_bare_eos() {
        let v = vocab();
        let seq = encode_detection(&vec![], DetectMode::All, 8, &v).unwrap();
        assert_eq!(seq.ids, vec![EOS]);
    }

    #[test]
    fn single_object_is_six_tokens() {
        let v = vocab();
        let seq =
            encode_detection(&vec![ann(0.1, 0.2, 0.3, 0.4, 2, true)], DetectMode::All, 8, &v).unwrap();
        assert_eq!(seq.len(), 6);
        assert_eq!(*seq.ids.last().unwrap(), EOS);
    }

    #[test]
    fn equal_ymin_orders_by_xmin() {
        let v = vocab();
        let a = ann(0.2, 0.7, 0.4, 0.9, 0, true);
        let b = ann(0.2, 0.1, 0.4, 0.3, 1, true);
        let seq = encode_detection(&vec![a, b], DetectMode::All, 8, &v).unwrap();
        let (dets, _) = decode_detection(&seq, &v);
        assert_eq!(dets[0].class_id, 1);
        assert_eq!(dets[1].class_id, 0);
    }

    #[test]
    fn visible_mode_filters_hidden_objects() {
        let v = vocab();
        let boxes = vec![ann(0.1, 0.1, 0.2, 0.2, 0, false), ann(0.5, 0.5, 0.6, 0.6, 1, true)];
        let seq = encode_detection(&boxes, DetectMode::Visible, 8, &v).unwrap();
        assert_eq!(seq.len(), 6);
        let (dets, _) = decode_detection(&seq, &v);
        assert_eq!(dets[0].class_id, 1);
    }

    #[test]
    fn overflow_is_an_error() {
        let v = vocab();
        let boxes = vec![ann(0.1, 0.1, 0.2, 0.2, 0, true); 3];
        assert!(matches!(
            encode_detection(&boxes, DetectMode::All, 2, &v),
            Err(CodecError::TooManyObjects { got: 3, max: 2 })
        ));
    }

    #[test]
    fn short_sequence_reports_truncated_group() {
        let v = vocab();
        let seq = TokenSeq::bare(vec![v.coord(3), v.coord(4), v.coord(5), EOS]);
        let (dets, report) = decode_detection(&seq, &v);
        assert!(dets.is_empty());
        assert_eq!(report.note.as_deref(), Some("truncated group"));
    }

    #[test]
    fn class_token_probability_becomes_score() {
        let v = vocab();
        let mut seq =
            encode_detection(&vec![ann(0.1, 0.2, 0.3, 0.4, 1, true)], DetectMode::All, 8, &v).unwrap();
        seq.probs = Some(vec![0.99, 0.98, 0.97, 0.96, 0.93, 0.95]);
        let (dets, _) = decode_detection(&seq, &v);
        assert_eq!(dets[0].score, 0.93);
    }

    #[test]
    fn inverted_coordinates_are_reordered_and_flagged() {
        let v = vocab();
        let b = v.config.bins;
        let seq = TokenSeq::bare(vec![
            v.coord(quantize(0.8, b)),
            v.coord(quantize(0.2, b)),
            v.coord(quantize(0.1, b)),
            v.coord(quantize(0.9, b)),
            v.class(0),
            EOS,
        ]);
        let (dets, report) = decode_detection(&seq, &v);
        assert_eq!(report.reordered, vec![0]);
        assert!(dets[0].bbox.ymin <= dets[0].bbox.ymax);
    }

    #[test]
    fn answer_encodings_match_declared_mappings() {
        let v = vocab();
        // row 2, col 3 on a 6x6 grid → cell 15
        let v6 = Vocab::new(VocabConfig { grid_cells: 36, ..VocabConfig::default() });
        let seq = encode_answer(Task::Cater, AnswerLabel::Cell(2 * 6 + 3), &v6).unwrap();
        assert_eq!(seq.ids, vec![v6.cell(15), EOS]);

        let seq = encode_answer(Task::Acre, AnswerLabel::Acre(Light::Undetermined), &v).unwrap();
        assert_eq!(seq.ids, vec![v.answer(Light::Undetermined), EOS]);

        let seq = encode_answer(Task::CountAll, AnswerLabel::Count(8), &v).unwrap();
        assert_eq!(seq.ids, vec![v.count(8), EOS]);

        assert!(encode_answer(Task::CountAll, AnswerLabel::Count(11), &v).is_err());
        assert!(encode_answer(Task::Cater, AnswerLabel::Count(1), &v).is_err());
    }

    #[test]
    fn targets_end_with_exactly_one_eos_and_no_pad() {
        let v = vocab();
        let seqs = [
            encode_detection(&vec![ann(0.3, 0.3, 0.5, 0.5, 4, true)], DetectMode::All, 8, &v).unwrap(),
            encode_answer(Task::Cater, AnswerLabel::Cell(3), &v).unwrap(),
            encode_answer(
                Task::Snitch,
                AnswerLabel::SnitchBox(BBox { ymin: 0.1, xmin: 0.2, ymax: 0.3, xmax: 0.4 }),
                &v,
            )
            .unwrap(),
        ];
        for seq in seqs {
            assert_eq!(seq.ids.iter().filter(|&&id| id == EOS).count(), 1);
            assert_eq!(*seq.ids.last().unwrap(), EOS);
            assert!(!seq.ids.contains(&PAD));
        }
    }
}
