//! Deterministic synthetic benchmark generators with exact oracle labels.
//!
//! Two families of data stand in for the full-scale benchmarks: grid scenes
//! of moving, occluding, containing objects with a unique golden "snitch"
//! (shell-game tracking), and blicket panels whose platform lights up iff at
//! least one latent blicket object is present (causal inference). Every
//! sample is a pure function of `(seed, config)`.

mod acre;
mod cater;
mod records;
mod render;

pub use acre::{
    classify_question, gen_acre_episode, AcreConfig, AcreEpisode, AcrePanel, QuestionType,
    ALL_QUESTION_TYPES,
};
pub use cater::{gen_cater_episode, gen_frame_scene, CaterConfig};
pub use records::{
    frame_to_rgb8, read_acre_records, read_video_records, write_acre_records, write_png_dump,
    write_video_records,
};
pub use render::{render_frame, render_with_ownership, solo_bbox, RenderConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{BoxSet, Light};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum WorldgenError {
    #[error("cover events enabled but no cone can be larger than the snitch")]
    UncoverableSnitch,
    #[error("rejection sampling failed after {tries} tries: {what}")]
    RejectionExhausted { what: String, tries: usize },
    #[error("episode is inconsistent: no blicket assignment satisfies the contexts")]
    CorruptEpisode,
    #[error("{0} distinct objects exceed the enumeration bound of 16")]
    TooManyObjects(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("frame sampling: requested {n} of {total} frames")]
    BadFrameCount { n: usize, total: usize },
}

/// Object shapes. Cones are the only containers; the snitch is the unique
/// golden target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cone,
    Snitch,
}

impl Shape {
    pub fn class_id(self) -> usize {
        match self {
            Shape::Circle => 0,
            Shape::Square => 1,
            Shape::Triangle => 2,
            Shape::Cone => 3,
            Shape::Snitch => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cone => "cone",
            Shape::Snitch => "snitch",
        }
    }

    pub fn from_class_id(id: usize) -> Option<Shape> {
        [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cone, Shape::Snitch]
            .get(id)
            .copied()
    }
}

/// One object of a grid scene. Positions are (y, x) centers in [0,1];
/// a contained object's position always equals its container's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    pub shape: Shape,
    /// 0 = small, 1 = medium, 2 = large; containment requires a strictly
    /// larger cone.
    pub size_rank: usize,
    pub color_id: usize,
    pub pos: (f64, f64),
    pub contained_by: Option<usize>,
}

/// A set of objects on a K×K grid; exactly one snitch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScene {
    pub k: usize,
    pub objects: Vec<SceneObject>,
}

impl GridScene {
    /// Follows containment chains to the free root carrying this object.
    pub fn root_of(&self, mut idx: usize) -> usize {
        while let Some(c) = self.objects[idx].contained_by {
            idx = self.objects.iter().position(|o| o.id == c).expect("container exists");
        }
        idx
    }

    /// True position through containment chains.
    pub fn true_pos(&self, idx: usize) -> (f64, f64) {
        self.objects[self.root_of(idx)].pos
    }

    pub fn snitch_index(&self) -> usize {
        self.objects.iter().position(|o| o.shape == Shape::Snitch).expect("one snitch")
    }

    /// Grid cell (row-major) of a normalized position.
    pub fn cell_of(&self, pos: (f64, f64)) -> usize {
        let row = ((pos.0 * self.k as f64) as usize).min(self.k - 1);
        let col = ((pos.1 * self.k as f64) as usize).min(self.k - 1);
        row * self.k + col
    }
}

/// Per-frame ground truth: one annotation per object (fixed object order)
/// plus the containment relation at that frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAnn {
    pub boxes: BoxSet,
    pub contained_by: Vec<Option<usize>>,
}

/// Static object metadata carried alongside a video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMeta {
    pub shape: Shape,
    pub size_rank: usize,
    pub color_id: usize,
}

/// A rendered episode: `frames[t]` is a (3, H, W) image and `anns[t]` its
/// exact annotations. The tracking label is the snitch's final grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub seed: u64,
    pub k: usize,
    pub objects: Vec<ObjectMeta>,
    pub frames: Vec<Tensor<f32>>,
    pub anns: Vec<FrameAnn>,
    pub snitch_index: usize,
    pub snitch_cell: usize,
}

impl VideoSample {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Total object count (visible or hidden).
    pub fn count_all(&self) -> usize {
        self.objects.len()
    }

    /// Number of distinct shapes present.
    pub fn count_unique(&self) -> usize {
        let mut shapes: Vec<Shape> = self.objects.iter().map(|o| o.shape).collect();
        shapes.sort_by_key(|s| s.class_id());
        shapes.dedup();
        shapes.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Eval,
}

/// Frame-index subset: training draws without replacement and sorts;
/// evaluation spaces indices as evenly as possible including both ends.
pub fn sample_frames(
    total: usize,
    n: usize,
    mode: SampleMode,
    rng: &mut impl rand::Rng,
) -> Result<Vec<usize>, WorldgenError> {
    if n == 0 || n > total {
        return Err(WorldgenError::BadFrameCount { n, total });
    }
    match mode {
        SampleMode::Train => {
            let mut pool: Vec<usize> = (0..total).collect();
            // Partial Fisher-Yates: the first n entries are the draw.
            for i in 0..n {
                let j = rng.gen_range(i..total);
                pool.swap(i, j);
            }
            let mut picked = pool[..n].to_vec();
            picked.sort_unstable();
            Ok(picked)
        }
        SampleMode::Eval => {
            if n == 1 {
                return Ok(vec![total - 1]);
            }
            Ok((0..n)
                .map(|i| {
                    let x = i as f64 * (total - 1) as f64 / (n - 1) as f64;
                    x.round() as usize
                })
                .collect())
        }
    }
}

/// Exact enumeration oracle for the blicket task: keep every assignment
/// consistent with the contexts, then see whether the query lights under
/// all, none, or some of them.
pub fn acre_oracle(
    contexts: &[(Vec<usize>, bool)],
    query: &[usize],
) -> Result<Light, WorldgenError> {
    let mut mentioned: Vec<usize> =
        contexts.iter().flat_map(|(s, _)| s.iter().copied()).chain(query.iter().copied()).collect();
    mentioned.sort_unstable();
    mentioned.dedup();
    let m = mentioned.len();
    if m > 16 {
        return Err(WorldgenError::TooManyObjects(m));
    }
    let slot = |obj: usize| mentioned.binary_search(&obj).expect("mentioned");
    let mut any_on = false;
    let mut any_off = false;
    let mut any_consistent = false;
    for mask in 0u32..(1u32 << m) {
        let lit = |set: &[usize]| set.iter().any(|&o| mask & (1 << slot(o)) != 0);
        if contexts.iter().any(|(set, light)| lit(set) != *light) {
            continue;
        }
        any_consistent = true;
        if lit(query) {
            any_on = true;
        } else {
            any_off = true;
        }
        if any_on && any_off {
            break;
        }
    }
    if !any_consistent {
        return Err(WorldgenError::CorruptEpisode);
    }
    Ok(match (any_on, any_off) {
        (true, false) => Light::On,
        (false, true) => Light::Off,
        _ => Light::Undetermined,
    })
}

/// True iff `obj` is a blicket under every assignment consistent with the
/// contexts (and at least one assignment is consistent).
pub fn provably_blicket(contexts: &[(Vec<usize>, bool)], obj: usize) -> bool {
    matches!(acre_oracle(contexts, &[obj]), Ok(Light::On))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn eval_sampling_matches_even_spacing_formula() {
        let mut rng = stream(0, "t", 0);
        let picked = sample_frames(32, 8, SampleMode::Eval, &mut rng).unwrap();
        assert_eq!(picked, vec![0, 4, 9, 13, 18, 22, 27, 31]);
    }

    #[test]
    fn eval_spacing_brute_force_over_all_n() {
        let mut rng = stream(0, "t", 0);
        for total in 2..40usize {
            for n in 2..=total {
                let picked = sample_frames(total, n, SampleMode::Eval, &mut rng).unwrap();
                assert_eq!(picked[0], 0);
                assert_eq!(*picked.last().unwrap(), total - 1);
                let expect: Vec<usize> = (0..n)
                    .map(|i| (i as f64 * (total - 1) as f64 / (n - 1) as f64).round() as usize)
                    .collect();
                assert_eq!(picked, expect);
            }
        }
    }

    #[test]
    fn identity_when_n_equals_total() {
        let mut rng = stream(1, "t", 0);
        let all: Vec<usize> = (0..10).collect();
        assert_eq!(sample_frames(10, 10, SampleMode::Train, &mut rng).unwrap(), all);
        assert_eq!(sample_frames(10, 10, SampleMode::Eval, &mut rng).unwrap(), all);
    }

    #[test]
    fn train_sampling_is_strictly_increasing() {
        for s in 0..20 {
            let mut rng = stream(s, "frames", 0);
            let picked = sample_frames(32, 8, SampleMode::Train, &mut rng).unwrap();
            assert!(picked.windows(2).all(|w| w[0] < w[1]), "{picked:?}");
        }
    }

    #[test]
    fn oversampling_is_an_error() {
        let mut rng = stream(0, "t", 0);
        assert!(sample_frames(8, 9, SampleMode::Train, &mut rng).is_err());
    }

    #[test]
    fn oracle_no_contexts_is_undetermined() {
        assert_eq!(acre_oracle(&[], &[3]).unwrap(), Light::Undetermined);
    }

    #[test]
    fn oracle_empty_query_is_off() {
        assert_eq!(acre_oracle(&[(vec![1], true)], &[]).unwrap(), Light::Off);
    }

    #[test]
    fn oracle_single_on_context_pins_blicket() {
        assert_eq!(acre_oracle(&[(vec![0], true)], &[0]).unwrap(), Light::On);
    }

    #[test]
    fn oracle_deduces_from_two_contexts() {
        // {A} off forces A non-blicket; {A,B} on then forces B blicket.
        let contexts = vec![(vec![0], false), (vec![0, 1], true)];
        assert_eq!(acre_oracle(&contexts, &[1]).unwrap(), Light::On);
    }

    #[test]
    fn oracle_is_undetermined_when_ambiguous() {
        // {A,B} on: "A blicket" and "only B blicket" are both consistent.
        let contexts = vec![(vec![0, 1], true)];
        assert_eq!(acre_oracle(&contexts, &[0]).unwrap(), Light::Undetermined);
    }

    #[test]
    fn oracle_rejects_contradictory_contexts() {
        let contexts = vec![(vec![0], true), (vec![0], false)];
        assert!(matches!(acre_oracle(&contexts, &[0]), Err(WorldgenError::CorruptEpisode)));
    }

    #[test]
    fn oracle_rejects_too_many_objects() {
        let big: Vec<usize> = (0..17).collect();
        assert!(matches!(acre_oracle(&[(big, true)], &[0]), Err(WorldgenError::TooManyObjects(17))));
    }

    #[test]
    fn provably_blicket_matches_enumeration() {
        let contexts = vec![(vec![0], false), (vec![0, 1], true)];
        assert!(provably_blicket(&contexts, 1));
        assert!(!provably_blicket(&contexts, 0));
    }
}
