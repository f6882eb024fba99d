//! Blicket-panel episode generator.
//!
//! An episode has a hidden blicket mask over a small object vocabulary, six
//! context panels (object subset + resulting platform light), and one query
//! panel. The stored label comes from the enumeration oracle, never from the
//! mask, so "undetermined" answers are exactly the epistemically open ones.
//! The platform is a strip at the bottom of each panel whose color encodes
//! lit / dark / unknown.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{object_color, RenderConfig};
use super::{acre_oracle, provably_blicket, Shape, WorldgenError};
use crate::codec::Light;
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcreConfig {
    /// Distinct object identities (shape, color pairs).
    pub vocab_objects: usize,
    pub contexts: usize,
    pub min_panel_objects: usize,
    pub max_panel_objects: usize,
    /// Sampling frequency of [direct, indirect, screen-off, backward-blocking].
    pub type_frequencies: [f64; 4],
    pub max_tries: usize,
    pub render: RenderConfig,
}

impl Default for AcreConfig {
    fn default() -> Self {
        Self {
            vocab_objects: 8,
            contexts: 6,
            min_panel_objects: 1,
            max_panel_objects: 3,
            type_frequencies: [0.25; 4],
            max_tries: 1000,
            render: RenderConfig::default(),
        }
    }
}

impl AcreConfig {
    fn validate(&self) -> Result<(), WorldgenError> {
        if self.vocab_objects == 0 || self.vocab_objects > 16 {
            return Err(WorldgenError::InvalidConfig("object vocabulary must be 1..=16".into()));
        }
        if self.min_panel_objects == 0
            || self.max_panel_objects < self.min_panel_objects
            || self.max_panel_objects > self.vocab_objects
        {
            return Err(WorldgenError::InvalidConfig("bad panel object range".into()));
        }
        if self.type_frequencies.iter().any(|&f| f < 0.0)
            || self.type_frequencies.iter().sum::<f64>() <= 0.0
        {
            return Err(WorldgenError::InvalidConfig("type frequencies must be non-negative".into()));
        }
        Ok(())
    }

    /// Identity id → (shape, color) used for rendering.
    pub fn identity(&self, id: usize) -> (Shape, usize) {
        let shape = [Shape::Circle, Shape::Square, Shape::Triangle][id % 3];
        (shape, id / 3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionType {
    Direct,
    Indirect,
    ScreenOff,
    BackwardBlocking,
}

pub const ALL_QUESTION_TYPES: [QuestionType; 4] = [
    QuestionType::Direct,
    QuestionType::Indirect,
    QuestionType::ScreenOff,
    QuestionType::BackwardBlocking,
];

impl QuestionType {
    pub fn name(self) -> &'static str {
        match self {
            QuestionType::Direct => "direct",
            QuestionType::Indirect => "indirect",
            QuestionType::ScreenOff => "screen-off",
            QuestionType::BackwardBlocking => "backward-blocking",
        }
    }
}

/// One panel: a sorted, duplicate-free object set plus the platform state
/// (`None` for the query panel, whose light is withheld).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcrePanel {
    pub objects: Vec<usize>,
    pub light: Option<Light>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcreEpisode {
    pub seed: u64,
    pub contexts: Vec<AcrePanel>,
    pub query: AcrePanel,
    pub blicket_mask: Vec<bool>,
    pub label: Light,
    pub question_type: QuestionType,
    /// One (3, H, W) image per context, then the query panel last.
    pub frames: Vec<Tensor<f32>>,
}

impl AcreEpisode {
    pub fn context_sets(&self) -> Vec<(Vec<usize>, bool)> {
        self.contexts
            .iter()
            .map(|p| (p.objects.clone(), p.light == Some(Light::On)))
            .collect()
    }
}

/// Classifies a question from episode data alone:
/// direct ⇔ the query set appears verbatim among the contexts;
/// backward-blocking ⇔ the label is undetermined (nonempty query);
/// screen-off ⇔ some query object is provably a blicket;
/// indirect otherwise.
pub fn classify_question(
    contexts: &[(Vec<usize>, bool)],
    query: &[usize],
    label: Light,
) -> QuestionType {
    if contexts.iter().any(|(s, _)| s == query) {
        QuestionType::Direct
    } else if label == Light::Undetermined && !query.is_empty() {
        QuestionType::BackwardBlocking
    } else if query.iter().any(|&o| provably_blicket(contexts, o)) {
        QuestionType::ScreenOff
    } else {
        QuestionType::Indirect
    }
}

fn sample_subset(cfg: &AcreConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let size = rng.gen_range(cfg.min_panel_objects..=cfg.max_panel_objects);
    let mut ids: Vec<usize> = (0..cfg.vocab_objects).collect();
    ids.shuffle(rng);
    let mut set = ids[..size].to_vec();
    set.sort_unstable();
    set
}

fn sample_type(cfg: &AcreConfig, rng: &mut ChaCha8Rng) -> QuestionType {
    let total: f64 = cfg.type_frequencies.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    for (i, &f) in cfg.type_frequencies.iter().enumerate() {
        if x < f {
            return ALL_QUESTION_TYPES[i];
        }
        x -= f;
    }
    QuestionType::BackwardBlocking
}

pub const STRIP_ON: [f32; 3] = [0.98, 0.92, 0.30];
pub const STRIP_OFF: [f32; 3] = [0.10, 0.10, 0.14];
pub const STRIP_UNKNOWN: [f32; 3] = [0.45, 0.45, 0.55];

/// Renders one panel: platform strip along the bottom, objects in a row
/// above it at positions determined by the sorted object set.
pub fn render_panel(objects: &[usize], light: Option<Light>, cfg: &AcreConfig) -> Tensor<f32> {
    let size = cfg.render.image;
    let plane = size * size;
    let mut img = Tensor::zeros(&[3, size, size]);
    for (c, &v) in super::render::BACKGROUND.iter().enumerate() {
        img.data_mut()[c * plane..(c + 1) * plane].fill(v);
    }
    let strip = match light {
        Some(Light::On) => STRIP_ON,
        Some(Light::Off) => STRIP_OFF,
        Some(Light::Undetermined) | None => STRIP_UNKNOWN,
    };
    let strip_top = (size as f64 * 0.84) as usize;
    for c in 0..3 {
        img.data_mut()[c * plane + strip_top * size..(c + 1) * plane].fill(strip[c]);
    }
    // Medium-size objects, evenly spaced; identity fixes both shape and color.
    let r = cfg.render.radius(1, 4) * size as f64;
    let m = objects.len();
    for (i, &id) in objects.iter().enumerate() {
        let (shape, color_id) = cfg.identity(id);
        let cx = (i + 1) as f64 / (m + 1) as f64 * size as f64;
        let cy = size as f64 * 0.5;
        paint_simple(img.data_mut(), shape, object_color(shape, color_id), cy, cx, r, size);
    }
    img
}

fn paint_simple(img: &mut [f32], shape: Shape, color: [f32; 3], cy: f64, cx: f64, r: f64, size: usize) {
    let plane = size * size;
    let y0 = ((cy - r - 1.0).floor().max(0.0)) as usize;
    let y1 = ((cy + r + 1.0).ceil().min(size as f64)) as usize;
    let x0 = ((cx - r - 1.0).floor().max(0.0)) as usize;
    let x1 = ((cx + r + 1.0).ceil().min(size as f64)) as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let inside = match shape {
                Shape::Circle => (py - cy).powi(2) + (px - cx).powi(2) <= r * r,
                Shape::Square => (py - cy).abs() <= r * 0.82 && (px - cx).abs() <= r * 0.82,
                Shape::Triangle => {
                    let t = (py - cy) / r;
                    (-1.0..=0.8).contains(&t) && (px - cx).abs() <= 0.95 * r * (t + 1.0) / 1.8
                }
                _ => false,
            };
            if inside {
                for (c, &v) in color.iter().enumerate() {
                    img[c * plane + y * size + x] = v;
                }
            }
        }
    }
}

/// Generates an episode whose question type matches a draw from the
/// configured frequencies, by rejection over (mask, contexts, query).
pub fn gen_acre_episode(seed: u64, cfg: &AcreConfig) -> Result<AcreEpisode, WorldgenError> {
    cfg.validate()?;
    let mut rng = stream(seed, "acre-episode", seed);
    let target = sample_type(cfg, &mut rng);

    let mut blicket_mask: Vec<bool> = Vec::new();
    let mut contexts: Vec<(Vec<usize>, bool)> = Vec::new();
    for tries in 0..cfg.max_tries {
        // Refresh the world every few query attempts; some worlds cannot
        // realize every type.
        if tries % 20 == 0 {
            blicket_mask = (0..cfg.vocab_objects).map(|_| rng.gen_bool(0.5)).collect();
            contexts = (0..cfg.contexts)
                .map(|_| {
                    let set = sample_subset(cfg, &mut rng);
                    let light = set.iter().any(|&o| blicket_mask[o]);
                    (set, light)
                })
                .collect();
        }
        let query = if target == QuestionType::Direct && tries % 2 == 0 {
            // Half the direct attempts replay a context verbatim.
            contexts[rng.gen_range(0..contexts.len())].0.clone()
        } else {
            sample_subset(cfg, &mut rng)
        };
        let label = acre_oracle(&contexts, &query)?;
        if classify_question(&contexts, &query, label) != target {
            continue;
        }
        let context_panels: Vec<AcrePanel> = contexts
            .iter()
            .map(|(objects, light)| AcrePanel {
                objects: objects.clone(),
                light: Some(if *light { Light::On } else { Light::Off }),
            })
            .collect();
        let query_panel = AcrePanel { objects: query, light: None };
        let mut frames: Vec<Tensor<f32>> = context_panels
            .iter()
            .map(|p| render_panel(&p.objects, p.light, cfg))
            .collect();
        frames.push(render_panel(&query_panel.objects, None, cfg));
        return Ok(AcreEpisode {
            seed,
            contexts: context_panels,
            query: query_panel,
            blicket_mask,
            label,
            question_type: target,
            frames,
        });
    }
    Err(WorldgenError::RejectionExhausted {
        what: format!("question type {target:?}"),
        tries: cfg.max_tries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn episodes_are_reproducible_and_label_matches_oracle() {
        let cfg = AcreConfig::default();
        for seed in 0..40 {
            let a = gen_acre_episode(seed, &cfg).unwrap();
            let b = gen_acre_episode(seed, &cfg).unwrap();
            assert_eq!(a, b);
            let label = acre_oracle(&a.context_sets(), &a.query.objects).unwrap();
            assert_eq!(a.label, label, "seed {seed}");
            // Context lights agree with the hidden mask by construction.
            for p in &a.contexts {
                let lit = p.objects.iter().any(|&o| a.blicket_mask[o]);
                assert_eq!(p.light, Some(if lit { Light::On } else { Light::Off }));
            }
        }
    }

    #[test]
    fn direct_query_replays_context_light() {
        let cfg = AcreConfig::default();
        let mut seen = 0;
        for seed in 0..80 {
            let ep = gen_acre_episode(seed, &cfg).unwrap();
            if ep.question_type != QuestionType::Direct {
                continue;
            }
            seen += 1;
            let ctx = ep
                .contexts
                .iter()
                .find(|p| p.objects == ep.query.objects)
                .expect("direct question replays a context");
            assert_eq!(Some(ep.label), ctx.light);
        }
        assert!(seen >= 5, "only {seen} direct episodes");
    }

    #[test]
    fn all_question_types_are_reachable() {
        let cfg = AcreConfig::default();
        let mut counts = [0usize; 4];
        for seed in 0..120 {
            let ep = gen_acre_episode(seed, &cfg).unwrap();
            let idx = ALL_QUESTION_TYPES.iter().position(|&t| t == ep.question_type).unwrap();
            counts[idx] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "type counts {counts:?}");
    }

    #[test]
    fn backward_blocking_is_exactly_undetermined() {
        let cfg = AcreConfig::default();
        for seed in 0..60 {
            let ep = gen_acre_episode(seed, &cfg).unwrap();
            assert_eq!(
                ep.question_type == QuestionType::BackwardBlocking,
                ep.label == Light::Undetermined,
                "seed {seed}: {:?} vs {:?}",
                ep.question_type,
                ep.label
            );
        }
    }

    #[test]
    fn query_panel_strip_is_neutral() {
        let cfg = AcreConfig::default();
        let ep = gen_acre_episode(7, &cfg).unwrap();
        let size = cfg.render.image;
        let plane = size * size;
        let query_frame = ep.frames.last().unwrap();
        let y = size - 1;
        for c in 0..3 {
            assert_eq!(query_frame.data()[c * plane + y * size], STRIP_UNKNOWN[c]);
        }
    }
}
