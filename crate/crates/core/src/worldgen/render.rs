//! Deterministic rasterizer for grid scenes.
//!
//! Visible objects are painted back-to-front by (size rank, id), so a larger
//! object always occludes a smaller one it overlaps. Contained objects are
//! not drawn. The same code produces an ownership map used to derive exact
//! visibility annotations.

use serde::{Deserialize, Serialize};

use super::{GridScene, Shape};
use crate::codec::BBox;
use crate::tensor::Tensor;

/// Rendering geometry and palette. Object radii are a fraction of the cell
/// size, chosen so nested same-shape boxes keep IoU below the 0.5 matching
/// threshold (largest ratio 0.33/0.48 squared ≈ 0.47).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub image: usize,
    /// Radius per size rank, as a fraction of one grid cell.
    pub size_factors: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { image: 32, size_factors: [0.22, 0.33, 0.48] }
    }
}

impl RenderConfig {
    /// Normalized radius of a size rank on a K×K grid.
    pub fn radius(&self, size_rank: usize, k: usize) -> f64 {
        self.size_factors[size_rank] / k as f64
    }
}

pub const BACKGROUND: [f32; 3] = [0.70, 0.72, 0.75];
pub const SNITCH_COLOR: [f32; 3] = [0.98, 0.84, 0.20];

pub const PALETTE: [[f32; 3]; 6] = [
    [0.90, 0.20, 0.20], // red
    [0.20, 0.70, 0.25], // green
    [0.25, 0.35, 0.95], // blue
    [0.70, 0.30, 0.85], // purple
    [0.15, 0.75, 0.75], // cyan
    [0.95, 0.60, 0.15], // orange
];

pub fn object_color(shape: Shape, color_id: usize) -> [f32; 3] {
    if shape == Shape::Snitch {
        SNITCH_COLOR
    } else {
        PALETTE[color_id % PALETTE.len()]
    }
}

/// Pixel-center membership test for each shape at center (cy, cx) with
/// radius r, all in pixel units.
fn covers(shape: Shape, cy: f64, cx: f64, r: f64, py: f64, px: f64) -> bool {
    let dy = py - cy;
    let dx = px - cx;
    match shape {
        Shape::Circle => dy * dy + dx * dx <= r * r,
        Shape::Square => dy.abs() <= r * 0.82 && dx.abs() <= r * 0.82,
        // Upward triangle: apex on top, base at the bottom.
        Shape::Triangle => {
            let t = dy / r; // -1 at apex, +0.8 at base
            if !(-1.0..=0.8).contains(&t) {
                return false;
            }
            let half_width = 0.95 * r * (t + 1.0) / 1.8;
            dx.abs() <= half_width
        }
        // Inverted funnel: wide top, apex at the bottom.
        Shape::Cone => {
            let t = dy / r; // -0.8 at top edge, +1 at apex
            if !(-0.8..=1.0).contains(&t) {
                return false;
            }
            let half_width = 0.95 * r * (1.0 - t) / 1.8;
            dx.abs() <= half_width
        }
        Shape::Snitch => dy.abs() + dx.abs() <= r,
    }
}

/// Rasterizes one object into `img` (and `owner`, when provided).
#[allow(clippy::too_many_arguments)]
fn paint(
    img: &mut [f32],
    owner: Option<&mut [Option<usize>]>,
    idx: usize,
    shape: Shape,
    color: [f32; 3],
    cy: f64,
    cx: f64,
    r: f64,
    size: usize,
) {
    let y0 = ((cy - r - 1.0).floor().max(0.0)) as usize;
    let y1 = ((cy + r + 1.0).ceil().min(size as f64)) as usize;
    let x0 = ((cx - r - 1.0).floor().max(0.0)) as usize;
    let x1 = ((cx + r + 1.0).ceil().min(size as f64)) as usize;
    let plane = size * size;
    let mut owner = owner;
    for y in y0..y1 {
        for x in x0..x1 {
            if covers(shape, cy, cx, r, y as f64 + 0.5, x as f64 + 0.5) {
                for (c, &v) in color.iter().enumerate() {
                    img[c * plane + y * size + x] = v;
                }
                if let Some(ref mut own) = owner {
                    own[y * size + x] = Some(idx);
                }
            }
        }
    }
}

fn draw_order(scene: &GridScene) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scene.objects.len())
        .filter(|&i| scene.objects[i].contained_by.is_none())
        .collect();
    order.sort_by_key(|&i| (scene.objects[i].size_rank, scene.objects[i].id));
    order
}

/// Renders a scene to a (3, H, W) image in [0,1].
pub fn render_frame(scene: &GridScene, cfg: &RenderConfig) -> Tensor<f32> {
    render_with_ownership(scene, cfg).0
}

/// Renders a scene and the per-pixel owner (index into `scene.objects`) of
/// the topmost shape covering each pixel.
pub fn render_with_ownership(scene: &GridScene, cfg: &RenderConfig) -> (Tensor<f32>, Vec<Option<usize>>) {
    let size = cfg.image;
    let mut img = Tensor::zeros(&[3, size, size]);
    let plane = size * size;
    for (c, &v) in BACKGROUND.iter().enumerate() {
        img.data_mut()[c * plane..(c + 1) * plane].fill(v);
    }
    let mut owner: Vec<Option<usize>> = vec![None; plane];
    for i in draw_order(scene) {
        let o = &scene.objects[i];
        let r = cfg.radius(o.size_rank, scene.k) * size as f64;
        paint(
            img.data_mut(),
            Some(&mut owner),
            i,
            o.shape,
            object_color(o.shape, o.color_id),
            o.pos.0 * size as f64,
            o.pos.1 * size as f64,
            r,
            size,
        );
    }
    (img, owner)
}

/// The tight normalized box of an object's own pixels, ignoring occlusion:
/// the bounding rectangle the shape rasterizes to when drawn alone.
pub fn solo_bbox(shape: Shape, pos: (f64, f64), size_rank: usize, k: usize, cfg: &RenderConfig) -> BBox {
    let size = cfg.image;
    let r = cfg.radius(size_rank, k) * size as f64;
    let cy = pos.0 * size as f64;
    let cx = pos.1 * size as f64;
    let y0 = ((cy - r - 1.0).floor().max(0.0)) as usize;
    let y1 = ((cy + r + 1.0).ceil().min(size as f64)) as usize;
    let x0 = ((cx - r - 1.0).floor().max(0.0)) as usize;
    let x1 = ((cx + r + 1.0).ceil().min(size as f64)) as usize;
    let (mut ymin, mut xmin, mut ymax, mut xmax) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut hit = false;
    for y in y0..y1 {
        for x in x0..x1 {
            if covers(shape, cy, cx, r, y as f64 + 0.5, x as f64 + 0.5) {
                hit = true;
                ymin = ymin.min(y);
                xmin = xmin.min(x);
                ymax = ymax.max(y);
                xmax = xmax.max(x);
            }
        }
    }
    if !hit {
        // Degenerate (off-image or sub-pixel) object: a point box at its center.
        let cyn = (cy / size as f64).clamp(0.0, 1.0);
        let cxn = (cx / size as f64).clamp(0.0, 1.0);
        return BBox { ymin: cyn, xmin: cxn, ymax: cyn, xmax: cxn };
    }
    BBox {
        ymin: ymin as f64 / size as f64,
        xmin: xmin as f64 / size as f64,
        ymax: (ymax + 1) as f64 / size as f64,
        xmax: (xmax + 1) as f64 / size as f64,
    }
}

/// Pixel bounding box of the pixels `owner` assigns to object `idx`.
pub fn owned_bbox(owner: &[Option<usize>], idx: usize, size: usize) -> Option<BBox> {
    let (mut ymin, mut xmin, mut ymax, mut xmax) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut hit = false;
    for y in 0..size {
        for x in 0..size {
            if owner[y * size + x] == Some(idx) {
                hit = true;
                ymin = ymin.min(y);
                xmin = xmin.min(x);
                ymax = ymax.max(y);
                xmax = xmax.max(x);
            }
        }
    }
    hit.then(|| BBox {
        ymin: ymin as f64 / size as f64,
        xmin: xmin as f64 / size as f64,
        ymax: (ymax + 1) as f64 / size as f64,
        xmax: (xmax + 1) as f64 / size as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::SceneObject;

    fn scene(objects: Vec<SceneObject>) -> GridScene {
        GridScene { k: 4, objects }
    }

    fn obj(id: usize, shape: Shape, size_rank: usize, pos: (f64, f64)) -> SceneObject {
        SceneObject { id, shape, size_rank, color_id: id, pos, contained_by: None }
    }

    #[test]
    fn empty_scene_is_uniform_background() {
        let cfg = RenderConfig::default();
        let img = render_frame(&scene(vec![obj(0, Shape::Snitch, 0, (-10.0, -10.0))]), &cfg);
        // The snitch is parked far off-image, so every pixel is background.
        let plane = cfg.image * cfg.image;
        for c in 0..3 {
            assert!(img.data()[c * plane..(c + 1) * plane].iter().all(|&v| v == BACKGROUND[c]));
        }
    }

    #[test]
    fn small_object_behind_large_contributes_no_pixels() {
        let cfg = RenderConfig::default();
        let s = scene(vec![
            obj(0, Shape::Circle, 0, (0.5, 0.5)),
            obj(1, Shape::Square, 2, (0.5, 0.5)),
        ]);
        let (_, owner) = render_with_ownership(&s, &cfg);
        assert!(owner.iter().all(|&o| o != Some(0)));
        assert!(owner.iter().any(|&o| o == Some(1)));
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = RenderConfig::default();
        let s = scene(vec![
            obj(0, Shape::Snitch, 0, (0.3, 0.7)),
            obj(1, Shape::Cone, 2, (0.6, 0.2)),
            obj(2, Shape::Triangle, 1, (0.8, 0.8)),
        ]);
        assert_eq!(render_frame(&s, &cfg), render_frame(&s, &cfg));
    }

    #[test]
    fn contained_objects_are_not_drawn() {
        let cfg = RenderConfig::default();
        let mut s = scene(vec![
            obj(0, Shape::Snitch, 0, (0.5, 0.5)),
            obj(1, Shape::Cone, 2, (0.5, 0.5)),
        ]);
        s.objects[0].contained_by = Some(1);
        let (_, owner) = render_with_ownership(&s, &cfg);
        assert!(owner.iter().all(|&o| o != Some(0)));
    }

    #[test]
    fn solo_bbox_bounds_owned_pixels_exactly_when_unoccluded() {
        let cfg = RenderConfig::default();
        for (i, shape) in [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cone, Shape::Snitch]
            .into_iter()
            .enumerate()
        {
            let s = scene(vec![obj(0, shape, i % 3, (0.5, 0.4))]);
            let (_, owner) = render_with_ownership(&s, &cfg);
            let solo = solo_bbox(shape, (0.5, 0.4), i % 3, 4, &cfg);
            let owned = owned_bbox(&owner, 0, cfg.image).expect("object visible");
            assert_eq!(solo, owned, "{shape:?}");
        }
    }
}
