use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use super::env::{VariantMode, VariantSpec};
use super::scene::{Cell, ObjectKind, Scene};
use crate::autodiff::Tensor;

/// Pixels per cell edge; one cell renders to exactly one model patch.
pub const CELL_PX: usize = 4;

pub const BACKGROUND: [f64; 3] = [0.2, 0.2, 0.2];
pub const GRIPPER: [f64; 3] = [1.0, 1.0, 1.0];

pub fn base_color(kind: ObjectKind) -> [f64; 3] {
    match kind {
        ObjectKind::Spoon => [0.55, 0.6, 0.95],
        ObjectKind::Towel => [0.9, 0.45, 0.7],
        ObjectKind::Carrot => [1.0, 0.5, 0.0],
        ObjectKind::Plate => [0.8, 0.85, 0.65],
        ObjectKind::GreenBlock => [0.0, 0.75, 0.2],
        ObjectKind::YellowBlock => [0.95, 0.9, 0.0],
        ObjectKind::Eggplant => [0.45, 0.1, 0.55],
        ObjectKind::Basket => [0.6, 0.4, 0.2],
    }
}

/// Colors after per-channel jitter in `[-0.1, 0.1]` (variant aggregation only), clamped to `[0, 1]`.
struct Palette {
    background: [f64; 3],
    kinds: [[f64; 3]; 8],
}

impl Palette {
    fn for_variant(variant: &VariantSpec) -> Self {
        let mut background = BACKGROUND;
        let mut kinds = ObjectKind::ALL.map(base_color);
        if variant.mode == VariantMode::VariantAggregation {
            let mut rng = SplitMix64::seed_from_u64(variant.palette_jitter_seed);
            let mut jitter = |c: &mut [f64; 3]| {
                for v in c.iter_mut() {
                    *v = (*v + rng.gen_range(-0.1..=0.1)).clamp(0.0, 1.0);
                }
            };
            jitter(&mut background);
            kinds.iter_mut().for_each(&mut jitter);
        }
        Self { background, kinds }
    }

    fn kind(&self, kind: ObjectKind) -> [f64; 3] {
        let i = ObjectKind::ALL.iter().position(|k| *k == kind).expect("known kind");
        self.kinds[i]
    }
}

/// Renders `scene` to a `[H·4, W·4, 3]` image with values in `[0, 1]`.
///
/// Flat objects fill their 4×4 block, other objects the central 2×2. The gripper
/// is a one-pixel white ring; while it holds an object the ring's corners are left
/// out so the grasp state is visible under any lighting.
pub fn render(scene: &Scene, variant: &VariantSpec) -> Tensor {
    let palette = Palette::for_variant(variant);
    let (w, h) = (scene.grid_w * CELL_PX, scene.grid_h * CELL_PX);
    let mut img = vec![0.0; w * h * 3];
    let paint = |img: &mut [f64], px: usize, py: usize, c: [f64; 3]| {
        let o = (py * w + px) * 3;
        img[o..o + 3].copy_from_slice(&c);
    };
    for py in 0..h {
        for px in 0..w {
            paint(&mut img, px, py, palette.background);
        }
    }
    let block = |cell: Cell| (cell.x * CELL_PX, cell.y * CELL_PX);
    let lifted = |id: usize| Some(id) == scene.held || Some(id) == scene.delivered;
    // Draw order: flat objects, standing objects, then carried or stacked ones.
    let layers = [
        scene.objects.iter().filter(|o| o.kind.is_flat() && !lifted(o.id)).collect::<Vec<_>>(),
        scene.objects.iter().filter(|o| !o.kind.is_flat() && !lifted(o.id)).collect(),
        scene.objects.iter().filter(|o| lifted(o.id)).collect(),
    ];
    for (layer, objects) in layers.iter().enumerate() {
        for o in objects {
            let (bx, by) = block(o.cell);
            let color = palette.kind(o.kind);
            let inset = if layer == 0 { 0 } else { 1 };
            for dy in inset..CELL_PX - inset {
                for dx in inset..CELL_PX - inset {
                    paint(&mut img, bx + dx, by + dy, color);
                }
            }
        }
    }
    let (bx, by) = block(scene.gripper_cell);
    let holding = scene.held.is_some();
    for dy in 0..CELL_PX {
        for dx in 0..CELL_PX {
            let edge = dx == 0 || dy == 0 || dx == CELL_PX - 1 || dy == CELL_PX - 1;
            let corner = (dx == 0 || dx == CELL_PX - 1) && (dy == 0 || dy == CELL_PX - 1);
            if edge && !(holding && corner) {
                paint(&mut img, bx + dx, by + dy, GRIPPER);
            }
        }
    }
    for v in img.iter_mut() {
        *v = (*v * variant.lighting).clamp(0.0, 1.0);
    }
    Tensor::new(vec![h, w, 3], img).expect("image extents match")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{reset, step, Action, Grip, SceneObject, Task};

    fn pixel(img: &Tensor, px: usize, py: usize) -> [f64; 3] {
        let w = img.shape()[1];
        let o = (py * w + px) * 3;
        [img.data()[o], img.data()[o + 1], img.data()[o + 2]]
    }

    #[test]
    fn empty_scene_is_background_except_gripper() {
        let scene = Scene::empty(8, 8, Cell::new(7, 7));
        let img = render(&scene, &VariantSpec::visual_matching(0));
        assert_eq!(img.shape(), &[32, 32, 3]);
        for py in 0..28 {
            for px in 0..28 {
                assert_eq!(pixel(&img, px, py), BACKGROUND);
            }
        }
        assert_eq!(pixel(&img, 28, 28), GRIPPER);
        assert_eq!(pixel(&img, 29, 29), BACKGROUND);
    }

    #[test]
    fn lighting_halves_every_pixel() {
        let task = Task::canonical().remove(1);
        let bright = VariantSpec::variant_aggregation(3, 1.0, 77, 4).unwrap();
        let dim = VariantSpec { lighting: 0.5, ..bright };
        let scene = reset(&task, &bright, 3).unwrap();
        let a = render(&scene, &bright);
        let b = render(&scene, &dim);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x * 0.5, *y);
        }
    }

    #[test]
    fn render_is_deterministic_and_bounded() {
        let task = Task::canonical().remove(2);
        let v = VariantSpec::sample(crate::sim::VariantMode::VariantAggregation, 12);
        let scene = reset(&task, &v, 12).unwrap();
        let a = render(&scene, &v);
        assert_eq!(a, render(&scene, &v));
        assert!(a.data().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn moving_an_object_only_touches_two_blocks() {
        let mut scene = Scene::empty(8, 8, Cell::new(0, 0));
        scene.objects.push(SceneObject { id: 0, kind: ObjectKind::Carrot, cell: Cell::new(3, 3) });
        scene.objects.push(SceneObject { id: 1, kind: ObjectKind::Plate, cell: Cell::new(6, 1) });
        let v = VariantSpec::visual_matching(0);
        let before = render(&scene, &v);
        scene.objects[0].cell = Cell::new(5, 2);
        let after = render(&scene, &v);
        for py in 0..32 {
            for px in 0..32 {
                let cell = Cell::new(px / 4, py / 4);
                if cell != Cell::new(3, 3) && cell != Cell::new(5, 2) {
                    assert_eq!(pixel(&before, px, py), pixel(&after, px, py));
                }
            }
        }
        assert_ne!(before, after);
    }

    #[test]
    fn grasp_state_is_visible() {
        let task = Task::canonical().remove(0);
        let mut scene = Scene::empty(8, 8, Cell::new(2, 2));
        scene.objects.push(SceneObject { id: 0, kind: ObjectKind::Spoon, cell: Cell::new(2, 2) });
        scene.objects.push(SceneObject { id: 1, kind: ObjectKind::Towel, cell: Cell::new(5, 5) });
        let v = VariantSpec::visual_matching(0);
        let open = render(&scene, &v);
        let held = step(&scene, &task, Action::new(0, 0, Grip::Close).unwrap()).scene;
        let closed = render(&held, &v);
        assert_ne!(open, closed);
        assert_eq!(pixel(&open, 8, 8), GRIPPER);
        assert_eq!(pixel(&closed, 8, 8), BACKGROUND);
    }
}
