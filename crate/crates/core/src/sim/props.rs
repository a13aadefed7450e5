use proptest::prelude::*;

use super::*;

proptest! {
    #[test]
    fn random_actions_keep_scene_valid(
        seed in any::<u64>(),
        task_idx in 0usize..4,
        actions in proptest::collection::vec(0usize..ACTION_COUNT, 0..80),
    ) {
        let task = Task::canonical().remove(task_idx);
        let v = VariantSpec::sample(VariantMode::VariantAggregation, seed);
        let mut scene = reset(&task, &v, seed).unwrap();
        let mut grasped = false;
        for a in actions {
            let out = step(&scene, &task, Action::from_index(a).unwrap());
            grasped |= out.grasped_now;
            if out.success_now {
                prop_assert!(grasped);
            }
            scene = out.scene;
            prop_assert!(scene.validate().is_ok(), "{:?}", scene.validate());
        }
    }
}
