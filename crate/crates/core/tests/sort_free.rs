//! Runs alone in its own process so the depth-order counter sees nothing
//! but WSR work.

use wsr_core::render::{depth_order_calls, render_sorted_reference, render_wsr, Precision, RenderOptions};
use wsr_core::scene::{scene_new_random, Aabb, RandomInit, WeightKind};
use wsr_core::synth::orbit_camera;
use wsr_core::train::{backward_wsr, LossWeights};

#[test]
fn wsr_never_orders_by_depth() {
    let bounds = Aabb::new([-1.0; 3], [1.0; 3]);
    let cams: Vec<_> = (0..6).map(|i| orbit_camera(4.0, i as f64, 0.4, 0.9, 48).unwrap()).collect();
    for kind in [WeightKind::Dir, WeightKind::Exp, WeightKind::Lc] {
        let init = RandomInit { weight: kind, ..RandomInit::default() };
        let scene = scene_new_random(60, bounds, 5, &init).unwrap();
        for cam in &cams {
            for precision in [Precision::F32, Precision::F64] {
                render_wsr(&scene, cam, &RenderOptions { precision, ..RenderOptions::default() }).unwrap();
            }
            render_wsr(&scene, cam, &RenderOptions::exact()).unwrap();
        }
        let target = render_wsr(&scene, &cams[1], &RenderOptions::default()).unwrap();
        backward_wsr(&scene, &cams[0], &target, &RenderOptions::default(), &LossWeights::default()).unwrap();
    }
    assert_eq!(depth_order_calls(), 0);

    let scene = scene_new_random(10, bounds, 5, &RandomInit::default()).unwrap();
    render_sorted_reference(&scene, &cams[0], &RenderOptions::default()).unwrap();
    assert_eq!(depth_order_calls(), 1);
}
