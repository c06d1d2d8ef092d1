//! Fixtures shared by the benchmarks.

use thermosplat_core::dataset::{generate_scene, init_gaussians, SyntheticSceneSpec};
use thermosplat_core::{Gaussian3D, MultiViewFrame};

/// One desk-scale view and the Gaussians initialized from the scene's points.
pub fn desk_fixture() -> (MultiViewFrame, Vec<Gaussian3D>) {
    let mut spec = SyntheticSceneSpec::desk();
    spec.num_views = 2;
    let scene = generate_scene(&spec).expect("desk scene is valid");
    let gaussians = init_gaussians(&scene.points, 3).expect("desk scene has points");
    (scene.frames.into_iter().next().expect("two views"), gaussians)
}
