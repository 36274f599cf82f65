use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{lift_pixel, CameraModel};
use crate::solver::{ClusterData, Observation};
use crate::synth::{self, MotionSpec, NoiseSpec, SceneSpec, Volume};

/// Ground-truth boundary lines over the whole interval plus the labelled events of each line.
pub fn scenario(
    seed: u64,
    motion: &MotionSpec,
    scene: Option<SceneSpec>,
    n_events: usize,
    noise: &NoiseSpec,
) -> (Vec<ClusterData>, SceneSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = CameraModel::davis346();
    let scene = scene.unwrap_or_else(|| synth::random_scene(5, Volume::default(), &mut rng));
    let events = synth::generate_events(&scene, motion, &cam, n_events, noise, &mut rng);
    let clusters = scene
        .segments
        .iter()
        .enumerate()
        .map(|(j, seg)| ClusterData {
            geometry: synth::ground_truth_boundary_lines(
                seg,
                motion,
                &cam,
                0.0,
                motion.duration,
                noise.line_endpoint_sigma,
                &mut rng,
            )
            .unwrap(),
            observations: events
                .iter()
                .filter(|e| e.label == j)
                .map(|e| Observation {
                    bearing: lift_pixel(&e.event.pixel(), &cam).unwrap(),
                    t: e.event.t,
                })
                .collect(),
        })
        .collect();
    (clusters, scene)
}
