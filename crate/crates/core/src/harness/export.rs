//! Synthetic streams packaged as the on-disk replay formats.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clustering::Event;
use crate::error::Result;
use crate::geometry::CameraModel;
use crate::harness::io::{write_calibration, write_events, write_gyro, GyroTrack};
use crate::synth::{self, MotionSpec, NoiseSpec, SceneSpec, Volume};

/// Gyro sample spacing of exported tracks, s.
pub const GYRO_STEP: f64 = 0.005;

#[derive(Debug, Clone)]
pub struct SynthStream {
    pub scene: SceneSpec,
    pub motion: MotionSpec,
    pub events: Vec<Event>,
    pub labels: Vec<usize>,
    pub gyro: GyroTrack,
    pub camera: CameraModel,
}

pub fn synth_stream(seed: u64, motion: &MotionSpec, n_lines: usize, n_events: usize, event_sigma: f64) -> Result<SynthStream> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = CameraModel::davis346();
    let scene = synth::random_scene(n_lines, Volume::default(), &mut rng);
    let noise = NoiseSpec {
        event_sigma,
        seed,
        ..Default::default()
    };
    let labeled = synth::generate_events(&scene, motion, &camera, n_events, &noise, &mut rng);
    Ok(SynthStream {
        scene,
        motion: *motion,
        events: labeled.iter().map(|e| e.event).collect(),
        labels: labeled.iter().map(|e| e.label).collect(),
        gyro: GyroTrack::constant(motion.omega, 0.0, motion.duration, GYRO_STEP)?,
        camera,
    })
}

/// Paths written by [`export_stream`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExportPaths {
    pub events: PathBuf,
    pub gyro: PathBuf,
    pub calibration: PathBuf,
}

impl ExportPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            events: dir.join("events.txt"),
            gyro: dir.join("gyro.txt"),
            calibration: dir.join("calib.toml"),
        }
    }
}

pub fn export_stream(dir: &Path, stream: &SynthStream) -> Result<ExportPaths> {
    fs::create_dir_all(dir)?;
    let paths = ExportPaths::in_dir(dir);
    write_events(&paths.events, &stream.events)?;
    write_gyro(&paths.gyro, &stream.gyro)?;
    write_calibration(&paths.calibration, &stream.camera)?;
    Ok(paths)
}
