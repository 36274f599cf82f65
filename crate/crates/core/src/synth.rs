//! Ground-truth synthetic scenes and event streams.
//!
//! The camera moves with a constant body-frame twist `(ω, v)` starting from
//! the identity pose at `t = 0`, so relative poses between any two times are
//! exactly the ones the constraint module assumes.

use log::warn;
use nalgebra::Rotation3;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::clustering::{Event, Polarity};
use crate::constraint::ClusterGeometry;
use crate::error::{CelcError, Result};
use crate::geometry::{
    lift_line, so3_exp, translation_from_velocity, AngularVelocity, CameraModel, Line2D, LinearVelocity, Vec2, Vec3,
};

const MIN_SEGMENT_LENGTH: f64 = 0.1;
const VISIBILITY_PROBES: usize = 2000;
const MAX_SAMPLE_ATTEMPTS: usize = 100_000;

/// Axis-aligned box that scene segments are drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Volume {
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for Volume {
    fn default() -> Self {
        Self {
            min: Vec3::new(-2.0, -2.0, 3.0),
            max: Vec3::new(2.0, 2.0, 6.0),
        }
    }
}

impl Volume {
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        Vec3::from_fn(|i, _| rng.random_range(self.min[i]..=self.max[i]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: Vec3,
    pub b: Vec3,
}

impl Segment {
    pub fn length(&self) -> f64 {
        (self.b - self.a).norm()
    }

    pub fn point_at(&self, s: f64) -> Vec3 {
        self.a + s * (self.b - self.a)
    }

    pub fn direction(&self) -> Vec3 {
        (self.b - self.a).normalize()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub segments: Vec<Segment>,
    pub volume: Volume,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionSpec {
    pub omega: AngularVelocity,
    pub v: LinearVelocity,
    pub duration: f64,
}

impl Default for MotionSpec {
    fn default() -> Self {
        Self {
            omega: Vec3::new(0.0, 0.0, 2.0),
            v: Vec3::new(1.0, 2.0, 0.0),
            duration: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseSpec {
    /// Per-axis pixel noise on events.
    pub event_sigma: f64,
    /// Per-axis pixel noise on projected segment endpoints.
    pub line_endpoint_sigma: f64,
    /// Per-axis noise on the angular velocity handed to the solver.
    pub omega_sigma: f64,
    pub seed: u64,
}

/// `n_lines` random segments with endpoints uniform in `volume`.
pub fn random_scene<R: Rng + ?Sized>(n_lines: usize, volume: Volume, rng: &mut R) -> SceneSpec {
    let segments = (0..n_lines)
        .map(|_| loop {
            let s = Segment {
                a: volume.sample(rng),
                b: volume.sample(rng),
            };
            if s.length() >= MIN_SEGMENT_LENGTH {
                break s;
            }
        })
        .collect();
    SceneSpec { segments, volume }
}

/// World-from-camera pose `(R_wc, t_wc)` at time `t`.
pub fn camera_pose_at(motion: &MotionSpec, t: f64) -> Result<(Rotation3<f64>, Vec3)> {
    if !(0.0..=motion.duration).contains(&t) {
        return Err(CelcError::TimeOutsideMotion {
            t,
            duration: motion.duration,
        });
    }
    Ok(pose_unchecked(motion, t))
}

fn pose_unchecked(motion: &MotionSpec, t: f64) -> (Rotation3<f64>, Vec3) {
    (
        so3_exp(&motion.omega, t),
        translation_from_velocity(&motion.omega, &motion.v, t),
    )
}

/// World point expressed in the camera frame at time `t`.
pub fn world_to_camera(motion: &MotionSpec, t: f64, p: &Vec3) -> Vec3 {
    let (r, c) = pose_unchecked(motion, t);
    r.inverse() * (p - c)
}

/// A generated event together with its noise-free pixel and source line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledEvent {
    pub event: Event,
    pub clean: Vec2,
    pub label: usize,
}

fn visible_pixel(motion: &MotionSpec, cam: &CameraModel, seg: &Segment, s: f64, t: f64) -> Option<Vec2> {
    let pc = world_to_camera(motion, t, &seg.point_at(s));
    cam.project(&pc).filter(|p| cam.contains(p))
}

/// Samples `n_events` events from the scene's segments at uniform random
/// times in `[0, T]`, sorted by timestamp.
pub fn generate_events<R: Rng + ?Sized>(
    scene: &SceneSpec,
    motion: &MotionSpec,
    cam: &CameraModel,
    n_events: usize,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Vec<LabeledEvent> {
    if n_events == 0 {
        return Vec::new();
    }
    let visible: Vec<usize> = (0..scene.segments.len())
        .filter(|&j| {
            let seg = &scene.segments[j];
            let seen = (0..VISIBILITY_PROBES).any(|_| {
                let s = rng.random::<f64>();
                let t = rng.random::<f64>() * motion.duration;
                visible_pixel(motion, cam, seg, s, t).is_some()
            });
            if !seen {
                warn!("line {j} is never visible; it produces no events");
            }
            seen
        })
        .collect();
    if visible.is_empty() {
        return Vec::new();
    }
    let pixel_noise = (noise.event_sigma > 0.0).then(|| Normal::new(0.0, noise.event_sigma).unwrap());

    let mut out = Vec::with_capacity(n_events);
    'events: for _ in 0..n_events {
        let label = visible[rng.random_range(0..visible.len())];
        let seg = &scene.segments[label];
        for _ in 0..MAX_SAMPLE_ATTEMPTS {
            let s = rng.random::<f64>();
            let t = rng.random::<f64>() * motion.duration;
            let Some(clean) = visible_pixel(motion, cam, seg, s, t) else {
                continue;
            };
            let p = match &pixel_noise {
                Some(n) => clean + Vec2::new(n.sample(rng), n.sample(rng)),
                None => clean,
            };
            if !cam.contains(&p) {
                continue;
            }
            out.push(LabeledEvent {
                event: Event::new(p.x, p.y, t, Polarity::Positive),
                clean,
                label,
            });
            continue 'events;
        }
        warn!("gave up sampling a visible point on line {label}");
    }
    out.sort_by(|a, b| a.event.t.total_cmp(&b.event.t));
    out
}

/// Ideal pinhole pixel (no distortion) of a camera-frame point.
fn pinhole_pixel(cam: &CameraModel, pc: &Vec3) -> Option<Vec2> {
    (pc.z > 0.0).then(|| Vec2::new(cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy))
}

/// Lifted image line of `seg` at time `t`, built from its two projected
/// endpoints after perturbing each by `N(0, sigma²)` px per axis.
pub fn ground_truth_line<R: Rng + ?Sized>(
    seg: &Segment,
    motion: &MotionSpec,
    cam: &CameraModel,
    t: f64,
    endpoint_sigma: f64,
    rng: &mut R,
) -> Result<Line2D> {
    let (pa, pb) = camera_pose_at(motion, t).map(|_| {
        (
            world_to_camera(motion, t, &seg.a),
            world_to_camera(motion, t, &seg.b),
        )
    })?;
    let (Some(mut a), Some(mut b)) = (pinhole_pixel(cam, &pa), pinhole_pixel(cam, &pb)) else {
        return Err(CelcError::BehindCamera(pa.z.min(pb.z)));
    };
    let projected = (a - b).norm();
    if projected < 1.0 {
        return Err(CelcError::CollapsedLine(projected));
    }
    if endpoint_sigma > 0.0 {
        let n = Normal::new(0.0, endpoint_sigma).unwrap();
        a += Vec2::new(n.sample(rng), n.sample(rng));
        b += Vec2::new(n.sample(rng), n.sample(rng));
    }
    let l_px = Vec3::new(a.x, a.y, 1.0).cross(&Vec3::new(b.x, b.y, 1.0));
    lift_line(&l_px, cam)
}

/// Boundary lines of `seg` at `t_s` and `t_e` with endpoint noise.
pub fn ground_truth_boundary_lines<R: Rng + ?Sized>(
    seg: &Segment,
    motion: &MotionSpec,
    cam: &CameraModel,
    t_s: f64,
    t_e: f64,
    endpoint_sigma: f64,
    rng: &mut R,
) -> Result<ClusterGeometry> {
    let l1 = ground_truth_line(seg, motion, cam, t_s, endpoint_sigma, rng)?;
    let l3 = ground_truth_line(seg, motion, cam, t_e, endpoint_sigma, rng)?;
    ClusterGeometry::new(l1, l3, t_s, t_e)
}

/// Events on short image segments translating at constant image velocity:
/// each patch traces a plane in the space-time volume. Patches are laid out
/// so their swept areas never come within 20 px of each other.
pub fn planar_patches<R: Rng + ?Sized>(
    n_patches: usize,
    events_per_patch: usize,
    duration: f64,
    sigma: f64,
    rng: &mut R,
) -> Vec<(Event, usize)> {
    const CENTERS: [(f64, f64); 6] = [
        (60.0, 60.0),
        (173.0, 60.0),
        (286.0, 60.0),
        (60.0, 200.0),
        (173.0, 200.0),
        (286.0, 200.0),
    ];
    assert!(n_patches <= CENTERS.len(), "at most {} patches", CENTERS.len());
    let half_len = 30.0;
    let max_drift = 20.0;
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).unwrap());
    let mut out = Vec::with_capacity(n_patches * events_per_patch);
    for (label, &(cx, cy)) in CENTERS.iter().take(n_patches).enumerate() {
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let dir = Vec2::new(angle.cos(), angle.sin());
        let normal = Vec2::new(-dir.y, dir.x);
        // drift along the line normal so the patch sweeps a tilted plane
        let speed = rng.random_range(0.3..1.0) * max_drift / duration * if rng.random::<bool>() { 1.0 } else { -1.0 };
        let start = Vec2::new(cx, cy) - 0.5 * speed * duration * normal;
        for _ in 0..events_per_patch {
            let t = rng.random::<f64>() * duration;
            let s = rng.random_range(-half_len..half_len);
            let mut p = start + speed * t * normal + s * dir;
            if let Some(n) = &noise {
                p += Vec2::new(n.sample(rng), n.sample(rng));
            }
            out.push((Event::new(p.x, p.y, t, Polarity::Positive), label));
        }
    }
    out.sort_by(|a, b| a.0.t.total_cmp(&b.0.t));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::{build_celc_matrix, scaled_residual};
    use crate::geometry::lift_pixel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scenes_respect_volume_and_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = random_scene(5, Volume::default(), &mut rng);
        assert_eq!(scene.segments.len(), 5);
        for s in &scene.segments {
            assert!(scene.volume.contains(&s.a) && scene.volume.contains(&s.b));
            assert!(s.length() >= MIN_SEGMENT_LENGTH);
        }
        assert_eq!(random_scene(2, Volume::default(), &mut ChaCha8Rng::seed_from_u64(1)).segments.len(), 2);
        let again = random_scene(5, Volume::default(), &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(scene, again);
    }

    #[test]
    fn pose_examples() {
        let m = MotionSpec::default();
        let (r, t) = camera_pose_at(&m, 0.0).unwrap();
        assert_eq!(r, Rotation3::identity());
        assert_eq!(t, Vec3::zeros());
        let straight = MotionSpec {
            omega: Vec3::zeros(),
            ..m
        };
        let (r, t) = camera_pose_at(&straight, 0.5).unwrap();
        assert_eq!(r, Rotation3::identity());
        assert!((t - Vec3::new(0.5, 1.0, 0.0)).norm() < 1e-15);
        assert!(camera_pose_at(&m, 0.6).is_err());
    }

    #[test]
    fn relative_pose_matches_twist_integration() {
        let m = MotionSpec {
            omega: Vec3::new(0.4, -0.7, 2.0),
            v: Vec3::new(1.0, 2.0, -0.5),
            duration: 1.0,
        };
        for (t_s, t_k) in [(0.1, 0.35), (0.8, 0.2), (0.0, 1.0)] {
            let (r_s, c_s) = camera_pose_at(&m, t_s).unwrap();
            let (r_k, c_k) = camera_pose_at(&m, t_k).unwrap();
            let r_rel = r_s.inverse() * r_k;
            let t_rel = r_s.inverse() * (c_k - c_s);
            let r_expect = so3_exp(&m.omega, t_k - t_s);
            let t_expect = translation_from_velocity(&m.omega, &m.v, t_k - t_s);
            assert!((r_rel.matrix() - r_expect.matrix()).abs().max() < 1e-12);
            assert!((t_rel - t_expect).norm() < 1e-12);
        }
    }

    #[test]
    fn noise_free_events_satisfy_constraint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cam = CameraModel::davis346();
        let m = MotionSpec::default();
        let scene = random_scene(5, Volume::default(), &mut rng);
        let events = generate_events(&scene, &m, &cam, 2000, &NoiseSpec::default(), &mut rng);
        assert_eq!(events.len(), 2000);
        assert!(events.windows(2).all(|w| w[0].event.t <= w[1].event.t));
        let geoms: Vec<_> = scene
            .segments
            .iter()
            .map(|s| ground_truth_boundary_lines(s, &m, &cam, 0.0, m.duration, 0.0, &mut rng).unwrap())
            .collect();
        for e in &events {
            let f = lift_pixel(&e.event.pixel(), &cam).unwrap();
            let b = build_celc_matrix(&geoms[e.label], &m.omega, e.event.t).unwrap();
            assert!(scaled_residual(&f, &b, &m.v).abs() < 1e-10);
        }
    }

    #[test]
    fn boundary_lines_pass_through_events_at_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cam = CameraModel::davis346();
        let m = MotionSpec::default();
        let scene = random_scene(3, Volume::default(), &mut rng);
        for seg in &scene.segments {
            let l1 = ground_truth_line(seg, &m, &cam, 0.0, 0.0, &mut rng).unwrap();
            for s in [0.0, 0.3, 0.9] {
                let pc = world_to_camera(&m, 0.0, &seg.point_at(s));
                let f = crate::geometry::Bearing::new(pc).unwrap();
                assert!(f.as_vec().dot(l1.as_vec()).abs() < 1e-10);
            }
            let again = ground_truth_line(seg, &m, &cam, 0.2, 0.0, &mut rng).unwrap();
            let same = ground_truth_line(seg, &m, &cam, 0.2, 0.0, &mut rng).unwrap();
            assert!(again.angle_to(&same) < 1e-15);
            let noisy = ground_truth_line(seg, &m, &cam, 0.2, 2.0, &mut rng).unwrap();
            assert!(noisy.angle_to(&again) > 0.0);
        }
    }

    #[test]
    fn collapsed_segment_is_rejected() {
        let cam = CameraModel::davis346();
        let m = MotionSpec::default();
        // points along the viewing ray project to the same pixel
        let seg = Segment {
            a: Vec3::new(0.0, 0.0, 3.0),
            b: Vec3::new(0.0, 0.0, 5.0),
        };
        let err = ground_truth_line(&seg, &m, &cam, 0.0, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, CelcError::CollapsedLine(_)));
    }

    #[test]
    fn event_noise_has_requested_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cam = CameraModel::davis346();
        let m = MotionSpec::default();
        let scene = random_scene(5, Volume::default(), &mut rng);
        let noise = NoiseSpec {
            event_sigma: 2.0,
            ..Default::default()
        };
        let events = generate_events(&scene, &m, &cam, 10_000, &noise, &mut rng);
        for axis in 0..2 {
            let d: Vec<f64> = events.iter().map(|e| e.event.pixel()[axis] - e.clean[axis]).collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
            assert!((var.sqrt() - 2.0).abs() < 0.06, "axis {axis}: std {}", var.sqrt());
        }
        assert!(generate_events(&scene, &m, &cam, 0, &noise, &mut rng).is_empty());
    }

    #[test]
    fn invisible_line_yields_no_events() {
        let cam = CameraModel::davis346();
        let m = MotionSpec::default();
        let scene = SceneSpec {
            segments: vec![Segment {
                a: Vec3::new(50.0, 50.0, 4.0),
                b: Vec3::new(51.0, 50.0, 4.0),
            }],
            volume: Volume::default(),
        };
        let events = generate_events(&scene, &m, &cam, 10, &NoiseSpec::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(events.is_empty());
    }

    #[test]
    fn streams_are_deterministic() {
        let cam = CameraModel::davis346();
        let m = MotionSpec::default();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = random_scene(5, Volume::default(), &mut rng);
            let noise = NoiseSpec {
                event_sigma: 1.0,
                ..Default::default()
            };
            generate_events(&scene, &m, &cam, 500, &noise, &mut rng)
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }
}
