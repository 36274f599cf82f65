//! Region-growing plane segmentation of events in the space-time volume.
//!
//! Each event becomes the point `[x, y, t/c]`. Events triggered by one
//! straight edge under (mostly translational) motion lie close to a plane in
//! this volume, so clusters are grown from seeds while new members stay close
//! to the cluster's current total-least-squares plane and their local normal
//! agrees with it.

use std::collections::HashMap;

use nalgebra::SymmetricEigen;

use crate::error::{CelcError, Result};
use crate::geometry::{Mat3, Vec2, Vec3};

/// Number of additions between plane refits while growing.
const REFIT_INTERVAL: usize = 50;
/// Minimum neighbourhood size for a local normal estimate.
const MIN_NORMAL_SUPPORT: usize = 6;
/// Local normals are estimated over this multiple of the growth radius.
const NORMAL_RADIUS_FACTOR: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }
}

/// A single DVS measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub x: f64,
    pub y: f64,
    pub t: f64,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(x: f64, y: f64, t: f64, polarity: Polarity) -> Self {
        Self { x, y, t, polarity }
    }

    pub fn pixel(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// Outcome of pulling a fixed-size window off a stream.
#[derive(Debug, Clone, PartialEq)]
pub enum Window {
    Full(Vec<Event>),
    /// The stream ran dry before the window filled.
    Partial(Vec<Event>),
}

impl Window {
    pub fn events(&self) -> &[Event] {
        match self {
            Window::Full(e) | Window::Partial(e) => e,
        }
    }

    pub fn into_events(self) -> Vec<Event> {
        match self {
            Window::Full(e) | Window::Partial(e) => e,
        }
    }

    pub fn is_partial(&self) -> bool {
        matches!(self, Window::Partial(_))
    }

    /// `t_last − t_first`, zero for fewer than two events.
    pub fn span(&self) -> f64 {
        let e = self.events();
        match (e.first(), e.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }
}

/// Takes the next `n` events from `stream`.
pub fn make_window<I: Iterator<Item = Event>>(stream: &mut I, n: usize) -> Window {
    let events: Vec<Event> = stream.take(n).collect();
    if events.len() < n {
        Window::Partial(events)
    } else {
        Window::Full(events)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusteringParams {
    /// Seconds per pixel-equivalent. `None` picks `span / sensor_width`.
    pub time_scale: Option<f64>,
    pub sensor_width: f64,
    /// Window size in events, used by the stream driver.
    pub window: usize,
    pub neighbor_radius: f64,
    pub plane_dist_thresh: f64,
    pub normal_angle_thresh: f64,
    pub min_cluster_size: usize,
    pub split_by_polarity: bool,
}

impl Default for ClusteringParams {
    fn default() -> Self {
        Self {
            time_scale: None,
            sensor_width: 346.0,
            window: 1_000_000,
            neighbor_radius: 5.0,
            plane_dist_thresh: 2.0,
            normal_angle_thresh: 0.2,
            min_cluster_size: 200,
            split_by_polarity: false,
        }
    }
}

impl ClusteringParams {
    /// Defaults widened for events with per-axis pixel noise `sigma`.
    pub fn noise_tolerant(sigma: f64) -> Self {
        let base = Self::default();
        Self {
            neighbor_radius: base.neighbor_radius.max(4.0 * sigma),
            plane_dist_thresh: base.plane_dist_thresh.max(3.0 * sigma),
            normal_angle_thresh: base.normal_angle_thresh.max(0.5),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.sensor_width,
            self.neighbor_radius,
            self.plane_dist_thresh,
            self.normal_angle_thresh,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.min_cluster_size == 0 {
            return Err(CelcError::InvalidParameter("clustering parameters must be positive".into()));
        }
        if let Some(c) = self.time_scale {
            if !(c > 0.0) {
                return Err(CelcError::InvalidParameter("time scale must be positive".into()));
            }
        }
        if self.window < self.min_cluster_size {
            return Err(CelcError::InvalidParameter(
                "window must hold at least min_cluster_size events".into(),
            ));
        }
        Ok(())
    }
}

/// Plane in the space-time volume, `normal · (p − point) = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceTimePlane {
    pub point: Vec3,
    pub normal: Vec3,
}

impl SpaceTimePlane {
    pub fn distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(&(p - self.point)).abs()
    }

    /// Total-least-squares plane; `None` for fewer than three points.
    pub fn fit<'a>(points: impl Iterator<Item = &'a Vec3> + Clone) -> Option<Self> {
        let (sum, n) = points.clone().fold((Vec3::zeros(), 0usize), |(s, n), p| (s + p, n + 1));
        if n < 3 {
            return None;
        }
        let centroid = sum / n as f64;
        let cov = points.fold(Mat3::zeros(), |acc, p| {
            let d = p - centroid;
            acc + d * d.transpose()
        });
        Some(Self {
            point: centroid,
            normal: smallest_eigenvector(cov),
        })
    }
}

fn smallest_eigenvector(m: Mat3) -> Vec3 {
    let eig = SymmetricEigen::new(m);
    let i = eig.eigenvalues.imin();
    eig.eigenvectors.column(i).into_owned().normalize()
}

/// Events attributed to one 3D line, sorted by timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct EventCluster {
    pub id: usize,
    pub events: Vec<Event>,
    /// Positions of the members in the input window, parallel to `events`.
    pub indices: Vec<usize>,
    pub polarity: Option<Polarity>,
    pub plane: SpaceTimePlane,
    pub plane_rms: f64,
}

impl EventCluster {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.t).collect()
    }
}

/// First and last member timestamps `(t_s, t_e)`.
pub fn cluster_geometry_bounds(cluster: &EventCluster) -> (f64, f64) {
    let first = cluster.events.first().map(|e| e.t).unwrap_or(f64::NAN);
    let last = cluster.events.last().map(|e| e.t).unwrap_or(f64::NAN);
    (first, last)
}

/// Uniform hash grid over space-time points with cell size equal to the
/// query radius.
struct Grid {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl Grid {
    fn new(points: &[Vec3], cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, cells }
    }

    fn key(p: &Vec3, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Indices within `radius` of `points[i]`, ascending.
    fn neighbors(&self, points: &[Vec3], i: usize, radius: f64, out: &mut Vec<usize>) {
        out.clear();
        let p = &points[i];
        let (kx, ky, kz) = Self::key(p, self.cell);
        let r2 = radius * radius;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.cells.get(&(kx + dx, ky + dy, kz + dz)) {
                        out.extend(bucket.iter().copied().filter(|&j| (points[j] - p).norm_squared() <= r2));
                    }
                }
            }
        }
        out.sort_unstable();
    }
}

/// Segments `window` into planar event clusters. Unclustered events are dropped.
pub fn cluster_events(window: &[Event], params: &ClusteringParams) -> Result<Vec<EventCluster>> {
    params.validate()?;
    if window.is_empty() {
        return Ok(Vec::new());
    }
    let c = params.time_scale.unwrap_or_else(|| default_time_scale(window, params.sensor_width));

    let mut clusters = if params.split_by_polarity {
        let split = |pol: Polarity| -> Vec<usize> { (0..window.len()).filter(|&i| window[i].polarity == pol).collect() };
        let pos = split(Polarity::Positive);
        let neg = split(Polarity::Negative);
        let (mut a, b) = rayon::join(
            || grow_clusters(window, &pos, c, params, Some(Polarity::Positive)),
            || grow_clusters(window, &neg, c, params, Some(Polarity::Negative)),
        );
        a.extend(b);
        a
    } else {
        let all: Vec<usize> = (0..window.len()).collect();
        grow_clusters(window, &all, c, params, None)
    };
    for (id, cl) in clusters.iter_mut().enumerate() {
        cl.id = id;
    }
    Ok(clusters)
}

/// `span / sensor_width`, so the window's duration maps onto the sensor width.
pub fn default_time_scale(window: &[Event], sensor_width: f64) -> f64 {
    let (lo, hi) = window
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| (lo.min(e.t), hi.max(e.t)));
    let span = hi - lo;
    if span > 0.0 {
        span / sensor_width
    } else {
        1.0
    }
}

fn grow_clusters(
    window: &[Event],
    subset: &[usize],
    c: f64,
    params: &ClusteringParams,
    polarity: Option<Polarity>,
) -> Vec<EventCluster> {
    if subset.is_empty() {
        return Vec::new();
    }
    // canonical processing order, independent of the input permutation
    let mut order = subset.to_vec();
    order.sort_by(|&a, &b| {
        let (ea, eb) = (&window[a], &window[b]);
        ea.t.total_cmp(&eb.t)
            .then(ea.x.total_cmp(&eb.x))
            .then(ea.y.total_cmp(&eb.y))
            .then(ea.polarity.cmp(&eb.polarity))
            .then(a.cmp(&b))
    });
    let points: Vec<Vec3> = order
        .iter()
        .map(|&i| {
            let e = &window[i];
            Vec3::new(e.x, e.y, e.t / c)
        })
        .collect();
    let radius = params.neighbor_radius;
    let grid = Grid::new(&points, radius);

    // normals use a wider support than the growth radius to average out noise
    let normal_radius = NORMAL_RADIUS_FACTOR * radius;
    let normal_grid = Grid::new(&points, normal_radius);
    let mut scratch = Vec::new();
    let normals: Vec<Option<Vec3>> = (0..points.len())
        .map(|i| {
            normal_grid.neighbors(&points, i, normal_radius, &mut scratch);
            if scratch.len() < MIN_NORMAL_SUPPORT {
                return None;
            }
            SpaceTimePlane::fit(scratch.iter().map(|&j| &points[j])).map(|p| p.normal)
        })
        .collect();

    let cos_thresh = params.normal_angle_thresh.cos();
    let mut assigned = vec![false; points.len()];
    let mut stamp = vec![usize::MAX; points.len()];
    let mut clusters = Vec::new();

    for (attempt, seed) in (0..points.len()).enumerate() {
        if assigned[seed] {
            continue;
        }
        let Some(seed_normal) = normals[seed] else {
            continue;
        };
        let mut plane = SpaceTimePlane {
            point: points[seed],
            normal: seed_normal,
        };
        let mut members = vec![seed];
        stamp[seed] = attempt;
        let mut since_refit = 0;
        let mut head = 0;
        while head < members.len() {
            let p = members[head];
            head += 1;
            grid.neighbors(&points, p, radius, &mut scratch);
            for &q in scratch.iter() {
                if assigned[q] || stamp[q] == attempt {
                    continue;
                }
                let Some(nq) = normals[q] else { continue };
                if nq.dot(&plane.normal).abs() < cos_thresh || plane.distance(&points[q]) > params.plane_dist_thresh {
                    continue;
                }
                stamp[q] = attempt;
                members.push(q);
                since_refit += 1;
                if since_refit >= REFIT_INTERVAL {
                    since_refit = 0;
                    if let Some(fit) = SpaceTimePlane::fit(members.iter().map(|&m| &points[m])) {
                        plane = fit;
                    }
                }
            }
        }
        if members.len() < params.min_cluster_size {
            continue;
        }
        let Some((members, plane, rms)) = trim_to_plane(members, &points, params.plane_dist_thresh) else {
            continue;
        };
        if members.len() < params.min_cluster_size {
            continue;
        }
        for &m in &members {
            assigned[m] = true;
        }
        let mut idx: Vec<usize> = members.iter().map(|&m| order[m]).collect();
        idx.sort_by(|&a, &b| window[a].t.total_cmp(&window[b].t).then(a.cmp(&b)));
        clusters.push(EventCluster {
            id: 0,
            events: idx.iter().map(|&i| window[i]).collect(),
            indices: idx,
            polarity,
            plane,
            plane_rms: rms,
        });
    }
    clusters
}

/// Drops members farther than `thresh` from the refitted plane until the
/// RMS distance is within `thresh`.
fn trim_to_plane(mut members: Vec<usize>, points: &[Vec3], thresh: f64) -> Option<(Vec<usize>, SpaceTimePlane, f64)> {
    for _ in 0..5 {
        let plane = SpaceTimePlane::fit(members.iter().map(|&m| &points[m]))?;
        let before = members.len();
        members.retain(|&m| plane.distance(&points[m]) <= thresh);
        let plane = SpaceTimePlane::fit(members.iter().map(|&m| &points[m]))?;
        let rms = (members.iter().map(|&m| plane.distance(&points[m]).powi(2)).sum::<f64>() / members.len() as f64).sqrt();
        if members.len() == before && rms <= thresh {
            return Some((members, plane, rms));
        }
        if rms <= thresh && members.iter().all(|&m| plane.distance(&points[m]) <= thresh) {
            return Some((members, plane, rms));
        }
    }
    let plane = SpaceTimePlane::fit(members.iter().map(|&m| &points[m]))?;
    let rms = (members.iter().map(|&m| plane.distance(&points[m]).powi(2)).sum::<f64>() / members.len() as f64).sqrt();
    (rms <= thresh).then_some((members, plane, rms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::planar_patches;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn purity(window: &[(Event, usize)], clusters: &[EventCluster]) -> Vec<f64> {
        clusters
            .iter()
            .map(|c| {
                let mut counts = HashMap::new();
                for &i in &c.indices {
                    *counts.entry(window[i].1).or_insert(0usize) += 1;
                }
                *counts.values().max().unwrap() as f64 / c.len() as f64
            })
            .collect()
    }

    #[test]
    fn windows_report_partial_streams() {
        let ev: Vec<Event> = (0..5).map(|i| Event::new(1.0, 2.0, i as f64 * 0.1, Polarity::Positive)).collect();
        let w = make_window(&mut ev.clone().into_iter(), 5);
        assert!(!w.is_partial());
        assert_eq!(w.events(), &ev[..]);
        assert!((w.span() - 0.4).abs() < 1e-15);
        let w = make_window(&mut ev[..4].iter().copied(), 5);
        assert!(w.is_partial());
        assert_eq!(w.events().len(), 4);
    }

    #[test]
    fn two_separated_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let window = planar_patches(2, 5000, 0.5, 0.0, &mut rng);
        let events: Vec<Event> = window.iter().map(|w| w.0).collect();
        let clusters = cluster_events(&events, &ClusteringParams::default()).unwrap();
        assert_eq!(clusters.len(), 2);
        for p in purity(&window, &clusters) {
            assert!(p >= 0.99);
        }
        let clustered: usize = clusters.iter().map(|c| c.len()).sum();
        assert!(clustered as f64 >= 0.95 * events.len() as f64);
    }

    #[test]
    fn empty_window() {
        assert!(cluster_events(&[], &ClusteringParams::default()).unwrap().is_empty());
    }

    #[test]
    fn noisy_single_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let window = planar_patches(1, 5000, 0.5, 2.0, &mut rng);
        let events: Vec<Event> = window.iter().map(|w| w.0).collect();
        let params = ClusteringParams::noise_tolerant(2.0);
        let clusters = cluster_events(&events, &params).unwrap();
        assert_eq!(clusters.len(), 1, "sizes {:?}", clusters.iter().map(|c| c.len()).collect::<Vec<_>>());
        assert!(clusters[0].len() as f64 >= 0.9 * events.len() as f64, "{}", clusters[0].len());
    }

    #[test]
    fn clusters_satisfy_plane_bound_and_are_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let window = planar_patches(3, 3000, 0.5, 0.5, &mut rng);
        let events: Vec<Event> = window.iter().map(|w| w.0).collect();
        let params = ClusteringParams::default();
        let clusters = cluster_events(&events, &params).unwrap();
        assert!(!clusters.is_empty());
        let mut seen = std::collections::HashSet::new();
        for c in &clusters {
            assert!(c.plane_rms <= params.plane_dist_thresh);
            assert!(c.len() >= params.min_cluster_size);
            assert!(c.events.windows(2).all(|w| w[0].t <= w[1].t));
            for &i in &c.indices {
                assert!(seen.insert(i), "event {i} in two clusters");
            }
        }
    }

    #[test]
    fn shuffling_input_keeps_memberships() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let window = planar_patches(3, 2000, 0.5, 0.3, &mut rng);
        let events: Vec<Event> = window.iter().map(|w| w.0).collect();
        let params = ClusteringParams::default();
        let base = cluster_events(&events, &params).unwrap();

        let mut perm: Vec<usize> = (0..events.len()).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<Event> = perm.iter().map(|&i| events[i]).collect();
        let other = cluster_events(&shuffled, &params).unwrap();

        let canon = |cl: &[EventCluster], map: &dyn Fn(usize) -> usize| {
            let mut sets: Vec<Vec<usize>> = cl
                .iter()
                .map(|c| {
                    let mut s: Vec<usize> = c.indices.iter().map(|&i| map(i)).collect();
                    s.sort_unstable();
                    s
                })
                .collect();
            sets.sort();
            sets
        };
        assert_eq!(canon(&base, &|i| i), canon(&other, &|i| perm[i]));
    }

    #[test]
    fn coverage_grows_with_plane_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let window = planar_patches(3, 3000, 0.5, 1.0, &mut rng);
        let events: Vec<Event> = window.iter().map(|w| w.0).collect();
        let mut last = 0;
        for thresh in [1.0, 1.5, 2.0, 3.0, 4.0, 6.0] {
            let params = ClusteringParams {
                plane_dist_thresh: thresh,
                ..Default::default()
            };
            let covered: usize = cluster_events(&events, &params).unwrap().iter().map(|c| c.len()).sum();
            assert!(covered >= last, "thresh {thresh}: {covered} < {last}");
            last = covered;
        }
    }

    #[test]
    fn polarity_split_separates_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let window = planar_patches(2, 3000, 0.5, 0.0, &mut rng);
        let events: Vec<Event> = window
            .iter()
            .map(|(e, label)| Event {
                polarity: if *label == 0 { Polarity::Positive } else { Polarity::Negative },
                ..*e
            })
            .collect();
        let params = ClusteringParams {
            split_by_polarity: true,
            ..Default::default()
        };
        let clusters = cluster_events(&events, &params).unwrap();
        assert_eq!(clusters.len(), 2);
        assert_eq!(clusters[0].polarity, Some(Polarity::Positive));
        assert_eq!(clusters[1].polarity, Some(Polarity::Negative));
        assert!(clusters[1].events.iter().all(|e| e.polarity == Polarity::Negative));
        assert_eq!(clusters.iter().map(|c| c.id).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn bounds() {
        let e = Event::new(3.0, 4.0, 0.25, Polarity::Positive);
        let single = EventCluster {
            id: 0,
            events: vec![e],
            indices: vec![0],
            polarity: None,
            plane: SpaceTimePlane {
                point: Vec3::zeros(),
                normal: Vec3::z(),
            },
            plane_rms: 0.0,
        };
        assert_eq!(cluster_geometry_bounds(&single), (0.25, 0.25));
        let mut wider = single.clone();
        wider.events = vec![
            Event { t: 0.0, ..e },
            Event { t: 0.3, ..e },
            Event { t: 0.5, ..e },
        ];
        assert_eq!(cluster_geometry_bounds(&wider), (0.0, 0.5));
        wider.events.insert(2, Event { t: 0.4, ..e });
        assert_eq!(cluster_geometry_bounds(&wider), (0.0, 0.5));
    }

    #[test]
    fn invalid_params_rejected() {
        let p = ClusteringParams {
            neighbor_radius: 0.0,
            ..Default::default()
        };
        assert!(cluster_events(&[Event::new(0.0, 0.0, 0.0, Polarity::Positive)], &p).is_err());
    }
}
