//! Robust image-line extraction from the boundary sub-windows of a cluster.
//!
//! Lines are fitted by iteratively reweighted total least squares with Huber
//! weights on the perpendicular point-line distance, so vertical lines need
//! no special handling.

use crate::clustering::{cluster_geometry_bounds, EventCluster};
use crate::constraint::ClusterGeometry;
use crate::error::{CelcError, Result};
use crate::geometry::{lift_line, CameraModel, Line2D, Vec2, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFitParams {
    /// Length of the boundary sub-windows, seconds.
    pub window_len: f64,
    /// Huber threshold on point-line distance, px.
    pub huber_k: f64,
    pub max_irls_iters: usize,
    pub convergence_tol: f64,
    pub min_points: usize,
}

impl Default for LineFitParams {
    fn default() -> Self {
        Self {
            window_len: 0.005,
            huber_k: 1.345,
            max_irls_iters: 50,
            convergence_tol: 1e-10,
            min_points: 10,
        }
    }
}

/// Result of [`fit_line_huber`].
#[derive(Debug, Clone, PartialEq)]
pub struct PixelLineFit {
    /// `[a, b, c]` with `a² + b² = 1`, so `line · [x, y, 1]` is a signed distance in px.
    pub line: Vec3,
    /// Weighted RMS distance of the points to the line, px.
    pub rms: f64,
    pub iterations: usize,
    /// Huber objective before the first reweighting and after every iteration.
    pub objective_trace: Vec<f64>,
}

pub fn huber_rho(r: f64, k: f64) -> f64 {
    let a = r.abs();
    if a <= k {
        0.5 * r * r
    } else {
        k * a - 0.5 * k * k
    }
}

pub fn huber_weight(r: f64, k: f64) -> f64 {
    let a = r.abs();
    if a <= k {
        1.0
    } else {
        k / a
    }
}

/// Weighted total-least-squares line. Fails when the weighted scatter vanishes.
fn weighted_tls(points: &[Vec2], weights: &[f64]) -> Result<Vec3> {
    let wsum: f64 = weights.iter().sum();
    let centroid = points.iter().zip(weights).fold(Vec2::zeros(), |acc, (p, w)| acc + *w * p) / wsum;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (p, w) in points.iter().zip(weights) {
        let d = p - centroid;
        sxx += w * d.x * d.x;
        sxy += w * d.x * d.y;
        syy += w * d.y * d.y;
    }
    let scatter = (sxx + syy) / wsum;
    if !(scatter > 1e-20 * (1.0 + centroid.norm_squared())) {
        return Err(CelcError::RankDeficient);
    }
    // direction of largest spread; the normal is perpendicular to it
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let normal = Vec2::new(-angle.sin(), angle.cos());
    let c = -normal.dot(&centroid);
    Ok(canonical_sign(Vec3::new(normal.x, normal.y, c)))
}

/// Fixes the overall sign so that identical fits compare equal.
fn canonical_sign(l: Vec3) -> Vec3 {
    let flip = if l.z != 0.0 { l.z > 0.0 } else if l.x != 0.0 { l.x < 0.0 } else { l.y < 0.0 };
    if flip {
        -l
    } else {
        l
    }
}

fn distance(line: &Vec3, p: &Vec2) -> f64 {
    line.x * p.x + line.y * p.y + line.z
}

/// Robust line through pixel points.
pub fn fit_line_huber(points: &[Vec2], params: &LineFitParams) -> Result<PixelLineFit> {
    if points.len() < params.min_points.max(2) {
        return Err(CelcError::NotEnoughPoints {
            required: params.min_points.max(2),
            got: points.len(),
        });
    }
    let objective = |line: &Vec3| -> f64 { points.iter().map(|p| huber_rho(distance(line, p), params.huber_k)).sum() };

    let mut weights = vec![1.0; points.len()];
    let mut line = weighted_tls(points, &weights)?;
    let mut trace = vec![objective(&line)];
    let mut iterations = 0;
    for _ in 0..params.max_irls_iters {
        iterations += 1;
        for (w, p) in weights.iter_mut().zip(points) {
            *w = huber_weight(distance(&line, p), params.huber_k);
        }
        let next = weighted_tls(points, &weights)?;
        let change = (next - line).norm();
        line = next;
        trace.push(objective(&line));
        if change < params.convergence_tol {
            break;
        }
    }
    for (w, p) in weights.iter_mut().zip(points) {
        *w = huber_weight(distance(&line, p), params.huber_k);
    }
    let wsum: f64 = weights.iter().sum();
    let rms = (points.iter().zip(&weights).map(|(p, w)| w * distance(&line, p).powi(2)).sum::<f64>() / wsum).sqrt();
    Ok(PixelLineFit {
        line,
        rms,
        iterations,
        objective_trace: trace,
    })
}

/// A fitted line with the time it represents.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedLine {
    /// Calibrated line.
    pub line: Line2D,
    /// Pixel-space line with unit `(a, b)`.
    pub pixel_line: Vec3,
    /// Centre of the sub-window the line was fitted on.
    pub anchor_time: f64,
    pub inlier_rms: f64,
    pub n_points: usize,
}

/// Boundary lines of a cluster and the resulting constraint geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryLines {
    pub geometry: ClusterGeometry,
    pub start: FittedLine,
    pub end: FittedLine,
}

fn points_in(cluster: &EventCluster, times: &[f64], lo: f64, hi: f64) -> Vec<Vec2> {
    let a = times.partition_point(|&t| t < lo);
    let b = times.partition_point(|&t| t <= hi);
    cluster.events[a..b].iter().map(|e| e.pixel()).collect()
}

fn fit_window(cluster: &EventCluster, times: &[f64], lo: f64, hi: f64, params: &LineFitParams, cam: &CameraModel) -> Result<FittedLine> {
    let pts = points_in(cluster, times, lo, hi);
    let fit = fit_line_huber(&pts, params)?;
    Ok(FittedLine {
        line: lift_line(&fit.line, cam)?,
        pixel_line: fit.line,
        anchor_time: 0.5 * (lo + hi),
        inlier_rms: fit.rms,
        n_points: pts.len(),
    })
}

/// Fits `l1` on the first and `l3` on the last `window_len` seconds of the
/// cluster, sliding each sub-window towards the centre in half-window steps
/// while it holds fewer than `min_points` events. Event pixels are expected
/// to be undistorted already.
pub fn extract_boundary_lines(cluster: &EventCluster, params: &LineFitParams, cam: &CameraModel) -> Result<BoundaryLines> {
    if cluster.len() < params.min_points {
        return Err(CelcError::ClusterRejected(format!(
            "{} events, need at least {}",
            cluster.len(),
            params.min_points
        )));
    }
    let times = cluster.times();
    let (t_s, t_e) = cluster_geometry_bounds(cluster);
    let mid = 0.5 * (t_s + t_e);
    let w = params.window_len;
    let step = 0.5 * w;

    let mut lo = t_s;
    let start = loop {
        if lo + 0.5 * w > mid {
            return Err(CelcError::ClusterRejected("no populated start window".into()));
        }
        match fit_window(cluster, &times, lo, lo + w, params, cam) {
            Ok(f) => break f,
            Err(CelcError::NotEnoughPoints { .. }) => lo += step,
            Err(e) => return Err(e),
        }
    };
    let mut hi = t_e;
    let end = loop {
        if hi - 0.5 * w < mid {
            return Err(CelcError::ClusterRejected("no populated end window".into()));
        }
        match fit_window(cluster, &times, hi - w, hi, params, cam) {
            Ok(f) => break f,
            Err(CelcError::NotEnoughPoints { .. }) => hi -= step,
            Err(e) => return Err(e),
        }
    };
    let geometry = ClusterGeometry::new(start.line, end.line, start.anchor_time, end.anchor_time)
        .map_err(|e| CelcError::ClusterRejected(e.to_string()))?;
    Ok(BoundaryLines { geometry, start, end })
}

/// Fits the line at the centre of the cluster's interval, widening the
/// window symmetrically in half-window steps until it holds `min_points`.
pub fn extract_center_line(cluster: &EventCluster, params: &LineFitParams, cam: &CameraModel) -> Result<FittedLine> {
    if cluster.is_empty() {
        return Err(CelcError::ClusterRejected("empty cluster".into()));
    }
    let times = cluster.times();
    let (t_s, t_e) = cluster_geometry_bounds(cluster);
    let mid = 0.5 * (t_s + t_e);
    let mut half = 0.5 * params.window_len;
    loop {
        match fit_window(cluster, &times, mid - half, mid + half, params, cam) {
            Ok(f) => return Ok(f),
            Err(CelcError::NotEnoughPoints { got, .. }) => {
                if mid - half <= t_s && mid + half >= t_e {
                    return Err(CelcError::ClusterRejected(format!(
                        "only {got} events around the centre"
                    )));
                }
                half += 0.5 * params.window_len;
            }
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{Event, Polarity, SpaceTimePlane};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
        a.normalize().cross(&b.normalize()).norm().asin()
    }

    fn cluster_from(events: Vec<Event>) -> EventCluster {
        EventCluster {
            id: 0,
            indices: (0..events.len()).collect(),
            events,
            polarity: None,
            plane: SpaceTimePlane {
                point: Vec3::zeros(),
                normal: Vec3::z(),
            },
            plane_rms: 0.0,
        }
    }

    #[test]
    fn exact_collinear_points() {
        let pts: Vec<Vec2> = (0..20).map(|i| Vec2::new(i as f64, 2.0 * i as f64 + 1.0)).collect();
        let fit = fit_line_huber(&pts, &LineFitParams::default()).unwrap();
        let expected = Vec3::new(2.0, -1.0, 1.0) / 5f64.sqrt();
        assert!(angle_between(&fit.line, &expected) < 1e-12);
        assert!((fit.line.xy().norm() - 1.0).abs() < 1e-15);
        assert!(fit.rms < 1e-12);
    }

    #[test]
    fn vertical_line() {
        let pts: Vec<Vec2> = (0..100).map(|i| Vec2::new(7.0, i as f64 * 0.5)).collect();
        let fit = fit_line_huber(&pts, &LineFitParams::default()).unwrap();
        assert!(angle_between(&fit.line, &Vec3::new(1.0, 0.0, -7.0)) < 1e-12);
    }

    #[test]
    fn coincident_points_are_rejected() {
        let pts = vec![Vec2::new(3.0, 4.0); 20];
        assert!(matches!(fit_line_huber(&pts, &LineFitParams::default()), Err(CelcError::RankDeficient)));
        assert!(matches!(
            fit_line_huber(&pts[..5], &LineFitParams::default()),
            Err(CelcError::NotEnoughPoints { .. })
        ));
    }

    /// RMS distance of the exact inlier points to `line`.
    fn rms_to(line: &Vec3, pts: &[Vec2]) -> f64 {
        (pts.iter().map(|p| distance(line, p).powi(2)).sum::<f64>() / pts.len() as f64).sqrt()
    }

    #[test]
    fn outliers_are_downweighted() {
        // inliers on y = 0.5 x + 10, outliers shifted 50 px along the normal
        let dir = Vec2::new(1.0, 0.5).normalize();
        let normal = Vec2::new(-dir.y, dir.x);
        let base = Vec2::new(0.0, 10.0);
        let inliers: Vec<Vec2> = (0..95).map(|i| base + (i as f64) * dir).collect();
        let mut pts = inliers.clone();
        pts.extend((0..5).map(|i| base + (10.0 + 15.0 * i as f64) * dir + 50.0 * normal));

        let robust = fit_line_huber(&pts, &LineFitParams::default()).unwrap();
        let plain = weighted_tls(&pts, &vec![1.0; pts.len()]).unwrap();
        let robust_rms = rms_to(&robust.line, &inliers);
        let plain_rms = rms_to(&plain, &inliers);
        assert!(robust_rms < 0.5, "robust {robust_rms}");
        assert!(plain_rms > 0.5, "plain {plain_rms}");
    }

    #[test]
    fn objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 1.5).unwrap();
        let mut pts: Vec<Vec2> = (0..200)
            .map(|_| {
                let s = rng.random_range(-50.0..50.0);
                Vec2::new(s, 0.3 * s + noise.sample(&mut rng))
            })
            .collect();
        for _ in 0..20 {
            pts.push(Vec2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)));
        }
        let fit = fit_line_huber(&pts, &LineFitParams::default()).unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn huge_threshold_reproduces_total_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec2> = (0..50).map(|_| Vec2::new(rng.random_range(0.0..100.0), rng.random_range(0.0..10.0))).collect();
        let params = LineFitParams {
            huber_k: 1e12,
            ..Default::default()
        };
        let fit = fit_line_huber(&pts, &params).unwrap();
        let tls = weighted_tls(&pts, &vec![1.0; pts.len()]).unwrap();
        assert!((fit.line - tls).norm() < 1e-8);
    }

    proptest! {
        #[test]
        fn fit_is_equivariant(
            seed in 0u64..1000, dx in -100.0f64..100.0, dy in -100.0f64..100.0, rot in -3.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 1.0).unwrap();
            let pts: Vec<Vec2> = (0..60)
                .map(|_| {
                    let s = rng.random_range(-40.0..40.0);
                    Vec2::new(s, -0.7 * s + 5.0 + noise.sample(&mut rng))
                })
                .collect();
            // compare fixed points, not iterates stopped at the default tolerance
            let params = LineFitParams {
                convergence_tol: 1e-14,
                max_irls_iters: 1000,
                ..Default::default()
            };
            let base = fit_line_huber(&pts, &params).unwrap().line;

            let shifted: Vec<Vec2> = pts.iter().map(|p| p + Vec2::new(dx, dy)).collect();
            let fit = fit_line_huber(&shifted, &params).unwrap().line;
            // translating by d maps c to c − n·d
            let expected = Vec3::new(base.x, base.y, base.z - base.x * dx - base.y * dy);
            prop_assert!(angle_between(&fit, &expected) < 1e-10);

            let (s, c) = rot.sin_cos();
            let rotate = |p: &Vec2| Vec2::new(c * p.x - s * p.y, s * p.x + c * p.y);
            let turned: Vec<Vec2> = pts.iter().map(rotate).collect();
            let fit = fit_line_huber(&turned, &params).unwrap().line;
            let n = rotate(&base.xy());
            let expected = Vec3::new(n.x, n.y, base.z);
            prop_assert!(angle_between(&fit, &expected) < 1e-10);
        }
    }

    fn line_events(n: usize, t0: f64, t1: f64, rng: &mut ChaCha8Rng) -> Vec<Event> {
        // a horizontal image line drifting down at 40 px/s
        let mut ev: Vec<Event> = (0..n)
            .map(|_| {
                let t = rng.random_range(t0..t1);
                let x = rng.random_range(50.0..250.0);
                Event::new(x, 100.0 + 40.0 * t, t, Polarity::Positive)
            })
            .collect();
        ev.sort_by(|a, b| a.t.total_cmp(&b.t));
        ev
    }

    #[test]
    fn rejects_tiny_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cluster = cluster_from(line_events(8, 0.0, 0.5, &mut rng));
        let err = extract_boundary_lines(&cluster, &LineFitParams::default(), &CameraModel::davis346()).unwrap_err();
        assert!(matches!(err, CelcError::ClusterRejected(_)));
    }

    #[test]
    fn boundary_windows_slide_past_gaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut events = vec![Event::new(60.0, 100.0, 0.0, Polarity::Positive)];
        // nothing else until 12 ms
        events.extend(line_events(2000, 0.012, 0.5, &mut rng));
        let cluster = cluster_from(events.clone());
        let params = LineFitParams::default();
        let fit = extract_boundary_lines(&cluster, &params, &CameraModel::davis346()).unwrap();
        // brute force: first half-step offset whose 5 ms window holds enough events
        let expected = (0..)
            .map(|k| k as f64 * 0.0025)
            .find(|lo| events.iter().filter(|e| e.t >= *lo && e.t <= lo + 0.005).count() >= params.min_points)
            .unwrap()
            + 0.0025;
        assert!(expected >= 0.0125);
        assert!((fit.start.anchor_time - expected).abs() < 1e-12, "{} vs {expected}", fit.start.anchor_time);
        assert_eq!(fit.geometry.t_s, fit.start.anchor_time);
        assert!(fit.start.n_points >= params.min_points);
    }

    #[test]
    fn center_line_on_symmetric_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut events = line_events(3000, 0.0, 0.5, &mut rng);
        events.first_mut().unwrap().t = 0.0;
        events.last_mut().unwrap().t = 0.5;
        let cluster = cluster_from(events);
        let f = extract_center_line(&cluster, &LineFitParams::default(), &CameraModel::davis346()).unwrap();
        assert_eq!(f.anchor_time, 0.25);
        // y = 110 at t = 0.25
        assert!(angle_between(&f.pixel_line, &Vec3::new(0.0, 1.0, -110.0)) < 0.02);
    }

    #[test]
    fn center_line_widens_then_gives_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut events = line_events(300, 0.0, 0.1, &mut rng);
        events.extend(line_events(300, 0.4, 0.5, &mut rng));
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        let cluster = cluster_from(events.clone());
        let f = extract_center_line(&cluster, &LineFitParams::default(), &CameraModel::davis346()).unwrap();
        assert!(f.n_points >= 10);
        assert!((f.anchor_time - 0.5 * (events[0].t + events.last().unwrap().t)).abs() < 1e-12);

        let sparse = cluster_from(vec![
            Event::new(10.0, 10.0, 0.0, Polarity::Positive),
            Event::new(20.0, 10.0, 0.25, Polarity::Positive),
            Event::new(30.0, 10.0, 0.5, Polarity::Positive),
        ]);
        assert!(matches!(
            extract_center_line(&sparse, &LineFitParams::default(), &CameraModel::davis346()),
            Err(CelcError::ClusterRejected(_))
        ));
    }
}
