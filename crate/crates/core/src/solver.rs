//! Stacking of per-event constraints and robust nullspace extraction.
//!
//! With `ω` known, every event contributes one row `Bᵀf` of a homogeneous
//! system `A·v = 0`. The velocity direction is the right singular vector of
//! the (Huber-reweighted) row matrix with the smallest singular value.

use nalgebra::{DMatrix, SVD};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::constraint::{build_ce3lc_rows, build_celc_matrix, ClusterGeometry, ConstraintRow};
use crate::error::{CelcError, Result};
use crate::geometry::{AngularVelocity, Bearing, Line2D, Mat3, Vec3};
use crate::linefit::{huber_rho, huber_weight};

/// MAD-to-sigma factor for Gaussian residuals.
const MAD_TO_SIGMA: f64 = 1.4826;
/// Smallest-to-largest eigenvalue ratio below which the noise covariance is
/// treated as singular and rows are left unwhitened.
const WHITENING_CONDITION: f64 = 1e-10;

/// One event as seen by the solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub bearing: Bearing,
    pub t: f64,
}

/// Boundary geometry of one cluster plus the events attributed to it.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterData {
    pub geometry: ClusterGeometry,
    pub observations: Vec<Observation>,
}

/// A cluster reduced to three lines for the line-line-line baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThreeLineCluster {
    pub geometry: ClusterGeometry,
    pub center: Line2D,
    pub t_mid: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StackedSystem {
    pub rows: Vec<ConstraintRow>,
}

impl StackedSystem {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), 3, |i, j| self.rows[i].row[j])
    }

    /// `‖A·x‖ / ‖A‖_F`.
    pub fn relative_residual(&self, x: &Vec3) -> f64 {
        let a = self.matrix();
        let num: f64 = self.rows.iter().map(|r| r.row.dot(x).powi(2)).sum::<f64>().sqrt();
        num / (a.norm() * x.norm())
    }
}

/// One row `Bᵀf` per observation, clusters in order.
pub fn stack_rows(clusters: &[ClusterData], omega: &AngularVelocity) -> Result<StackedSystem> {
    let mut rows = Vec::with_capacity(clusters.iter().map(|c| c.observations.len()).sum());
    for (j, c) in clusters.iter().enumerate() {
        for (k, obs) in c.observations.iter().enumerate() {
            let b = build_celc_matrix(&c.geometry, omega, obs.t)?;
            rows.push(ConstraintRow::celc(&b, &obs.bearing, j, k));
        }
    }
    if rows.is_empty() {
        return Err(CelcError::NoRows);
    }
    Ok(StackedSystem { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DegeneracyKind {
    None,
    PureRotation,
    ParallelLinesTranslation,
    /// Rank deficient for another reason, e.g. too few distinct lines.
    RankDeficient,
}

impl DegeneracyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DegeneracyKind::None => "none",
            DegeneracyKind::PureRotation => "pure_rotation",
            DegeneracyKind::ParallelLinesTranslation => "parallel_lines_translation",
            DegeneracyKind::RankDeficient => "rank_deficient",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverParams {
    /// Rows used for the robust fit; larger systems are subsampled uniformly.
    pub sample_size: usize,
    /// Huber threshold in units of the MAD-estimated residual scale.
    pub huber_k: f64,
    pub max_iters: usize,
    /// Stop once no weight moves by more than this.
    pub weight_tol: f64,
    /// `σ2/σ1` (and the row-energy ratio) below this flags a degenerate system.
    pub degeneracy_threshold: f64,
    /// `σ3/σ2` above this flags an ill-conditioned nullspace.
    pub gap_threshold: f64,
    /// `‖ω‖` below this counts as no rotation, rad/s.
    pub omega_tol: f64,
    /// Line directions within this angle count as parallel, rad.
    pub parallel_angle_tol: f64,
    /// Whiten rows by their mean event-noise covariance. Plain algebraic
    /// residuals are dominated by noise bias once pixel noise reaches ~1 px.
    pub whiten: bool,
    pub seed: u64,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            sample_size: 1000,
            huber_k: 1.345,
            max_iters: 50,
            weight_tol: 1e-8,
            degeneracy_threshold: 1e-6,
            gap_threshold: 0.3,
            omega_tol: 1e-9,
            parallel_angle_tol: 1e-3,
            whiten: true,
            seed: 0,
        }
    }
}

/// Up-to-sign velocity direction with solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionEstimate {
    pub v_dir: Vec3,
    /// Singular values of the final weighted system, descending.
    pub singular_values: [f64; 3],
    pub degenerate: bool,
    pub degeneracy_kind: DegeneracyKind,
    /// `σ3/σ2 > gap_threshold`: the nullspace direction is poorly separated.
    pub ill_conditioned: bool,
    /// Fraction of rows whose final Huber weight is 1.
    pub inlier_fraction: f64,
    /// `σ1` of the unweighted rows over the root-sum-square of their scales.
    /// Near zero when every row vanishes regardless of `v`.
    pub row_energy: f64,
    pub rows_used: usize,
    pub iterations: usize,
    /// Per iteration: the Huber objective before and after the update,
    /// both measured at that iteration's residual scale.
    pub objective_trace: Vec<(f64, f64)>,
    /// Rows were whitened by their event-noise covariance before the solve.
    pub whitened: bool,
}

/// Smallest right singular vector and descending singular values of `rows` scaled by `sqrt(w)`.
fn weighted_nullspace(rows: &[Vec3], weights: &[f64]) -> (Vec3, [f64; 3]) {
    let m = DMatrix::from_fn(rows.len(), 3, |i, j| weights[i].sqrt() * rows[i][j]);
    let svd = SVD::new(m, false, true);
    let vt = svd.v_t.expect("requested V");
    let mut order = [0usize, 1, 2];
    let sv = &svd.singular_values;
    let n = sv.len();
    order[..n].sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let mut sigmas = [0.0; 3];
    for (k, &i) in order[..n].iter().enumerate() {
        sigmas[k] = sv[i];
    }
    let row = |i: usize| Vec3::new(vt[(i, 0)], vt[(i, 1)], vt[(i, 2)]);
    if n < 3 {
        // fewer than three rows: the missing singular values are zero and the
        // nullspace is the complement of the row space
        let r0 = row(order[0]);
        let other = if n == 2 { row(order[1]) } else { any_orthogonal(&r0) };
        return (r0.cross(&other).normalize(), sigmas);
    }
    (row(order[2]).normalize(), sigmas)
}

fn any_orthogonal(v: &Vec3) -> Vec3 {
    let pick = if v.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    v.cross(&pick).normalize()
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    values.sort_by(|a, b| a.total_cmp(b));
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn mad_scale(residuals: &[f64]) -> f64 {
    let mut r = residuals.to_vec();
    let med = median(&mut r);
    let mut dev: Vec<f64> = residuals.iter().map(|x| (x - med).abs()).collect();
    MAD_TO_SIGMA * median(&mut dev)
}

/// Huber-IRLS nullspace of the stacked rows.
pub fn solve_nullspace_robust(sys: &StackedSystem, params: &SolverParams) -> Result<MotionEstimate> {
    if sys.len() < 3 {
        return Err(CelcError::TooFewRows {
            required: 3,
            got: sys.len(),
        });
    }
    let selected: Vec<&ConstraintRow> = if sys.len() > params.sample_size {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut picks = index::sample(&mut rng, sys.len(), params.sample_size).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| &sys.rows[i]).collect()
    } else {
        sys.rows.iter().collect()
    };
    let raw: Vec<Vec3> = selected.iter().map(|r| r.row).collect();
    let scale_energy = selected.iter().map(|r| r.scale * r.scale).sum::<f64>().sqrt();
    let (_, raw_sigmas) = weighted_nullspace(&raw, &vec![1.0; raw.len()]);
    let row_energy = if scale_energy > 0.0 { raw_sigmas[0] / scale_energy } else { 0.0 };

    let whitening = if params.whiten { noise_whitening(&selected) } else { None };
    let Some(l_inv) = whitening else {
        return Ok(solve_rows(&raw, row_energy, params));
    };
    let rows: Vec<Vec3> = raw.iter().map(|r| l_inv * r).collect();
    let mut est = solve_rows(&rows, row_energy, params);
    est.v_dir = (l_inv.transpose() * est.v_dir).normalize();
    est.whitened = true;
    Ok(est)
}

/// `L⁻¹` for the Cholesky factor `L·Lᵀ` of the mean row noise covariance,
/// or `None` when some row has no noise model or the covariance is singular.
fn noise_whitening(rows: &[&ConstraintRow]) -> Option<Mat3> {
    if rows.iter().any(|r| r.noise == Mat3::zeros()) {
        return None;
    }
    let n = rows.iter().fold(Mat3::zeros(), |acc, r| acc + r.noise) / rows.len() as f64;
    let eig = n.symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    if !(lo > WHITENING_CONDITION * hi) {
        return None;
    }
    n.cholesky()?.l().try_inverse()
}

fn solve_rows(rows: &[Vec3], row_energy: f64, params: &SolverParams) -> MotionEstimate {
    let n = rows.len();
    let mut weights = vec![1.0; n];
    let (mut v, unweighted) = weighted_nullspace(rows, &weights);
    let mut sigmas = unweighted;
    // floor for the residual scale so exact systems do not divide by zero
    let scale_floor = f64::EPSILON * unweighted[0] / (n as f64).sqrt();

    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut residuals: Vec<f64> = rows.iter().map(|r| r.dot(&v)).collect();
    for _ in 0..params.max_iters {
        let s = mad_scale(&residuals).max(scale_floor);
        if !(s > 0.0) {
            break;
        }
        iterations += 1;
        let k = params.huber_k;
        let objective = |res: &[f64]| -> f64 { res.iter().map(|r| huber_rho(r / s, k)).sum() };
        let before = objective(&residuals);
        let new_weights: Vec<f64> = residuals.iter().map(|r| huber_weight(r / s, k)).collect();
        let change = new_weights
            .iter()
            .zip(&weights)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        weights = new_weights;
        let (next_v, next_sigmas) = weighted_nullspace(rows, &weights);
        let next_res: Vec<f64> = rows.iter().map(|r| r.dot(&next_v)).collect();
        trace.push((before, objective(&next_res)));
        v = next_v;
        sigmas = next_sigmas;
        residuals = next_res;
        if change < params.weight_tol {
            break;
        }
    }

    let s = mad_scale(&residuals).max(scale_floor);
    let inliers = residuals.iter().filter(|r| s > 0.0 && (*r / s).abs() <= params.huber_k).count();
    let rank_deficient = sigmas[0] == 0.0 || sigmas[1] / sigmas[0] < params.degeneracy_threshold;
    let vanishing = row_energy < params.degeneracy_threshold;
    let degeneracy_kind = if vanishing {
        DegeneracyKind::PureRotation
    } else if rank_deficient {
        DegeneracyKind::RankDeficient
    } else {
        DegeneracyKind::None
    };
    MotionEstimate {
        v_dir: v,
        singular_values: sigmas,
        degenerate: rank_deficient || vanishing,
        degeneracy_kind,
        ill_conditioned: sigmas[1] > 0.0 && sigmas[2] / sigmas[1] > params.gap_threshold,
        inlier_fraction: inliers as f64 / n as f64,
        row_energy,
        rows_used: n,
        iterations,
        objective_trace: trace,
        whitened: false,
    }
}

/// Classifies why a solve is degenerate.
pub fn diagnose_degeneracy(
    est: &MotionEstimate,
    clusters: &[ClusterGeometry],
    omega: &AngularVelocity,
    params: &SolverParams,
) -> DegeneracyKind {
    let [s1, s2, _] = est.singular_values;
    let thr = params.degeneracy_threshold;
    if est.row_energy < thr || s1 == 0.0 {
        return DegeneracyKind::PureRotation;
    }
    if omega.norm() < params.omega_tol && !clusters.is_empty() {
        let dirs: Vec<Vec3> = clusters
            .iter()
            .map(|g| g.line_direction())
            .filter(|d| d.norm() > 0.0)
            .map(|d| d.normalize())
            .collect();
        let parallel = !dirs.is_empty()
            && dirs.iter().all(|d| {
                let c = d.dot(&dirs[0]).abs().min(1.0);
                d.cross(&dirs[0]).norm().atan2(c) <= params.parallel_angle_tol
            });
        if parallel {
            return DegeneracyKind::ParallelLinesTranslation;
        }
    }
    if s2 / s1 < thr {
        DegeneracyKind::RankDeficient
    } else {
        DegeneracyKind::None
    }
}

/// Stacks, solves and classifies in one go.
pub fn solve_celc(clusters: &[ClusterData], omega: &AngularVelocity, params: &SolverParams) -> Result<MotionEstimate> {
    let sys = stack_rows(clusters, omega)?;
    let mut est = solve_nullspace_robust(&sys, params)?;
    let geoms: Vec<ClusterGeometry> = clusters.iter().map(|c| c.geometry).collect();
    let kind = diagnose_degeneracy(&est, &geoms, omega, params);
    if kind != DegeneracyKind::None {
        est.degenerate = true;
    }
    est.degeneracy_kind = kind;
    Ok(est)
}

/// Line-line-line baseline: three rows of `hat(l2)·B` per cluster, same robust nullspace.
pub fn solve_ce3lc(clusters: &[ThreeLineCluster], omega: &AngularVelocity, params: &SolverParams) -> Result<MotionEstimate> {
    if clusters.is_empty() {
        return Err(CelcError::EmptyInput("no clusters for the three-line solver".into()));
    }
    let mut rows = Vec::with_capacity(3 * clusters.len());
    for (j, c) in clusters.iter().enumerate() {
        rows.extend(build_ce3lc_rows(&c.geometry, &c.center, omega, c.t_mid, j)?);
    }
    let sys = StackedSystem { rows };
    let mut est = solve_nullspace_robust(&sys, params)?;
    let geoms: Vec<ClusterGeometry> = clusters.iter().map(|c| c.geometry).collect();
    let kind = diagnose_degeneracy(&est, &geoms, omega, params);
    if kind != DegeneracyKind::None {
        est.degenerate = true;
    }
    est.degeneracy_kind = kind;
    Ok(est)
}

/// Angle between two directions up to sign, rad.
pub fn angle_up_to_sign(a: &Vec3, b: &Vec3) -> f64 {
    let c = a.dot(b).abs();
    a.cross(b).norm().atan2(c)
}
