//! Nonlinear refinement of the velocity direction.
//!
//! Minimizes `Σ ρ(d(B_k v, f_k))` over the unit sphere, where `d` is the
//! perpendicular distance of the event's normalized image point to the
//! transferred line and `ρ` is the Huber loss. The `B_k` do not depend on `v`
//! so they are built once.

use nalgebra::{Matrix2, Vector2};

use crate::constraint::build_celc_matrix;
use crate::error::{CelcError, Result};
use crate::geometry::{AngularVelocity, Bearing, CameraModel, Line2D, Mat3, Vec3};
use crate::linefit::{huber_rho, huber_weight};
use crate::solver::ClusterData;

/// Below this `√(l_a²+l_b²)` the transferred line is treated as degenerate.
const MIN_LINE_NORMAL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineParams {
    /// Huber threshold in normalized image units.
    pub huber_k: f64,
    pub max_iters: usize,
    pub gradient_tol: f64,
    pub step_tol: f64,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self::for_camera(&CameraModel::davis346())
    }
}

impl RefineParams {
    /// One pixel of Huber threshold for this camera.
    pub fn for_camera(cam: &CameraModel) -> Self {
        Self {
            huber_k: 1.0 / cam.mean_focal(),
            max_iters: 100,
            gradient_tol: 1e-10,
            step_tol: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.huber_k > 0.0 && self.gradient_tol > 0.0 && self.step_tol > 0.0;
        if !ok {
            return Err(CelcError::InvalidParameter(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineResult {
    pub v_refined: Vec3,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Residuals skipped at the final state because the transferred line degenerated.
    pub dropped: usize,
}

/// Perpendicular distance of the normalized image point of `f` to `l`.
pub fn geometric_distance(l: &Line2D, f: &Bearing) -> Result<f64> {
    signed_distance(l.as_vec(), f).map(f64::abs).ok_or(CelcError::LineAtInfinity)
}

fn signed_distance(l: &Vec3, f: &Bearing) -> Option<f64> {
    let n = l.x.hypot(l.y);
    if !(n > MIN_LINE_NORMAL * l.norm()) || n == 0.0 {
        return None;
    }
    let p = f.as_vec() / f.as_vec().z;
    Some(p.dot(l) / n)
}

/// Orthonormal basis of the tangent plane of the unit sphere at `v`, as columns `(u1, u2)`.
pub fn tangent_basis(v: &Vec3) -> (Vec3, Vec3) {
    let v = v.normalize();
    let pick = if v.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u1 = v.cross(&pick).normalize();
    (u1, v.cross(&u1))
}

/// `normalize(v + δ1·u1 + δ2·u2)`.
pub fn retract(v: &Vec3, delta: &[f64; 2]) -> Vec3 {
    let (u1, u2) = tangent_basis(v);
    (v.normalize() + delta[0] * u1 + delta[1] * u2).normalize()
}

/// Precomputed per-event data for a fixed `ω` and fixed boundary lines.
#[derive(Debug, Clone)]
pub struct RefineProblem {
    terms: Vec<(Mat3, Bearing)>,
}

impl RefineProblem {
    pub fn new(clusters: &[ClusterData], omega: &AngularVelocity) -> Result<Self> {
        let mut terms = Vec::new();
        for c in clusters {
            for obs in &c.observations {
                terms.push((build_celc_matrix(&c.geometry, omega, obs.t)?.0, obs.bearing));
            }
        }
        if terms.is_empty() {
            return Err(CelcError::NoRows);
        }
        Ok(Self { terms })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Signed distances; `None` where the transferred line degenerates.
    pub fn residuals(&self, v: &Vec3) -> Vec<Option<f64>> {
        self.terms.iter().map(|(b, f)| signed_distance(&(b * v), f)).collect()
    }

    /// Derivatives of each signed distance with respect to the tangent
    /// coordinates of [`retract`] at `v`.
    pub fn jacobians(&self, v: &Vec3) -> Vec<Option<[f64; 2]>> {
        let v = v.normalize();
        let (u1, u2) = tangent_basis(&v);
        self.terms
            .iter()
            .map(|(b, f)| {
                let l = b * v;
                let n = l.x.hypot(l.y);
                if !(n > MIN_LINE_NORMAL * l.norm()) || n == 0.0 {
                    return None;
                }
                let p = f.as_vec() / f.as_vec().z;
                let s = p.dot(&l);
                // ∂d/∂l, then chain through l = B·v
                let dl = p / n - Vec3::new(l.x, l.y, 0.0) * (s / (n * n * n));
                let dv = b.transpose() * dl;
                Some([dv.dot(&u1), dv.dot(&u2)])
            })
            .collect()
    }

    /// Huber cost over the non-degenerate residuals, and the number dropped.
    pub fn cost(&self, v: &Vec3, k: f64) -> (f64, usize) {
        let mut dropped = 0;
        let mut total = 0.0;
        for r in self.residuals(v) {
            match r {
                Some(r) => total += huber_rho(r, k),
                None => dropped += 1,
            }
        }
        (total, dropped)
    }
}

/// Levenberg-Marquardt with Huber reweighting on the unit sphere.
pub fn refine_velocity(
    clusters: &[ClusterData],
    omega: &AngularVelocity,
    v_init: &Vec3,
    params: &RefineParams,
) -> Result<RefineResult> {
    params.validate()?;
    if !(v_init.norm() > 0.0) {
        return Err(CelcError::ZeroVector("initial velocity"));
    }
    let problem = RefineProblem::new(clusters, omega)?;
    refine_problem(&problem, v_init, params)
}

pub fn refine_problem(problem: &RefineProblem, v_init: &Vec3, params: &RefineParams) -> Result<RefineResult> {
    let k = params.huber_k;
    let mut v = v_init.normalize();
    let (initial_cost, mut dropped) = problem.cost(&v, k);
    if dropped == problem.len() {
        return Err(CelcError::AllResidualsDropped);
    }
    let mut cost = initial_cost;
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < params.max_iters {
        iterations += 1;
        let res = problem.residuals(&v);
        let jac = problem.jacobians(&v);
        let mut h = Matrix2::zeros();
        let mut g = Vector2::zeros();
        for (r, j) in res.iter().zip(&jac) {
            if let (Some(r), Some(j)) = (r, j) {
                let w = huber_weight(*r, k);
                let j = Vector2::new(j[0], j[1]);
                h += w * j * j.transpose();
                g += w * *r * j;
            }
        }
        if g.norm() < params.gradient_tol {
            converged = true;
            break;
        }
        let mut accepted = false;
        // inner loop: grow the damping until the step lowers the cost
        while lambda < 1e16 {
            let damped = h + Matrix2::from_diagonal(&Vector2::new(
                lambda * h[(0, 0)].max(f64::MIN_POSITIVE),
                lambda * h[(1, 1)].max(f64::MIN_POSITIVE),
            ));
            let Some(step) = damped.lu().solve(&(-g)) else {
                lambda *= 10.0;
                continue;
            };
            if step.norm() < params.step_tol {
                converged = true;
                break;
            }
            let candidate = retract(&v, &[step[0], step[1]]);
            let (c, d) = problem.cost(&candidate, k);
            if d < problem.len() && c < cost {
                v = candidate;
                cost = c;
                dropped = d;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                break;
            }
            lambda *= 4.0;
        }
        if converged || !accepted {
            converged = true;
            break;
        }
    }
    if dropped > 0 {
        log::warn!("refinement ignored {dropped} of {} residuals against lines at infinity", problem.len());
    }
    Ok(RefineResult {
        v_refined: v,
        initial_cost,
        final_cost: cost,
        iterations,
        converged,
        dropped,
    })
}
