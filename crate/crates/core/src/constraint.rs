//! Continuous event-line constraint.
//!
//! For an event observed at `t_k` on the projection of a 3D line whose image
//! lines at `t_s` and `t_e` are `l1` and `l3`, the line-point-line trifocal
//! incidence under a constant twist collapses to `fᵀ·B·v = 0`, with `B` built
//! from `l1`, `l3`, `ω` and the three timestamps only. `B·v` is the line
//! transferred into the event's view.

use crate::error::{CelcError, Result};
use crate::geometry::{
    hat, so3_exp, so3_left_jacobian, AngularVelocity, Bearing, Line2D, LinearVelocity, Mat3, Vec3,
};

/// Slack allowed when checking `t_s ≤ t_k ≤ t_e`, in seconds.
pub const TIME_TOLERANCE: f64 = 1e-9;

/// Below this norm a transferred line is treated as vanished.
pub const MIN_TRANSFER_NORM: f64 = 1e-14;

/// Boundary lines of one event cluster and the times they were observed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterGeometry {
    pub l1: Line2D,
    pub l3: Line2D,
    pub t_s: f64,
    pub t_e: f64,
}

impl ClusterGeometry {
    pub fn new(l1: Line2D, l3: Line2D, t_s: f64, t_e: f64) -> Result<Self> {
        if !(t_e > t_s) || !t_s.is_finite() || !t_e.is_finite() {
            return Err(CelcError::InvalidInterval { t_s, t_e });
        }
        Ok(Self { l1, l3, t_s, t_e })
    }

    pub fn contains(&self, t_k: f64) -> bool {
        t_k >= self.t_s - TIME_TOLERANCE && t_k <= self.t_e + TIME_TOLERANCE
    }

    /// Offsets `(t_k − t_s, t_k − t_e)` after clamping `t_k` into the interval.
    fn offsets(&self, t_k: f64) -> Result<(f64, f64)> {
        if !self.contains(t_k) {
            return Err(CelcError::TimeOutsideInterval {
                t_k,
                t_s: self.t_s,
                t_e: self.t_e,
            });
        }
        let t = t_k.clamp(self.t_s, self.t_e);
        Ok((t - self.t_s, t - self.t_e))
    }

    /// Direction of the 3D line when the camera does not rotate.
    pub fn line_direction(&self) -> Vec3 {
        self.l1.as_vec().cross(self.l3.as_vec())
    }
}

/// Classical calibrated trifocal slices `T_i = r_i¹²·t₃₂ᵀ − t₁₂·r_i³²ᵀ`,
/// with view 2 as reference and `(R_12, t_12)`, `(R_32, t_32)` mapping
/// reference-frame points into views 1 and 3.
pub fn classical_trifocal(r12: &Mat3, t12: &Vec3, r32: &Mat3, t32: &Vec3) -> [Mat3; 3] {
    std::array::from_fn(|i| r12.column(i) * t32.transpose() - t12 * r32.column(i).transpose())
}

/// Trifocal slices for the views at `t_s`, `t_k`, `t_e` under the constant twist `(ω, v)`.
pub fn continuous_trifocal(
    geom: &ClusterGeometry,
    omega: &AngularVelocity,
    v: &LinearVelocity,
    t_k: f64,
) -> Result<[Mat3; 3]> {
    let (dt_s, dt_e) = geom.offsets(t_k)?;
    let r_sk = so3_exp(omega, dt_s);
    let r_ek = so3_exp(omega, dt_e);
    let t_ek = so3_left_jacobian(omega, dt_e) * v * dt_e;
    let t_sk = dt_s * so3_left_jacobian(omega, dt_s) * v;
    Ok(std::array::from_fn(|i| {
        r_sk.matrix().column(i) * t_ek.transpose() - t_sk * r_ek.matrix().column(i).transpose()
    }))
}

/// The per-event matrix `B` of `fᵀ·B·v = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CelcMatrix(pub Mat3);

impl CelcMatrix {
    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    /// Constraint row `Bᵀf`.
    pub fn row_for(&self, f: &Bearing) -> Vec3 {
        self.0.transpose() * f.as_vec()
    }

    /// Unnormalized transferred line `B·v`.
    pub fn apply(&self, v: &LinearVelocity) -> Vec3 {
        self.0 * v
    }
}

pub fn build_celc_matrix(geom: &ClusterGeometry, omega: &AngularVelocity, t_k: f64) -> Result<CelcMatrix> {
    let (dt_s, dt_e) = geom.offsets(t_k)?;
    let l1 = geom.l1.as_vec();
    let l3 = geom.l3.as_vec();
    let r_sk = so3_exp(omega, dt_s);
    let r_ek = so3_exp(omega, dt_e);
    let j_sk = so3_left_jacobian(omega, dt_s);
    let j_ek = so3_left_jacobian(omega, dt_e);
    // row i: dt_e·(l1·r_i^sk)·l3ᵀJ_ek − dt_s·(l3·r_i^ek)·l1ᵀJ_sk
    let a = r_sk.matrix().transpose() * l1;
    let b = j_ek.transpose() * l3;
    let c = r_ek.matrix().transpose() * l3;
    let d = j_sk.transpose() * l1;
    Ok(CelcMatrix(dt_e * a * b.transpose() - dt_s * c * d.transpose()))
}

/// `fᵀ·B·v`.
pub fn celc_residual(f: &Bearing, b: &CelcMatrix, v: &LinearVelocity) -> f64 {
    f.as_vec().dot(&(b.0 * v))
}

/// `fᵀBv / (‖Bᵀf‖·‖v‖)`; zero when either norm vanishes.
pub fn normalized_residual(f: &Bearing, b: &CelcMatrix, v: &LinearVelocity) -> f64 {
    let denom = b.row_for(f).norm() * v.norm();
    if denom == 0.0 {
        0.0
    } else {
        celc_residual(f, b, v) / denom
    }
}

/// `fᵀBv / (‖B‖_F·‖v‖)`; zero when either norm vanishes.
pub fn scaled_residual(f: &Bearing, b: &CelcMatrix, v: &LinearVelocity) -> f64 {
    let denom = b.0.norm() * v.norm();
    if denom == 0.0 {
        0.0
    } else {
        celc_residual(f, b, v) / denom
    }
}

/// Predicted image line at `t_k`.
pub fn transfer_line(
    geom: &ClusterGeometry,
    omega: &AngularVelocity,
    v: &LinearVelocity,
    t_k: f64,
) -> Result<Line2D> {
    let l = build_celc_matrix(geom, omega, t_k)?.apply(v);
    let n = l.norm();
    if !(n >= MIN_TRANSFER_NORM) {
        return Err(CelcError::DegenerateTransfer(n));
    }
    Line2D::new(l)
}

/// One row of a stacked homogeneous system in `v`, with provenance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintRow {
    pub row: Vec3,
    /// Magnitude the row would have without cancellation (`‖B‖_F` for CELC
    /// rows). Used to tell vanishing systems apart from well-posed ones.
    pub scale: f64,
    /// Covariance of the row under unit isotropic noise on the event's
    /// normalized image point. Zero when no noise model applies.
    pub noise: Mat3,
    pub cluster: usize,
    pub event: usize,
}

impl ConstraintRow {
    pub fn celc(b: &CelcMatrix, f: &Bearing, cluster: usize, event: usize) -> Self {
        // f = x̄/‖x̄‖ with x̄ = (x, y, 1), so ∂f/∂(x, y) = f_z·(I − ffᵀ)·[e1 e2]
        let fv = f.as_vec();
        let proj = (Mat3::identity() - fv * fv.transpose()) * fv.z;
        let d = proj.fixed_columns::<2>(0).into_owned();
        let g = b.0.transpose() * d;
        Self {
            row: b.row_for(f),
            scale: b.0.norm(),
            noise: g * g.transpose(),
            cluster,
            event,
        }
    }
}

/// Rows of `hat(l2)·B`: the line-line-line constraint for a centre line `l2`
/// observed at `t_mid`.
pub fn build_ce3lc_rows(
    geom: &ClusterGeometry,
    l2: &Line2D,
    omega: &AngularVelocity,
    t_mid: f64,
    cluster: usize,
) -> Result<[ConstraintRow; 3]> {
    let b = build_celc_matrix(geom, omega, t_mid)?;
    let m = hat(l2.as_vec()) * b.0;
    let scale = b.0.norm();
    Ok(std::array::from_fn(|i| ConstraintRow {
        row: m.row(i).transpose(),
        scale,
        noise: Mat3::zeros(),
        cluster,
        event: i,
    }))
}
