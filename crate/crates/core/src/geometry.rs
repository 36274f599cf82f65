//! SO(3) kinematics for a constant body twist and calibrated lifting of
//! pixels and pixel-space lines.
//!
//! Rotations and translations follow the constant-velocity model: over an
//! elapsed time `dt` the camera rotates by `exp(hat(ω)·dt)` and translates by
//! `J(ω·dt)·v·dt`, where `J` is the left Jacobian of SO(3).

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};

use crate::error::{CelcError, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Angular velocity in rad/s, body frame.
pub type AngularVelocity = Vec3;
/// Linear velocity in m/s, body frame.
pub type LinearVelocity = Vec3;

/// Below this rotation angle the closed forms switch to Taylor series.
pub const SMALL_ANGLE: f64 = 1e-8;

const UNDISTORT_MAX_ITERS: usize = 20;
const UNDISTORT_TOL: f64 = 1e-8;

/// Skew-symmetric cross-product matrix.
#[rustfmt::skip]
pub fn hat(w: &Vec3) -> Mat3 {
    Mat3::new(
         0.0, -w.z,  w.y,
         w.z,  0.0, -w.x,
        -w.y,  w.x,  0.0,
    )
}

/// Rotation accumulated over `dt` seconds at constant angular velocity.
pub fn so3_exp(omega: &AngularVelocity, dt: f64) -> Rotation3<f64> {
    let phi = omega * dt;
    let theta = phi.norm();
    let m = if theta < SMALL_ANGLE {
        let w = hat(&phi);
        Mat3::identity() + w + 0.5 * w * w
    } else {
        let a = phi / theta;
        let (s, c) = theta.sin_cos();
        c * Mat3::identity() + one_minus_cos(theta) * a * a.transpose() + s * hat(&a)
    };
    Rotation3::from_matrix_unchecked(m)
}

/// Left Jacobian of SO(3) evaluated at `ω·dt`.
pub fn so3_left_jacobian(omega: &AngularVelocity, dt: f64) -> Mat3 {
    let phi = omega * dt;
    let theta = phi.norm();
    if theta < SMALL_ANGLE {
        let w = hat(&phi);
        return Mat3::identity() + 0.5 * w + (w * w) / 6.0;
    }
    let a = phi / theta;
    let sinc = theta.sin() / theta;
    sinc * Mat3::identity() + (1.0 - sinc) * a * a.transpose() + (one_minus_cos(theta) / theta) * hat(&a)
}

/// `1 − cos θ` without cancellation for small angles.
fn one_minus_cos(theta: f64) -> f64 {
    let h = (0.5 * theta).sin();
    2.0 * h * h
}

/// Translation accumulated over `dt` seconds under the constant twist `(ω, v)`.
pub fn translation_from_velocity(omega: &AngularVelocity, v: &LinearVelocity, dt: f64) -> Vec3 {
    so3_left_jacobian(omega, dt) * v * dt
}

/// Unit bearing vector of a calibrated ray. Always points in front of the camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bearing(Vec3);

impl Bearing {
    pub fn new(v: Vec3) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(CelcError::ZeroVector("bearing"));
        }
        if v.z <= 0.0 {
            return Err(CelcError::BehindCamera(v.z));
        }
        Ok(Self(v / n))
    }

    /// Bearing through the normalized image point `(x, y, 1)`.
    pub fn from_normalized(x: f64, y: f64) -> Self {
        Self(Vec3::new(x, y, 1.0).normalize())
    }

    pub fn as_vec(&self) -> &Vec3 {
        &self.0
    }

    /// Inhomogeneous normalized image point `f / f_z`.
    pub fn normalized_point(&self) -> Vec2 {
        Vec2::new(self.0.x / self.0.z, self.0.y / self.0.z)
    }
}

/// Homogeneous image line in calibrated coordinates, unit norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line2D(Vec3);

impl Line2D {
    pub fn new(l: Vec3) -> Result<Self> {
        let n = l.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(CelcError::ZeroVector("line"));
        }
        Ok(Self(l / n))
    }

    /// Line through two homogeneous points.
    pub fn through(p: &Vec3, q: &Vec3) -> Result<Self> {
        Self::new(p.cross(q))
    }

    pub fn as_vec(&self) -> &Vec3 {
        &self.0
    }

    pub fn flipped(&self) -> Self {
        Self(-self.0)
    }

    /// Angle between the two lines' homogeneous vectors, ignoring sign.
    pub fn angle_to(&self, other: &Line2D) -> f64 {
        let c = self.0.dot(&other.0).abs().min(1.0);
        // acos loses precision near 1; the cross product does not.
        self.0.cross(&other.0).norm().atan2(c)
    }
}

/// Radial-tangential distortion coefficients in OpenCV order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
    pub k3: f64,
}

impl Distortion {
    /// Builds from an OpenCV-ordered list `[k1, k2, p1, p2, k3]`; missing
    /// trailing terms are zero.
    pub fn from_slice(c: &[f64]) -> Result<Self> {
        if c.len() > 5 {
            return Err(CelcError::InvalidParameter(format!(
                "expected at most 5 distortion coefficients, got {}",
                c.len()
            )));
        }
        let get = |i: usize| c.get(i).copied().unwrap_or(0.0);
        Ok(Self {
            k1: get(0),
            k2: get(1),
            p1: get(2),
            p2: get(3),
            k3: get(4),
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.k1, self.k2, self.p1, self.p2, self.k3]
    }

    pub fn is_zero(&self) -> bool {
        self.to_vec().iter().all(|c| *c == 0.0)
    }

    /// Maps an ideal normalized point to its distorted position.
    pub fn distort(&self, p: &Vec2) -> Vec2 {
        let (x, y) = (p.x, p.y);
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        let dx = 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
        let dy = self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
        Vec2::new(radial * x + dx, radial * y + dy)
    }

    /// Fixed-point inversion of [`Distortion::distort`].
    pub fn undistort(&self, distorted: &Vec2) -> Result<Vec2> {
        if self.is_zero() {
            return Ok(*distorted);
        }
        let mut p = *distorted;
        for _ in 0..UNDISTORT_MAX_ITERS {
            let (x, y) = (p.x, p.y);
            let r2 = x * x + y * y;
            let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
            let dx = 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
            let dy = self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
            let next = Vec2::new((distorted.x - dx) / radial, (distorted.y - dy) / radial);
            let step = (next - p).norm();
            p = next;
            if !step.is_finite() {
                break;
            }
            if step < UNDISTORT_TOL {
                return Ok(p);
            }
        }
        let residual = (self.distort(&p) - distorted).norm();
        Err(CelcError::UndistortionDiverged {
            iterations: UNDISTORT_MAX_ITERS,
            residual,
        })
    }
}

/// Pinhole intrinsics with radial-tangential distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub distortion: Distortion,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(CelcError::InvalidParameter(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            distortion: Distortion::default(),
            width,
            height,
        })
    }

    pub fn with_distortion(mut self, distortion: Distortion) -> Self {
        self.distortion = distortion;
        self
    }

    /// 346×260 sensor with fx = fy = 200 px, no distortion.
    pub fn davis346() -> Self {
        Self {
            fx: 200.0,
            fy: 200.0,
            cx: 173.0,
            cy: 130.0,
            distortion: Distortion::default(),
            width: 346,
            height: 260,
        }
    }

    #[rustfmt::skip]
    pub fn k_matrix(&self) -> Mat3 {
        Mat3::new(
            self.fx, 0.0,     self.cx,
            0.0,     self.fy, self.cy,
            0.0,     0.0,     1.0,
        )
    }

    pub fn mean_focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64
    }

    /// Pixel of an ideal normalized image point, including distortion.
    pub fn project_normalized(&self, p: &Vec2) -> Vec2 {
        let d = self.distortion.distort(p);
        Vec2::new(self.fx * d.x + self.cx, self.fy * d.y + self.cy)
    }

    /// Pixel of a camera-frame point; `None` when it is not in front of the camera.
    pub fn project(&self, x: &Vec3) -> Option<Vec2> {
        if x.z <= 0.0 {
            return None;
        }
        Some(self.project_normalized(&Vec2::new(x.x / x.z, x.y / x.z)))
    }

    /// Undistorted normalized image point of a raw pixel.
    pub fn normalize_pixel(&self, p: &Vec2) -> Result<Vec2> {
        let d = Vec2::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy);
        self.distortion.undistort(&d)
    }

    /// Raw pixel mapped to where an ideal (distortion-free) pinhole would see it.
    pub fn undistort_pixel(&self, p: &Vec2) -> Result<Vec2> {
        let n = self.normalize_pixel(p)?;
        Ok(Vec2::new(self.fx * n.x + self.cx, self.fy * n.y + self.cy))
    }
}

/// Unit bearing of the undistorted ray through pixel `p`.
pub fn lift_pixel(p: &Vec2, cam: &CameraModel) -> Result<Bearing> {
    let n = cam.normalize_pixel(p)?;
    Ok(Bearing::from_normalized(n.x, n.y))
}

/// Calibrated line `Kᵀ·l_px`, unit-normalized. Expects an undistorted pixel line.
pub fn lift_line(l_px: &Vec3, cam: &CameraModel) -> Result<Line2D> {
    if l_px.norm() == 0.0 {
        return Err(CelcError::ZeroVector("pixel line"));
    }
    Line2D::new(cam.k_matrix().transpose() * l_px)
}
