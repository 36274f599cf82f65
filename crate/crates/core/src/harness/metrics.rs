//! Error metrics between a ground-truth velocity and an up-to-sign direction.

use crate::error::{CelcError, Result};
use crate::geometry::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityError {
    /// Euclidean distance between the unit vectors after sign alignment.
    pub epsilon: f64,
    /// Angle between them, rad.
    pub phi: f64,
}

/// Normalizes both vectors, flips the estimate onto the ground truth's
/// hemisphere (ties keep the sign) and measures chord and angle.
pub fn metrics(v_gt: &Vec3, v_est: &Vec3) -> Result<VelocityError> {
    let n = v_gt.norm();
    if !(n > 0.0) {
        return Err(CelcError::ZeroGroundTruth);
    }
    let m = v_est.norm();
    if !(m > 0.0) {
        return Err(CelcError::ZeroVector("estimated velocity"));
    }
    let g = v_gt / n;
    let mut e = v_est / m;
    if g.dot(&e) < 0.0 {
        e = -e;
    }
    // atan2 keeps precision near zero where acos does not
    let phi = g.cross(&e).norm().atan2(g.dot(&e));
    Ok(VelocityError {
        epsilon: (g - e).norm(),
        phi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let g = Vec3::new(1.0, 2.0, 0.0);
        let m = metrics(&g, &g.normalize()).unwrap();
        assert!(m.epsilon < 1e-15 && m.phi < 1e-15);
        let m = metrics(&Vec3::x(), &Vec3::y()).unwrap();
        assert_relative_eq!(m.epsilon, 2f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(m.phi, std::f64::consts::FRAC_PI_2, epsilon = 1e-15);
        let m = metrics(&g, &(-3.0 * g)).unwrap();
        assert!(m.phi < 1e-15 && m.epsilon < 1e-15);
        assert!(matches!(metrics(&Vec3::zeros(), &g), Err(CelcError::ZeroGroundTruth)));
    }

    #[test]
    fn small_angles_have_chord_close_to_arc() {
        let g = Vec3::z();
        let e = Vec3::new(0.2063f64.sin(), 0.0, 0.2063f64.cos());
        let m = metrics(&g, &e).unwrap();
        assert_relative_eq!(m.phi, 0.2063, epsilon = 1e-12);
        assert!((m.epsilon - m.phi).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn chord_arc_identity_and_ranges(a in prop::array::uniform3(-1.0..1.0f64), b in prop::array::uniform3(-1.0..1.0f64)) {
            let (a, b) = (Vec3::from(a), Vec3::from(b));
            prop_assume!(a.norm() > 1e-3 && b.norm() > 1e-3);
            let m = metrics(&a, &b).unwrap();
            prop_assert!((m.epsilon - 2.0 * (m.phi / 2.0).sin()).abs() < 1e-12);
            prop_assert!((0.0..=std::f64::consts::FRAC_PI_2 + 1e-12).contains(&m.phi));
            prop_assert!((0.0..=2.0).contains(&m.epsilon));
        }
    }
}
