//! Exponential and logarithm maps for SO(3) and SE(3).
//!
//! Twists are `[rho, phi]`: translational part first, rotational part last.
//! The rotation log goes through the quaternion, which stays stable for
//! angles approaching pi where the matrix route loses the axis.

use super::{Mat3, Pose, Vec3};
use nalgebra::{Quaternion, UnitQuaternion};

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Axis-angle vector of a unit quaternion, `|result| = angle < pi + 1e-6`.
pub fn so3_log(q: &UnitQuaternion<f64>) -> Vec3 {
    // Force the scalar part non-negative so the angle lands in [0, pi].
    let (w, v) = if q.w >= 0.0 {
        (q.w, Vec3::new(q.i, q.j, q.k))
    } else {
        (-q.w, -Vec3::new(q.i, q.j, q.k))
    };
    let n = v.norm();
    if n < 1e-12 {
        // angle ~ 2n/w; first-order term is exact to O(n^3)
        return v * (2.0 / w.max(1e-300));
    }
    let angle = 2.0 * n.atan2(w);
    v * (angle / n)
}

pub fn so3_exp(phi: &Vec3) -> UnitQuaternion<f64> {
    let angle = phi.norm();
    let (s, c) = ((angle / 2.0).sin(), (angle / 2.0).cos());
    // sin(a/2)/a with series fallback near zero
    let k = if angle < 1e-9 { 0.5 - angle * angle / 48.0 } else { s / angle };
    UnitQuaternion::new_normalize(Quaternion::new(c, k * phi.x, k * phi.y, k * phi.z))
}

fn v_matrix(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-6 {
        return Mat3::identity() + 0.5 * k + (k * k) / 6.0;
    }
    let t2 = theta * theta;
    Mat3::identity() + ((1.0 - theta.cos()) / t2) * k + ((theta - theta.sin()) / (t2 * theta)) * (k * k)
}

fn v_matrix_inv(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = skew(phi);
    // coeff = (1 - (theta/2) cot(theta/2)) / theta^2, written with the half
    // angle so it stays finite up to theta = pi.
    let coeff = if theta < 1e-4 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let half = theta / 2.0;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    Mat3::identity() - 0.5 * k + coeff * (k * k)
}

/// `exp([rho, phi])` as a pose.
pub fn se3_exp(xi: &[f64; 6]) -> Pose {
    let rho = Vec3::new(xi[0], xi[1], xi[2]);
    let phi = Vec3::new(xi[3], xi[4], xi[5]);
    Pose { rotation: so3_exp(&phi), translation: v_matrix(&phi) * rho }
}

/// Twist `[rho, phi]` with `exp(se3_log(p)) = p` for rotation angles < pi.
pub fn se3_log(p: &Pose) -> [f64; 6] {
    let phi = so3_log(&p.rotation);
    let rho = v_matrix_inv(&phi) * p.translation;
    [rho.x, rho.y, rho.z, phi.x, phi.y, phi.z]
}
