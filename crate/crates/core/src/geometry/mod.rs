//! Camera-pose and projection primitives shared by the whole pipeline.
//!
//! Poses map camera coordinates to object coordinates. The object frame is
//! the frame the scanned object is reconstructed in; the camera frame has +z
//! along the optical axis. All angles are radians, all positions are in
//! object units.

mod se3;
mod trajectory;

pub use se3::{se3_exp, se3_log, so3_exp, so3_log};
pub use trajectory::{Trajectory, TrajectoryEntry, TrajectoryError};

use nalgebra::{Matrix3, Matrix3x4, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Pixel = Vector2<f64>;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation matrix is not orthonormal with determinant +1 (residual {0:.3e})")]
    NonOrthonormal(f64),
    #[error("point has non-positive depth {0:.3e} in the camera frame")]
    NonPositiveDepth(f64),
    #[error("pixel ({0:.2}, {1:.2}) is outside the image")]
    OutOfBounds(f64, f64),
    #[error("direction norm {0:.3e} is too small to normalize")]
    DegenerateDirection(f64),
    #[error("pose history is empty")]
    EmptyHistory,
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
}

/// Rigid camera-to-object transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: UnitQuaternion::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Pose { rotation, translation }
    }

    /// Builds a pose from a rotation matrix, rejecting matrices that are not
    /// orthonormal with determinant +1 within 1e-9.
    pub fn from_rotation_matrix(r: &Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        let residual = (r * r.transpose() - Mat3::identity()).norm() + (r.determinant() - 1.0).abs();
        if residual > 1e-9 {
            return Err(GeometryError::NonOrthonormal(residual));
        }
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
        Ok(Pose { rotation: UnitQuaternion::from_rotation_matrix(&rot), translation })
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// 3x4 [R | t] matrix.
    pub fn matrix34(&self) -> Matrix3x4<f64> {
        let r = self.rotation_matrix();
        Matrix3x4::from_columns(&[
            r.column(0).into(),
            r.column(1).into(),
            r.column(2).into(),
            self.translation,
        ])
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.translation + self.rotation * other.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv_rot = self.rotation.inverse();
        Pose { rotation: inv_rot, translation: -(inv_rot * self.translation) }
    }

    /// Camera point to object point.
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Object point to camera point.
    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse() * (p - self.translation)
    }

    pub fn rotate_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Left-multiplies by exp of a twist, the retraction used by the pose
    /// optimizer: `exp([rho, phi]) * self`.
    pub fn retract(&self, xi: &[f64; 6]) -> Pose {
        se3_exp(xi).compose(self)
    }

    /// Camera center expressed in object coordinates.
    pub fn center(&self) -> Vec3 {
        self.translation
    }

    pub fn angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }
}

/// Similarity transform `x -> scale * R * x + t`.
#[derive(Debug, Clone, Copy)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl SimilarityTransform {
    pub fn new(
        scale: f64,
        rotation: UnitQuaternion<f64>,
        translation: Vec3,
    ) -> Result<Self, GeometryError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(GeometryError::InvalidScale(scale));
        }
        Ok(SimilarityTransform { scale, rotation, translation })
    }

    pub fn identity() -> Self {
        SimilarityTransform {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let inv_rot = self.rotation.inverse();
        SimilarityTransform {
            scale: 1.0 / self.scale,
            rotation: inv_rot,
            translation: -(inv_rot * self.translation) / self.scale,
        }
    }

    /// Applies the similarity to a camera-to-object pose, yielding the pose
    /// of the same camera in the transformed object frame. Uniform scale
    /// leaves the rotation orthonormal and only moves the camera center.
    pub fn apply_to_pose(&self, pose: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * pose.rotation,
            translation: self.apply(&pose.translation),
        }
    }
}

/// Pinhole intrinsics. Integer pixel coordinates address pixel centers.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        if !(fx.is_finite() && fy.is_finite() && fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive and finite"));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("principal point must be finite"));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidIntrinsics("image must have at least one pixel"));
        }
        Ok(Camera { fx, fy, cx, cy, width, height })
    }

    pub fn contains(&self, pixel: &Pixel) -> bool {
        pixel.x >= -0.5
            && pixel.x <= self.width as f64 - 0.5
            && pixel.y >= -0.5
            && pixel.y <= self.height as f64 - 0.5
    }
}

/// Ray with a unit direction.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self, GeometryError> {
        let n = direction.norm();
        if n < 1e-12 {
            return Err(GeometryError::DegenerateDirection(n));
        }
        Ok(Ray { origin, direction: direction / n })
    }

    pub fn point_at(&self, depth: f64) -> Vec3 {
        self.origin + depth * self.direction
    }
}

/// Projects an object-space point into the image of a camera at `pose`.
pub fn project(camera: &Camera, pose: &Pose, point: &Vec3) -> Result<Pixel, GeometryError> {
    let p_cam = pose.inverse_transform_point(point);
    if p_cam.z <= 1e-12 {
        return Err(GeometryError::NonPositiveDepth(p_cam.z));
    }
    Ok(Pixel::new(
        camera.fx * p_cam.x / p_cam.z + camera.cx,
        camera.fy * p_cam.y / p_cam.z + camera.cy,
    ))
}

/// Backprojects a pixel into the object-space ray through it.
pub fn pixel_to_ray(camera: &Camera, pose: &Pose, pixel: &Pixel) -> Result<Ray, GeometryError> {
    if !camera.contains(pixel) {
        return Err(GeometryError::OutOfBounds(pixel.x, pixel.y));
    }
    let d_cam = Vec3::new((pixel.x - camera.cx) / camera.fx, (pixel.y - camera.cy) / camera.fy, 1.0);
    Ray::new(pose.translation, pose.rotate_vector(&d_cam))
}

/// Camera-to-object pose for a camera at `center` whose optical axis points
/// at the origin, with `up` fixing the roll. Fails when the center is at the
/// origin or collinear with `up`.
pub fn look_at_origin(center: &Vec3, up: &Vec3) -> Result<Pose, GeometryError> {
    let forward = -center;
    let f = forward.norm();
    if f < 1e-12 {
        return Err(GeometryError::DegenerateDirection(f));
    }
    let z_axis = forward / f;
    let x_axis = up.cross(&z_axis);
    let x = x_axis.norm();
    if x < 1e-12 {
        return Err(GeometryError::DegenerateDirection(x));
    }
    let x_axis = x_axis / x;
    let y_axis = z_axis.cross(&x_axis);
    let r = Mat3::from_columns(&[x_axis, y_axis, z_axis]);
    Pose::from_rotation_matrix(&r, *center)
}

/// Predicts the next pose from up to three most recent poses with a
/// second-order motion model in the tangent space: relative increments
/// `v1 = log(T_{n-2}^-1 T_{n-1})`, `v0 = log(T_{n-3}^-1 T_{n-2})` are
/// extrapolated as `2 v1 - v0` and applied on the right of the newest pose.
/// Two poses fall back to constant velocity, one pose is repeated.
pub fn extrapolate_pose(history: &[Pose]) -> Result<Pose, GeometryError> {
    let n = history.len();
    match n {
        0 => Err(GeometryError::EmptyHistory),
        1 => Ok(history[0]),
        _ => {
            let rel = |a: &Pose, b: &Pose| se3_log(&a.inverse().compose(b));
            let v1 = rel(&history[n - 2], &history[n - 1]);
            let inc = if n >= 3 {
                let v0 = rel(&history[n - 3], &history[n - 2]);
                let mut i = [0.0; 6];
                for k in 0..6 {
                    i[k] = 2.0 * v1[k] - v0[k];
                }
                i
            } else {
                v1
            };
            Ok(history[n - 1].compose(&se3_exp(&inc)))
        }
    }
}

/// Least-squares rigid transform `T` minimizing the stacked Frobenius
/// residual `sum_i ||mat34(T * src_i) - mat34(dst_i)||_F^2`.
///
/// The rotation maximizes `tr(R^T M)` with `M` built from both the rotation
/// products and the centered translations; the translation then follows in
/// closed form. A single pose pair is aligned exactly.
pub fn fit_rigid(src: &[Pose], dst: &[Pose]) -> Result<Pose, GeometryError> {
    if src.is_empty() || src.len() != dst.len() {
        return Err(GeometryError::DegenerateInput("need equally many source and destination poses, at least one"));
    }
    let n = src.len() as f64;
    let mean_src = src.iter().fold(Vec3::zeros(), |a, p| a + p.translation) / n;
    let mean_dst = dst.iter().fold(Vec3::zeros(), |a, p| a + p.translation) / n;

    let mut m = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        m += d.rotation_matrix() * s.rotation_matrix().transpose();
        m += (d.translation - mean_dst) * (s.translation - mean_src).transpose();
    }
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let det = (u * v_t).determinant();
    let rot = u * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, det.signum())) * v_t;
    let rotation =
        UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(rot));
    let translation = mean_dst - rot * mean_src;
    Ok(Pose { rotation, translation })
}

/// Frobenius residual minimized by [`fit_rigid`], exposed for diagnostics.
pub fn rigid_residual(t: &Pose, src: &[Pose], dst: &[Pose]) -> f64 {
    src.iter()
        .zip(dst)
        .map(|(s, d)| (t.compose(s).matrix34() - d.matrix34()).norm_squared())
        .sum()
}
