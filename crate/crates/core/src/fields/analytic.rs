//! Closed-form field over signed-distance shapes, used as ground truth for
//! synthetic scenes and as the reference in renderer tests. Occupancy is
//! `sigmoid(-sdf(x) / sharpness)`, so the surface sits exactly on the zero
//! set of the distance and the transition width is controlled by `sharpness`.

use super::{sigmoid, Aabb, ColorInputGrads, Field, ParamGrad, Rgb};
use crate::geometry::Vec3;
use std::ops::Range;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    #[serde(rename = "box")]
    Cuboid { half_extents: [f64; 3] },
    Composite { parts: Vec<PlacedShape> },
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PlacedShape {
    pub center: [f64; 3],
    pub shape: Shape,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Uniform { rgb: [f64; 3] },
    Checker { scale: f64, a: [f64; 3], b: [f64; 3] },
    Gradient { base: [f64; 3], gain: [f64; 3] },
}

impl Shape {
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Sphere { radius } => p.norm() - radius,
            Shape::Cuboid { half_extents } => {
                let q = Vec3::new(
                    p.x.abs() - half_extents[0],
                    p.y.abs() - half_extents[1],
                    p.z.abs() - half_extents[2],
                );
                let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                outside + q.x.max(q.y).max(q.z).min(0.0)
            }
            Shape::Composite { parts } => parts
                .iter()
                .map(|part| part.shape.sdf(&(p - Vec3::from(part.center))))
                .fold(f64::INFINITY, f64::min),
        }
    }

    pub fn sdf_gradient(&self, p: &Vec3) -> Vec3 {
        match self {
            Shape::Sphere { radius: _ } => {
                let n = p.norm();
                if n < 1e-12 {
                    Vec3::z()
                } else {
                    p / n
                }
            }
            Shape::Cuboid { half_extents } => {
                let q = Vec3::new(
                    p.x.abs() - half_extents[0],
                    p.y.abs() - half_extents[1],
                    p.z.abs() - half_extents[2],
                );
                let sign = Vec3::new(p.x.signum(), p.y.signum(), p.z.signum());
                let clamped = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0));
                let out_norm = clamped.norm();
                if out_norm > 1e-12 {
                    Vec3::new(
                        sign.x * clamped.x / out_norm,
                        sign.y * clamped.y / out_norm,
                        sign.z * clamped.z / out_norm,
                    )
                } else {
                    // Inside: gradient along the axis of the closest face.
                    let mut axis = 0;
                    for i in 1..3 {
                        if q[i] > q[axis] {
                            axis = i;
                        }
                    }
                    let mut g = Vec3::zeros();
                    g[axis] = sign[axis];
                    g
                }
            }
            Shape::Composite { parts } => {
                let mut best = f64::INFINITY;
                let mut grad = Vec3::z();
                for part in parts {
                    let local = p - Vec3::from(part.center);
                    let d = part.shape.sdf(&local);
                    if d < best {
                        best = d;
                        grad = part.shape.sdf_gradient(&local);
                    }
                }
                grad
            }
        }
    }

    pub fn bounding_radius(&self) -> f64 {
        match self {
            Shape::Sphere { radius } => *radius,
            Shape::Cuboid { half_extents } => Vec3::from(*half_extents).norm(),
            Shape::Composite { parts } => parts
                .iter()
                .map(|p| Vec3::from(p.center).norm() + p.shape.bounding_radius())
                .fold(0.0, f64::max),
        }
    }
}

impl Texture {
    pub fn sample(&self, p: &Vec3) -> Rgb {
        match self {
            Texture::Uniform { rgb } => Rgb::from(*rgb),
            Texture::Checker { scale, a, b } => {
                let parity = (p.x / scale).floor() + (p.y / scale).floor() + (p.z / scale).floor();
                if (parity as i64).rem_euclid(2) == 0 {
                    Rgb::from(*a)
                } else {
                    Rgb::from(*b)
                }
            }
            Texture::Gradient { base, gain } => Rgb::new(
                (base[0] + gain[0] * p.x).clamp(0.0, 1.0),
                (base[1] + gain[1] * p.y).clamp(0.0, 1.0),
                (base[2] + gain[2] * p.z).clamp(0.0, 1.0),
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalyticField {
    pub shape: Shape,
    pub texture: Texture,
    pub sharpness: f64,
    bounds: Aabb,
    layout: Vec<(String, Range<usize>)>,
}

impl AnalyticField {
    pub fn new(shape: Shape, texture: Texture, sharpness: f64) -> Self {
        let half = (shape.bounding_radius() * 1.5).max(1.5);
        AnalyticField { shape, texture, sharpness, bounds: Aabb::centered(half), layout: Vec::new() }
    }
}

impl Field for AnalyticField {
    fn kind_name(&self) -> &'static str {
        "analytic"
    }

    fn bounds(&self) -> Aabb {
        self.bounds
    }

    fn param_len(&self) -> usize {
        0
    }

    fn params(&self) -> &[f64] {
        &[]
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut []
    }

    fn param_layout(&self) -> &[(String, Range<usize>)] {
        &self.layout
    }

    fn occupancy(&self, x: &Vec3) -> f64 {
        sigmoid(-self.shape.sdf(x) / self.sharpness)
    }

    fn spatial_gradient(&self, x: &Vec3) -> Vec3 {
        let o = self.occupancy(x);
        self.shape.sdf_gradient(x) * (-o * (1.0 - o) / self.sharpness)
    }

    fn color(&self, x: &Vec3, _dir: &Vec3, _normal: &Vec3, _feature: &[f64]) -> Rgb {
        self.texture.sample(x)
    }

    fn occupancy_backward(&self, x: &Vec3, upstream: f64, _grad: &mut ParamGrad) -> Vec3 {
        self.spatial_gradient(x) * upstream
    }

    fn color_backward(
        &self,
        x: &Vec3,
        _dir: &Vec3,
        _normal: &Vec3,
        _feature: &[f64],
        upstream: &Rgb,
        _grad: &mut ParamGrad,
    ) -> ColorInputGrads {
        // No parameters to accumulate into. The uniform and checker textures
        // have zero position gradient almost everywhere; the clamped linear
        // ramp has its true diagonal Jacobian wherever it is unclamped.
        let mut out = ColorInputGrads::default();
        if let Texture::Gradient { base, gain } = &self.texture {
            for ch in 0..3 {
                let raw = base[ch] + gain[ch] * x[ch];
                if (0.0..=1.0).contains(&raw) {
                    out.position[ch] += upstream[ch] * gain[ch];
                }
            }
        }
        out
    }
}
