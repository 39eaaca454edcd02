//! Differentiable occupancy and color fields.
//!
//! A field maps object-space points to an occupancy in [0, 1] whose 0.5
//! level set is the reconstructed surface, and to an RGB color conditioned
//! on view direction, surface normal and a geometry feature vector. Learnable
//! fields expose a flat parameter vector with named sub-ranges plus
//! reverse-mode hooks that accumulate parameter gradients and return input
//! gradients, so the renderer and losses can backpropagate without an
//! autodiff framework.

mod analytic;
mod checkpoint;
mod encoding;
mod grid;
mod mesh;
mod mlp;

pub use analytic::{AnalyticField, PlacedShape, Shape, Texture};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use encoding::{fourier_encode, fourier_encode_backward, fourier_len, octave_mask};
pub use grid::{GridConfig, GridField};
pub use mesh::{extract_mesh, MeshError, TriangleMesh};
pub use mlp::{global_mlp, tracking_mlp, MlpConfig, MlpField};

use crate::geometry::Vec3;
use nalgebra::Vector3;
use std::ops::Range;
use thiserror::Error;

pub type Rgb = Vector3<f64>;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("occupancy gradient norm {0:.3e} is too small to define a normal")]
    DegenerateGradient(f64),
}

/// Axis-aligned bounding box of the volume a field is defined on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn centered(half_extent: f64) -> Self {
        Aabb {
            min: Vec3::new(-half_extent, -half_extent, -half_extent),
            max: Vec3::new(half_extent, half_extent, half_extent),
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn size(&self) -> Vec3 {
        self.max - self.min
    }
}

/// Sparse parameter-gradient accumulator. Entries may repeat; consumers fold
/// them into a dense vector in insertion order, which keeps reductions
/// deterministic for any thread count.
#[derive(Debug, Default, Clone)]
pub struct ParamGrad {
    pub entries: Vec<(u32, f64)>,
}

impl ParamGrad {
    pub fn push(&mut self, idx: usize, v: f64) {
        if v != 0.0 {
            self.entries.push((idx as u32, v));
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn scatter_into(&self, dense: &mut [f64]) {
        for &(i, v) in &self.entries {
            dense[i as usize] += v;
        }
    }

    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        self.scatter_into(&mut out);
        out
    }
}

/// Input gradients returned by [`Field::color_backward`].
#[derive(Debug, Clone)]
pub struct ColorInputGrads {
    pub position: Vec3,
    pub direction: Vec3,
    pub normal: Vec3,
    pub feature: Vec<f64>,
}

impl Default for ColorInputGrads {
    fn default() -> Self {
        ColorInputGrads {
            position: Vec3::zeros(),
            direction: Vec3::zeros(),
            normal: Vec3::zeros(),
            feature: Vec::new(),
        }
    }
}

/// Occupancy/color field pair over one shared parameter vector.
pub trait Field: Send + Sync {
    fn kind_name(&self) -> &'static str;
    fn bounds(&self) -> Aabb;

    fn param_len(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    /// Named sub-ranges of the flat parameter vector.
    fn param_layout(&self) -> &[(String, Range<usize>)];
    /// Projects parameters back into their valid range after an optimizer
    /// step. Default: no constraint.
    fn clamp_params(&mut self) {}

    fn occupancy(&self, x: &Vec3) -> f64;
    /// Gradient of occupancy with respect to position.
    fn spatial_gradient(&self, x: &Vec3) -> Vec3;

    fn feature_len(&self) -> usize {
        0
    }
    fn feature(&self, _x: &Vec3, out: &mut Vec<f64>) {
        out.clear();
    }

    fn color(&self, x: &Vec3, dir: &Vec3, normal: &Vec3, feature: &[f64]) -> Rgb;
    /// Whether [`Field::color`] actually reads the normal and feature inputs.
    /// Callers skip computing them when this is false.
    fn color_uses_geometry(&self) -> bool {
        false
    }

    /// Accumulates `upstream * d occupancy / d params` and returns
    /// `upstream * d occupancy / d x`.
    fn occupancy_backward(&self, x: &Vec3, upstream: f64, grad: &mut ParamGrad) -> Vec3;

    /// Accumulates `upstream . d color / d params` and returns the gradients
    /// with respect to the color inputs.
    fn color_backward(
        &self,
        x: &Vec3,
        dir: &Vec3,
        normal: &Vec3,
        feature: &[f64],
        upstream: &Rgb,
        grad: &mut ParamGrad,
    ) -> ColorInputGrads;

    /// Accumulates the gradients of `sum_i upstream[i] * feature(x)[i]` and
    /// returns the position gradient.
    fn feature_backward(&self, _x: &Vec3, _upstream: &[f64], _grad: &mut ParamGrad) -> Vec3 {
        Vec3::zeros()
    }

    /// Coarse-to-fine weights for the positional Fourier octaves. Fields
    /// without a frequency decomposition ignore this.
    fn set_octave_weights(&mut self, _weights: &[f64]) {}

    /// Number of positional Fourier octaves the field consumes; zero for
    /// fields without a frequency decomposition.
    fn position_octaves(&self) -> usize {
        0
    }
}

/// Outward surface normal `-grad o / |grad o|`; occupancy decreases outward.
pub fn surface_normal(field: &dyn Field, x: &Vec3) -> Result<Vec3, FieldError> {
    let g = field.spatial_gradient(x);
    let n = g.norm();
    if n <= 1e-12 {
        return Err(FieldError::DegenerateGradient(n));
    }
    Ok(-g / n)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Buildable description of a learnable field, used by configs and
/// checkpoints.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldConfig {
    Grid(GridConfig),
    Mlp(MlpConfig),
}

impl FieldConfig {
    pub fn build(&self, seed: u64) -> Box<dyn Field> {
        match self {
            FieldConfig::Grid(cfg) => Box::new(GridField::new(cfg.clone())),
            FieldConfig::Mlp(cfg) => Box::new(MlpField::new(cfg.clone(), seed)),
        }
    }
}
