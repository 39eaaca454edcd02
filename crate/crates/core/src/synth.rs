//! Fully ground-truthed synthetic scanning sequences.
//!
//! An analytic object orbits (or tumbles) in front of a fixed camera — the
//! generated data stores the camera-to-object pose per frame, color, label
//! masks (background / object / hand), expected depth, and optical flow
//! obtained by reprojecting each frame's surface points into the next
//! frame. An optional capsule "finger" rigidly attached to the object
//! produces realistic hand occlusion labels.

use crate::dataset::{
    save_dataset, Dataset, DatasetError, FrameObservation, FlowField, LabelMask,
    LABEL_BACKGROUND, LABEL_HAND, LABEL_OBJECT,
};
use crate::fields::{extract_mesh, AnalyticField, Field, MeshError, Rgb, Shape, Texture};
use crate::geometry::{
    pixel_to_ray, project, Camera, GeometryError, Pixel, Pose, Trajectory, Vec3,
};
use crate::render::{mix_seed, render_frame, DepthRaster, RenderConfig, RenderError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("frame count must be at least 2, got {0}")]
    TooFewFrames(usize),
    #[error("noise levels must be nonnegative")]
    NegativeNoise,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("serializing the scene description failed: {0}")]
    Encode(#[from] toml::ser::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct NoiseSpec {
    /// Per-channel Gaussian color noise (clamped to [0, 1] afterwards).
    #[serde(default)]
    pub pixel_sigma: f64,
    /// Probability of flipping an object/background label.
    #[serde(default)]
    pub mask_flip_rate: f64,
    /// Gaussian noise on each defined flow component, in pixels.
    #[serde(default)]
    pub flow_sigma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { pixel_sigma: 0.0, mask_flip_rate: 0.0, flow_sigma: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OccluderSpec {
    None,
    /// A capsule finger rigidly attached to the object; `coverage` sets its
    /// radius as a fraction of the object's bounding radius.
    Capsule { coverage: f64 },
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// Equatorial circle at a constant angular rate.
    Orbit { degrees_per_frame: f64 },
    /// Orbit with a sinusoidal elevation sweep for fuller view coverage.
    Tumble { yaw_per_frame: f64, pitch_amplitude: f64, pitch_periods: f64 },
    /// One equatorial sweep spanning a fixed total angle; with an elongated
    /// object the apparent area oscillates, exercising the splitter.
    AreaVarying { total_degrees: f64 },
}

fn default_distance() -> f64 {
    2.5
}

fn default_samples_per_ray() -> usize {
    96
}

fn default_seed() -> u64 {
    0
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub texture: Texture,
    /// Occupancy transition width of the analytic field.
    pub sharpness: f64,
    pub trajectory: TrajectoryKind,
    pub frame_count: usize,
    pub camera: Camera,
    /// Camera center distance from the object origin.
    #[serde(default = "default_distance")]
    pub distance: f64,
    #[serde(default = "default_samples_per_ray")]
    pub samples_per_ray: usize,
    pub occluder: OccluderSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl SceneSpec {
    fn validate(&self) -> Result<(), SynthError> {
        if self.frame_count < 2 {
            return Err(SynthError::TooFewFrames(self.frame_count));
        }
        let n = &self.noise;
        if n.pixel_sigma < 0.0 || n.mask_flip_rate < 0.0 || n.flow_sigma < 0.0 {
            return Err(SynthError::NegativeNoise);
        }
        Ok(())
    }

    pub fn field(&self) -> AnalyticField {
        AnalyticField::new(self.shape.clone(), self.texture.clone(), self.sharpness)
    }
}

/// Ground-truth camera-to-object poses for the requested trajectory.
pub fn generate_trajectory(spec: &SceneSpec) -> Result<Vec<Pose>, GeometryError> {
    let n = spec.frame_count;
    let d = spec.distance;
    (0..n)
        .map(|i| {
            let center = match spec.trajectory {
                TrajectoryKind::Orbit { degrees_per_frame } => {
                    let theta = (degrees_per_frame * i as f64).to_radians();
                    Vec3::new(d * theta.sin(), 0.0, -d * theta.cos())
                }
                TrajectoryKind::Tumble { yaw_per_frame, pitch_amplitude, pitch_periods } => {
                    let theta = (yaw_per_frame * i as f64).to_radians();
                    let phase = 2.0 * std::f64::consts::PI * pitch_periods * i as f64
                        / (n as f64 - 1.0);
                    let phi = pitch_amplitude.to_radians() * phase.sin();
                    Vec3::new(
                        d * phi.cos() * theta.sin(),
                        d * phi.sin(),
                        -d * phi.cos() * theta.cos(),
                    )
                }
                TrajectoryKind::AreaVarying { total_degrees } => {
                    let theta = (total_degrees * i as f64 / (n as f64 - 1.0)).to_radians();
                    Vec3::new(d * theta.sin(), 0.0, -d * theta.cos())
                }
            };
            crate::geometry::look_at_origin(&center, &Vec3::y())
        })
        .collect()
}

/// Capsule attached to the object's lower front: it occludes roughly half
/// of the orbit, exercising the hand label without hiding the object.
struct Capsule {
    a: Vec3,
    b: Vec3,
    radius: f64,
}

impl Capsule {
    fn from_spec(shape: &Shape, coverage: f64) -> Self {
        let r = shape.bounding_radius();
        Capsule {
            a: Vec3::new(0.0, -0.2 * r, 0.6 * r),
            b: Vec3::new(0.0, -1.4 * r, 0.6 * r),
            radius: coverage * r,
        }
    }

    fn sdf(&self, p: &Vec3) -> f64 {
        let ab = self.b - self.a;
        let t = ((p - self.a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
        (p - self.a - ab * t).norm() - self.radius
    }

    /// First ray hit by sphere tracing; the SDF is exact, so the March is
    /// conservative.
    fn first_hit(&self, origin: &Vec3, direction: &Vec3, far: f64) -> Option<f64> {
        let mut t = 1e-4;
        for _ in 0..256 {
            let d = self.sdf(&(origin + direction * t));
            if d < 1e-7 {
                return Some(t);
            }
            t += d;
            if t > far {
                return None;
            }
        }
        None
    }
}

const HAND_COLOR: Rgb = Rgb::new(0.78, 0.6, 0.5);

struct GeneratedFrame {
    color: crate::render::ColorImage,
    labels: LabelMask,
    /// Labels before observation noise; flow validity uses these.
    clean_labels: LabelMask,
    depth: DepthRaster,
}

fn generate_frame(
    field: &AnalyticField,
    spec: &SceneSpec,
    pose: &Pose,
    capsule: Option<&Capsule>,
    index: usize,
) -> Result<GeneratedFrame, SynthError> {
    let camera = &spec.camera;
    let cfg = RenderConfig {
        samples_per_ray: spec.samples_per_ray,
        stratified: false,
        background: [0.0, 0.0, 0.0],
        bound_radius: field.bounds().max.x.max(1.5),
    };
    let rendered = render_frame(field, camera, pose, &cfg, mix_seed(spec.seed, index as u64))?;
    let (w, h) = (camera.width as usize, camera.height as usize);
    let mut color = rendered.color;
    let mut labels = LabelMask::new(w, h);
    let far = pose.center().norm() + cfg.bound_radius * 2.0;
    for y in 0..h {
        for x in 0..w {
            let object = rendered.mask.get(x, y) > 0.5;
            let mut label = if object { LABEL_OBJECT } else { LABEL_BACKGROUND };
            if let Some(capsule) = capsule {
                let pixel = Pixel::new(x as f64, y as f64);
                let ray = pixel_to_ray(camera, pose, &pixel).expect("pixel inside image");
                if let Some(t_hand) = capsule.first_hit(&ray.origin, &ray.direction, far) {
                    let t_object = rendered.depth.get(x, y);
                    if !object || t_object.is_nan() || t_hand < t_object {
                        label = LABEL_HAND;
                        color.set(x, y, HAND_COLOR);
                    }
                }
            }
            labels.set(x, y, label);
        }
    }
    let clean_labels = labels.clone();

    if spec.noise.pixel_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(spec.seed, 1), index as u64));
        let normal = Normal::new(0.0, spec.noise.pixel_sigma).expect("validated sigma");
        for y in 0..h {
            for x in 0..w {
                let mut c = color.get(x, y);
                for ch in 0..3 {
                    c[ch] = (c[ch] + normal.sample(&mut rng)).clamp(0.0, 1.0);
                }
                color.set(x, y, c);
            }
        }
    }
    if spec.noise.mask_flip_rate > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(spec.seed, 2), index as u64));
        for y in 0..h {
            for x in 0..w {
                if rng.gen::<f64>() < spec.noise.mask_flip_rate {
                    match labels.get(x, y) {
                        LABEL_OBJECT => labels.set(x, y, LABEL_BACKGROUND),
                        LABEL_BACKGROUND => labels.set(x, y, LABEL_OBJECT),
                        _ => {}
                    }
                }
            }
        }
    }
    Ok(GeneratedFrame { color, labels, clean_labels, depth: rendered.depth })
}

/// Flow from frame `i-1` to frame `i` on frame `i-1`'s grid: each visible
/// object pixel's surface point is reprojected into frame `i`. Pixels whose
/// point leaves frame `i`'s view or lands behind the capsule are undefined.
fn generate_flow(
    spec: &SceneSpec,
    prev: &GeneratedFrame,
    prev_pose: &Pose,
    pose: &Pose,
    capsule: Option<&Capsule>,
    index: usize,
) -> FlowField {
    let camera = &spec.camera;
    let (w, h) = (camera.width as usize, camera.height as usize);
    let mut flow = FlowField::new(w, h);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(spec.seed, 3), index as u64));
    let noise = (spec.noise.flow_sigma > 0.0)
        .then(|| Normal::new(0.0, spec.noise.flow_sigma).expect("validated sigma"));
    for y in 0..h {
        for x in 0..w {
            if prev.clean_labels.get(x, y) != LABEL_OBJECT {
                continue;
            }
            let depth = prev.depth.get(x, y);
            if depth.is_nan() {
                continue;
            }
            let pixel = Pixel::new(x as f64, y as f64);
            let ray = pixel_to_ray(camera, prev_pose, &pixel).expect("pixel inside image");
            let point = ray.point_at(depth);
            let Ok(q) = project(camera, pose, &point) else { continue };
            if let Some(capsule) = capsule {
                let center = pose.center();
                let to_point = point - center;
                let dist = to_point.norm();
                if let Some(t_hand) = capsule.first_hit(&center, &(to_point / dist), dist) {
                    if t_hand < dist - 1e-6 {
                        continue;
                    }
                }
            }
            let mut value = [q.x - pixel.x, q.y - pixel.y];
            if let Some(n) = &noise {
                value[0] += n.sample(&mut rng);
                value[1] += n.sample(&mut rng);
            }
            flow.set(x, y, value);
        }
    }
    flow
}

/// Generates the full dataset in memory. Same spec (same seed) → identical
/// output, independent of thread count.
pub fn generate(spec: &SceneSpec) -> Result<Dataset, SynthError> {
    spec.validate()?;
    let field = spec.field();
    let poses = generate_trajectory(spec)?;
    let capsule = match spec.occluder {
        OccluderSpec::None => None,
        OccluderSpec::Capsule { coverage } => Some(Capsule::from_spec(&spec.shape, coverage)),
    };
    let generated: Vec<GeneratedFrame> = (0..spec.frame_count)
        .into_par_iter()
        .map(|i| generate_frame(&field, spec, &poses[i], capsule.as_ref(), i))
        .collect::<Result<_, _>>()?;
    let flows: Vec<FlowField> = (1..spec.frame_count)
        .into_par_iter()
        .map(|i| {
            generate_flow(spec, &generated[i - 1], &poses[i - 1], &poses[i], capsule.as_ref(), i)
        })
        .collect();

    let mut frames = Vec::with_capacity(spec.frame_count);
    let mut gt_depths = Vec::with_capacity(spec.frame_count);
    for (i, g) in generated.into_iter().enumerate() {
        frames.push(FrameObservation {
            color: g.color,
            labels: g.labels,
            flow: if i == 0 { None } else { Some(flows[i - 1].clone()) },
            cached_depth: None,
        });
        gt_depths.push(g.depth);
    }
    Ok(Dataset {
        camera: spec.camera,
        frames,
        gt_poses: Some(Trajectory::from_poses(poses.into_iter().enumerate())),
        gt_depths: Some(gt_depths),
    })
}

/// Resolution of the reference mesh extracted alongside a generated scene.
const GT_MESH_RESOLUTION: u32 = 128;

/// Generates and writes a dataset directory: the standard layout plus
/// `scene.toml` (the spec itself) and `gt_mesh.obj` (the object surface).
pub fn generate_to_dir(dir: &Path, spec: &SceneSpec) -> Result<Dataset, SynthError> {
    let dataset = generate(spec)?;
    save_dataset(dir, &dataset)?;
    std::fs::write(dir.join("scene.toml"), toml::to_string_pretty(spec)?)?;
    let mesh = extract_mesh(&spec.field(), GT_MESH_RESOLUTION, 0.5)?;
    mesh.save_obj(&dir.join("gt_mesh.obj"))?;
    Ok(dataset)
}
