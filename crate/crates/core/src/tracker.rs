//! Per-segment incremental reconstruction and pose tracking.
//!
//! Frames are appended in small chunks; each chunk's poses start from a
//! constant-acceleration motion model and the whole window (field
//! parameters plus every pose) is then refined by stochastic gradient
//! descent on the segment objective. After a chunk settles, depth maps for
//! its frames are rendered once and cached so later iterations can anchor
//! sample depths without re-rendering.

use crate::dataset::FrameObservation;
use crate::fields::{
    logit, save_checkpoint, CheckpointError, Field, FieldConfig, GridField,
};
use crate::geometry::{
    extrapolate_pose, look_at_origin, Camera, GeometryError, Pose, Trajectory, TrajectoryError,
    Vec3,
};
use crate::losses::{
    segment_objective, Adam, AdamConfig, FrameContext, LossConfig, LossLog, LossTerms,
    RayPlanConfig,
};
use crate::render::{mix_seed, render_frame, RenderConfig, RenderError};
use crate::splitter::{Direction, Segment};
use std::collections::VecDeque;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum TrackError {
    #[error("tracker configuration is invalid: {0}")]
    InvalidConfig(&'static str),
    #[error("a tracker needs at least one frame")]
    EmptyInput,
    #[error("segment frame {frame} is outside the {available}-frame sequence")]
    FrameOutOfRange { frame: usize, available: usize },
    #[error("objective diverged at iteration {iteration} (value {value})")]
    Diverged { iteration: u64, value: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn default_iterations_per_step() -> usize {
    6000
}

fn default_frames_per_step() -> usize {
    5
}

fn default_camera_distance() -> f64 {
    2.5
}

fn default_log_every() -> u64 {
    100
}

fn default_field() -> FieldConfig {
    FieldConfig::Grid(crate::fields::GridConfig::default())
}

fn default_theta_optimizer() -> AdamConfig {
    AdamConfig { lr: 1e-2, ..AdamConfig::default() }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrackerConfig {
    #[serde(default = "default_field")]
    pub field: FieldConfig,
    /// Optimizer iterations after each appended chunk.
    #[serde(default = "default_iterations_per_step")]
    pub iterations_per_step: usize,
    /// Chunk size when a segment is fed frame-by-frame.
    #[serde(default = "default_frames_per_step")]
    pub frames_per_step: usize,
    #[serde(default)]
    pub rays: RayPlanConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default = "default_theta_optimizer")]
    pub theta_optimizer: AdamConfig,
    #[serde(default)]
    pub pose_optimizer: AdamConfig,
    /// Distance of the first camera from the object-frame origin.
    #[serde(default = "default_camera_distance")]
    pub camera_distance: f64,
    /// When set, poses outside the newest chunk stay fixed during a step.
    #[serde(default)]
    pub freeze_old_poses: bool,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            field: default_field(),
            iterations_per_step: default_iterations_per_step(),
            frames_per_step: default_frames_per_step(),
            rays: RayPlanConfig::default(),
            loss: LossConfig::default(),
            theta_optimizer: default_theta_optimizer(),
            pose_optimizer: AdamConfig::default(),
            camera_distance: default_camera_distance(),
            freeze_old_poses: false,
            log_every: default_log_every(),
            seed: 0,
        }
    }
}

impl TrackerConfig {
    fn validate(&self) -> Result<(), TrackError> {
        if self.iterations_per_step == 0 {
            return Err(TrackError::InvalidConfig("iterations_per_step must be at least 1"));
        }
        if self.frames_per_step == 0 {
            return Err(TrackError::InvalidConfig("frames_per_step must be at least 1"));
        }
        let f = self.rays.newest_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(TrackError::InvalidConfig("newest ray fraction must lie in (0, 1)"));
        }
        if !(self.camera_distance > 0.0) {
            return Err(TrackError::InvalidConfig("camera distance must be positive"));
        }
        Ok(())
    }
}

/// Fresh parameters for a new segment: grids start as a uniform faint cloud
/// (occupancy 0.1) so early silhouette gradients can both grow and carve;
/// networks start from their seeded initialization.
fn init_field(cfg: &FieldConfig, seed: u64) -> Box<dyn Field> {
    match cfg {
        FieldConfig::Grid(grid_cfg) => {
            let mut field = GridField::new(grid_cfg.clone());
            let faint = logit(0.1);
            field.fill_occupancy_logits(|_| faint);
            Box::new(field)
        }
        FieldConfig::Mlp(_) => cfg.build(seed),
    }
}

/// Mutable tracking window: the field, one pose per appended frame, and the
/// trailing `pending` frames that still await their optimization step.
pub struct TrackerState {
    pub camera: Camera,
    pub field: Box<dyn Field>,
    pub poses: Vec<Pose>,
    pub frames: Vec<FrameObservation>,
    /// Trailing frames appended but not yet optimized or depth-cached.
    pub pending: usize,
    /// Which neighbor each frame's flow raster maps from (tracking order).
    pub direction: Direction,
    pub steps_run: usize,
    /// Global optimizer iteration counter, also the ray-batch seed stream.
    pub iteration: u64,
    pub log: LossLog,
    cfg: TrackerConfig,
    theta_opt: Adam,
    pose_opt: Adam,
}

impl TrackerState {
    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    /// Number of frames whose depth cache has been written.
    pub fn cached_depth_count(&self) -> usize {
        self.frames.iter().filter(|f| f.cached_depth.is_some()).count()
    }

    fn append(&mut self, new_frames: &[FrameObservation]) -> Result<(), TrackError> {
        for obs in new_frames {
            let pose = if self.poses.is_empty() {
                look_at_origin(&Vec3::new(0.0, 0.0, -self.cfg.camera_distance), &Vec3::y())?
            } else {
                extrapolate_pose(&self.poses)?
            };
            self.poses.push(pose);
            self.pose_opt.grow(6);
            let mut obs = obs.clone();
            // Caches must come from this tracker's own field and poses.
            obs.cached_depth = None;
            self.frames.push(obs);
            self.pending += 1;
        }
        Ok(())
    }
}

/// Per-frame evaluation contexts for the current window. Flow rasters map
/// from the chronologically previous capture, which in a backward-tracked
/// segment is the *next* window entry — usable only once it has arrived.
fn frame_contexts(
    frames: &[FrameObservation],
    direction: Direction,
    newest: usize,
) -> Vec<FrameContext<'_>> {
    let n = frames.len();
    (0..n)
        .map(|w| {
            let has_flow = frames[w].flow.is_some();
            let flow_from = match direction {
                Direction::Forward => (has_flow && w >= 1).then(|| w - 1),
                Direction::Backward => (has_flow && w + 1 < n).then_some(w + 1),
            };
            FrameContext {
                obs: &frames[w],
                flow_from,
                use_cached_depth: w < n - newest && frames[w].cached_depth.is_some(),
            }
        })
        .collect()
}

/// Builds a fresh tracker over the first chunk of a segment. No
/// optimization runs yet: every supplied frame is left pending for the
/// first [`track_step`] call, all starting at the fixed-distance pose on
/// the object frame's −z axis, image plane facing the origin.
pub fn init_tracker(
    camera: &Camera,
    first_frames: &[FrameObservation],
    cfg: &TrackerConfig,
) -> Result<TrackerState, TrackError> {
    cfg.validate()?;
    if first_frames.is_empty() {
        return Err(TrackError::EmptyInput);
    }
    let field = init_field(&cfg.field, cfg.seed);
    let theta_opt = Adam::new(cfg.theta_optimizer, field.param_len());
    let pose_opt = Adam::new(cfg.pose_optimizer, 0);
    let mut state = TrackerState {
        camera: *camera,
        field,
        poses: Vec::new(),
        frames: Vec::new(),
        pending: 0,
        direction: Direction::Forward,
        steps_run: 0,
        iteration: 0,
        log: LossLog::default(),
        cfg: cfg.clone(),
        theta_opt,
        pose_opt,
    };
    state.append(first_frames)?;
    Ok(state)
}

/// Window of recent objective values used for divergence detection.
const DIVERGENCE_WINDOW: usize = 500;
const DIVERGENCE_FACTOR: f64 = 10.0;

/// Appends `new_frames` (their poses extrapolated from the motion model)
/// and runs one optimization step over the whole window, then renders and
/// caches depth for the frames that were pending. Returns the last
/// objective value, or `None` when there was nothing new to optimize.
///
/// On divergence the error is returned without applying the offending
/// update, so the state keeps its last healthy parameters.
pub fn track_step(
    state: &mut TrackerState,
    new_frames: &[FrameObservation],
) -> Result<Option<LossTerms>, TrackError> {
    state.append(new_frames)?;
    if state.pending == 0 {
        return Ok(None);
    }
    let newest = state.pending;
    let cfg = state.cfg.clone();
    let contexts = frame_contexts(&state.frames, state.direction, newest);
    let frozen = state.cfg.freeze_old_poses.then(|| state.frames.len() - newest);

    let mut recent: VecDeque<f64> = VecDeque::with_capacity(DIVERGENCE_WINDOW);
    let mut last = LossTerms::default();
    for _ in 0..cfg.iterations_per_step {
        let eval = segment_objective(
            state.field.as_ref(),
            &state.camera,
            &state.poses,
            &contexts,
            &cfg.rays,
            &cfg.loss,
            newest,
            mix_seed(cfg.seed, state.iteration),
        );
        let total = eval.terms.total();
        if !total.is_finite() {
            return Err(TrackError::Diverged { iteration: state.iteration, value: total });
        }
        if recent.len() == DIVERGENCE_WINDOW {
            let reference = *recent.front().expect("window is full");
            if total > DIVERGENCE_FACTOR * reference + 1e-12 {
                return Err(TrackError::Diverged { iteration: state.iteration, value: total });
            }
            recent.pop_front();
        }
        recent.push_back(total);

        state.theta_opt.step(state.field.params_mut(), &eval.theta_grad);
        state.field.clamp_params();
        let mut pose_grads = eval.pose_grads;
        if let Some(keep) = frozen {
            let saved = state.poses[..keep].to_vec();
            for g in &mut pose_grads[..keep] {
                *g = [0.0; 6];
            }
            state.pose_opt.step_poses(&mut state.poses, &pose_grads);
            state.poses[..keep].copy_from_slice(&saved);
        } else {
            state.pose_opt.step_poses(&mut state.poses, &pose_grads);
        }

        if state.iteration % cfg.log_every == 0 {
            state.log.push(state.iteration, eval.terms);
        }
        state.iteration += 1;
        last = eval.terms;
    }

    let render_cfg = RenderConfig {
        samples_per_ray: cfg.rays.samples_per_ray,
        stratified: false,
        background: cfg.loss.background,
        bound_radius: cfg.rays.bound_radius,
    };
    let start = state.frames.len() - newest;
    for w in start..state.frames.len() {
        let rendered =
            render_frame(state.field.as_ref(), &state.camera, &state.poses[w], &render_cfg, 0)?;
        state.frames[w].cached_depth = Some(rendered.depth);
    }
    state.pending = 0;
    state.steps_run += 1;
    Ok(Some(last))
}

/// A finished segment: the tracker window plus the dataset frame index of
/// each window entry (tracking order, so backward segments count down).
pub struct TrackedSegment {
    pub state: TrackerState,
    pub frame_ids: Vec<usize>,
}

impl TrackedSegment {
    /// Per-frame poses keyed by dataset frame index.
    pub fn trajectory(&self) -> Trajectory {
        Trajectory::from_poses(
            self.frame_ids.iter().copied().zip(self.state.poses.iter().copied()),
        )
    }
}

/// Tracks every frame of one segment in its tracking order, chunk by
/// chunk. The returned poses live in the segment's own scale-ambiguous
/// object frame.
pub fn track_segment(
    camera: &Camera,
    frames: &[FrameObservation],
    segment: &Segment,
    cfg: &TrackerConfig,
) -> Result<TrackedSegment, TrackError> {
    let order = segment.tracking_frames();
    if let Some(&bad) = order.iter().find(|&&i| i >= frames.len()) {
        return Err(TrackError::FrameOutOfRange { frame: bad, available: frames.len() });
    }
    let window: Vec<FrameObservation> = order.iter().map(|&i| frames[i].clone()).collect();
    let first = cfg.frames_per_step.min(window.len());
    let mut state = init_tracker(camera, &window[..first], cfg)?;
    state.direction = segment.direction;
    track_step(&mut state, &[])?;
    for chunk in window[first..].chunks(cfg.frames_per_step) {
        track_step(&mut state, chunk)?;
    }
    Ok(TrackedSegment { state, frame_ids: order })
}

/// Writes the standard per-segment outputs: `trajectory.csv`,
/// `field.toml`, `loss_log.csv`, and `depth/NNNN.dpth` for every cached
/// frame (named by dataset frame index).
pub fn save_tracker_outputs(dir: &Path, tracked: &TrackedSegment) -> Result<(), TrackError> {
    std::fs::create_dir_all(dir)?;
    tracked.trajectory().save_csv(&dir.join("trajectory.csv"))?;
    save_checkpoint(&dir.join("field.toml"), &tracked.state.cfg.field, tracked.state.field.as_ref())?;
    tracked.state.log.save(&dir.join("loss_log.csv"))?;
    let depth_dir = dir.join("depth");
    std::fs::create_dir_all(&depth_dir)?;
    for (w, obs) in tracked.state.frames.iter().enumerate() {
        if let Some(depth) = &obs.cached_depth {
            depth.save(&depth_dir.join(format!("{:04}.dpth", tracked.frame_ids[w])))?;
        }
    }
    Ok(())
}
