//! Joining per-segment reconstructions into one model.
//!
//! Each tracked segment lives in its own scale-ambiguous object frame, so
//! stitching proceeds in three moves: fix every segment's scale gauge by
//! normalizing mean camera distance to one, chain the segments together
//! with rigid fits over the frames they share, and finally re-optimize a
//! fresh field together with every pose of the merged trajectory.

use crate::dataset::FrameObservation;
use crate::fields::{global_mlp, sigmoid, Field, FieldConfig, GridField, ParamGrad};
use crate::geometry::{
    fit_rigid, Camera, GeometryError, Pose, Trajectory, TrajectoryEntry, Vec3,
};
use crate::losses::{
    global_objective, Adam, AdamConfig, FrameContext, LossConfig, LossLog, RayPlanConfig,
};
use crate::render::mix_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

#[derive(Debug, thiserror::Error)]
pub enum StitchError {
    #[error("cannot normalize a trajectory whose translations are all zero")]
    AllZeroTranslations,
    #[error("there are no segments to merge")]
    NoSegments,
    #[error("segments {a} and {b} share no tracked frame")]
    DisconnectedSegments { a: usize, b: usize },
    #[error("shared frame {frame} is missing from a segment trajectory")]
    SharedFrameMissing { frame: usize },
    #[error("trajectory frame {frame} is outside the {available}-frame sequence")]
    FrameOutOfRange { frame: usize, available: usize },
    #[error("refinement objective diverged at iteration {iteration} (value {value})")]
    DivergedLoss { iteration: u64, value: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Divides every translation by the mean translation norm, fixing the
/// segment's free scale gauge at "mean camera distance one". Rotations are
/// untouched. Returns the normalized copy and the divisor; the copy's
/// `scale` field accumulates the divisor so original units stay
/// recoverable. Applying it twice is a no-op (the second divisor is one).
pub fn normalize_scale(traj: &Trajectory) -> Result<(Trajectory, f64), StitchError> {
    if traj.entries.is_empty() {
        return Err(StitchError::AllZeroTranslations);
    }
    let mean = traj.entries.iter().map(|e| e.pose.translation.norm()).sum::<f64>()
        / traj.entries.len() as f64;
    if !(mean > 0.0) {
        return Err(StitchError::AllZeroTranslations);
    }
    let mut out = traj.clone();
    for e in &mut out.entries {
        e.pose.translation /= mean;
    }
    out.scale = traj.scale * mean;
    Ok((out, mean))
}

/// Least-squares rigid transform taking `seg_a`'s object frame into
/// `seg_b`'s, fitted over the shared frames' pose pairs. One shared frame
/// already determines the transform exactly; both inputs should be
/// scale-normalized first so the rigid model actually fits.
pub fn align_segments(
    seg_a: &Trajectory,
    seg_b: &Trajectory,
    shared: &[usize],
) -> Result<Pose, StitchError> {
    let mut src = Vec::with_capacity(shared.len());
    let mut dst = Vec::with_capacity(shared.len());
    for &frame in shared {
        let a = seg_a.pose_of(frame).ok_or(StitchError::SharedFrameMissing { frame })?;
        let b = seg_b.pose_of(frame).ok_or(StitchError::SharedFrameMissing { frame })?;
        src.push(*a);
        dst.push(*b);
    }
    Ok(fit_rigid(&src, &dst)?)
}

/// Chains scale-normalized segment trajectories (given in capture order)
/// into one trajectory covering every frame once.
///
/// The first segment pins the unified frame; each later segment is rigidly
/// mapped onto the poses merged so far over the frames both sides cover.
/// Entries are re-sorted by frame index, which also folds backward-tracked
/// segments into capture order. Where two segments cover the same frame
/// the earlier segment's pose is kept. The output inherits the first
/// segment's `scale`.
pub fn merge_all(segments: &[Trajectory]) -> Result<Trajectory, StitchError> {
    let mut parts = segments.to_vec();
    for p in &mut parts {
        p.entries.sort_by_key(|e| e.frame);
    }
    let Some(first) = parts.first() else {
        return Err(StitchError::NoSegments);
    };
    let mut merged = first.clone();
    for (i, part) in parts.iter().enumerate().skip(1) {
        let shared: Vec<usize> = part
            .entries
            .iter()
            .map(|e| e.frame)
            .filter(|&f| merged.pose_of(f).is_some())
            .collect();
        if shared.is_empty() {
            return Err(StitchError::DisconnectedSegments { a: i - 1, b: i });
        }
        let map = align_segments(part, &merged, &shared)?;
        for e in &part.entries {
            if merged.pose_of(e.frame).is_none() {
                merged.entries.push(TrajectoryEntry { frame: e.frame, pose: map.compose(&e.pose) });
            }
        }
    }
    merged.entries.sort_by_key(|e| e.frame);
    Ok(merged)
}

/// Uniform-stride selection keeping at most `max` of `n` frames while
/// covering the whole span: stride `ceil(n / max)` starting at zero.
pub fn subsample_indices(n: usize, max: usize) -> Vec<usize> {
    if n == 0 || max == 0 {
        return Vec::new();
    }
    (0..n).step_by(n.div_ceil(max)).collect()
}

/// Iterations and batch size of the network pre-fit in [`sphere_field`].
const SPHERE_FIT_ITERATIONS: usize = 300;
const SPHERE_FIT_BATCH: usize = 512;

/// Builds a field whose occupancy starts out as a centered sphere of the
/// given radius. Grid logits are written directly (zero at the radius,
/// one-cell transition width); networks are briefly regressed onto the
/// same soft target from a seed-fixed sample stream.
pub fn sphere_field(cfg: &FieldConfig, radius: f64, seed: u64) -> Box<dyn Field> {
    match cfg {
        FieldConfig::Grid(grid_cfg) => {
            let mut field = GridField::new(grid_cfg.clone());
            let cell = 2.0 * grid_cfg.half_extent / (grid_cfg.resolution.max(2) - 1) as f64;
            field.fill_occupancy_logits(|x| (radius - x.norm()) / cell);
            Box::new(field)
        }
        FieldConfig::Mlp(_) => {
            let mut field = cfg.build(seed);
            regress_to_sphere(field.as_mut(), radius, mix_seed(seed, 0x5fe7e));
            field
        }
    }
}

fn regress_to_sphere(field: &mut dyn Field, radius: f64, seed: u64) {
    let bounds = field.bounds();
    let size = bounds.size();
    let width = 0.2 * radius;
    let mut opt = Adam::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() }, field.param_len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sparse = ParamGrad::default();
    let mut dense = vec![0.0; field.param_len()];
    for _ in 0..SPHERE_FIT_ITERATIONS {
        sparse.clear();
        dense.fill(0.0);
        for _ in 0..SPHERE_FIT_BATCH {
            let x = bounds.min
                + Vec3::new(
                    rng.gen::<f64>() * size.x,
                    rng.gen::<f64>() * size.y,
                    rng.gen::<f64>() * size.z,
                );
            let target = sigmoid((radius - x.norm()) / width);
            let upstream = 2.0 * (field.occupancy(&x) - target) / SPHERE_FIT_BATCH as f64;
            field.occupancy_backward(&x, upstream, &mut sparse);
        }
        sparse.scatter_into(&mut dense);
        opt.step(field.params_mut(), &dense);
        field.clamp_params();
    }
}

fn default_global_field() -> FieldConfig {
    FieldConfig::Mlp(global_mlp())
}

fn default_global_iterations() -> usize {
    25_000
}

fn default_max_frames() -> usize {
    150
}

fn default_sphere_radius() -> f64 {
    0.5
}

fn default_global_theta_optimizer() -> AdamConfig {
    AdamConfig { lr: 1e-3, ..AdamConfig::default() }
}

fn default_log_every() -> u64 {
    100
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GlobalConfig {
    #[serde(default = "default_global_field")]
    pub field: FieldConfig,
    #[serde(default = "default_global_iterations")]
    pub iterations: usize,
    /// Upper bound on the frames entering the refinement; longer inputs
    /// are subsampled at a uniform stride.
    #[serde(default = "default_max_frames")]
    pub max_frames: usize,
    /// Radius of the sphere the fresh field is pre-fitted to.
    #[serde(default = "default_sphere_radius")]
    pub sphere_radius: f64,
    #[serde(default)]
    pub rays: RayPlanConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default = "default_global_theta_optimizer")]
    pub theta_optimizer: AdamConfig,
    #[serde(default)]
    pub pose_optimizer: AdamConfig,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        GlobalConfig {
            field: default_global_field(),
            iterations: default_global_iterations(),
            max_frames: default_max_frames(),
            sphere_radius: default_sphere_radius(),
            rays: RayPlanConfig::default(),
            loss: LossConfig::default(),
            theta_optimizer: default_global_theta_optimizer(),
            pose_optimizer: AdamConfig::default(),
            log_every: default_log_every(),
            seed: 0,
        }
    }
}

pub struct GlobalResult {
    pub field: Box<dyn Field>,
    pub trajectory: Trajectory,
    pub log: LossLog,
}

/// Window of recent objective values used for divergence detection.
const DIVERGENCE_WINDOW: usize = 500;
const DIVERGENCE_FACTOR: f64 = 10.0;

/// Joint refinement of a fresh sphere-initialized field and every merged
/// pose. Long inputs are thinned to `max_frames`; the field's positional
/// frequency octaves open linearly over the run so coarse structure
/// settles before detail. Per-segment depth caches are stale under the
/// re-gauged poses and are not used; flow rasters stay in play wherever
/// the subsampling kept consecutive captures adjacent.
pub fn global_optimize(
    camera: &Camera,
    frames: &[FrameObservation],
    merged: &Trajectory,
    cfg: &GlobalConfig,
) -> Result<GlobalResult, StitchError> {
    if merged.entries.is_empty() {
        return Err(StitchError::NoSegments);
    }
    if let Some(e) = merged.entries.iter().find(|e| e.frame >= frames.len()) {
        return Err(StitchError::FrameOutOfRange { frame: e.frame, available: frames.len() });
    }
    let picked = subsample_indices(merged.entries.len(), cfg.max_frames);
    let selected: Vec<&TrajectoryEntry> = picked.iter().map(|&i| &merged.entries[i]).collect();
    let mut poses: Vec<Pose> = selected.iter().map(|e| e.pose).collect();
    let window: Vec<FrameObservation> = selected
        .iter()
        .map(|e| {
            let mut obs = frames[e.frame].clone();
            obs.cached_depth = None;
            obs
        })
        .collect();
    let contexts: Vec<FrameContext> = window
        .iter()
        .enumerate()
        .map(|(w, obs)| FrameContext {
            obs,
            flow_from: (w > 0
                && obs.flow.is_some()
                && selected[w].frame == selected[w - 1].frame + 1)
                .then(|| w - 1),
            use_cached_depth: false,
        })
        .collect();

    let mut field = sphere_field(&cfg.field, cfg.sphere_radius, cfg.seed);
    let mut theta_opt = Adam::new(cfg.theta_optimizer, field.param_len());
    let mut pose_opt = Adam::new(cfg.pose_optimizer, poses.len() * 6);
    let mut log = LossLog::default();
    let mut recent: VecDeque<f64> = VecDeque::with_capacity(DIVERGENCE_WINDOW);
    let denom = (cfg.iterations.max(2) - 1) as f64;
    for it in 0..cfg.iterations as u64 {
        let progress = it as f64 / denom;
        let eval = global_objective(
            field.as_mut(),
            camera,
            &poses,
            &contexts,
            &cfg.rays,
            &cfg.loss,
            progress,
            mix_seed(cfg.seed, it),
        );
        let total = eval.terms.total();
        if !total.is_finite() {
            return Err(StitchError::DivergedLoss { iteration: it, value: total });
        }
        if recent.len() == DIVERGENCE_WINDOW {
            let reference = *recent.front().expect("window is full");
            if total > DIVERGENCE_FACTOR * reference + 1e-12 {
                return Err(StitchError::DivergedLoss { iteration: it, value: total });
            }
            recent.pop_front();
        }
        recent.push_back(total);

        theta_opt.step(field.params_mut(), &eval.theta_grad);
        field.clamp_params();
        pose_opt.step_poses(&mut poses, &eval.pose_grads);

        if it % cfg.log_every == 0 {
            log.push(it, eval.terms);
        }
    }

    let entries = selected
        .iter()
        .zip(&poses)
        .map(|(e, pose)| TrajectoryEntry { frame: e.frame, pose: *pose })
        .collect();
    Ok(GlobalResult { field, trajectory: Trajectory::new(entries, merged.scale), log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{extract_mesh, GridConfig, MlpConfig, Shape, Texture};
    use crate::geometry::look_at_origin;
    use crate::losses::LossWeights;
    use crate::synth::{generate, NoiseSpec, OccluderSpec, SceneSpec, TrajectoryKind};
    use nalgebra::UnitQuaternion;

    /// Camera centers on a horizontal circle of radius `rho`, image plane
    /// facing the origin, `step_deg` apart.
    fn orbit(frames: usize, step_deg: f64, rho: f64) -> Trajectory {
        Trajectory::from_poses((0..frames).map(|i| {
            let th = (i as f64 * step_deg).to_radians();
            let center = Vec3::new(rho * th.sin(), 0.0, -rho * th.cos());
            (i, look_at_origin(&center, &Vec3::y()).unwrap())
        }))
    }

    fn warp(traj: &Trajectory, scale: f64, rot: &UnitQuaternion<f64>, shift: &Vec3) -> Trajectory {
        let mut out = traj.clone();
        for e in &mut out.entries {
            e.pose.rotation = rot * e.pose.rotation;
            e.pose.translation = rot * (e.pose.translation * scale) + shift;
        }
        out
    }

    fn slice(traj: &Trajectory, frames: std::ops::RangeInclusive<usize>) -> Trajectory {
        Trajectory::new(
            traj.entries.iter().filter(|e| frames.contains(&e.frame)).cloned().collect(),
            traj.scale,
        )
    }

    #[test]
    fn normalization_divides_by_the_mean_translation_norm() {
        let quat = UnitQuaternion::from_scaled_axis(Vec3::new(0.3, -0.2, 0.5));
        let traj = Trajectory::from_poses([1.0, 2.0, 3.0].iter().enumerate().map(|(i, &d)| {
            (i, Pose::new(quat, Vec3::new(0.0, d, 0.0)))
        }));
        let (out, divisor) = normalize_scale(&traj).unwrap();
        assert_eq!(divisor, 2.0);
        assert_eq!(out.scale, 2.0);
        let norms: Vec<f64> = out.entries.iter().map(|e| e.pose.translation.norm()).collect();
        assert_eq!(norms, vec![0.5, 1.0, 1.5]);
        for (a, b) in traj.entries.iter().zip(&out.entries) {
            // Rotations come through bit-for-bit.
            assert_eq!(a.pose.rotation, b.pose.rotation);
        }
        let (again, second) = normalize_scale(&out).unwrap();
        assert!((second - 1.0).abs() < 1e-12, "second divisor {second}");
        assert!((again.scale - 2.0).abs() < 1e-12);
    }

    #[test]
    fn normalization_rejects_zero_translations() {
        let traj = Trajectory::from_poses((0..3).map(|i| (i, Pose::identity())));
        assert!(matches!(normalize_scale(&traj), Err(StitchError::AllZeroTranslations)));
        assert!(matches!(
            normalize_scale(&Trajectory::default()),
            Err(StitchError::AllZeroTranslations)
        ));
    }

    #[test]
    fn alignment_recovers_an_exact_rigid_offset() {
        let seg_a = orbit(8, 5.0, 2.5);
        let gauge = Pose::new(
            UnitQuaternion::from_scaled_axis(Vec3::new(0.4, 0.9, -0.3)),
            Vec3::new(0.2, -0.7, 0.4),
        );
        let seg_b = Trajectory::from_poses(
            seg_a.entries.iter().map(|e| (e.frame, gauge.compose(&e.pose))),
        );
        let got = align_segments(&seg_a, &seg_b, &[2, 5]).unwrap();
        assert!(got.angle_to(&gauge) < 1e-9);
        assert!((got.translation - gauge.translation).norm() < 1e-9);

        // A single shared frame still pins that frame exactly.
        let got = align_segments(&seg_a, &seg_b, &[3]).unwrap();
        let mapped = got.compose(seg_a.pose_of(3).unwrap());
        let want = seg_b.pose_of(3).unwrap();
        assert!(mapped.angle_to(want) < 1e-9);
        assert!((mapped.translation - want.translation).norm() < 1e-9);

        // Pre-rotating the source folds the extra rotation into the result.
        let pre = Pose::new(UnitQuaternion::from_scaled_axis(Vec3::new(0.0, 0.6, 0.0)), Vec3::zeros());
        let twisted = Trajectory::from_poses(
            seg_a.entries.iter().map(|e| (e.frame, pre.compose(&e.pose))),
        );
        let got = align_segments(&twisted, &seg_b, &[2, 5]).unwrap();
        let want = gauge.compose(&pre.inverse());
        assert!(got.angle_to(&want) < 1e-9);
        assert!((got.translation - want.translation).norm() < 1e-9);
    }

    #[test]
    fn alignment_rotation_survives_scale_and_offset() {
        // With a translation offset in the gauge, scale normalization can
        // no longer cancel the warp exactly — but the fitted rotation is
        // still exact because both the rotation products and the centered
        // translations vote for the same rotation.
        let full = orbit(24, 3.0, 2.5);
        let seg_a = slice(&full, 0..=13);
        let seg_b = slice(&full, 11..=23);
        let rot = UnitQuaternion::from_scaled_axis(Vec3::new(-0.5, 0.8, 0.6));
        let warped = warp(&seg_b, 1.7, &rot, &Vec3::new(0.3, -0.2, 0.5));
        let (na, _) = normalize_scale(&seg_a).unwrap();
        let (nb, _) = normalize_scale(&warped).unwrap();
        let got = align_segments(&na, &nb, &[11, 12, 13]).unwrap();
        assert!(got.rotation.angle_to(&rot) < 1e-6, "rotation error {}", got.rotation.angle_to(&rot));
    }

    #[test]
    fn alignment_reports_missing_frames_and_empty_overlap() {
        let seg = orbit(4, 5.0, 2.5);
        assert!(matches!(
            align_segments(&seg, &seg, &[9]),
            Err(StitchError::SharedFrameMissing { frame: 9 })
        ));
        assert!(matches!(
            align_segments(&seg, &seg, &[]),
            Err(StitchError::Geometry(GeometryError::DegenerateInput(_)))
        ));
    }

    #[test]
    fn merging_one_segment_is_the_identity() {
        let seg = orbit(6, 4.0, 2.5);
        let merged = merge_all(std::slice::from_ref(&seg)).unwrap();
        assert_eq!(merged, seg);
        assert!(matches!(merge_all(&[]), Err(StitchError::NoSegments)));
    }

    #[test]
    fn merging_covers_every_frame_once_in_capture_order() {
        let full = orbit(30, 2.0, 2.5);
        let a = slice(&full, 0..=11);
        // The middle segment arrives in backward tracking order.
        let mut b = slice(&full, 9..=21);
        b.entries.reverse();
        let c = slice(&full, 19..=29);
        let rot = UnitQuaternion::from_scaled_axis(Vec3::new(0.2, -0.4, 0.3));
        let b = warp(&b, 1.0, &rot, &Vec3::new(0.1, 0.2, -0.3));
        let merged = merge_all(&[a.clone(), b.clone(), c.clone()]).unwrap();

        let frames: Vec<usize> = merged.entries.iter().map(|e| e.frame).collect();
        assert_eq!(frames, (0..30).collect::<Vec<_>>());
        // Overlap frames keep the earlier segment's pose.
        assert_eq!(merged.pose_of(9), a.pose_of(9));
        assert_eq!(merged.pose_of(11), a.pose_of(11));
        // Relative poses inside each input survive the merge.
        for (i, j) in [(12, 18), (20, 27)] {
            let est = merged.pose_of(i).unwrap().inverse().compose(merged.pose_of(j).unwrap());
            let want = full.pose_of(i).unwrap().inverse().compose(full.pose_of(j).unwrap());
            assert!(est.angle_to(&want) < 1e-9);
            assert!((est.translation - want.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn merging_round_trips_a_scale_and_rotation_gauge() {
        // Second half re-gauged by a rotation plus a pure scale about the
        // origin: exactly the freedom a fresh tracker run has, and exactly
        // what normalization plus a rigid fit must undo.
        let rho = 2.5;
        let full = orbit(30, 2.0, rho);
        let a = slice(&full, 0..=16);
        let b = slice(&full, 14..=29);
        let rot = UnitQuaternion::from_scaled_axis(Vec3::new(0.7, -0.2, 0.4));
        let warped = warp(&b, 1.7, &rot, &Vec3::zeros());
        let (na, _) = normalize_scale(&a).unwrap();
        let (nb, _) = normalize_scale(&warped).unwrap();
        let merged = merge_all(&[na, nb]).unwrap();

        let errors = crate::metrics::ate(&merged, &full).unwrap();
        let max = errors.iter().cloned().fold(0.0, f64::max);
        assert!(max < 1e-6 * rho, "aligned trajectory error {max:.3e}");
        // Relative rotations across the seam match ground truth.
        for (i, j) in [(5, 25), (10, 20), (0, 29)] {
            let est = merged.pose_of(i).unwrap().inverse().compose(merged.pose_of(j).unwrap());
            let want = full.pose_of(i).unwrap().inverse().compose(full.pose_of(j).unwrap());
            assert!(est.rotation.angle_to(&want.rotation) < 1e-6);
        }
    }

    #[test]
    fn merging_disjoint_segments_fails() {
        let full = orbit(20, 3.0, 2.5);
        let a = slice(&full, 0..=8);
        let b = slice(&full, 12..=19);
        assert!(matches!(
            merge_all(&[a, b]),
            Err(StitchError::DisconnectedSegments { a: 0, b: 1 })
        ));
    }

    #[test]
    fn subsampling_strides_uniformly_to_the_cap() {
        assert_eq!(subsample_indices(300, 150).len(), 150);
        assert_eq!(subsample_indices(300, 150)[..3], [0, 2, 4]);
        assert_eq!(*subsample_indices(300, 150).last().unwrap(), 298);
        assert_eq!(subsample_indices(100, 150), (0..100).collect::<Vec<_>>());
        let thin = subsample_indices(301, 150);
        assert!(thin.len() <= 150);
        assert_eq!(thin[1], 3);
        assert!(subsample_indices(0, 150).is_empty());
    }

    #[test]
    fn sphere_start_puts_the_grid_surface_at_the_radius() {
        let cfg = FieldConfig::Grid(GridConfig {
            resolution: 32,
            half_extent: 1.2,
            logit_clamp: 5.0,
            color_clamp: 6.0,
        });
        let field = sphere_field(&cfg, 0.5, 0);
        let mesh = extract_mesh(field.as_ref(), 48, 0.5).unwrap();
        assert!(!mesh.vertices.is_empty());
        let cell = 2.0 * 1.2 / 31.0;
        for v in &mesh.vertices {
            assert!((v.norm() - 0.5).abs() < 2.0 * cell, "vertex radius {}", v.norm());
        }
    }

    #[test]
    fn sphere_start_regresses_a_network_onto_the_radius() {
        let cfg = FieldConfig::Mlp(MlpConfig {
            hidden: 32,
            layers: 3,
            k_pos: 4,
            k_dir: 2,
            feature_len: 8,
            half_extent: 1.2,
        });
        let field = sphere_field(&cfg, 0.5, 7);
        let mesh = extract_mesh(field.as_ref(), 32, 0.5).unwrap();
        assert!(!mesh.vertices.is_empty());
        let radii: Vec<f64> = mesh.vertices.iter().map(|v| v.norm()).collect();
        let mean = radii.iter().sum::<f64>() / radii.len() as f64;
        assert!((mean - 0.5).abs() < 0.08, "mean vertex radius {mean}");
        for r in radii {
            assert!((r - 0.5).abs() < 0.2, "vertex radius {r}");
        }
    }

    #[test]
    fn refinement_from_true_poses_lowers_the_objective() {
        let dataset = generate(&SceneSpec {
            shape: Shape::Sphere { radius: 0.7 },
            texture: Texture::Checker { scale: 0.45, a: [0.85, 0.3, 0.2], b: [0.2, 0.45, 0.85] },
            sharpness: 5e-3,
            trajectory: TrajectoryKind::Orbit { degrees_per_frame: 6.0 },
            frame_count: 6,
            camera: Camera::new(40.0, 40.0, 15.5, 15.5, 32, 32).unwrap(),
            distance: 2.5,
            samples_per_ray: 64,
            occluder: OccluderSpec::None,
            noise: NoiseSpec::default(),
            seed: 11,
        })
        .unwrap();
        let cfg = GlobalConfig {
            field: FieldConfig::Grid(GridConfig {
                resolution: 24,
                half_extent: 1.2,
                logit_clamp: 5.0,
                color_clamp: 6.0,
            }),
            iterations: 400,
            rays: RayPlanConfig {
                rays_per_batch: 256,
                samples_per_ray: 24,
                ..RayPlanConfig::default()
            },
            loss: LossConfig {
                weights: LossWeights { reg: 0.01, ..LossWeights::default() },
                ..LossConfig::default()
            },
            theta_optimizer: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
            log_every: 50,
            seed: 3,
            ..GlobalConfig::default()
        };
        let merged = dataset.gt_poses.clone().unwrap();
        let result = global_optimize(&dataset.camera, &dataset.frames, &merged, &cfg).unwrap();
        assert_eq!(result.trajectory.entries.len(), 6);
        let first = result.log.rows.first().unwrap().1.total();
        let last = result.log.rows.last().unwrap().1.total();
        assert!(last.is_finite() && last < 0.6 * first, "objective {first:.4} -> {last:.4}");
        // The grid's surface should have moved off the 0.5 sphere toward
        // the true 0.7 radius.
        let mesh = extract_mesh(result.field.as_ref(), 32, 0.5).unwrap();
        let mean = mesh.vertices.iter().map(|v| v.norm()).sum::<f64>() / mesh.vertices.len() as f64;
        assert!((mean - 0.7).abs() < 0.12, "mean vertex radius {mean}");
    }

    #[test]
    fn refinement_rejects_out_of_range_frames() {
        let camera = Camera::new(40.0, 40.0, 15.5, 15.5, 32, 32).unwrap();
        let merged = orbit(3, 2.0, 2.5);
        let err = global_optimize(&camera, &[], &merged, &GlobalConfig::default());
        assert!(matches!(err, Err(StitchError::FrameOutOfRange { frame: 0, available: 0 })));
    }
}
