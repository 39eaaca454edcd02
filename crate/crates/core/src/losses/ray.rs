//! Ray-batch planning and the batched objective with analytic gradients.
//!
//! A batch is planned once per iteration: pixels are drawn from the non-hand
//! region of randomly chosen frames (with a quota reserved for the newest
//! frames of the window) and the sample depths along each ray are frozen
//! into the plan. Evaluating a plan then yields every loss term together
//! with gradients for the field parameters and for a local perturbation of
//! each frame pose, so the same batch can be re-evaluated while poses and
//! parameters move.

use super::{loss_seg, loss_seg_grad, LossConfig, LossTerms};
use crate::dataset::FrameObservation;
use crate::fields::{octave_mask, Field, ParamGrad, Rgb};
use crate::geometry::{Camera, Pixel, Pose, Vec3};
use crate::render::{alpha_blend, alpha_blend_backward, clip_range, render_depth, RaySamples};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::sync::Mutex;

/// Fixed number of evaluation chunks. Gradients are accumulated per chunk
/// and merged in chunk order, so results are identical for any thread count.
const EVAL_CHUNKS: usize = 16;

/// Recycled dense gradient accumulators, shared across threads so buffers
/// handed out on worker threads come back after the merge. Large fields make
/// the per-chunk buffers big enough that fresh allocations each iteration
/// dominate the runtime in page faults; reuse keeps them warm. Buffers are
/// zeroed on checkout, so pooling never changes a result.
static DENSE_POOL: Mutex<Vec<Vec<f64>>> = Mutex::new(Vec::new());

fn dense_zeros(len: usize) -> Vec<f64> {
    let mut pool = DENSE_POOL.lock().expect("gradient buffer pool poisoned");
    while let Some(mut buf) = pool.pop() {
        if buf.len() == len {
            buf.fill(0.0);
            return buf;
        }
    }
    vec![0.0; len]
}

fn recycle_dense(buf: Vec<f64>) {
    let mut pool = DENSE_POOL.lock().expect("gradient buffer pool poisoned");
    if pool.len() < 2 * EVAL_CHUNKS {
        pool.push(buf);
    }
}

fn default_rays_per_batch() -> usize {
    1024
}

fn default_newest_fraction() -> f64 {
    0.15
}

fn default_samples_per_ray() -> usize {
    64
}

fn default_stratified() -> bool {
    true
}

fn default_bound_radius() -> f64 {
    1.5
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RayPlanConfig {
    #[serde(default = "default_rays_per_batch")]
    pub rays_per_batch: usize,
    /// Fraction of the batch reserved for the newest frames of the window.
    #[serde(default = "default_newest_fraction")]
    pub newest_fraction: f64,
    #[serde(default = "default_samples_per_ray")]
    pub samples_per_ray: usize,
    /// One jittered depth per sub-interval instead of midpoints.
    #[serde(default = "default_stratified")]
    pub stratified: bool,
    /// Radius of the bounding sphere used for the per-ray clip range.
    #[serde(default = "default_bound_radius")]
    pub bound_radius: f64,
}

impl Default for RayPlanConfig {
    fn default() -> Self {
        RayPlanConfig {
            rays_per_batch: default_rays_per_batch(),
            newest_fraction: default_newest_fraction(),
            samples_per_ray: default_samples_per_ray(),
            stratified: default_stratified(),
            bound_radius: default_bound_radius(),
        }
    }
}

/// One frame of the optimization window.
pub struct FrameContext<'a> {
    pub obs: &'a FrameObservation,
    /// Window index of the frame that `obs.flow` maps from (the flow raster
    /// lives on that frame's pixel grid). `None` disables the flow term for
    /// rays of this frame.
    pub flow_from: Option<usize>,
    /// Whether rays of this frame compare against `obs.cached_depth`.
    pub use_cached_depth: bool,
}

/// A planned ray: everything fixed for the iteration (pixel, observation,
/// frozen sample depths), independent of the moving pose and parameters.
#[derive(Debug, Clone)]
pub struct RayPlan {
    /// Window index of the source frame.
    pub frame: usize,
    /// Pixel center the ray passes through.
    pub pixel: Pixel,
    /// Whether the pixel is labeled as object (color loss applies and the
    /// silhouette target is 1).
    pub is_object: bool,
    pub observed: Rgb,
    /// Frozen sample depths along the ray.
    pub depths: Vec<f64>,
    pub cached_depth: Option<f64>,
}

/// Draws a batch of rays from the window. `newest_count` marks how many
/// frames at the end of the window are "new"; a `newest_fraction` share of
/// the batch is drawn from them (all of it when there are no older frames,
/// none when `newest_count` is zero, which means uniform sampling). Hand
/// pixels are never drawn. Frames whose non-hand region is empty are
/// skipped by resampling.
pub fn sample_ray_plans(
    frames: &[FrameContext],
    poses: &[Pose],
    cfg: &RayPlanConfig,
    newest_count: usize,
    rng: &mut impl Rng,
) -> Vec<RayPlan> {
    assert_eq!(frames.len(), poses.len());
    assert!(cfg.samples_per_ray >= 2, "need at least two samples per ray");
    if frames.is_empty() || cfg.rays_per_batch == 0 {
        return Vec::new();
    }
    let n = cfg.rays_per_batch;
    let newest = newest_count.min(frames.len());
    let older = frames.len() - newest;
    let from_new = if newest == 0 {
        0
    } else if older == 0 {
        n
    } else {
        ((cfg.newest_fraction * n as f64).ceil() as usize).min(n)
    };
    let from_old = n - from_new;

    let mut eligible: Vec<Option<Vec<(usize, usize)>>> = vec![None; frames.len()];
    let mut plans = Vec::with_capacity(n);
    let draw = |range: std::ops::Range<usize>, count: usize,
                    rng: &mut dyn rand::RngCore,
                    eligible: &mut Vec<Option<Vec<(usize, usize)>>>,
                    plans: &mut Vec<RayPlan>| {
        for _ in 0..count {
            for _attempt in 0..32 {
                let f = rng.gen_range(range.clone());
                let pixels = eligible[f]
                    .get_or_insert_with(|| frames[f].obs.labels.non_hand_pixels());
                if pixels.is_empty() {
                    continue;
                }
                let (x, y) = pixels[rng.gen_range(0..pixels.len())];
                let (near, far) = clip_range(&poses[f].center(), cfg.bound_radius);
                let m = cfg.samples_per_ray;
                let step = (far - near) / m as f64;
                let mut depths = Vec::with_capacity(m);
                for k in 0..m {
                    let lo = near + step * k as f64;
                    let t = if cfg.stratified {
                        lo + step * rng.gen::<f64>()
                    } else {
                        lo + 0.5 * step
                    };
                    depths.push(t);
                }
                let cached_depth = if frames[f].use_cached_depth {
                    frames[f]
                        .obs
                        .cached_depth
                        .as_ref()
                        .filter(|raster| raster.is_hit(x, y))
                        .map(|raster| raster.get(x, y))
                } else {
                    None
                };
                plans.push(RayPlan {
                    frame: f,
                    pixel: Pixel::new(x as f64, y as f64),
                    is_object: frames[f].obs.labels.is_object(x, y),
                    observed: frames[f].obs.color.get(x, y),
                    depths,
                    cached_depth,
                });
                break;
            }
        }
    };
    if from_old > 0 {
        let hi = if newest == 0 { frames.len() } else { older };
        draw(0..hi, from_old, rng, &mut eligible, &mut plans);
    }
    if from_new > 0 {
        draw(older..frames.len(), from_new, rng, &mut eligible, &mut plans);
    }
    plans
    // A frame group whose members are all fully hand-covered can leave the
    // batch short; callers treat the plan list length as authoritative.
}

/// Result of evaluating a batch: per-ray mean loss terms and gradients.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub terms: LossTerms,
    /// Gradient of the total with respect to the field parameters.
    pub theta_grad: Vec<f64>,
    /// Gradient of the total with respect to a left perturbation
    /// `exp([t, r]) · pose` of each window pose, ordered `[t0 t1 t2 r0 r1 r2]`.
    pub pose_grads: Vec<[f64; 6]>,
    /// Flow samples dropped because a point left the partner camera's view
    /// or landed on undefined flow.
    pub flow_dropped: usize,
    /// Flow samples that contributed a residual.
    pub flow_retained: usize,
}

struct Partial {
    terms: LossTerms,
    theta: Vec<f64>,
    poses: Vec<[f64; 6]>,
    flow_dropped: usize,
    flow_retained: usize,
}

impl Partial {
    fn new(param_len: usize, pose_count: usize) -> Self {
        Partial {
            terms: LossTerms::default(),
            theta: dense_zeros(param_len),
            poses: vec![[0.0; 6]; pose_count],
            flow_dropped: 0,
            flow_retained: 0,
        }
    }
}

/// Pinhole projection of a camera-frame point, paired with the gradient
/// pull-back `J^T upstream` of a pixel-space gradient.
fn project_camera_point(camera: &Camera, y: &Vec3) -> Pixel {
    Pixel::new(camera.fx * y.x / y.z + camera.cx, camera.fy * y.y / y.z + camera.cy)
}

fn projection_pullback(camera: &Camera, y: &Vec3, upstream: &Pixel) -> Vec3 {
    Vec3::new(
        camera.fx / y.z * upstream.x,
        camera.fy / y.z * upstream.y,
        -(camera.fx * y.x * upstream.x + camera.fy * y.y * upstream.y) / (y.z * y.z),
    )
}

fn evaluate_plan(
    field: &dyn Field,
    camera: &Camera,
    poses: &[Pose],
    frames: &[FrameContext],
    plan: &RayPlan,
    cfg: &LossConfig,
    scratch: &mut ParamGrad,
    out: &mut Partial,
) {
    let w = &cfg.weights;
    let pose = &poses[plan.frame];
    let ctx = &frames[plan.frame];
    let m = plan.depths.len();

    let d_cam = Vec3::new(
        (plan.pixel.x - camera.cx) / camera.fx,
        (plan.pixel.y - camera.cy) / camera.fy,
        1.0,
    );
    let dir = pose.rotation * (d_cam / d_cam.norm());
    let origin = pose.translation;

    let mut samples = RaySamples {
        points: plan.depths.iter().map(|&s| origin + s * dir).collect(),
        depths: plan.depths.clone(),
        occupancies: Vec::new(),
        weights: Vec::new(),
    };
    samples.occupancies = samples.points.iter().map(|p| field.occupancy(p)).collect();
    samples.weights = alpha_blend(&samples.occupancies);

    // Upstream gradient on the blend weights, direct occupancy gradients
    // that bypass the blend, and positional gradients per sample.
    let mut g_gamma = vec![0.0; m];
    let mut d_occ_direct = vec![0.0; m];
    let mut dx: Vec<Vec3> = vec![Vec3::zeros(); m];
    let mut ddir = Vec3::zeros();
    scratch.clear();

    // Color: L1 over the composited color, object rays only.
    let use_geometry = field.color_uses_geometry();
    if plan.is_object {
        let background = cfg.background_rgb();
        let mut colors = Vec::with_capacity(m);
        let mut normals = Vec::with_capacity(m);
        let mut features: Vec<Vec<f64>> = Vec::with_capacity(m);
        for x in &samples.points {
            let (normal, feature) = if use_geometry {
                let g = field.spatial_gradient(x);
                let norm = g.norm();
                let normal = if norm > 1e-12 { -g / norm } else { Vec3::zeros() };
                let mut feature = Vec::new();
                field.feature(x, &mut feature);
                (normal, feature)
            } else {
                (Vec3::zeros(), Vec::new())
            };
            colors.push(field.color(x, &dir, &normal, &feature));
            normals.push(normal);
            features.push(feature);
        }
        let mut rendered = background * (1.0 - samples.weights.iter().sum::<f64>());
        for (gamma, c) in samples.weights.iter().zip(&colors) {
            rendered += *c * *gamma;
        }
        let diff = rendered - plan.observed;
        out.terms.color += w.color * diff.abs().sum();
        let sign = diff.map(|d| {
            if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        for k in 0..m {
            g_gamma[k] += w.color * sign.dot(&(colors[k] - background));
            let upstream = sign * (w.color * samples.weights[k]);
            if upstream != Rgb::zeros() {
                let grads = field.color_backward(
                    &samples.points[k],
                    &dir,
                    &normals[k],
                    &features[k],
                    &upstream,
                    scratch,
                );
                // The normal and feature inputs are held fixed: their
                // gradients are not chained back into the occupancy
                // parameters.
                dx[k] += grads.position;
                ddir += grads.direction;
            }
        }
    }

    // Silhouette: cross-entropy of the maximum occupancy along the ray.
    let target = if plan.is_object { 1.0 } else { 0.0 };
    let mut argmax = 0;
    for k in 1..m {
        if samples.occupancies[k] > samples.occupancies[argmax] {
            argmax = k;
        }
    }
    let p = samples.occupancies[argmax];
    out.terms.seg += w.seg * loss_seg(p, target);
    d_occ_direct[argmax] += w.seg * loss_seg_grad(p, target);

    // Flow: reprojection into the frame the flow raster maps from. The
    // sample lies on this ray, so its own projection is the plan pixel with
    // zero derivative; only the partner projection moves.
    if let (Some(from), Some(flow)) = (ctx.flow_from, ctx.obs.flow.as_ref()) {
        let partner = &poses[from];
        let r_from = partner.rotation_matrix();
        for k in 0..m {
            let x = samples.points[k];
            let y = partner.inverse_transform_point(&x);
            if y.z <= 1e-12 {
                out.flow_dropped += 1;
                continue;
            }
            let q = project_camera_point(camera, &y);
            let Some((of, j_of)) = flow.sample_bilinear(&q) else {
                out.flow_dropped += 1;
                continue;
            };
            out.flow_retained += 1;
            let r = Pixel::new(plan.pixel.x - q.x - of.x, plan.pixel.y - q.y - of.y);
            let gamma = samples.weights[k];
            out.terms.flow += w.flow * gamma * r.norm_squared();
            g_gamma[k] += w.flow * r.norm_squared();
            // d/dq of gamma·|p - q - OF(q)|^2 = -2 gamma (I + J_OF)^T r.
            let dldq = (r + j_of.transpose() * r) * (-2.0 * w.flow * gamma);
            let u = r_from * projection_pullback(camera, &y, &dldq);
            dx[k] += u;
            let cross = x.cross(&u);
            for a in 0..3 {
                out.poses[from][a] -= u[a];
                out.poses[from][3 + a] -= cross[a];
            }
        }
    }

    // Occupancy far from the origin is penalized exponentially.
    for k in 0..m {
        let x = &samples.points[k];
        let radius = x.norm();
        let e = (cfg.reg_alpha * radius).exp();
        out.terms.reg += w.reg * samples.occupancies[k] * e;
        d_occ_direct[k] += w.reg * e;
        if radius > 1e-12 {
            dx[k] += x * (w.reg * samples.occupancies[k] * cfg.reg_alpha * e / radius);
        }
    }

    // Depth: squared error of the expected ray length against the cached
    // value, skipped when the ray currently misses.
    if let Some(cached) = plan.cached_depth {
        if let Some(depth) = render_depth(&samples) {
            let residual = depth - cached;
            out.terms.depth += w.depth * residual * residual;
            for k in 0..m {
                g_gamma[k] += w.depth * 2.0 * residual * samples.depths[k];
            }
        }
    }

    // Pull the blend-weight gradients back to the occupancies, then all
    // occupancy gradients back to parameters, positions, and the pose.
    let d_occ = alpha_blend_backward(&samples.occupancies, &g_gamma);
    let mut d_rho = Vec3::zeros();
    let mut d_phi = Vec3::zeros();
    for k in 0..m {
        let upstream = d_occ[k] + d_occ_direct[k];
        let mut total = dx[k];
        if upstream != 0.0 {
            total += field.occupancy_backward(&samples.points[k], upstream, scratch);
        }
        d_rho += total;
        d_phi += samples.points[k].cross(&total);
    }
    d_phi += dir.cross(&ddir);
    for a in 0..3 {
        out.poses[plan.frame][a] += d_rho[a];
        out.poses[plan.frame][3 + a] += d_phi[a];
    }
    scratch.scatter_into(&mut out.theta);
}

/// Evaluates a planned batch: weighted per-ray mean of every loss term plus
/// gradients for the field parameters and all window poses. Deterministic
/// for a fixed plan regardless of the rayon thread count.
pub fn evaluate_rays(
    field: &dyn Field,
    camera: &Camera,
    poses: &[Pose],
    frames: &[FrameContext],
    plans: &[RayPlan],
    cfg: &LossConfig,
) -> Evaluation {
    assert_eq!(frames.len(), poses.len());
    let param_len = field.param_len();
    let chunk_len = plans.len().div_ceil(EVAL_CHUNKS).max(1);
    let partials: Vec<Partial> = plans
        .par_chunks(chunk_len)
        .map(|chunk| {
            let mut partial = Partial::new(param_len, poses.len());
            let mut scratch = ParamGrad::default();
            for plan in chunk {
                evaluate_plan(field, camera, poses, frames, plan, cfg, &mut scratch, &mut partial);
            }
            partial
        })
        .collect();

    let mut merged = Partial::new(param_len, poses.len());
    for p in partials {
        merged.terms.add(&p.terms);
        for (dst, src) in merged.theta.iter_mut().zip(&p.theta) {
            *dst += src;
        }
        recycle_dense(p.theta);
        for (dst, src) in merged.poses.iter_mut().zip(&p.poses) {
            for a in 0..6 {
                dst[a] += src[a];
            }
        }
        merged.flow_dropped += p.flow_dropped;
        merged.flow_retained += p.flow_retained;
    }

    let scale = 1.0 / plans.len().max(1) as f64;
    merged.terms.scale(scale);
    for g in &mut merged.theta {
        *g *= scale;
    }
    for g in &mut merged.poses {
        for a in 0..6 {
            g[a] *= scale;
        }
    }
    Evaluation {
        terms: merged.terms,
        theta_grad: merged.theta,
        pose_grads: merged.poses,
        flow_dropped: merged.flow_dropped,
        flow_retained: merged.flow_retained,
    }
}

/// Samples and evaluates one batch for per-segment tracking. `newest_count`
/// frames at the end of the window receive the reserved share of rays.
#[allow(clippy::too_many_arguments)]
pub fn segment_objective(
    field: &dyn Field,
    camera: &Camera,
    poses: &[Pose],
    frames: &[FrameContext],
    plan_cfg: &RayPlanConfig,
    loss_cfg: &LossConfig,
    newest_count: usize,
    seed: u64,
) -> Evaluation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plans = sample_ray_plans(frames, poses, plan_cfg, newest_count, &mut rng);
    evaluate_rays(field, camera, poses, frames, &plans, loss_cfg)
}

/// Samples and evaluates one batch over the whole window for the global
/// refinement stage, raising the field's positional octave weights with
/// `progress` in [0, 1] (coarse-to-fine).
#[allow(clippy::too_many_arguments)]
pub fn global_objective(
    field: &mut dyn Field,
    camera: &Camera,
    poses: &[Pose],
    frames: &[FrameContext],
    plan_cfg: &RayPlanConfig,
    loss_cfg: &LossConfig,
    progress: f64,
    seed: u64,
) -> Evaluation {
    let octaves = field.position_octaves();
    if octaves > 0 {
        field.set_octave_weights(&octave_mask(progress, octaves));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plans = sample_ray_plans(frames, poses, plan_cfg, 0, &mut rng);
    evaluate_rays(field, camera, poses, frames, &plans, loss_cfg)
}
