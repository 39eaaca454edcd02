//! Quantitative evaluation of reconstructions.
//!
//! Trajectories are compared by absolute error after a closed-form
//! similarity alignment, so estimates that differ from the truth only by a
//! global scale, rotation, or translation score zero. Meshes are compared by
//! the RMS distance from estimated vertices to the reference surface after a
//! scale-permitting ICP. Rendered images are compared by PSNR and SSIM on
//! the 8-bit scale. A small photometric pose polish is included for
//! evaluating texture quality at held-out views independently of residual
//! pose error.

use crate::dataset::FrameObservation;
use crate::fields::{Field, TriangleMesh};
use crate::geometry::{Camera, Pose, Trajectory, Vec3};
use crate::losses::{
    segment_objective, Adam, AdamConfig, FrameContext, LossConfig, LossWeights, RayPlanConfig,
};
use crate::render::{mix_seed, ColorImage};
use nalgebra::{Matrix3, SVD};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("trajectory alignment needs at least 3 frames, got {0}")]
    TooFewFrames(usize),
    #[error("estimated and reference trajectories cover different frames")]
    FrameMismatch,
    #[error("mesh has no vertices or no triangles")]
    EmptyMesh,
    #[error("ICP error increased for 3 consecutive iterations (iteration {0})")]
    IcpDiverged(usize),
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("images must be at least 11x11 for the SSIM window, got {0}x{1}")]
    ImageTooSmall(usize, usize),
}

/// Closed-form best-fit similarity transform `p ↦ scale·R·p + t` between
/// paired point sets (least squares over all pairs).
#[derive(Debug, Clone)]
struct Similarity {
    scale: f64,
    rot: Matrix3<f64>,
    trans: Vec3,
}

impl Similarity {
    fn apply(&self, p: &Vec3) -> Vec3 {
        self.rot * (p * self.scale) + self.trans
    }
}

fn fit_similarity(src: &[Vec3], dst: &[Vec3], with_scale: bool) -> Similarity {
    assert_eq!(src.len(), dst.len());
    assert!(!src.is_empty());
    let n = src.len() as f64;
    let mu_s: Vec3 = src.iter().sum::<Vec3>() / n;
    let mu_d: Vec3 = dst.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = s - mu_s;
        let dc = d - mu_d;
        cov += dc * sc.transpose();
        var_s += sc.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = SVD::new(cov, true, true);
    let u = svd.u.expect("3x3 SVD always produces U");
    let v_t = svd.v_t.expect("3x3 SVD always produces Vᵀ");
    // Reflection guard: force det(R) = +1 by flipping the weakest axis.
    let flip = if u.determinant() * v_t.determinant() < 0.0 { -1.0 } else { 1.0 };
    let d = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, flip));
    let rot = u * d * v_t;
    let scale = if with_scale && var_s > 0.0 {
        let sv = svd.singular_values;
        (sv.x + sv.y + flip * sv.z) / var_s
    } else {
        1.0
    };
    let trans = mu_d - rot * (mu_s * scale);
    Similarity { scale, rot, trans }
}

/// Per-frame distances between camera centers after the best similarity
/// alignment of the estimate onto the reference. Output order follows the
/// reference trajectory's entries.
pub fn ate(est: &Trajectory, gt: &Trajectory) -> Result<Vec<f64>, MetricsError> {
    let n = gt.entries.len();
    if n < 3 {
        return Err(MetricsError::TooFewFrames(n));
    }
    if est.entries.len() != n {
        return Err(MetricsError::FrameMismatch);
    }
    let mut est_centers = Vec::with_capacity(n);
    let mut gt_centers = Vec::with_capacity(n);
    for entry in &gt.entries {
        let pose = est.pose_of(entry.frame).ok_or(MetricsError::FrameMismatch)?;
        est_centers.push(pose.center());
        gt_centers.push(entry.pose.center());
    }
    let sim = fit_similarity(&est_centers, &gt_centers, true);
    Ok(est_centers
        .iter()
        .zip(&gt_centers)
        .map(|(e, g)| (sim.apply(e) - g).norm())
        .collect())
}

/// Default upper threshold for [`ate_auc`], in the trajectory's length units.
pub const ATE_MAX_THRESHOLD: f64 = 0.10;

/// Area under the fraction-of-frames-below-threshold curve for thresholds in
/// `[0, max_threshold]`, with the threshold axis expressed in hundredths of a
/// unit so that a perfect trajectory under the default threshold scores 10.0.
/// Empty input scores 0.
pub fn ate_auc(errors: &[f64], max_threshold: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    // The fraction-below curve is a step function; each error contributes the
    // exact sliver of thresholds it clears.
    let total: f64 = errors.iter().map(|e| (max_threshold - e).max(0.0)).sum();
    100.0 * total / errors.len() as f64
}

// ---------------------------------------------------------------------------
// Mesh distance.
// ---------------------------------------------------------------------------

/// Closest point on a triangle to `p` (barycentric region walk).
fn closest_point_on_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = va + vb + vc;
    if denom <= 0.0 || !denom.is_finite() {
        // Degenerate sliver; fall back to the nearest corner.
        return [a, b, c]
            .into_iter()
            .min_by(|x, y| (p - x).norm_squared().total_cmp(&(p - y).norm_squared()))
            .unwrap();
    }
    let v = vb / denom;
    let w = vc / denom;
    a + ab * v + ac * w
}

struct BvhNode {
    min: Vec3,
    max: Vec3,
    /// Child node indices, or `u32::MAX` for leaves.
    left: u32,
    right: u32,
    start: u32,
    count: u32,
}

/// Axis-aligned BVH over triangles for nearest-surface-point queries.
struct SurfaceBvh {
    tris: Vec<[Vec3; 3]>,
    nodes: Vec<BvhNode>,
}

const BVH_LEAF_SIZE: usize = 8;

impl SurfaceBvh {
    fn build(mesh: &TriangleMesh) -> Self {
        let mut tris: Vec<[Vec3; 3]> = mesh
            .triangles
            .iter()
            .map(|t| {
                [
                    mesh.vertices[t[0] as usize],
                    mesh.vertices[t[1] as usize],
                    mesh.vertices[t[2] as usize],
                ]
            })
            .collect();
        let mut nodes = Vec::new();
        let n = tris.len();
        Self::split(&mut tris, 0, n, &mut nodes);
        SurfaceBvh { tris, nodes }
    }

    fn bounds(tris: &[[Vec3; 3]]) -> (Vec3, Vec3) {
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for t in tris {
            for v in t {
                min = min.inf(v);
                max = max.sup(v);
            }
        }
        (min, max)
    }

    fn split(tris: &mut [[Vec3; 3]], start: usize, count: usize, nodes: &mut Vec<BvhNode>) -> u32 {
        let (min, max) = Self::bounds(&tris[start..start + count]);
        let index = nodes.len() as u32;
        nodes.push(BvhNode { min, max, left: u32::MAX, right: u32::MAX, start: start as u32, count: count as u32 });
        if count <= BVH_LEAF_SIZE {
            return index;
        }
        let extent = max - min;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        let mid = count / 2;
        tris[start..start + count].select_nth_unstable_by(mid, |a, b| {
            let ca = a[0][axis] + a[1][axis] + a[2][axis];
            let cb = b[0][axis] + b[1][axis] + b[2][axis];
            ca.total_cmp(&cb)
        });
        let left = Self::split(tris, start, mid, nodes);
        let right = Self::split(tris, start + mid, count - mid, nodes);
        nodes[index as usize].left = left;
        nodes[index as usize].right = right;
        index
    }

    fn aabb_dist_sq(p: &Vec3, min: &Vec3, max: &Vec3) -> f64 {
        let mut d = 0.0;
        for axis in 0..3 {
            let v = (min[axis] - p[axis]).max(p[axis] - max[axis]).max(0.0);
            d += v * v;
        }
        d
    }

    /// Nearest point on the surface and its squared distance.
    fn nearest(&self, p: &Vec3) -> (f64, Vec3) {
        let mut best = (f64::INFINITY, *p);
        let mut stack = vec![0u32];
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx as usize];
            if Self::aabb_dist_sq(p, &node.min, &node.max) >= best.0 {
                continue;
            }
            if node.left == u32::MAX {
                let (s, c) = (node.start as usize, node.count as usize);
                for t in &self.tris[s..s + c] {
                    let q = closest_point_on_triangle(*p, t[0], t[1], t[2]);
                    let d = (p - q).norm_squared();
                    if d < best.0 {
                        best = (d, q);
                    }
                }
            } else {
                // Visit the nearer child first so the other can often be culled.
                let (l, r) = (node.left, node.right);
                let dl = Self::aabb_dist_sq(p, &self.nodes[l as usize].min, &self.nodes[l as usize].max);
                let dr = Self::aabb_dist_sq(p, &self.nodes[r as usize].min, &self.nodes[r as usize].max);
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        best
    }
}

fn surface_rmse(pts: &[Vec3], targets: &[Vec3]) -> f64 {
    let se: f64 = pts.iter().zip(targets).map(|(p, q)| (p - q).norm_squared()).sum();
    (se / pts.len() as f64).sqrt()
}

const ICP_MAX_ITERATIONS: usize = 100;
const ICP_CONVERGENCE: f64 = 1e-8;

fn aligned_surface_rmse(
    est: &TriangleMesh,
    gt: &TriangleMesh,
    allow_scale: bool,
) -> Result<f64, MetricsError> {
    if est.vertices.is_empty() || gt.vertices.is_empty() || gt.triangles.is_empty() {
        return Err(MetricsError::EmptyMesh);
    }
    let bvh = SurfaceBvh::build(gt);
    let mut pts = est.vertices.clone();
    let mut prev = f64::INFINITY;
    let mut rises = 0;
    for iteration in 0..ICP_MAX_ITERATIONS {
        let targets: Vec<Vec3> = pts.par_iter().map(|p| bvh.nearest(p).1).collect();
        let rmse = surface_rmse(&pts, &targets);
        if rmse > prev {
            rises += 1;
            if rises >= 3 {
                return Err(MetricsError::IcpDiverged(iteration));
            }
        } else {
            rises = 0;
        }
        if (prev - rmse).abs() < ICP_CONVERGENCE {
            return Ok(rmse);
        }
        prev = rmse;
        let sim = fit_similarity(&pts, &targets, allow_scale);
        for p in &mut pts {
            *p = sim.apply(p);
        }
    }
    let targets: Vec<Vec3> = pts.par_iter().map(|p| bvh.nearest(p).1).collect();
    Ok(surface_rmse(&pts, &targets))
}

/// RMS distance from estimated vertices to the reference surface after a
/// similarity ICP (scale free, matching how scale-ambiguous reconstructions
/// are scored). One-way by design: holes in the estimate are not penalized,
/// hallucinated geometry is.
pub fn hausdorff_rmse(est: &TriangleMesh, gt: &TriangleMesh) -> Result<f64, MetricsError> {
    aligned_surface_rmse(est, gt, true)
}

/// Same one-way surface RMSE but with the alignment restricted to a rigid
/// transform, for callers that need absolute-size errors to stay visible.
pub fn hausdorff_rmse_fixed_scale(
    est: &TriangleMesh,
    gt: &TriangleMesh,
) -> Result<f64, MetricsError> {
    aligned_surface_rmse(est, gt, false)
}

// ---------------------------------------------------------------------------
// Image fidelity.
// ---------------------------------------------------------------------------

fn check_dims(a: &ColorImage, b: &ColorImage) -> Result<(), MetricsError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricsError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round()
}

/// Peak signal-to-noise ratio on the 8-bit scale; identical images report
/// positive infinity.
pub fn psnr(a: &ColorImage, b: &ColorImage) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    let mut se = 0.0;
    for (pa, pb) in a.pixels.iter().zip(&b.pixels) {
        for ch in 0..3 {
            let d = quantize(pa[ch]) - quantize(pb[ch]);
            se += d * d;
        }
    }
    let mse = se / (3 * a.width * a.height) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * 255f64.log10() - 10.0 * mse.log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode Gaussian blur; output is (w−10)×(h−10).
fn blur_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - (SSIM_WINDOW - 1);
    let oh = h - (SSIM_WINDOW - 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += kv * src[y * w + x + i];
            }
            tmp[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5) on the
/// 8-bit scale, averaged over the three channels. Boundary pixels without a
/// full window are excluded.
pub fn ssim(a: &ColorImage, b: &ColorImage) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricsError::ImageTooSmall(w, h));
    }
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * 255.0) * (SSIM_K1 * 255.0);
    let c2 = (SSIM_K2 * 255.0) * (SSIM_K2 * 255.0);
    let mut channel_means = [0.0; 3];
    for (ch, mean) in channel_means.iter_mut().enumerate() {
        let xs: Vec<f64> = a.pixels.iter().map(|p| quantize(p[ch])).collect();
        let ys: Vec<f64> = b.pixels.iter().map(|p| quantize(p[ch])).collect();
        let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| x * y).collect();
        let mu_x = blur_valid(&xs, w, h, &k);
        let mu_y = blur_valid(&ys, w, h, &k);
        let e_xx = blur_valid(&xx, w, h, &k);
        let e_yy = blur_valid(&yy, w, h, &k);
        let e_xy = blur_valid(&xy, w, h, &k);
        let mut total = 0.0;
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let var_x = e_xx[i] - mx * mx;
            let var_y = e_yy[i] - my * my;
            let cov = e_xy[i] - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
        }
        *mean = total / mu_x.len() as f64;
    }
    Ok(channel_means.iter().sum::<f64>() / 3.0)
}

// ---------------------------------------------------------------------------
// Photometric pose polish.
// ---------------------------------------------------------------------------

/// Settings for [`refine_pose_photometric`].
#[derive(Debug, Clone)]
pub struct PhotometricRefineConfig {
    pub iterations: usize,
    pub optimizer: AdamConfig,
    pub rays: RayPlanConfig,
    pub seed: u64,
}

impl Default for PhotometricRefineConfig {
    fn default() -> Self {
        PhotometricRefineConfig {
            iterations: 400,
            optimizer: AdamConfig { lr: 2e-3, ..AdamConfig::default() },
            rays: RayPlanConfig { rays_per_batch: 512, ..RayPlanConfig::default() },
            seed: 0,
        }
    }
}

/// Polishes a single frame's pose against a trained field using the color
/// term alone, leaving the field untouched. Used before rendering held-out
/// views so texture scores measure the field, not residual pose error.
pub fn refine_pose_photometric(
    field: &dyn Field,
    camera: &Camera,
    obs: &FrameObservation,
    start: &Pose,
    cfg: &PhotometricRefineConfig,
) -> Pose {
    let weights = LossWeights { color: 1.0, seg: 0.0, flow: 0.0, reg: 0.0, depth: 0.0 };
    let loss_cfg = LossConfig { weights, ..LossConfig::default() };
    let frames = [FrameContext { obs, flow_from: None, use_cached_depth: false }];
    let mut opt = Adam::new(cfg.optimizer.clone(), 6);
    let mut pose = [*start];
    for iteration in 0..cfg.iterations {
        let eval = segment_objective(
            field,
            camera,
            &pose,
            &frames,
            &cfg.rays,
            &loss_cfg,
            1,
            mix_seed(cfg.seed, iteration as u64),
        );
        if !eval.terms.total().is_finite() {
            break;
        }
        opt.step_poses(&mut pose, &eval.pose_grads);
    }
    pose[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::look_at_origin;
    use nalgebra::UnitQuaternion;

    fn orbit_trajectory(frames: usize, step_deg: f64, radius: f64) -> Trajectory {
        Trajectory::from_poses((0..frames).map(|i| {
            let th = (i as f64 * step_deg).to_radians();
            let center = Vec3::new(radius * th.sin(), 0.0, -radius * th.cos());
            (i, look_at_origin(&center, &Vec3::y()).unwrap())
        }))
    }

    fn transform_trajectory(t: &Trajectory, scale: f64, rot: &UnitQuaternion<f64>, shift: &Vec3) -> Trajectory {
        Trajectory::from_poses(t.entries.iter().map(|e| {
            let pose = Pose {
                rotation: rot * e.pose.rotation,
                translation: rot * (e.pose.translation * scale) + shift,
            };
            (e.frame, pose)
        }))
    }

    #[test]
    fn trajectory_error_absorbs_similarity_transforms() {
        let gt = orbit_trajectory(12, 7.0, 2.5);
        let same = ate(&gt, &gt).unwrap();
        assert!(same.iter().all(|e| *e < 1e-12));

        let rot = UnitQuaternion::from_euler_angles(0.3, -0.8, 0.25);
        let moved = transform_trajectory(&gt, 2.0, &rot, &Vec3::new(0.05, -0.3, 0.7));
        let aligned = ate(&moved, &gt).unwrap();
        assert!(aligned.iter().all(|e| *e < 1e-9), "max {:?}", aligned.iter().cloned().fold(0.0, f64::max));

        // Pure offset case.
        let shifted = transform_trajectory(&gt, 1.0, &UnitQuaternion::identity(), &Vec3::new(0.05, 0.0, 0.0));
        assert!(ate(&shifted, &gt).unwrap().iter().all(|e| *e < 1e-9));

        // Errors themselves are similarity-invariant when the estimate is
        // further transformed.
        let noisy = transform_trajectory(&gt, 1.0, &UnitQuaternion::identity(), &Vec3::zeros());
        let mut noisy = noisy;
        noisy.entries[3].pose.translation += Vec3::new(0.02, -0.01, 0.015);
        let base = ate(&noisy, &gt).unwrap();
        let warped = transform_trajectory(&noisy, 0.37, &rot, &Vec3::new(-1.0, 2.0, 0.3));
        let again = ate(&warped, &gt).unwrap();
        for (x, y) in base.iter().zip(&again) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn trajectory_error_rejects_small_or_mismatched_inputs() {
        let gt = orbit_trajectory(2, 5.0, 2.5);
        assert!(matches!(ate(&gt, &gt), Err(MetricsError::TooFewFrames(2))));
        let gt = orbit_trajectory(5, 5.0, 2.5);
        let mut other = gt.clone();
        other.entries[4].frame = 99;
        assert!(matches!(ate(&other, &gt), Err(MetricsError::FrameMismatch)));
    }

    #[test]
    fn auc_matches_hand_computed_cases() {
        assert!((ate_auc(&[0.0; 7], ATE_MAX_THRESHOLD) - 10.0).abs() < 1e-12);
        assert_eq!(ate_auc(&[0.2, 0.11, 0.5], ATE_MAX_THRESHOLD), 0.0);
        assert!((ate_auc(&[0.05; 4], ATE_MAX_THRESHOLD) - 5.0).abs() < 1e-12);
        assert_eq!(ate_auc(&[], ATE_MAX_THRESHOLD), 0.0);
        // Monotone: raising any single error cannot raise the score.
        let base = [0.01, 0.03, 0.0, 0.2];
        let score = ate_auc(&base, ATE_MAX_THRESHOLD);
        for i in 0..base.len() {
            let mut bumped = base;
            bumped[i] += 0.01;
            assert!(ate_auc(&bumped, ATE_MAX_THRESHOLD) <= score + 1e-15);
        }
    }

    /// Latitude-longitude sphere mesh with vertices exactly on the sphere.
    fn uv_sphere(radius: f64, rings: usize, sectors: usize) -> TriangleMesh {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for r in 0..=rings {
            let phi = std::f64::consts::PI * r as f64 / rings as f64;
            for s in 0..sectors {
                let th = 2.0 * std::f64::consts::PI * s as f64 / sectors as f64;
                vertices.push(Vec3::new(
                    radius * phi.sin() * th.cos(),
                    radius * phi.cos(),
                    radius * phi.sin() * th.sin(),
                ));
            }
        }
        let idx = |r: usize, s: usize| (r * sectors + s % sectors) as u32;
        for r in 0..rings {
            for s in 0..sectors {
                triangles.push([idx(r, s), idx(r + 1, s), idx(r + 1, s + 1)]);
                triangles.push([idx(r, s), idx(r + 1, s + 1), idx(r, s + 1)]);
            }
        }
        TriangleMesh { vertices, triangles }
    }

    #[test]
    fn surface_error_is_zero_for_identical_and_rescaled_meshes() {
        let mesh = uv_sphere(0.7, 24, 32);
        assert!(hausdorff_rmse(&mesh, &mesh).unwrap() < 1e-9);

        let big = uv_sphere(0.91, 24, 32);
        let aligned = hausdorff_rmse(&big, &mesh).unwrap();
        assert!(aligned < 2e-4, "scaled sphere should align, rmse {aligned}");
    }

    #[test]
    fn fixed_scale_surface_error_sees_radius_changes() {
        let unit = uv_sphere(1.0, 32, 48);
        let grown = uv_sphere(1.01, 32, 48);
        let d = hausdorff_rmse_fixed_scale(&grown, &unit).unwrap();
        // Concentric spheres differ by exactly the radius gap; the mesh
        // facets flatten that slightly, hence the loose band.
        assert!((d - 0.01).abs() < 2e-3, "expected ≈0.01, got {d}");
    }

    #[test]
    fn empty_meshes_are_rejected() {
        let mesh = uv_sphere(0.5, 8, 12);
        let empty = TriangleMesh { vertices: Vec::new(), triangles: Vec::new() };
        assert!(matches!(hausdorff_rmse(&empty, &mesh), Err(MetricsError::EmptyMesh)));
        assert!(matches!(hausdorff_rmse(&mesh, &empty), Err(MetricsError::EmptyMesh)));
    }

    fn flat_image(w: usize, h: usize, value: f64) -> ColorImage {
        let mut img = ColorImage::new(w, h);
        for p in &mut img.pixels {
            *p = crate::fields::Rgb::new(value, value, value);
        }
        img
    }

    #[test]
    fn psnr_identities() {
        let a = flat_image(16, 16, 0.25);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);

        // One 8-bit step everywhere gives MSE exactly 1.
        let b = flat_image(16, 16, 0.25 + 1.0 / 255.0);
        let got = psnr(&a, &b).unwrap();
        assert!((got - 48.1308).abs() < 1e-3, "got {got}");

        let c = flat_image(8, 16, 0.25);
        assert!(matches!(psnr(&a, &c), Err(MetricsError::DimensionMismatch(..))));
    }

    #[test]
    fn ssim_identities() {
        let mut a = ColorImage::new(24, 24);
        for y in 0..24 {
            for x in 0..24 {
                let v = ((x / 3 + y / 3) % 2) as f64;
                a.set(x, y, crate::fields::Rgb::new(v, v, v));
            }
        }
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);

        let mut inverted = a.clone();
        for p in &mut inverted.pixels {
            *p = crate::fields::Rgb::new(1.0 - p.x, 1.0 - p.y, 1.0 - p.z);
        }
        let s = ssim(&a, &inverted).unwrap();
        assert!(s <= 0.0, "anti-correlated structure should not score positive, got {s}");

        let tiny = flat_image(8, 8, 0.5);
        assert!(matches!(ssim(&tiny, &tiny), Err(MetricsError::ImageTooSmall(8, 8))));
    }

    #[test]
    fn photometric_polish_pulls_a_perturbed_pose_back() {
        use crate::fields::{AnalyticField, Shape, Texture};
        use crate::render::{render_frame, RenderConfig};

        let field = AnalyticField::new(
            Shape::Sphere { radius: 0.7 },
            Texture::Gradient { base: [0.5, 0.5, 0.5], gain: [0.45, -0.4, 0.35] },
            5e-3,
        );
        let camera = Camera::new(80.0, 80.0, 31.5, 31.5, 64, 64).unwrap();
        let gt_pose = look_at_origin(&Vec3::new(0.0, 0.0, -2.5), &Vec3::y()).unwrap();
        let rendered = render_frame(
            &field,
            &camera,
            &gt_pose,
            &RenderConfig { samples_per_ray: 96, stratified: false, background: [0.0; 3], bound_radius: 1.5 },
            0,
        )
        .unwrap();
        let mut labels = crate::dataset::LabelMask::new(64, 64);
        for y in 0..64 {
            for x in 0..64 {
                if rendered.mask.get(x, y) > 0.5 {
                    labels.set(x, y, crate::dataset::LABEL_OBJECT);
                }
            }
        }
        let obs = FrameObservation {
            color: rendered.color,
            labels,
            flow: None,
            cached_depth: None,
        };
        let start = gt_pose.retract(&[0.01, -0.008, 0.0, 0.006, -0.009, 0.004]);
        let cfg = PhotometricRefineConfig {
            optimizer: AdamConfig { lr: 5e-4, ..AdamConfig::default() },
            ..PhotometricRefineConfig::default()
        };
        let refined = refine_pose_photometric(&field, &camera, &obs, &start, &cfg);
        let before = start.angle_to(&gt_pose) + (start.translation - gt_pose.translation).norm();
        let after = refined.angle_to(&gt_pose) + (refined.translation - gt_pose.translation).norm();
        assert!(
            after < 0.35 * before,
            "polish should recover most of the perturbation: before {before:.5}, after {after:.5}"
        );
    }
}
