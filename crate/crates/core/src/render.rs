//! Volumetric rendering of occupancy/color fields: ray sampling, alpha
//! blending, per-pixel color/depth/mask composition, and the image and
//! depth-raster containers with their on-disk formats.

use crate::fields::{Field, Rgb};
use crate::geometry::{pixel_to_ray, Camera, Pose, Ray, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("invalid sampling range: near {near} must satisfy 0 < near < far = {far}")]
    InvalidRange { near: f64, far: f64 },
    #[error("need at least two samples per ray, got {0}")]
    TooFewSamples(usize),
    #[error("image io failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),
    #[error("bad depth raster: {0}")]
    BadDepthRaster(String),
}

/// Points along one ray together with per-sample occupancies and blend
/// weights. Depths are strictly increasing distances from the ray origin.
#[derive(Debug, Clone, Default)]
pub struct RaySamples {
    pub points: Vec<Vec3>,
    pub depths: Vec<f64>,
    pub occupancies: Vec<f64>,
    pub weights: Vec<f64>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    /// Evaluates the field's occupancy at every sample and recomputes the
    /// blend weights.
    pub fn fill_occupancies(&mut self, field: &dyn Field) {
        self.occupancies.clear();
        self.occupancies.extend(self.points.iter().map(|p| field.occupancy(p)));
        self.weights = alpha_blend(&self.occupancies);
    }
}

/// Places `m` samples in [near, far]: interval midpoints, or one uniform
/// draw per equal sub-interval when `stratified`.
pub fn sample_ray(
    ray: &Ray,
    near: f64,
    far: f64,
    m: usize,
    stratified: bool,
    rng: &mut impl Rng,
) -> Result<RaySamples, RenderError> {
    if !(near > 0.0 && far > near) {
        return Err(RenderError::InvalidRange { near, far });
    }
    if m < 2 {
        return Err(RenderError::TooFewSamples(m));
    }
    let step = (far - near) / m as f64;
    let mut samples = RaySamples::default();
    samples.depths.reserve(m);
    samples.points.reserve(m);
    for k in 0..m {
        let lo = near + step * k as f64;
        let t = if stratified { lo + step * rng.gen::<f64>() } else { lo + 0.5 * step };
        samples.depths.push(t);
        samples.points.push(ray.point_at(t));
    }
    Ok(samples)
}

/// Front-to-back compositing weights: γ_k = o_k · Π_{l<k}(1 − o_l).
pub fn alpha_blend(occupancies: &[f64]) -> Vec<f64> {
    let mut weights = Vec::with_capacity(occupancies.len());
    let mut transmittance = 1.0;
    for &o in occupancies {
        weights.push(o * transmittance);
        transmittance *= 1.0 - o;
    }
    weights
}

/// Gradient of Σ_k upstream_k·γ_k with respect to the occupancies.
///
/// With P_j = Π_{l<j}(1 − o_l): dγ_j/do_j = P_j and dγ_k/do_j =
/// −γ_k/(1 − o_j) for k > j, so the gradient at j is upstream_j·P_j minus
/// the suffix sum Σ_{k>j} upstream_k·γ_k/(1 − o_j). The suffix sums are
/// accumulated in one backward sweep.
pub fn alpha_blend_backward(occupancies: &[f64], upstream: &[f64]) -> Vec<f64> {
    let m = occupancies.len();
    assert_eq!(upstream.len(), m);
    let weights = alpha_blend(occupancies);
    let mut grad = vec![0.0; m];
    let mut suffix = 0.0;
    for j in (0..m).rev() {
        let prefix = if occupancies[j] > 0.0 {
            weights[j] / occupancies[j]
        } else {
            // γ_j = o_j·P_j is 0/0 here; recompute the transmittance directly.
            occupancies[..j].iter().fold(1.0, |acc, &o| acc * (1.0 - o))
        };
        let denom = (1.0 - occupancies[j]).max(f64::MIN_POSITIVE);
        grad[j] = upstream[j] * prefix - suffix / denom;
        suffix += upstream[j] * weights[j];
    }
    grad
}

/// Blends per-sample colors with the residual weight going to `background`.
pub fn compose_color(weights: &[f64], colors: &[Rgb], background: &Rgb) -> Rgb {
    let mut out = Rgb::zeros();
    let mut total = 0.0;
    for (w, c) in weights.iter().zip(colors) {
        out += *c * *w;
        total += w;
    }
    out + *background * (1.0 - total)
}

/// Evaluates the field color at a sample, supplying view direction, surface
/// normal, and geometry feature when the field consumes them.
pub fn sample_color(field: &dyn Field, point: &Vec3, direction: &Vec3) -> Rgb {
    if field.color_uses_geometry() {
        let g = field.spatial_gradient(point);
        let norm = g.norm();
        let normal = if norm > 1e-12 { -g / norm } else { Vec3::zeros() };
        let mut feature = Vec::new();
        field.feature(point, &mut feature);
        field.color(point, direction, &normal, &feature)
    } else {
        field.color(point, direction, &Vec3::zeros(), &[])
    }
}

/// Expected color along a pre-sampled ray.
pub fn render_color(field: &dyn Field, ray: &Ray, samples: &RaySamples, background: &Rgb) -> Rgb {
    let colors: Vec<Rgb> =
        samples.points.iter().map(|p| sample_color(field, p, &ray.direction)).collect();
    compose_color(&samples.weights, &colors, background)
}

/// Expected ray length Σ γ_k·s_k, or `None` when the accumulated weight
/// stays below 0.5 (the ray misses the object).
pub fn render_depth(samples: &RaySamples) -> Option<f64> {
    let total: f64 = samples.weights.iter().sum();
    if total < 0.5 {
        return None;
    }
    Some(samples.weights.iter().zip(&samples.depths).map(|(w, d)| w * d).sum())
}

/// Soft silhouette value: the maximum occupancy along the ray.
pub fn render_mask(samples: &RaySamples) -> f64 {
    samples.occupancies.iter().fold(0.0, |a: f64, &b| a.max(b))
}

/// Near/far clip range for a camera at `center` (object frame) observing a
/// bounding sphere of `radius` around the origin.
pub fn clip_range(center: &Vec3, radius: f64) -> (f64, f64) {
    let dist = center.norm();
    ((dist - radius).max(1e-3), dist + radius)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RenderConfig {
    /// Samples per ray.
    pub samples_per_ray: usize,
    /// One jittered draw per sub-interval instead of midpoints.
    pub stratified: bool,
    /// Color assigned to the residual blend weight.
    pub background: [f64; 3],
    /// Radius of the bounding sphere used for the clip range.
    pub bound_radius: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples_per_ray: 64,
            stratified: false,
            background: [0.0, 0.0, 0.0],
            bound_radius: 1.5,
        }
    }
}

impl RenderConfig {
    pub fn background_rgb(&self) -> Rgb {
        Rgb::new(self.background[0], self.background[1], self.background[2])
    }
}

/// SplitMix64 step; decorrelates per-pixel RNG streams derived from one seed.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub color: ColorImage,
    pub depth: DepthRaster,
    pub mask: GrayImage,
}

/// Renders every pixel of the camera: expected color, expected depth (NaN on
/// miss), and the soft mask. `pose` is the camera-to-object transform.
/// Deterministic for a given seed regardless of thread count.
pub fn render_frame(
    field: &dyn Field,
    camera: &Camera,
    pose: &Pose,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<RenderedFrame, RenderError> {
    let (w, h) = (camera.width as usize, camera.height as usize);
    let (near, far) = clip_range(&pose.center(), cfg.bound_radius);
    let background = cfg.background_rgb();
    let rows: Vec<Vec<(Rgb, f64, f64)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w);
            for x in 0..w {
                let pixel = crate::geometry::Pixel::new(x as f64, y as f64);
                let ray = pixel_to_ray(camera, pose, &pixel).expect("pixel is inside the image");
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, (y * w + x) as u64));
                let mut samples = sample_ray(
                    &ray,
                    near,
                    far,
                    cfg.samples_per_ray,
                    cfg.stratified,
                    &mut rng,
                )
                .expect("clip range is validated");
                samples.fill_occupancies(field);
                let color = render_color(field, &ray, &samples, &background);
                let depth = render_depth(&samples).unwrap_or(f64::NAN);
                let mask = render_mask(&samples);
                row.push((color, depth, mask));
            }
            row
        })
        .collect();

    let mut frame = RenderedFrame {
        color: ColorImage::new(w, h),
        depth: DepthRaster::new(w, h),
        mask: GrayImage::new(w, h),
    };
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (c, d, m)) in row.into_iter().enumerate() {
            frame.color.set(x, y, c);
            frame.depth.set(x, y, d);
            frame.mask.set(x, y, m);
        }
    }
    Ok(frame)
}

/// RGB raster with channels in [0, 1], stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize) -> Self {
        ColorImage { width, height, pixels: vec![Rgb::zeros(); width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: Rgb) {
        self.pixels[y * self.width + x] = value;
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RenderError> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for (y, row) in self.pixels.chunks(self.width).enumerate() {
            for (x, p) in row.iter().enumerate() {
                let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel(x as u32, y as u32, image::Rgb([q(p.x), q(p.y), q(p.z)]));
            }
        }
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self, RenderError> {
        let img = image::open(path)?.into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = ColorImage::new(w, h);
        for (x, y, p) in img.enumerate_pixels() {
            let c = |v: u8| v as f64 / 255.0;
            out.set(x as usize, y as usize, Rgb::new(c(p[0]), c(p[1]), c(p[2])));
        }
        Ok(out)
    }
}

/// Single-channel raster with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage { width, height, values: vec![0.0; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.values[y * self.width + x] = value;
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RenderError> {
        let mut img = image::GrayImage::new(self.width as u32, self.height as u32);
        for (y, row) in self.values.chunks(self.width).enumerate() {
            for (x, v) in row.iter().enumerate() {
                img.put_pixel(x as u32, y as u32, image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]));
            }
        }
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self, RenderError> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = GrayImage::new(w, h);
        for (x, y, p) in img.enumerate_pixels() {
            out.set(x as usize, y as usize, p[0] as f64 / 255.0);
        }
        Ok(out)
    }
}

const DEPTH_MAGIC: &[u8; 4] = b"DPTH";
const DEPTH_VERSION: u32 = 1;

/// Per-pixel ray lengths; NaN marks rays that missed the object. Stored as
/// 32-bit little-endian floats behind a 16-byte header.
#[derive(Debug, Clone)]
pub struct DepthRaster {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DepthRaster {
    pub fn new(width: usize, height: usize) -> Self {
        DepthRaster { width, height, values: vec![f64::NAN; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.values[y * self.width + x] = value;
    }

    pub fn is_hit(&self, x: usize, y: usize) -> bool {
        self.get(x, y).is_finite()
    }

    pub fn save(&self, path: &Path) -> Result<(), RenderError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(DEPTH_MAGIC)?;
        file.write_all(&DEPTH_VERSION.to_le_bytes())?;
        file.write_all(&(self.width as u32).to_le_bytes())?;
        file.write_all(&(self.height as u32).to_le_bytes())?;
        for v in &self.values {
            file.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RenderError> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut header = [0u8; 16];
        file.read_exact(&mut header)
            .map_err(|_| RenderError::BadDepthRaster("file shorter than header".into()))?;
        if &header[0..4] != DEPTH_MAGIC {
            return Err(RenderError::BadDepthRaster("bad magic".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != DEPTH_VERSION {
            return Err(RenderError::BadDepthRaster(format!("unsupported version {version}")));
        }
        let width = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let mut payload = Vec::new();
        file.read_to_end(&mut payload)?;
        if payload.len() != width * height * 4 {
            return Err(RenderError::BadDepthRaster(format!(
                "payload is {} bytes, expected {}",
                payload.len(),
                width * height * 4
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Ok(DepthRaster { width, height, values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{AnalyticField, GridConfig, GridField, Shape, Texture};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn sphere(radius: f64, sharpness: f64) -> AnalyticField {
        AnalyticField::new(
            Shape::Sphere { radius },
            Texture::Uniform { rgb: [0.8, 0.1, 0.1] },
            sharpness,
        )
    }

    fn toward_origin(center: Vec3) -> Ray {
        Ray::new(center, -center).unwrap()
    }

    #[test]
    fn deterministic_sampling_uses_midpoints() {
        let ray = toward_origin(Vec3::new(0.0, 0.0, 3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_ray(&ray, 1.0, 3.0, 2, false, &mut rng).unwrap();
        assert_eq!(s.depths, vec![1.5, 2.5]);
    }

    #[test]
    fn stratified_sampling_is_reproducible_and_ordered() {
        let ray = toward_origin(Vec3::new(0.0, 0.0, 3.0));
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            sample_ray(&ray, 0.5, 4.5, 64, true, &mut rng).unwrap()
        };
        let (a, b) = (draw(), draw());
        for (da, db) in a.depths.iter().zip(&b.depths) {
            assert_eq!(da.to_bits(), db.to_bits());
        }
        let step = 4.0 / 64.0;
        for (k, d) in a.depths.iter().enumerate() {
            let lo = 0.5 + step * k as f64;
            assert!(*d >= lo && *d < lo + step);
        }
        assert!(a.depths.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let ray = toward_origin(Vec3::new(0.0, 0.0, 3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_ray(&ray, 2.0, 1.0, 8, false, &mut rng),
            Err(RenderError::InvalidRange { .. })
        ));
        assert!(matches!(
            sample_ray(&ray, 1.0, 2.0, 1, false, &mut rng),
            Err(RenderError::TooFewSamples(1))
        ));
    }

    #[test]
    fn alpha_blend_hand_cases() {
        assert_eq!(alpha_blend(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(alpha_blend(&[1.0, 0.7, 0.2]), vec![1.0, 0.0, 0.0]);
        let w = alpha_blend(&[0.5, 0.5, 0.5]);
        assert_relative_eq!(w[0], 0.5, max_relative = 1e-15);
        assert_relative_eq!(w[1], 0.25, max_relative = 1e-15);
        assert_relative_eq!(w[2], 0.125, max_relative = 1e-15);
    }

    proptest! {
        #[test]
        fn blend_weights_sum_to_one_minus_total_transmittance(
            occ in proptest::collection::vec(0.0f64..=1.0, 1..40)
        ) {
            let weights = alpha_blend(&occ);
            let total: f64 = weights.iter().sum();
            let transmittance: f64 = occ.iter().map(|o| 1.0 - o).product();
            prop_assert!((total - (1.0 - transmittance)).abs() < 1e-12);
            prop_assert!(weights.iter().all(|w| *w >= 0.0));
            prop_assert!(total <= 1.0 + 1e-9);
        }

        #[test]
        fn opaque_sample_absorbs_the_tail(
            occ in proptest::collection::vec(0.0f64..=1.0, 2..20),
            cut in 0usize..19,
        ) {
            let mut occ = occ;
            let cut = cut.min(occ.len() - 1);
            occ[cut] = 1.0;
            let weights = alpha_blend(&occ);
            for w in &weights[cut + 1..] {
                prop_assert_eq!(*w, 0.0);
            }
        }
    }

    #[test]
    fn blend_backward_matches_finite_differences() {
        let occ = vec![0.12, 0.0, 0.83, 0.5, 0.31, 0.99];
        let upstream = vec![0.7, -0.2, 1.3, 0.05, -0.9, 0.4];
        let grad = alpha_blend_backward(&occ, &upstream);
        let f = |occ: &[f64]| -> f64 {
            alpha_blend(occ).iter().zip(&upstream).map(|(w, g)| w * g).sum()
        };
        let h = 1e-7;
        for j in 0..occ.len() {
            let mut hi = occ.clone();
            let mut lo = occ.clone();
            hi[j] += h;
            lo[j] -= h;
            let fd = (f(&hi) - f(&lo)) / (2.0 * h);
            assert!(
                (fd - grad[j]).abs() <= 1e-5 * fd.abs().max(1.0),
                "sample {j}: fd {fd} analytic {}",
                grad[j]
            );
        }
    }

    #[test]
    fn color_composition_hand_cases() {
        let black = Rgb::zeros();
        let red = Rgb::new(1.0, 0.0, 0.0);
        let blue = Rgb::new(0.0, 0.0, 1.0);
        assert_eq!(compose_color(&alpha_blend(&[0.0, 0.0]), &[red, red], &black), black);
        assert_eq!(compose_color(&alpha_blend(&[1.0]), &[red], &black), red);
        let mixed = compose_color(&alpha_blend(&[0.5, 1.0]), &[red, blue], &black);
        assert_relative_eq!(mixed.x, 0.5, max_relative = 1e-15);
        assert_relative_eq!(mixed.z, 0.5, max_relative = 1e-15);
    }

    #[test]
    fn background_takes_residual_weight() {
        let bg = Rgb::new(0.2, 0.4, 0.6);
        let out = compose_color(&[], &[], &bg);
        assert_eq!(out, bg);
        let half = compose_color(&[0.5], &[Rgb::new(1.0, 1.0, 1.0)], &bg);
        assert_relative_eq!(half.x, 0.5 + 0.1, max_relative = 1e-12);
    }

    #[test]
    fn depth_of_single_opaque_sample_is_its_distance() {
        let samples = RaySamples {
            points: vec![Vec3::zeros()],
            depths: vec![2.0],
            occupancies: vec![1.0],
            weights: alpha_blend(&[1.0]),
        };
        assert_eq!(render_depth(&samples), Some(2.0));
    }

    #[test]
    fn empty_ray_reports_miss() {
        let samples = RaySamples {
            points: vec![Vec3::zeros(); 3],
            depths: vec![1.0, 2.0, 3.0],
            occupancies: vec![0.0, 0.0, 0.0],
            weights: alpha_blend(&[0.0, 0.0, 0.0]),
        };
        assert_eq!(render_depth(&samples), None);
        assert_eq!(render_mask(&samples), 0.0);
    }

    #[test]
    fn sphere_depth_matches_ray_intersection() {
        let field = sphere(0.8, 0.005);
        let center = Vec3::new(0.3, -0.2, 2.5);
        let ray = toward_origin(center);
        let (near, far) = clip_range(&center, 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut samples = sample_ray(&ray, near, far, 256, false, &mut rng).unwrap();
        samples.fill_occupancies(&field);
        let rendered = render_depth(&samples).expect("center ray must hit");
        // Closed form: o + t·d on the sphere of radius 0.8.
        let oc = ray.origin;
        let b = oc.dot(&ray.direction);
        let c = oc.norm_squared() - 0.8 * 0.8;
        let expected = -b - (b * b - c).sqrt();
        let tolerance = 2.0 * (far - near) / 256.0;
        assert!(
            (rendered - expected).abs() < tolerance,
            "depth {rendered} vs {expected} (tol {tolerance})"
        );
    }

    #[test]
    fn mask_is_max_occupancy() {
        let samples = RaySamples {
            points: vec![Vec3::zeros(); 3],
            depths: vec![1.0, 2.0, 3.0],
            occupancies: vec![0.1, 0.9, 0.3],
            weights: alpha_blend(&[0.1, 0.9, 0.3]),
        };
        assert_eq!(render_mask(&samples), 0.9);
    }

    #[test]
    fn empty_field_renders_background_and_misses() {
        let mut grid = GridField::new(GridConfig {
            resolution: 4,
            logit_clamp: 20.0,
            ..GridConfig::default()
        });
        grid.fill_occupancy_logits(|_| -18.0);
        let camera = Camera::new(40.0, 40.0, 15.5, 15.5, 32, 32).unwrap();
        // Camera at z = -2.5 looking along +z toward the origin.
        let pose = Pose::new(
            nalgebra::UnitQuaternion::identity(),
            Vec3::new(0.0, 0.0, -2.5),
        );
        let cfg = RenderConfig {
            samples_per_ray: 16,
            background: [0.25, 0.5, 0.75],
            ..RenderConfig::default()
        };
        let frame = render_frame(&grid, &camera, &pose, &cfg, 0).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let c = frame.color.get(x, y);
                assert!((c - Rgb::new(0.25, 0.5, 0.75)).norm() < 1e-3);
                assert!(!frame.depth.is_hit(x, y));
                assert!(frame.mask.get(x, y) < 1e-3);
            }
        }
    }

    #[test]
    fn rendered_silhouette_is_a_disc_of_the_projected_radius() {
        let field = sphere(0.5, 0.01);
        let camera = Camera::new(100.0, 100.0, 31.5, 31.5, 64, 64).unwrap();
        // Camera at z = +2.5 looking back toward the origin (180° yaw).
        let rotation = nalgebra::UnitQuaternion::from_axis_angle(
            &Vec3::y_axis(),
            std::f64::consts::PI,
        );
        let pose = Pose::new(rotation, Vec3::new(0.0, 0.0, 2.5));
        let cfg = RenderConfig { samples_per_ray: 192, ..RenderConfig::default() };
        let frame = render_frame(&field, &camera, &pose, &cfg, 0).unwrap();
        let r_px = 100.0 * 0.5 / 2.5;
        for y in 0..64 {
            for x in 0..64 {
                let d = ((x as f64 - 31.5).powi(2) + (y as f64 - 31.5).powi(2)).sqrt();
                let m = frame.mask.get(x, y);
                if d < r_px - 1.0 {
                    assert!(m > 0.5, "pixel ({x},{y}) at {d:.2}px should be inside, mask {m}");
                } else if d > r_px + 1.0 {
                    assert!(m < 0.5, "pixel ({x},{y}) at {d:.2}px should be outside, mask {m}");
                }
            }
        }
    }

    #[test]
    fn rendering_twice_is_byte_identical() {
        let field = sphere(0.6, 0.02);
        let camera = Camera::new(60.0, 60.0, 23.5, 23.5, 48, 48).unwrap();
        let rotation = nalgebra::UnitQuaternion::from_axis_angle(
            &Vec3::y_axis(),
            std::f64::consts::PI,
        );
        let pose = Pose::new(rotation, Vec3::new(0.2, 0.1, 2.2));
        let cfg = RenderConfig { samples_per_ray: 32, stratified: true, ..RenderConfig::default() };
        let a = render_frame(&field, &camera, &pose, &cfg, 7).unwrap();
        let b = render_frame(&field, &camera, &pose, &cfg, 7).unwrap();
        for (pa, pb) in a.color.pixels.iter().zip(&b.color.pixels) {
            assert_eq!(pa.x.to_bits(), pb.x.to_bits());
            assert_eq!(pa.y.to_bits(), pb.y.to_bits());
            assert_eq!(pa.z.to_bits(), pb.z.to_bits());
        }
        for (da, db) in a.depth.values.iter().zip(&b.depth.values) {
            assert_eq!(da.to_bits(), db.to_bits());
        }
    }

    #[test]
    fn depth_raster_round_trips_including_misses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("depth.dpth");
        let mut raster = DepthRaster::new(3, 2);
        raster.set(0, 0, 1.25);
        raster.set(2, 1, 7.5);
        raster.save(&path).unwrap();
        let back = DepthRaster::load(&path).unwrap();
        assert_eq!(back.width, 3);
        assert_eq!(back.height, 2);
        assert_eq!(back.get(0, 0), 1.25);
        assert_eq!(back.get(2, 1), 7.5);
        assert!(!back.is_hit(1, 0));
    }

    #[test]
    fn depth_raster_rejects_bad_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.dpth");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            DepthRaster::load(&path),
            Err(RenderError::BadDepthRaster(_))
        ));
    }

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img = ColorImage::new(4, 3);
        for y in 0..3 {
            for x in 0..4 {
                img.set(x, y, Rgb::new(x as f64 / 3.0, y as f64 / 2.0, 0.5));
            }
        }
        img.save_png(&path).unwrap();
        let back = ColorImage::load_png(&path).unwrap();
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }
}
