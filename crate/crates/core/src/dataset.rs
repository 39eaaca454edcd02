//! Observation rasters (segmentation labels, optical flow, cached depth)
//! and the on-disk dataset layout:
//!
//! ```text
//! dataset/
//!   intrinsics.toml         pinhole parameters
//!   frames/0000.png …       8-bit color
//!   masks/0000.png …        8-bit labels: 0 background, 1 object, 2 hand
//!   flow/0001.flo …         flow from frame i-1 to i on frame i-1's grid
//!   depth/0000.dpth …       optional ground-truth depth
//!   poses.csv               optional ground-truth camera-to-object poses
//! ```
//!
//! Flow and poses are optional: real captures provide only frames and masks.

use crate::geometry::{Camera, Pixel, Trajectory, TrajectoryError};
use crate::render::{ColorImage, DepthRaster, RenderError};
use nalgebra::{Matrix2, Vector2};
use std::path::{Path, PathBuf};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_OBJECT: u8 = 1;
pub const LABEL_HAND: u8 = 2;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("{0}")]
    Render(#[from] RenderError),
    #[error("{0}")]
    Trajectory(#[from] TrajectoryError),
    #[error("dataset io failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad intrinsics file: {0}")]
    BadIntrinsics(String),
    #[error("mask {path} holds label {label}, expected 0, 1, or 2")]
    InvalidLabel { path: PathBuf, label: u8 },
    #[error("bad flow file: {0}")]
    BadFlow(String),
    #[error("frame {frame} rasters disagree on dimensions")]
    DimensionMismatch { frame: usize },
    #[error("dataset has no frames")]
    Empty,
}

/// Per-pixel segmentation labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize) -> Self {
        LabelMask { width, height, labels: vec![LABEL_BACKGROUND; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    pub fn is_object(&self, x: usize, y: usize) -> bool {
        self.get(x, y) == LABEL_OBJECT
    }

    pub fn is_hand(&self, x: usize, y: usize) -> bool {
        self.get(x, y) == LABEL_HAND
    }

    pub fn object_pixel_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == LABEL_OBJECT).count()
    }

    /// Pixel coordinates carrying the given label, in row-major order.
    pub fn pixels_with_label(&self, label: u8) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) == label {
                    out.push((x, y));
                }
            }
        }
        out
    }

    /// Pixels eligible for ray sampling: everything except the hand.
    pub fn non_hand_pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.is_hand(x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<(), DatasetError> {
        let mut img = image::GrayImage::new(self.width as u32, self.height as u32);
        for (y, row) in self.labels.chunks(self.width).enumerate() {
            for (x, l) in row.iter().enumerate() {
                img.put_pixel(x as u32, y as u32, image::Luma([*l]));
            }
        }
        img.save(path).map_err(RenderError::from)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self, DatasetError> {
        let img = image::open(path).map_err(RenderError::from)?.into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut mask = LabelMask::new(w, h);
        for (x, y, p) in img.enumerate_pixels() {
            if p[0] > LABEL_HAND {
                return Err(DatasetError::InvalidLabel { path: path.to_path_buf(), label: p[0] });
            }
            mask.set(x as usize, y as usize, p[0]);
        }
        Ok(mask)
    }
}

const FLO_MAGIC: f32 = 202021.25;

/// Dense optical flow in pixels; NaN components mark pixels without flow.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 2]>,
}

impl FlowField {
    pub fn new(width: usize, height: usize) -> Self {
        FlowField { width, height, data: vec![[f64::NAN; 2]; width * height] }
    }

    pub fn filled(width: usize, height: usize, value: [f64; 2]) -> Self {
        FlowField { width, height, data: vec![value; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: [f64; 2]) {
        self.data[y * self.width + x] = value;
    }

    pub fn is_defined(&self, x: usize, y: usize) -> bool {
        let v = self.get(x, y);
        v[0].is_finite() && v[1].is_finite()
    }

    /// Bilinear flow lookup and its Jacobian with respect to the pixel
    /// position. `None` when the footprint leaves the raster or touches an
    /// undefined pixel.
    pub fn sample_bilinear(&self, p: &Pixel) -> Option<(Vector2<f64>, Matrix2<f64>)> {
        let x0f = p.x.floor();
        let y0f = p.y.floor();
        let (x0, y0) = (x0f as isize, y0f as isize);
        if x0 < 0 || y0 < 0 || x0 + 1 >= self.width as isize || y0 + 1 >= self.height as isize {
            return None;
        }
        let (x0, y0) = (x0 as usize, y0 as usize);
        let fx = p.x - x0f;
        let fy = p.y - y0f;
        let corners = [
            self.get(x0, y0),
            self.get(x0 + 1, y0),
            self.get(x0, y0 + 1),
            self.get(x0 + 1, y0 + 1),
        ];
        if corners.iter().any(|c| !(c[0].is_finite() && c[1].is_finite())) {
            return None;
        }
        let [c00, c10, c01, c11] = corners.map(|c| Vector2::new(c[0], c[1]));
        let value = c00 * (1.0 - fx) * (1.0 - fy)
            + c10 * fx * (1.0 - fy)
            + c01 * (1.0 - fx) * fy
            + c11 * fx * fy;
        let ddx = (c10 - c00) * (1.0 - fy) + (c11 - c01) * fy;
        let ddy = (c01 - c00) * (1.0 - fx) + (c11 - c10) * fx;
        Some((value, Matrix2::from_columns(&[ddx, ddy])))
    }

    /// Middlebury-style binary format: f32 magic, i32 width/height, then
    /// interleaved (u, v) f32 pairs, all little-endian.
    pub fn save_flo(&self, path: &Path) -> Result<(), DatasetError> {
        use std::io::Write;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(&FLO_MAGIC.to_le_bytes())?;
        file.write_all(&(self.width as i32).to_le_bytes())?;
        file.write_all(&(self.height as i32).to_le_bytes())?;
        for v in &self.data {
            file.write_all(&(v[0] as f32).to_le_bytes())?;
            file.write_all(&(v[1] as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load_flo(path: &Path) -> Result<Self, DatasetError> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 12 {
            return Err(DatasetError::BadFlow("file shorter than header".into()));
        }
        let magic = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
        if magic != FLO_MAGIC {
            return Err(DatasetError::BadFlow(format!("bad magic {magic}")));
        }
        let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if width <= 0 || height <= 0 {
            return Err(DatasetError::BadFlow(format!("bad dimensions {width}x{height}")));
        }
        let (width, height) = (width as usize, height as usize);
        let expected = 12 + width * height * 8;
        if bytes.len() != expected {
            return Err(DatasetError::BadFlow(format!(
                "payload is {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let mut flow = FlowField::new(width, height);
        for (i, chunk) in bytes[12..].chunks_exact(8).enumerate() {
            let u = f32::from_le_bytes(chunk[0..4].try_into().unwrap()) as f64;
            let v = f32::from_le_bytes(chunk[4..8].try_into().unwrap()) as f64;
            flow.data[i] = [u, v];
        }
        Ok(flow)
    }
}

/// Everything observed for one frame, plus the depth cache written during
/// tracking.
#[derive(Debug, Clone)]
pub struct FrameObservation {
    pub color: ColorImage,
    pub labels: LabelMask,
    /// Flow from the previous capture frame to this one, on the previous
    /// frame's pixel grid.
    pub flow: Option<FlowField>,
    pub cached_depth: Option<DepthRaster>,
}

impl FrameObservation {
    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    fn check_dimensions(&self, frame: usize) -> Result<(), DatasetError> {
        let ok = self.labels.width == self.color.width && self.labels.height == self.color.height;
        if ok {
            Ok(())
        } else {
            Err(DatasetError::DimensionMismatch { frame })
        }
    }
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct IntrinsicsDoc {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

pub fn save_intrinsics(path: &Path, camera: &Camera) -> Result<(), DatasetError> {
    let doc = IntrinsicsDoc {
        fx: camera.fx,
        fy: camera.fy,
        cx: camera.cx,
        cy: camera.cy,
        width: camera.width,
        height: camera.height,
    };
    let text = toml::to_string(&doc).map_err(|e| DatasetError::BadIntrinsics(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_intrinsics(path: &Path) -> Result<Camera, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let doc: IntrinsicsDoc = toml::from_str(&std::fs::read_to_string(path)?)
        .map_err(|e| DatasetError::BadIntrinsics(e.to_string()))?;
    Camera::new(doc.fx, doc.fy, doc.cx, doc.cy, doc.width, doc.height)
        .map_err(|e| DatasetError::BadIntrinsics(e.to_string()))
}

/// A full input sequence with optional ground truth.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub camera: Camera,
    pub frames: Vec<FrameObservation>,
    pub gt_poses: Option<Trajectory>,
    pub gt_depths: Option<Vec<DepthRaster>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn frame_name(i: usize) -> String {
    format!("{i:04}")
}

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<(), DatasetError> {
    if dataset.frames.is_empty() {
        return Err(DatasetError::Empty);
    }
    std::fs::create_dir_all(dir.join("frames"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    save_intrinsics(&dir.join("intrinsics.toml"), &dataset.camera)?;
    let any_flow = dataset.frames.iter().any(|f| f.flow.is_some());
    if any_flow {
        std::fs::create_dir_all(dir.join("flow"))?;
    }
    if dataset.gt_depths.is_some() {
        std::fs::create_dir_all(dir.join("depth"))?;
    }
    for (i, frame) in dataset.frames.iter().enumerate() {
        frame.check_dimensions(i)?;
        frame.color.save_png(&dir.join("frames").join(format!("{}.png", frame_name(i))))?;
        frame.labels.save_png(&dir.join("masks").join(format!("{}.png", frame_name(i))))?;
        if let Some(flow) = &frame.flow {
            flow.save_flo(&dir.join("flow").join(format!("{}.flo", frame_name(i))))?;
        }
    }
    if let Some(depths) = &dataset.gt_depths {
        for (i, depth) in depths.iter().enumerate() {
            depth.save(&dir.join("depth").join(format!("{}.dpth", frame_name(i))))?;
        }
    }
    if let Some(traj) = &dataset.gt_poses {
        traj.save_csv(&dir.join("poses.csv"))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let camera = load_intrinsics(&dir.join("intrinsics.toml"))?;
    let mut frames = Vec::new();
    loop {
        let i = frames.len();
        let color_path = dir.join("frames").join(format!("{}.png", frame_name(i)));
        if !color_path.exists() {
            break;
        }
        let mask_path = dir.join("masks").join(format!("{}.png", frame_name(i)));
        if !mask_path.exists() {
            return Err(DatasetError::MissingFile(mask_path));
        }
        let color = ColorImage::load_png(&color_path)?;
        let labels = LabelMask::load_png(&mask_path)?;
        let flow_path = dir.join("flow").join(format!("{}.flo", frame_name(i)));
        let flow = if flow_path.exists() { Some(FlowField::load_flo(&flow_path)?) } else { None };
        let frame = FrameObservation { color, labels, flow, cached_depth: None };
        frame.check_dimensions(i)?;
        frames.push(frame);
    }
    if frames.is_empty() {
        return Err(DatasetError::Empty);
    }
    let poses_path = dir.join("poses.csv");
    let gt_poses = if poses_path.exists() { Some(Trajectory::load_csv(&poses_path)?) } else { None };
    let mut gt_depths = Vec::new();
    for i in 0..frames.len() {
        let depth_path = dir.join("depth").join(format!("{}.dpth", frame_name(i)));
        if !depth_path.exists() {
            break;
        }
        gt_depths.push(DepthRaster::load(&depth_path)?);
    }
    let gt_depths = if gt_depths.len() == frames.len() { Some(gt_depths) } else { None };
    Ok(Dataset { camera, frames, gt_poses, gt_depths })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Rgb;
    use crate::geometry::{Pose, TrajectoryEntry, Vec3};
    use nalgebra::UnitQuaternion;

    fn tiny_dataset(with_flow: bool) -> Dataset {
        let camera = Camera::new(20.0, 20.0, 3.5, 3.5, 8, 8).unwrap();
        let mut frames = Vec::new();
        for i in 0..3usize {
            let mut color = ColorImage::new(8, 8);
            let mut labels = LabelMask::new(8, 8);
            for y in 0..8 {
                for x in 0..8 {
                    // Quantization-aligned values so PNG round trips exactly.
                    color.set(x, y, Rgb::new((x as f64 * 30.0) / 255.0, (y as f64 * 20.0) / 255.0, i as f64 / 255.0));
                    labels.set(x, y, ((x + y + i) % 3) as u8);
                }
            }
            let flow = with_flow.then(|| {
                let mut f = FlowField::new(8, 8);
                for y in 0..8 {
                    for x in 0..8 {
                        if (x + y) % 2 == 0 {
                            f.set(x, y, [x as f64 * 0.5, -(y as f64) * 0.25]);
                        }
                    }
                }
                f
            });
            frames.push(FrameObservation { color, labels, flow, cached_depth: None });
        }
        let entries = (0..3)
            .map(|i| TrajectoryEntry {
                frame: i,
                pose: Pose::new(
                    UnitQuaternion::from_axis_angle(&Vec3::y_axis(), i as f64 * 0.1),
                    Vec3::new(0.0, 0.0, -2.5 + i as f64 * 0.01),
                ),
            })
            .collect();
        Dataset {
            camera,
            frames,
            gt_poses: Some(Trajectory { entries, scale: 1.0 }),
            gt_depths: None,
        }
    }

    #[test]
    fn dataset_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = tiny_dataset(true);
        save_dataset(dir.path(), &dataset).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.frames.len(), 3);
        assert_eq!(back.camera.width, 8);
        for (a, b) in dataset.frames.iter().zip(&back.frames) {
            assert_eq!(a.labels, b.labels);
            for (pa, pb) in a.color.pixels.iter().zip(&b.color.pixels) {
                assert_eq!(pa, pb);
            }
            let (fa, fb) = (a.flow.as_ref().unwrap(), b.flow.as_ref().unwrap());
            for (va, vb) in fa.data.iter().zip(&fb.data) {
                for c in 0..2 {
                    assert_eq!(
                        (va[c] as f32).to_bits(),
                        (vb[c] as f32).to_bits(),
                        "flow must survive the f32 raster exactly"
                    );
                }
            }
        }
        let (ga, gb) = (dataset.gt_poses.unwrap(), back.gt_poses.unwrap());
        for (ea, eb) in ga.entries.iter().zip(&gb.entries) {
            assert_eq!(ea.pose.translation, eb.pose.translation);
            assert_eq!(ea.pose.rotation.coords, eb.pose.rotation.coords);
        }
    }

    #[test]
    fn missing_flow_is_not_an_error() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &tiny_dataset(false)).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert!(back.frames.iter().all(|f| f.flow.is_none()));
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let dataset = tiny_dataset(true);
        save_dataset(a.path(), &dataset).unwrap();
        save_dataset(b.path(), &dataset).unwrap();
        for rel in ["frames/0001.png", "masks/0002.png", "flow/0000.flo", "poses.csv", "intrinsics.toml"] {
            let ba = std::fs::read(a.path().join(rel)).unwrap();
            let bb = std::fs::read(b.path().join(rel)).unwrap();
            assert_eq!(ba, bb, "{rel} differs between identical saves");
        }
    }

    #[test]
    fn invalid_labels_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        let mut img = image::GrayImage::new(4, 4);
        img.put_pixel(2, 2, image::Luma([7]));
        img.save(&path).unwrap();
        match LabelMask::load_png(&path) {
            Err(DatasetError::InvalidLabel { label: 7, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn flo_round_trip_keeps_nan_holes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flo");
        let mut flow = FlowField::new(3, 2);
        flow.set(1, 0, [1.5, -2.25]);
        flow.save_flo(&path).unwrap();
        let back = FlowField::load_flo(&path).unwrap();
        assert!(back.is_defined(1, 0));
        assert_eq!(back.get(1, 0), [1.5, -2.25]);
        assert!(!back.is_defined(0, 0));
    }

    #[test]
    fn bilinear_flow_reproduces_linear_fields_with_exact_jacobian() {
        // A flow that is linear in the pixel position is represented exactly
        // by bilinear interpolation, so value and Jacobian are closed-form.
        let a = Matrix2::new(0.01, 0.002, -0.003, 0.008);
        let b = Vector2::new(0.3, -0.2);
        let mut flow = FlowField::new(16, 12);
        for y in 0..12 {
            for x in 0..16 {
                let v = a * Vector2::new(x as f64, y as f64) + b;
                flow.set(x, y, [v.x, v.y]);
            }
        }
        for p in [Pixel::new(3.25, 4.75), Pixel::new(10.5, 0.5), Pixel::new(14.99, 10.01)] {
            let (value, jac) = flow.sample_bilinear(&p).unwrap();
            let expect = a * Vector2::new(p.x, p.y) + b;
            assert!((value - expect).norm() < 1e-12);
            assert!((jac - a).norm() < 1e-12);
        }
        assert!(flow.sample_bilinear(&Pixel::new(15.5, 5.0)).is_none());
        assert!(flow.sample_bilinear(&Pixel::new(-0.5, 5.0)).is_none());
    }

    #[test]
    fn undefined_corners_invalidate_bilinear_samples() {
        let mut flow = FlowField::filled(4, 4, [1.0, 1.0]);
        flow.set(2, 2, [f64::NAN, f64::NAN]);
        assert!(flow.sample_bilinear(&Pixel::new(0.5, 0.5)).is_some());
        assert!(flow.sample_bilinear(&Pixel::new(1.7, 1.7)).is_none());
    }
}
