//! Ordered per-frame poses plus the scale of their reconstruction, with CSV
//! and TOML serializations. Floats are written with 17 significant digits so
//! that every f64 round-trips bit-exactly.

use super::{Pose, Vec3};
use nalgebra::{Quaternion, UnitQuaternion};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("toml error: {0}")]
    Toml(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEntry {
    pub frame: usize,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub entries: Vec<TrajectoryEntry>,
    pub scale: f64,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl Trajectory {
    pub fn new(entries: Vec<TrajectoryEntry>, scale: f64) -> Self {
        Trajectory { entries, scale }
    }

    pub fn from_poses<I: IntoIterator<Item = (usize, Pose)>>(poses: I) -> Self {
        Trajectory {
            entries: poses.into_iter().map(|(frame, pose)| TrajectoryEntry { frame, pose }).collect(),
            scale: 1.0,
        }
    }

    pub fn pose_of(&self, frame: usize) -> Option<&Pose> {
        self.entries.iter().find(|e| e.frame == frame).map(|e| &e.pose)
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.entries.iter().map(|e| e.pose).collect()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# scale {}", fmt_f64(self.scale));
        let _ = writeln!(out, "frame,qw,qx,qy,qz,tx,ty,tz");
        for e in &self.entries {
            let q = e.pose.rotation.quaternion();
            let t = e.pose.translation;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                e.frame,
                fmt_f64(q.w),
                fmt_f64(q.i),
                fmt_f64(q.j),
                fmt_f64(q.k),
                fmt_f64(t.x),
                fmt_f64(t.y),
                fmt_f64(t.z)
            );
        }
        out
    }

    pub fn from_csv_string(text: &str) -> Result<Self, TrajectoryError> {
        let mut scale = 1.0;
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# scale") {
                scale = rest.trim().parse::<f64>().map_err(|e| TrajectoryError::Parse {
                    line: idx + 1,
                    message: format!("bad scale: {e}"),
                })?;
                continue;
            }
            if line.starts_with('#') || line.starts_with("frame") {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(TrajectoryError::Parse {
                    line: idx + 1,
                    message: format!("expected 8 fields, got {}", fields.len()),
                });
            }
            let num = |i: usize| -> Result<f64, TrajectoryError> {
                fields[i].trim().parse::<f64>().map_err(|e| TrajectoryError::Parse {
                    line: idx + 1,
                    message: format!("bad float in field {i}: {e}"),
                })
            };
            let frame = fields[0].trim().parse::<usize>().map_err(|e| TrajectoryError::Parse {
                line: idx + 1,
                message: format!("bad frame index: {e}"),
            })?;
            let q = Quaternion::new(num(1)?, num(2)?, num(3)?, num(4)?);
            let pose = Pose::new(
                UnitQuaternion::new_unchecked(q),
                Vec3::new(num(5)?, num(6)?, num(7)?),
            );
            entries.push(TrajectoryEntry { frame, pose });
        }
        Ok(Trajectory { entries, scale })
    }

    pub fn to_toml_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scale = {}", fmt_f64(self.scale));
        for e in &self.entries {
            let q = e.pose.rotation.quaternion();
            let t = e.pose.translation;
            let _ = writeln!(out, "\n[[frames]]");
            let _ = writeln!(out, "index = {}", e.frame);
            let _ = writeln!(
                out,
                "rotation = [{}, {}, {}, {}]",
                fmt_f64(q.w),
                fmt_f64(q.i),
                fmt_f64(q.j),
                fmt_f64(q.k)
            );
            let _ = writeln!(out, "translation = [{}, {}, {}]", fmt_f64(t.x), fmt_f64(t.y), fmt_f64(t.z));
        }
        out
    }

    pub fn from_toml_string(text: &str) -> Result<Self, TrajectoryError> {
        #[derive(serde::Deserialize)]
        struct FrameDoc {
            index: usize,
            rotation: [f64; 4],
            translation: [f64; 3],
        }
        #[derive(serde::Deserialize)]
        struct Doc {
            scale: f64,
            #[serde(default)]
            frames: Vec<FrameDoc>,
        }
        let doc: Doc = toml::from_str(text).map_err(|e| TrajectoryError::Toml(e.to_string()))?;
        Ok(Trajectory {
            scale: doc.scale,
            entries: doc
                .frames
                .into_iter()
                .map(|f| TrajectoryEntry {
                    frame: f.index,
                    pose: Pose::new(
                        UnitQuaternion::new_unchecked(Quaternion::new(
                            f.rotation[0],
                            f.rotation[1],
                            f.rotation[2],
                            f.rotation[3],
                        )),
                        Vec3::new(f.translation[0], f.translation[1], f.translation[2]),
                    ),
                })
                .collect(),
        })
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), TrajectoryError> {
        Ok(std::fs::write(path, self.to_csv_string())?)
    }

    pub fn load_csv(path: &Path) -> Result<Self, TrajectoryError> {
        Self::from_csv_string(&std::fs::read_to_string(path)?)
    }

    pub fn save_toml(&self, path: &Path) -> Result<(), TrajectoryError> {
        Ok(std::fs::write(path, self.to_toml_string())?)
    }

    pub fn load_toml(path: &Path) -> Result<Self, TrajectoryError> {
        Self::from_toml_string(&std::fs::read_to_string(path)?)
    }
}
