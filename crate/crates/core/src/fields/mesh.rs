//! Level-set triangulation of an occupancy field and OBJ import/export.
//!
//! Each grid cube is split into six tetrahedra that share the cube's main
//! diagonal; the split uses the same diagonal orientation in every cube, so
//! face diagonals agree between neighbouring cubes and the extracted surface
//! is watertight wherever it does not touch the sampling boundary. Triangles
//! are wound so normals point away from the occupied region.

use super::Field;
use crate::geometry::Vec3;
use rayon::prelude::*;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum MeshError {
    #[error("the iso level {0} is never crossed inside the field bounds")]
    EmptySurface(f64),
    #[error("mesh io failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("obj parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let a = self.vertices[t[0] as usize];
                let b = self.vertices[t[1] as usize];
                let c = self.vertices[t[2] as usize];
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .sum()
    }

    pub fn centroid(&self) -> Vec3 {
        if self.vertices.is_empty() {
            return Vec3::zeros();
        }
        self.vertices.iter().sum::<Vec3>() / self.vertices.len() as f64
    }

    /// Applies `f` to every vertex position in place.
    pub fn transform_vertices(&mut self, f: impl Fn(&Vec3) -> Vec3) {
        for v in &mut self.vertices {
            *v = f(v);
        }
    }

    /// Counts undirected edges that do not have exactly two incident
    /// triangles; zero means the mesh is closed.
    pub fn open_edge_count(&self) -> usize {
        let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for e in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let key = (e.0.min(e.1), e.0.max(e.1));
                *counts.entry(key).or_insert(0) += 1;
            }
        }
        counts.values().filter(|&&c| c != 2).count()
    }

    pub fn to_obj_string(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            let _ = writeln!(out, "v {:.16e} {:.16e} {:.16e}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        out
    }

    pub fn from_obj_string(text: &str) -> Result<Self, MeshError> {
        let mut mesh = TriangleMesh::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut parts = trimmed.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let mut coords = [0.0f64; 3];
                    for c in &mut coords {
                        let tok = parts.next().ok_or_else(|| MeshError::Parse {
                            line,
                            message: "vertex needs three coordinates".into(),
                        })?;
                        *c = tok.parse().map_err(|_| MeshError::Parse {
                            line,
                            message: format!("bad coordinate {tok:?}"),
                        })?;
                    }
                    mesh.vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
                }
                Some("f") => {
                    let idx: Vec<u32> = parts
                        .map(|tok| {
                            // Accept `i`, `i/..`, `i//..` forms; only the
                            // vertex index is used.
                            let head = tok.split('/').next().unwrap_or(tok);
                            let v: i64 = head.parse().map_err(|_| MeshError::Parse {
                                line,
                                message: format!("bad face index {tok:?}"),
                            })?;
                            if v < 1 || v as usize > mesh.vertices.len() {
                                return Err(MeshError::Parse {
                                    line,
                                    message: format!("face index {v} out of range"),
                                });
                            }
                            Ok(v as u32 - 1)
                        })
                        .collect::<Result<_, _>>()?;
                    if idx.len() < 3 {
                        return Err(MeshError::Parse {
                            line,
                            message: "face needs at least three vertices".into(),
                        });
                    }
                    for i in 1..idx.len() - 1 {
                        mesh.triangles.push([idx[0], idx[i], idx[i + 1]]);
                    }
                }
                _ => {}
            }
        }
        Ok(mesh)
    }

    pub fn save_obj(&self, path: &Path) -> Result<(), MeshError> {
        std::fs::write(path, self.to_obj_string())?;
        Ok(())
    }

    pub fn load_obj(path: &Path) -> Result<Self, MeshError> {
        Self::from_obj_string(&std::fs::read_to_string(path)?)
    }
}

/// Cube corner offsets; corner 0 and 6 span the shared main diagonal.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const TETS: [[usize; 4]; 6] = [
    [0, 1, 2, 6],
    [0, 2, 3, 6],
    [0, 3, 7, 6],
    [0, 7, 4, 6],
    [0, 4, 5, 6],
    [0, 5, 1, 6],
];

/// Triangulates the `iso` level set of the field's occupancy over a regular
/// grid with `resolution` cells per axis spanning the field bounds.
pub fn extract_mesh(field: &dyn Field, resolution: u32, iso: f64) -> Result<TriangleMesh, MeshError> {
    let res = resolution.max(1) as usize;
    let n1 = res + 1;
    let bounds = field.bounds();
    let size = bounds.size();
    let step = Vec3::new(size.x / res as f64, size.y / res as f64, size.z / res as f64);
    let node_pos = |i: usize, j: usize, k: usize| {
        bounds.min + Vec3::new(step.x * i as f64, step.y * j as f64, step.z * k as f64)
    };
    let node_index = |i: usize, j: usize, k: usize| ((k * n1 + j) * n1 + i) as u32;

    // Occupancy at every grid node, sampled slab by slab.
    let values: Vec<f64> = (0..n1)
        .into_par_iter()
        .flat_map_iter(|k| {
            let mut slab = Vec::with_capacity(n1 * n1);
            for j in 0..n1 {
                for i in 0..n1 {
                    slab.push(field.occupancy(&node_pos(i, j, k)));
                }
            }
            slab
        })
        .collect();
    let value_at = |i: usize, j: usize, k: usize| values[(k * n1 + j) * n1 + i];

    let mut mesh = TriangleMesh::default();
    let mut edge_vertices: HashMap<(u32, u32), u32> = HashMap::new();
    let mut corner_nodes = [0u32; 8];
    let mut corner_pos = [Vec3::zeros(); 8];
    let mut corner_val = [0.0f64; 8];

    let vertex_on_edge = |mesh: &mut TriangleMesh,
                              edge_vertices: &mut HashMap<(u32, u32), u32>,
                              na: u32,
                              nb: u32,
                              pa: Vec3,
                              pb: Vec3,
                              fa: f64,
                              fb: f64| {
        let key = (na.min(nb), na.max(nb));
        *edge_vertices.entry(key).or_insert_with(|| {
            let t = ((iso - fa) / (fb - fa)).clamp(0.0, 1.0);
            mesh.vertices.push(pa + (pb - pa) * t);
            (mesh.vertices.len() - 1) as u32
        })
    };

    for k in 0..res {
        for j in 0..res {
            for i in 0..res {
                for (c, off) in CORNERS.iter().enumerate() {
                    let (ci, cj, ck) = (i + off[0], j + off[1], k + off[2]);
                    corner_nodes[c] = node_index(ci, cj, ck);
                    corner_pos[c] = node_pos(ci, cj, ck);
                    corner_val[c] = value_at(ci, cj, ck);
                }
                for tet in &TETS {
                    let inside: Vec<usize> =
                        tet.iter().copied().filter(|&c| corner_val[c] > iso).collect();
                    let outside: Vec<usize> =
                        tet.iter().copied().filter(|&c| corner_val[c] <= iso).collect();
                    if inside.is_empty() || outside.is_empty() {
                        continue;
                    }
                    let mut edge = |a: usize, b: usize, mesh: &mut TriangleMesh| {
                        vertex_on_edge(
                            mesh,
                            &mut edge_vertices,
                            corner_nodes[a],
                            corner_nodes[b],
                            corner_pos[a],
                            corner_pos[b],
                            corner_val[a],
                            corner_val[b],
                        )
                    };
                    let mut tris: Vec<[u32; 3]> = Vec::with_capacity(2);
                    match inside.len() {
                        1 => {
                            let a = inside[0];
                            tris.push([
                                edge(a, outside[0], &mut mesh),
                                edge(a, outside[1], &mut mesh),
                                edge(a, outside[2], &mut mesh),
                            ]);
                        }
                        3 => {
                            let b = outside[0];
                            tris.push([
                                edge(inside[0], b, &mut mesh),
                                edge(inside[1], b, &mut mesh),
                                edge(inside[2], b, &mut mesh),
                            ]);
                        }
                        2 => {
                            let (a1, a2) = (inside[0], inside[1]);
                            let (b1, b2) = (outside[0], outside[1]);
                            let e11 = edge(a1, b1, &mut mesh);
                            let e12 = edge(a1, b2, &mut mesh);
                            let e21 = edge(a2, b1, &mut mesh);
                            let e22 = edge(a2, b2, &mut mesh);
                            tris.push([e11, e12, e22]);
                            tris.push([e11, e22, e21]);
                        }
                        _ => unreachable!(),
                    }
                    // Point the winding away from the occupied corners.
                    let inward: Vec3 =
                        inside.iter().map(|&c| corner_pos[c]).sum::<Vec3>() / inside.len() as f64;
                    for mut tri in tris {
                        let (p0, p1, p2) = (
                            mesh.vertices[tri[0] as usize],
                            mesh.vertices[tri[1] as usize],
                            mesh.vertices[tri[2] as usize],
                        );
                        let normal = (p1 - p0).cross(&(p2 - p0));
                        if normal.norm() < 1e-12 {
                            continue;
                        }
                        let center = (p0 + p1 + p2) / 3.0;
                        if normal.dot(&(center - inward)) < 0.0 {
                            tri.swap(1, 2);
                        }
                        mesh.triangles.push(tri);
                    }
                }
            }
        }
    }

    if mesh.triangles.is_empty() {
        return Err(MeshError::EmptySurface(iso));
    }
    Ok(mesh)
}
