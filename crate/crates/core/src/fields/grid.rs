//! Dense voxel field: occupancy is the sigmoid of a trilinearly interpolated
//! logit grid, color is the sigmoid of a per-channel logit grid plus a
//! low-order view-direction term. Parameter gradients of the interpolation
//! are exact, which makes this the field of choice for gradient checks and
//! for fast CPU tracking.

use super::{sigmoid, Aabb, ColorInputGrads, Field, ParamGrad, Rgb};
use crate::geometry::Vec3;
use std::ops::Range;

fn default_resolution() -> u32 {
    48
}
fn default_half_extent() -> f64 {
    1.2
}
fn default_logit_clamp() -> f64 {
    8.0
}
fn default_color_clamp() -> f64 {
    6.0
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GridConfig {
    /// Nodes per axis, at least 2.
    #[serde(default = "default_resolution")]
    pub resolution: u32,
    /// Grid spans `[-half_extent, half_extent]^3`.
    #[serde(default = "default_half_extent")]
    pub half_extent: f64,
    /// Occupancy logits are clamped to this magnitude after optimizer steps,
    /// keeping the field plastic (the sigmoid never fully saturates).
    #[serde(default = "default_logit_clamp")]
    pub logit_clamp: f64,
    #[serde(default = "default_color_clamp")]
    pub color_clamp: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            resolution: default_resolution(),
            half_extent: default_half_extent(),
            logit_clamp: default_logit_clamp(),
            color_clamp: default_color_clamp(),
        }
    }
}

struct Cell {
    corners: [usize; 8],
    weights: [f64; 8],
    // d weight / d position, one Vec3 per corner
    dweights: [Vec3; 8],
}

#[derive(Clone)]
pub struct GridField {
    cfg: GridConfig,
    n: usize,
    step: f64,
    params: Vec<f64>,
    layout: Vec<(String, Range<usize>)>,
    occ_off: usize,
    color_off: usize,
    dir_off: usize,
}

impl GridField {
    pub fn new(cfg: GridConfig) -> Self {
        let n = (cfg.resolution.max(2)) as usize;
        let n3 = n * n * n;
        let occ_off = 0;
        let color_off = n3;
        let dir_off = color_off + 3 * n3;
        let layout = vec![
            ("occupancy_logits".to_string(), occ_off..occ_off + n3),
            ("color_logits".to_string(), color_off..color_off + 3 * n3),
            ("direction_weights".to_string(), dir_off..dir_off + 9),
        ];
        let step = 2.0 * cfg.half_extent / (n as f64 - 1.0);
        GridField { cfg, n, step, params: vec![0.0; dir_off + 9], layout, occ_off, color_off, dir_off }
    }

    pub fn config(&self) -> &GridConfig {
        &self.cfg
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.n + j) * self.n + i
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let min = -self.cfg.half_extent;
        Vec3::new(
            min + i as f64 * self.step,
            min + j as f64 * self.step,
            min + k as f64 * self.step,
        )
    }

    pub fn resolution(&self) -> usize {
        self.n
    }

    /// Writes occupancy logits directly from a function of node position.
    pub fn fill_occupancy_logits<F: FnMut(&Vec3) -> f64>(&mut self, mut f: F) {
        let clamp = self.cfg.logit_clamp;
        for k in 0..self.n {
            for j in 0..self.n {
                for i in 0..self.n {
                    let idx = self.occ_off + self.node_index(i, j, k);
                    let p = self.node_position(i, j, k);
                    self.params[idx] = f(&p).clamp(-clamp, clamp);
                }
            }
        }
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        self.bounds().contains(x)
    }

    fn cell(&self, x: &Vec3) -> Option<Cell> {
        if !self.contains(x) {
            return None;
        }
        let min = -self.cfg.half_extent;
        let mut idx = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let u = (x[a] - min) / self.step;
            let i = (u.floor() as isize).clamp(0, self.n as isize - 2) as usize;
            idx[a] = i;
            frac[a] = u - i as f64;
        }
        let mut corners = [0usize; 8];
        let mut weights = [0.0f64; 8];
        let mut dweights = [Vec3::zeros(); 8];
        let inv_step = 1.0 / self.step;
        for c in 0..8 {
            let di = c & 1;
            let dj = (c >> 1) & 1;
            let dk = (c >> 2) & 1;
            corners[c] = self.node_index(idx[0] + di, idx[1] + dj, idx[2] + dk);
            let wx = if di == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dj == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dk == 1 { frac[2] } else { 1.0 - frac[2] };
            weights[c] = wx * wy * wz;
            let sx = if di == 1 { 1.0 } else { -1.0 };
            let sy = if dj == 1 { 1.0 } else { -1.0 };
            let sz = if dk == 1 { 1.0 } else { -1.0 };
            dweights[c] = Vec3::new(sx * wy * wz, wx * sy * wz, wx * wy * sz) * inv_step;
        }
        Some(Cell { corners, weights, dweights })
    }

    fn interp(&self, cell: &Cell, offset: usize) -> f64 {
        let mut v = 0.0;
        for c in 0..8 {
            v += self.params[offset + cell.corners[c]] * cell.weights[c];
        }
        v
    }

    fn interp_gradient(&self, cell: &Cell, offset: usize) -> Vec3 {
        let mut g = Vec3::zeros();
        for c in 0..8 {
            g += cell.dweights[c] * self.params[offset + cell.corners[c]];
        }
        g
    }

    fn dir_weight(&self, channel: usize) -> Vec3 {
        Vec3::new(
            self.params[self.dir_off + channel * 3],
            self.params[self.dir_off + channel * 3 + 1],
            self.params[self.dir_off + channel * 3 + 2],
        )
    }
}

impl Field for GridField {
    fn kind_name(&self) -> &'static str {
        "grid"
    }

    fn bounds(&self) -> Aabb {
        Aabb::centered(self.cfg.half_extent)
    }

    fn param_len(&self) -> usize {
        self.params.len()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn param_layout(&self) -> &[(String, Range<usize>)] {
        &self.layout
    }

    fn clamp_params(&mut self) {
        let n3 = self.n * self.n * self.n;
        let (lc, cc) = (self.cfg.logit_clamp, self.cfg.color_clamp);
        for v in &mut self.params[self.occ_off..self.occ_off + n3] {
            *v = v.clamp(-lc, lc);
        }
        for v in &mut self.params[self.color_off..] {
            *v = v.clamp(-cc, cc);
        }
    }

    fn occupancy(&self, x: &Vec3) -> f64 {
        match self.cell(x) {
            Some(cell) => sigmoid(self.interp(&cell, self.occ_off)),
            None => 0.0,
        }
    }

    fn spatial_gradient(&self, x: &Vec3) -> Vec3 {
        match self.cell(x) {
            Some(cell) => {
                let o = sigmoid(self.interp(&cell, self.occ_off));
                self.interp_gradient(&cell, self.occ_off) * (o * (1.0 - o))
            }
            None => Vec3::zeros(),
        }
    }

    fn color(&self, x: &Vec3, dir: &Vec3, _normal: &Vec3, _feature: &[f64]) -> Rgb {
        match self.cell(x) {
            Some(cell) => {
                let mut rgb = Rgb::zeros();
                for ch in 0..3 {
                    let raw = self.interp(&cell, self.color_off + ch * self.n * self.n * self.n)
                        + self.dir_weight(ch).dot(dir);
                    rgb[ch] = sigmoid(raw);
                }
                rgb
            }
            None => Rgb::new(0.5, 0.5, 0.5),
        }
    }

    fn occupancy_backward(&self, x: &Vec3, upstream: f64, grad: &mut ParamGrad) -> Vec3 {
        match self.cell(x) {
            Some(cell) => {
                let logit = self.interp(&cell, self.occ_off);
                let o = sigmoid(logit);
                let g = upstream * o * (1.0 - o);
                for c in 0..8 {
                    grad.push(self.occ_off + cell.corners[c], g * cell.weights[c]);
                }
                self.interp_gradient(&cell, self.occ_off) * g
            }
            None => Vec3::zeros(),
        }
    }

    fn color_backward(
        &self,
        x: &Vec3,
        dir: &Vec3,
        _normal: &Vec3,
        _feature: &[f64],
        upstream: &Rgb,
        grad: &mut ParamGrad,
    ) -> ColorInputGrads {
        let mut out = ColorInputGrads::default();
        let n3 = self.n * self.n * self.n;
        if let Some(cell) = self.cell(x) {
            for ch in 0..3 {
                let off = self.color_off + ch * n3;
                let w = self.dir_weight(ch);
                let raw = self.interp(&cell, off) + w.dot(dir);
                let s = sigmoid(raw);
                let g = upstream[ch] * s * (1.0 - s);
                if g == 0.0 {
                    continue;
                }
                for c in 0..8 {
                    grad.push(off + cell.corners[c], g * cell.weights[c]);
                }
                for a in 0..3 {
                    grad.push(self.dir_off + ch * 3 + a, g * dir[a]);
                }
                out.position += self.interp_gradient(&cell, off) * g;
                out.direction += w * g;
            }
        }
        out
    }
}
