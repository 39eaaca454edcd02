//! Fully connected occupancy and color networks over Fourier-encoded inputs.
//! The occupancy trunk also produces a geometry feature vector that the color
//! network consumes together with the view direction and surface normal.
//! All gradients are computed by explicit reverse passes over the flat
//! parameter vector.

use super::{fourier_encode, fourier_encode_backward, fourier_len, sigmoid, Aabb, ColorInputGrads, Field, ParamGrad, Rgb};
use crate::geometry::Vec3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::ops::Range;

fn default_hidden() -> usize {
    128
}
fn default_layers() -> usize {
    8
}
fn default_k_pos() -> usize {
    4
}
fn default_k_dir() -> usize {
    2
}
fn default_feature_len() -> usize {
    16
}
fn default_half_extent() -> f64 {
    1.5
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MlpConfig {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_k_pos")]
    pub k_pos: usize,
    #[serde(default = "default_k_dir")]
    pub k_dir: usize,
    #[serde(default = "default_feature_len")]
    pub feature_len: usize,
    #[serde(default = "default_half_extent")]
    pub half_extent: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: default_hidden(),
            layers: default_layers(),
            k_pos: default_k_pos(),
            k_dir: default_k_dir(),
            feature_len: default_feature_len(),
            half_extent: default_half_extent(),
        }
    }
}

/// Settings matching the per-segment tracking networks.
pub fn tracking_mlp() -> MlpConfig {
    MlpConfig { hidden: 128, k_pos: 4, k_dir: 2, ..MlpConfig::default() }
}

/// Settings matching the global-refinement networks.
pub fn global_mlp() -> MlpConfig {
    MlpConfig { hidden: 256, k_pos: 8, k_dir: 4, ..MlpConfig::default() }
}

#[derive(Debug, Clone)]
struct Linear {
    w: Range<usize>,
    b: Range<usize>,
    in_dim: usize,
    out_dim: usize,
}

pub struct MlpField {
    cfg: MlpConfig,
    params: Vec<f64>,
    layout: Vec<(String, Range<usize>)>,
    occ_trunk: Vec<Linear>,
    occ_head: Linear,
    feat_head: Linear,
    col_trunk: Vec<Linear>,
    col_head: Linear,
    pos_weights: Vec<f64>,
}

struct TrunkCache {
    // Pre-activation values per layer; post-ReLU is max(v, 0).
    pre: Vec<Vec<f64>>,
}

impl MlpField {
    pub fn octave_weights(&self) -> &[f64] {
        &self.pos_weights
    }

    pub fn new(cfg: MlpConfig, seed: u64) -> Self {
        let mut layout = Vec::new();
        let mut cursor = 0usize;
        let make = |name: String, in_dim: usize, out_dim: usize, cursor: &mut usize, layout: &mut Vec<(String, Range<usize>)>| {
            let w = *cursor..*cursor + in_dim * out_dim;
            *cursor = w.end;
            let b = *cursor..*cursor + out_dim;
            *cursor = b.end;
            layout.push((format!("{name}.w"), w.clone()));
            layout.push((format!("{name}.b"), b.clone()));
            Linear { w, b, in_dim, out_dim }
        };

        let pos_len = fourier_len(cfg.k_pos);
        let dir_len = fourier_len(cfg.k_dir);
        let trunk_layers = cfg.layers.max(1);

        let mut occ_trunk = Vec::new();
        let mut in_dim = pos_len;
        for l in 0..trunk_layers {
            let layer = make(format!("occupancy.layer{l}"), in_dim, cfg.hidden, &mut cursor, &mut layout);
            in_dim = cfg.hidden;
            occ_trunk.push(layer);
        }
        let occ_head = make("occupancy.head".into(), cfg.hidden, 1, &mut cursor, &mut layout);
        let feat_head = make("occupancy.feature".into(), cfg.hidden, cfg.feature_len, &mut cursor, &mut layout);

        let mut col_trunk = Vec::new();
        let mut in_dim = pos_len + dir_len + 3 + cfg.feature_len;
        for l in 0..trunk_layers {
            let layer = make(format!("color.layer{l}"), in_dim, cfg.hidden, &mut cursor, &mut layout);
            in_dim = cfg.hidden;
            col_trunk.push(layer);
        }
        let col_head = make("color.head".into(), cfg.hidden, 3, &mut cursor, &mut layout);

        let mut field = MlpField {
            pos_weights: vec![1.0; cfg.k_pos],
            cfg,
            params: vec![0.0; cursor],
            layout,
            occ_trunk,
            occ_head,
            feat_head,
            col_trunk,
            col_head,
        };
        field.randomize(seed);
        field
    }

    /// He-style random init; the occupancy head bias starts at logit(0.1) so
    /// a fresh field renders as nearly empty.
    pub fn randomize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = StandardNormal;
        let layers: Vec<(Linear, f64)> = self
            .occ_trunk
            .iter()
            .chain(self.col_trunk.iter())
            .map(|l| (l.clone(), (2.0 / l.in_dim as f64).sqrt()))
            .chain(
                [&self.occ_head, &self.feat_head, &self.col_head]
                    .into_iter()
                    .map(|l| (l.clone(), 0.1 * (1.0 / l.in_dim as f64).sqrt())),
            )
            .collect();
        for (layer, std) in layers {
            for i in layer.w {
                let z: f64 = normal.sample(&mut rng);
                self.params[i] = std * z;
            }
            for i in layer.b {
                self.params[i] = 0.0;
            }
        }
        let occ_bias = self.occ_head.b.start;
        self.params[occ_bias] = super::logit(0.1);
    }

    pub fn config(&self) -> &MlpConfig {
        &self.cfg
    }

    fn linear(&self, layer: &Linear, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.resize(layer.out_dim, 0.0);
        let w = &self.params[layer.w.clone()];
        let b = &self.params[layer.b.clone()];
        for o in 0..layer.out_dim {
            let row = &w[o * layer.in_dim..(o + 1) * layer.in_dim];
            let mut acc = b[o];
            for (wi, xi) in row.iter().zip(input) {
                acc += wi * xi;
            }
            out[o] = acc;
        }
    }

    /// Backward through one linear layer: accumulates parameter gradients and
    /// writes the input gradient.
    fn linear_backward(
        &self,
        layer: &Linear,
        input: &[f64],
        upstream: &[f64],
        grad: &mut ParamGrad,
        d_input: &mut Vec<f64>,
    ) {
        d_input.clear();
        d_input.resize(layer.in_dim, 0.0);
        let w = &self.params[layer.w.clone()];
        for o in 0..layer.out_dim {
            let g = upstream[o];
            if g == 0.0 {
                continue;
            }
            grad.push(layer.b.start + o, g);
            let row_off = layer.w.start + o * layer.in_dim;
            let row = &w[o * layer.in_dim..(o + 1) * layer.in_dim];
            for i in 0..layer.in_dim {
                grad.push(row_off + i, g * input[i]);
                d_input[i] += row[i] * g;
            }
        }
    }

    fn trunk_forward(&self, trunk: &[Linear], input: &[f64]) -> TrunkCache {
        let mut pre = Vec::with_capacity(trunk.len());
        let mut cur = input.to_vec();
        for layer in trunk {
            let mut out = Vec::new();
            self.linear(layer, &cur, &mut out);
            cur = out.iter().map(|v| v.max(0.0)).collect();
            pre.push(out);
        }
        TrunkCache { pre }
    }

    fn trunk_output<'a>(&self, cache: &'a TrunkCache) -> Vec<f64> {
        cache.pre.last().map(|v| v.iter().map(|x| x.max(0.0)).collect()).unwrap_or_default()
    }

    /// Backward through the trunk given the gradient at its (post-ReLU)
    /// output; returns the gradient at the trunk input.
    fn trunk_backward(
        &self,
        trunk: &[Linear],
        input: &[f64],
        cache: &TrunkCache,
        upstream: &[f64],
        grad: &mut ParamGrad,
    ) -> Vec<f64> {
        let mut g: Vec<f64> = upstream.to_vec();
        let mut d_input = Vec::new();
        for (li, layer) in trunk.iter().enumerate().rev() {
            // Gate by ReLU at this layer's output.
            for (gi, pre) in g.iter_mut().zip(&cache.pre[li]) {
                if *pre <= 0.0 {
                    *gi = 0.0;
                }
            }
            let layer_input: Vec<f64> = if li == 0 {
                input.to_vec()
            } else {
                cache.pre[li - 1].iter().map(|v| v.max(0.0)).collect()
            };
            self.linear_backward(layer, &layer_input, &g, grad, &mut d_input);
            g = d_input.clone();
        }
        g
    }

    fn encode_pos(&self, x: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; fourier_len(self.cfg.k_pos)];
        fourier_encode(x, self.cfg.k_pos, Some(&self.pos_weights), &mut out);
        out
    }

    fn color_input(&self, x: &Vec3, dir: &Vec3, normal: &Vec3, feature: &[f64]) -> Vec<f64> {
        let pos_len = fourier_len(self.cfg.k_pos);
        let dir_len = fourier_len(self.cfg.k_dir);
        let mut input = vec![0.0; pos_len + dir_len + 3 + self.cfg.feature_len];
        fourier_encode(x, self.cfg.k_pos, Some(&self.pos_weights), &mut input[..pos_len]);
        fourier_encode(dir, self.cfg.k_dir, None, &mut input[pos_len..pos_len + dir_len]);
        input[pos_len + dir_len] = normal.x;
        input[pos_len + dir_len + 1] = normal.y;
        input[pos_len + dir_len + 2] = normal.z;
        for (i, f) in feature.iter().take(self.cfg.feature_len).enumerate() {
            input[pos_len + dir_len + 3 + i] = *f;
        }
        input
    }

    fn occupancy_logit(&self, x: &Vec3) -> (Vec<f64>, TrunkCache, f64) {
        let input = self.encode_pos(x);
        let cache = self.trunk_forward(&self.occ_trunk, &input);
        let out = self.trunk_output(&cache);
        let mut logit = Vec::new();
        self.linear(&self.occ_head, &out, &mut logit);
        (input, cache, logit[0])
    }
}

impl Field for MlpField {
    fn kind_name(&self) -> &'static str {
        "mlp"
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

    fn occupancy(&self, x: &Vec3) -> f64 {
        sigmoid(self.occupancy_logit(x).2)
    }

    fn spatial_gradient(&self, x: &Vec3) -> Vec3 {
        let (input, cache, logit) = self.occupancy_logit(x);
        let o = sigmoid(logit);
        let mut scratch = ParamGrad::default();
        let out = self.trunk_output(&cache);
        let mut d_out = Vec::new();
        // d logit / d trunk output is the head's weight row.
        self.linear_backward(&self.occ_head, &out, &[1.0], &mut scratch, &mut d_out);
        scratch.clear();
        let d_enc = self.trunk_backward(&self.occ_trunk, &input, &cache, &d_out, &mut scratch);
        fourier_encode_backward(x, self.cfg.k_pos, Some(&self.pos_weights), &d_enc) * (o * (1.0 - o))
    }

    fn feature_len(&self) -> usize {
        self.cfg.feature_len
    }

    fn feature(&self, x: &Vec3, out: &mut Vec<f64>) {
        let input = self.encode_pos(x);
        let cache = self.trunk_forward(&self.occ_trunk, &input);
        let trunk_out = self.trunk_output(&cache);
        self.linear(&self.feat_head, &trunk_out, out);
    }

    fn color(&self, x: &Vec3, dir: &Vec3, normal: &Vec3, feature: &[f64]) -> Rgb {
        let input = self.color_input(x, dir, normal, feature);
        let cache = self.trunk_forward(&self.col_trunk, &input);
        let out = self.trunk_output(&cache);
        let mut rgb = Vec::new();
        self.linear(&self.col_head, &out, &mut rgb);
        Rgb::new(sigmoid(rgb[0]), sigmoid(rgb[1]), sigmoid(rgb[2]))
    }

    fn color_uses_geometry(&self) -> bool {
        true
    }

    fn occupancy_backward(&self, x: &Vec3, upstream: f64, grad: &mut ParamGrad) -> Vec3 {
        let (input, cache, logit) = self.occupancy_logit(x);
        let o = sigmoid(logit);
        let g = upstream * o * (1.0 - o);
        let out = self.trunk_output(&cache);
        let mut d_out = Vec::new();
        self.linear_backward(&self.occ_head, &out, &[g], grad, &mut d_out);
        let d_enc = self.trunk_backward(&self.occ_trunk, &input, &cache, &d_out, grad);
        fourier_encode_backward(x, self.cfg.k_pos, Some(&self.pos_weights), &d_enc)
    }

    fn color_backward(
        &self,
        x: &Vec3,
        dir: &Vec3,
        normal: &Vec3,
        feature: &[f64],
        upstream: &Rgb,
        grad: &mut ParamGrad,
    ) -> ColorInputGrads {
        let input = self.color_input(x, dir, normal, feature);
        let cache = self.trunk_forward(&self.col_trunk, &input);
        let out = self.trunk_output(&cache);
        let mut rgb = Vec::new();
        self.linear(&self.col_head, &out, &mut rgb);
        let up: Vec<f64> = (0..3)
            .map(|c| {
                let s = sigmoid(rgb[c]);
                upstream[c] * s * (1.0 - s)
            })
            .collect();
        let mut d_out = Vec::new();
        self.linear_backward(&self.col_head, &out, &up, grad, &mut d_out);
        let d_input = self.trunk_backward(&self.col_trunk, &input, &cache, &d_out, grad);

        let pos_len = fourier_len(self.cfg.k_pos);
        let dir_len = fourier_len(self.cfg.k_dir);
        let position =
            fourier_encode_backward(x, self.cfg.k_pos, Some(&self.pos_weights), &d_input[..pos_len]);
        let direction =
            fourier_encode_backward(dir, self.cfg.k_dir, None, &d_input[pos_len..pos_len + dir_len]);
        let normal_grad = Vec3::new(
            d_input[pos_len + dir_len],
            d_input[pos_len + dir_len + 1],
            d_input[pos_len + dir_len + 2],
        );
        ColorInputGrads {
            position,
            direction,
            normal: normal_grad,
            feature: d_input[pos_len + dir_len + 3..].to_vec(),
        }
    }

    fn feature_backward(&self, x: &Vec3, upstream: &[f64], grad: &mut ParamGrad) -> Vec3 {
        let input = self.encode_pos(x);
        let cache = self.trunk_forward(&self.occ_trunk, &input);
        let out = self.trunk_output(&cache);
        let mut d_out = Vec::new();
        self.linear_backward(&self.feat_head, &out, upstream, grad, &mut d_out);
        let d_enc = self.trunk_backward(&self.occ_trunk, &input, &cache, &d_out, grad);
        fourier_encode_backward(x, self.cfg.k_pos, Some(&self.pos_weights), &d_enc)
    }

    fn set_octave_weights(&mut self, weights: &[f64]) {
        for (j, w) in self.pos_weights.iter_mut().enumerate() {
            *w = weights.get(j).copied().unwrap_or(1.0);
        }
    }

    fn position_octaves(&self) -> usize {
        self.cfg.k_pos
    }
}
