//! First-order optimizer for field parameters and pose twists.

use crate::geometry::Pose;

fn default_lr() -> f64 {
    1e-3
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }
}

/// Adam with bias correction. One instance tracks one flat parameter
/// vector; poses are handled as a flat vector of per-pose twists applied
/// multiplicatively on the left.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    /// Reused update buffer; avoids a large allocation every step.
    delta: Vec<f64>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, len: usize) -> Self {
        Adam { cfg, m: vec![0.0; len], v: vec![0.0; len], t: 0, delta: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    /// Extends the tracked vector with zero-initialized moments; newly
    /// added coordinates share the global step counter.
    pub fn grow(&mut self, additional: usize) {
        self.m.resize(self.m.len() + additional, 0.0);
        self.v.resize(self.v.len() + additional, 0.0);
    }

    /// Advances the moment estimates and writes the update (the amount to
    /// subtract) into the reused `delta` buffer.
    fn update(&mut self, grad: impl Iterator<Item = f64>) {
        self.delta.resize(self.m.len(), 0.0);
        self.t += 1;
        let c1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let mut seen = 0;
        for (i, g) in grad.enumerate() {
            self.m[i] = self.cfg.beta1 * self.m[i] + (1.0 - self.cfg.beta1) * g;
            self.v[i] = self.cfg.beta2 * self.v[i] + (1.0 - self.cfg.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            self.delta[i] = self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
            seen = i + 1;
        }
        assert_eq!(seen, self.m.len());
    }

    /// One descent step on a flat parameter vector.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(grad.len(), self.m.len());
        self.update(grad.iter().copied());
        for (p, d) in params.iter_mut().zip(&self.delta) {
            *p -= d;
        }
    }

    /// One descent step on a pose window: each pose moves by
    /// `exp(-delta) · pose` with its own six twist coordinates. The
    /// optimizer length must be six per pose.
    pub fn step_poses(&mut self, poses: &mut [Pose], grads: &[[f64; 6]]) {
        assert_eq!(poses.len(), grads.len());
        assert_eq!(self.m.len(), 6 * poses.len());
        self.update(grads.iter().flatten().copied());
        for (i, pose) in poses.iter_mut().enumerate() {
            let mut xi = [0.0; 6];
            for (a, x) in xi.iter_mut().enumerate() {
                *x = -self.delta[6 * i + a];
            }
            *pose = pose.retract(&xi);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{look_at_origin, Vec3};
    use approx::assert_relative_eq;

    #[test]
    fn first_step_moves_by_roughly_the_learning_rate() {
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, 2);
        let mut params = vec![1.0, -2.0];
        adam.step(&mut params, &[3.0, -0.5]);
        // m_hat/sqrt(v_hat) = g/|g| on the first step, up to epsilon.
        assert_relative_eq!(params[0], 0.9, max_relative = 1e-6);
        assert_relative_eq!(params[1], -1.9, max_relative = 1e-6);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target = [0.3, -1.2, 4.0, 0.0];
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..AdamConfig::default() }, 4);
        let mut params = vec![0.0; 4];
        for _ in 0..2000 {
            let grad: Vec<f64> =
                params.iter().zip(&target).map(|(p, t)| 2.0 * (p - t)).collect();
            adam.step(&mut params, &grad);
        }
        for (p, t) in params.iter().zip(&target) {
            assert!((p - t).abs() < 1e-3, "{p} vs {t}");
        }
    }

    #[test]
    fn pose_steps_pull_a_tracked_point_onto_its_target() {
        // f(T) = |T p0 - q|^2; with a left perturbation the gradient is
        // [dx, x × dx] for dx = 2 (x - q). Descent must bring T p0 to q.
        let p0 = Vec3::new(0.2, -0.1, 0.4);
        let q = Vec3::new(-0.3, 0.25, 0.1);
        let mut poses = vec![look_at_origin(&Vec3::new(0.0, 0.0, -2.0), &Vec3::y()).unwrap()];
        let mut adam = Adam::new(AdamConfig { lr: 0.02, ..AdamConfig::default() }, 6);
        for _ in 0..3000 {
            let x = poses[0].transform_point(&p0);
            let dx = 2.0 * (x - q);
            let cross = x.cross(&dx);
            let grads = [[dx.x, dx.y, dx.z, cross.x, cross.y, cross.z]];
            adam.step_poses(&mut poses, &grads);
        }
        let x = poses[0].transform_point(&p0);
        assert!((x - q).norm() < 1e-4, "ended at {x:?}");
    }

    #[test]
    fn rotation_stays_orthonormal_under_many_steps() {
        let mut poses = vec![look_at_origin(&Vec3::new(1.0, 0.5, -2.0), &Vec3::y()).unwrap()];
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..AdamConfig::default() }, 6);
        for i in 0..500 {
            let s = (i as f64 * 0.37).sin();
            let grads = [[s, -s, 0.3 * s, 0.2 * s, s, -0.4 * s]];
            adam.step_poses(&mut poses, &grads);
        }
        let r = poses[0].rotation_matrix();
        let gram = r.transpose() * r;
        assert_relative_eq!(gram, crate::geometry::Mat3::identity(), epsilon = 1e-9);
    }
}
