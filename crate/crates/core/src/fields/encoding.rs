//! Fourier feature encoding with per-octave weights for coarse-to-fine
//! optimization. Octave `j` has angular frequency `pi * 2^j`; the raw
//! coordinates are always passed through unweighted.

use crate::geometry::Vec3;

pub fn fourier_len(octaves: usize) -> usize {
    3 + 2 * 3 * octaves
}

/// Layout: `[x, y, z, sin(f_0 x), sin(f_0 y), sin(f_0 z), cos(f_0 x), ...,
/// cos(f_{k-1} z)]`, with each octave's sin/cos block scaled by its weight.
pub fn fourier_encode(x: &Vec3, octaves: usize, weights: Option<&[f64]>, out: &mut [f64]) {
    debug_assert_eq!(out.len(), fourier_len(octaves));
    out[0] = x.x;
    out[1] = x.y;
    out[2] = x.z;
    for j in 0..octaves {
        let w = weights.map_or(1.0, |ws| ws[j]);
        let f = std::f64::consts::PI * (1u64 << j) as f64;
        let base = 3 + 6 * j;
        for a in 0..3 {
            let (s, c) = (f * x[a]).sin_cos();
            out[base + a] = w * s;
            out[base + 3 + a] = w * c;
        }
    }
}

/// Position gradient of `sum_i upstream[i] * encode(x)[i]`.
pub fn fourier_encode_backward(
    x: &Vec3,
    octaves: usize,
    weights: Option<&[f64]>,
    upstream: &[f64],
) -> Vec3 {
    debug_assert_eq!(upstream.len(), fourier_len(octaves));
    let mut g = Vec3::new(upstream[0], upstream[1], upstream[2]);
    for j in 0..octaves {
        let w = weights.map_or(1.0, |ws| ws[j]);
        let f = std::f64::consts::PI * (1u64 << j) as f64;
        let base = 3 + 6 * j;
        for a in 0..3 {
            let (s, c) = (f * x[a]).sin_cos();
            g[a] += upstream[base + a] * w * f * c;
            g[a] -= upstream[base + 3 + a] * w * f * s;
        }
    }
    g
}

/// Smooth coarse-to-fine schedule: octave 0 always passes; octave `j >= 1`
/// ramps in over the progress interval `[(j-1)/(k-1), j/(k-1)]` with a raised
/// cosine. At progress 0 only octave 0 is active, at progress 1 all are.
pub fn octave_mask(progress: f64, octaves: usize) -> Vec<f64> {
    let mut w = vec![1.0; octaves];
    if octaves <= 1 {
        return w;
    }
    let a = progress.clamp(0.0, 1.0) * (octaves as f64 - 1.0);
    for (j, wj) in w.iter_mut().enumerate().skip(1) {
        let t = (a - (j as f64 - 1.0)).clamp(0.0, 1.0);
        *wj = 0.5 * (1.0 - (std::f64::consts::PI * t).cos());
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_length_and_origin_values() {
        for k in 0..6 {
            assert_eq!(fourier_len(k), 3 + 6 * k);
        }
        let k = 4;
        let mut out = vec![0.0; fourier_len(k)];
        fourier_encode(&Vec3::zeros(), k, None, &mut out);
        for j in 0..k {
            for a in 0..3 {
                assert_eq!(out[3 + 6 * j + a], 0.0, "sin at origin");
                assert_eq!(out[3 + 6 * j + 3 + a], 1.0, "cos at origin");
            }
        }
    }

    #[test]
    fn encode_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let k = 3;
        let len = fourier_len(k);
        let weights: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
        let upstream: Vec<f64> = (0..len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let x = Vec3::new(0.3, -0.8, 0.55);
        let g = fourier_encode_backward(&x, k, Some(&weights), &upstream);
        let f = |x: &Vec3| {
            let mut out = vec![0.0; len];
            fourier_encode(x, k, Some(&weights), &mut out);
            out.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-7;
        for a in 0..3 {
            let mut hi = x;
            let mut lo = x;
            hi[a] += h;
            lo[a] -= h;
            let fd = (f(&hi) - f(&lo)) / (2.0 * h);
            assert!((fd - g[a]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn mask_endpoints() {
        let k = 5;
        let at0 = octave_mask(0.0, k);
        assert_eq!(at0[0], 1.0);
        for j in 1..k {
            assert_eq!(at0[j], 0.0);
        }
        let at1 = octave_mask(1.0, k);
        for j in 0..k {
            assert!((at1[j] - 1.0).abs() < 1e-12);
        }
        // Monotone in progress for every octave.
        for j in 1..k {
            let mut prev = 0.0;
            for step in 0..=20 {
                let w = octave_mask(step as f64 / 20.0, k)[j];
                assert!(w >= prev - 1e-12);
                prev = w;
            }
        }
    }
}
