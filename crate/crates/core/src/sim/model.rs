//! Per-pixel two-layer network: `3 → H` affine, ReLU, dropout, `H → C`
//! affine, softmax.
//!
//! Parameters live in one flat vector laid out as `W1 (H×3) | b1 (H) |
//! W2 (C×H) | b2 (C)`, so SGD and the EMA teacher update are plain vector
//! arithmetic.

use rand::RngCore;
use rand_distr::{Distribution, Normal, Uniform};
use rand_xoshiro::Xoshiro256StarStar;

pub const INPUTS: usize = 3;
pub const DEFAULT_HIDDEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct PixelModel {
    hidden: usize,
    classes: usize,
    params: Vec<f64>,
}

/// Stochastic perturbation applied on each forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub noise_std: f64,
    pub dropout: f64,
}

impl Perturbation {
    pub const NONE: Perturbation = Perturbation {
        noise_std: 0.0,
        dropout: 0.0,
    };

    pub fn is_active(&self) -> bool {
        self.noise_std > 0.0 || self.dropout > 0.0
    }
}

/// One realisation of a [`Perturbation`] for `pixels` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PassNoise {
    /// Added to every input feature, `pixels × INPUTS`.
    pub input: Vec<f64>,
    /// Inverted-dropout multipliers (`0` or `1/(1−rate)`), `pixels × hidden`.
    pub keep: Vec<f64>,
}

impl PassNoise {
    pub fn draw(
        p: &Perturbation,
        pixels: usize,
        hidden: usize,
        rng: &mut Xoshiro256StarStar,
    ) -> PassNoise {
        let input = if p.noise_std > 0.0 {
            let normal = Normal::new(0.0, p.noise_std).expect("finite std");
            (0..pixels * INPUTS).map(|_| normal.sample(rng)).collect()
        } else {
            vec![0.0; pixels * INPUTS]
        };
        let keep = if p.dropout > 0.0 {
            // Four 16-bit uniforms per draw; the drop rate is quantised to 2^-16.
            let scale = 1.0 / (1.0 - p.dropout);
            let cut = (p.dropout * 65536.0).round() as u64;
            let mut keep = Vec::with_capacity(pixels * hidden + 3);
            while keep.len() < pixels * hidden {
                let bits = rng.next_u64();
                for lane in 0..4 {
                    let u = (bits >> (16 * lane)) & 0xffff;
                    keep.push(if u < cut { 0.0 } else { scale });
                }
            }
            keep.truncate(pixels * hidden);
            keep
        } else {
            vec![1.0; pixels * hidden]
        };
        PassNoise { input, keep }
    }

    pub fn clean(pixels: usize, hidden: usize) -> PassNoise {
        PassNoise {
            input: vec![0.0; pixels * INPUTS],
            keep: vec![1.0; pixels * hidden],
        }
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    inputs: Vec<f64>,
    pre: Vec<f64>,
    keep: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl PixelModel {
    pub fn param_count(hidden: usize, classes: usize) -> usize {
        hidden * INPUTS + hidden + classes * hidden + classes
    }

    /// He-uniform weights, zero biases.
    pub fn init(hidden: usize, classes: usize, rng: &mut Xoshiro256StarStar) -> PixelModel {
        let mut params = vec![0.0; Self::param_count(hidden, classes)];
        let l1 = (6.0 / INPUTS as f64).sqrt();
        let l2 = (6.0 / hidden as f64).sqrt();
        let u1 = Uniform::new(-l1, l1).unwrap();
        let u2 = Uniform::new(-l2, l2).unwrap();
        for w in &mut params[..hidden * INPUTS] {
            *w = u1.sample(rng);
        }
        let w2 = hidden * INPUTS + hidden;
        for w in &mut params[w2..w2 + classes * hidden] {
            *w = u2.sample(rng);
        }
        PixelModel {
            hidden,
            classes,
            params,
        }
    }

    pub fn from_params(hidden: usize, classes: usize, params: Vec<f64>) -> Option<PixelModel> {
        (params.len() == Self::param_count(hidden, classes)).then_some(PixelModel {
            hidden,
            classes,
            params,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let h = self.hidden;
        let (w1, rest) = self.params.split_at(h * INPUTS);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(self.classes * h);
        (w1, b1, w2, b2)
    }

    /// Forward pass over `features` (`pixels × INPUTS`).
    pub fn forward(&self, features: &[f64], noise: &PassNoise) -> Forward {
        let (h, c) = (self.hidden, self.classes);
        let pixels = features.len() / INPUTS;
        let (w1, b1, w2, b2) = self.split();
        let inputs: Vec<f64> = features
            .iter()
            .zip(&noise.input)
            .map(|(x, n)| x + n)
            .collect();
        let mut pre = vec![0.0; pixels * h];
        let mut logits = vec![0.0; pixels * c];
        let mut act = vec![0.0; h];
        for px in 0..pixels {
            let x = &inputs[px * INPUTS..(px + 1) * INPUTS];
            let z = &mut pre[px * h..(px + 1) * h];
            let keep = &noise.keep[px * h..(px + 1) * h];
            for j in 0..h {
                let w = &w1[j * INPUTS..(j + 1) * INPUTS];
                z[j] = b1[j] + w[0] * x[0] + w[1] * x[1] + w[2] * x[2];
                act[j] = z[j].max(0.0) * keep[j];
            }
            let out = &mut logits[px * c..(px + 1) * c];
            for k in 0..c {
                let w = &w2[k * h..(k + 1) * h];
                out[k] = b2[k] + w.iter().zip(&act).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let probs = softmax(&logits, c);
        Forward {
            inputs,
            pre,
            keep: noise.keep.clone(),
            logits,
            probs,
        }
    }

    /// Deterministic class probabilities (no noise, no dropout).
    pub fn predict(&self, features: &[f64]) -> Vec<f64> {
        let pixels = features.len() / INPUTS;
        self.forward(features, &PassNoise::clean(pixels, self.hidden))
            .probs
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂logits`.
    pub fn backward(&self, fwd: &Forward, dlogits: &[f64], grad: &mut [f64]) {
        let (h, c) = (self.hidden, self.classes);
        let pixels = fwd.logits.len() / c;
        let (_, _, w2, _) = self.split();
        let (gw1, rest) = grad.split_at_mut(h * INPUTS);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(c * h);
        let mut act = vec![0.0; h];
        let mut dact = vec![0.0; h];
        for px in 0..pixels {
            let z = &fwd.pre[px * h..(px + 1) * h];
            let keep = &fwd.keep[px * h..(px + 1) * h];
            let x = &fwd.inputs[px * INPUTS..(px + 1) * INPUTS];
            let g = &dlogits[px * c..(px + 1) * c];
            for j in 0..h {
                act[j] = z[j].max(0.0) * keep[j];
            }
            dact.fill(0.0);
            for k in 0..c {
                gb2[k] += g[k];
                let w = &w2[k * h..(k + 1) * h];
                let gw = &mut gw2[k * h..(k + 1) * h];
                for j in 0..h {
                    gw[j] += g[k] * act[j];
                    dact[j] += g[k] * w[j];
                }
            }
            for j in 0..h {
                if z[j] <= 0.0 {
                    continue;
                }
                let dz = dact[j] * keep[j];
                gb1[j] += dz;
                for i in 0..INPUTS {
                    gw1[j * INPUTS + i] += dz * x[i];
                }
            }
        }
    }
}

/// Row-wise softmax over blocks of `classes` logits.
pub fn softmax(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (z, p) in logits.chunks_exact(classes).zip(out.chunks_exact_mut(classes)) {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (pi, &zi) in p.iter_mut().zip(z) {
            *pi = (zi - m).exp();
            s += *pi;
        }
        p.iter_mut().for_each(|pi| *pi /= s);
    }
    out
}

/// Pulls `∂L/∂p` back through the softmax: `∂L/∂z_j = p_j (g_j − Σ_k p_k g_k)`.
pub fn softmax_backward(probs: &[f64], dprobs: &[f64], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    for ((p, g), o) in probs
        .chunks_exact(classes)
        .zip(dprobs.chunks_exact(classes))
        .zip(out.chunks_exact_mut(classes))
    {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for j in 0..classes {
            o[j] = p[j] * (g[j] - dot);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn outputs_are_simplex() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(1);
        let m = PixelModel::init(8, 4, &mut rng);
        let x: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        let noise = PassNoise::draw(
            &Perturbation {
                noise_std: 0.1,
                dropout: 0.5,
            },
            10,
            8,
            &mut rng,
        );
        let f = m.forward(&x, &noise);
        for p in f.probs.chunks_exact(4) {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn param_layout() {
        assert_eq!(PixelModel::param_count(16, 4), 16 * 3 + 16 + 4 * 16 + 4);
        assert!(PixelModel::from_params(16, 4, vec![0.0; 3]).is_none());
    }

    #[test]
    fn clean_noise_is_identity() {
        let n = PassNoise::draw(&Perturbation::NONE, 5, 4, &mut Xoshiro256StarStar::seed_from_u64(0));
        assert_eq!(n, PassNoise::clean(5, 4));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0, 2.0, 3.0], 3);
        let b = softmax(&[1001.0, 1002.0, 1003.0], 3);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}
