//! Synthetic 2-D multi-class images.
//!
//! Class 0 is background. Class 1 is a large jittered ellipse. Classes
//! `2..C` are small disks inside the ellipse, spaced evenly by angle around
//! its centre. The inner classes have overlapping intensity ranges, so the
//! decision between them is only partly resolved by intensity and leans on
//! position.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::volume::{LabelVolume, Shape};

use super::model::INPUTS;
use super::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTask {
    pub image_size: [usize; 2],
    pub classes: usize,
    /// Mean intensity per class.
    pub class_intensity: Vec<f64>,
    pub intensity_noise_std: f64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            image_size: [32, 32],
            classes: 4,
            class_intensity: vec![0.1, 0.4, 0.7, 0.78],
            intensity_noise_std: 0.08,
            n_labeled: 3,
            n_unlabeled: 60,
            n_test: 20,
        }
    }
}

/// One image: per-pixel features and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    /// `pixels × 3`: intensity, row and column scaled to `[-1, 1]`.
    pub features: Vec<f64>,
    pub labels: LabelVolume,
}

impl Image {
    pub fn pixels(&self) -> usize {
        self.features.len() / INPUTS
    }
}

/// Generated train/test split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub labeled: Vec<Image>,
    pub unlabeled: Vec<Image>,
    pub test: Vec<Image>,
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        let [h, w] = self.image_size;
        if h < 16 || w < 16 {
            return bad(format!("image_size must be at least 16x16, got {h}x{w}"));
        }
        if !(3..=8).contains(&self.classes) {
            return bad(format!("classes must lie in 3..=8, got {}", self.classes));
        }
        if self.class_intensity.len() != self.classes {
            return bad(format!(
                "class_intensity has {} entries for {} classes",
                self.class_intensity.len(),
                self.classes
            ));
        }
        if self.class_intensity.iter().any(|x| !x.is_finite()) {
            return bad("class_intensity must be finite".into());
        }
        if !(self.intensity_noise_std.is_finite() && self.intensity_noise_std >= 0.0) {
            return bad(format!(
                "intensity_noise_std must be finite and >= 0, got {}",
                self.intensity_noise_std
            ));
        }
        if self.n_labeled == 0 || self.n_test == 0 {
            return bad("n_labeled and n_test must be positive".into());
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape {
        Shape::new(&self.image_size).expect("validated extents")
    }

    /// Draws one image.
    pub fn sample_image(&self, rng: &mut Xoshiro256StarStar) -> Image {
        let [h, w] = self.image_size;
        let (hf, wf) = (h as f64, w as f64);
        let cy = (hf - 1.0) / 2.0 + rng.random_range(-2.0..2.0);
        let cx = (wf - 1.0) / 2.0 + rng.random_range(-2.0..2.0);
        let ry = hf * rng.random_range(0.33..0.42);
        let rx = wf * rng.random_range(0.33..0.42);
        let inner = self.classes - 2;
        let spin = rng.random_range(-0.3..0.3);
        let disks: Vec<(f64, f64, f64)> = (0..inner)
            .map(|k| {
                let angle = spin - std::f64::consts::FRAC_PI_2
                    + 2.0 * std::f64::consts::PI * k as f64 / inner as f64;
                let reach = rng.random_range(0.4..0.55);
                let r = hf.min(wf) * rng.random_range(0.11..0.16);
                (cy + reach * ry * angle.sin(), cx + reach * rx * angle.cos(), r)
            })
            .collect();

        let noise = Normal::new(0.0, self.intensity_noise_std).expect("validated std");
        let mut labels = vec![0u32; h * w];
        let mut features = vec![0.0; h * w * INPUTS];
        for r in 0..h {
            for c in 0..w {
                let (y, x) = (r as f64, c as f64);
                let mut class = 0;
                if ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0 {
                    class = 1;
                }
                for (k, &(dy, dx, rad)) in disks.iter().enumerate() {
                    if (y - dy).powi(2) + (x - dx).powi(2) <= rad * rad {
                        class = 2 + k;
                    }
                }
                let v = r * w + c;
                labels[v] = class as u32;
                let f = &mut features[v * INPUTS..(v + 1) * INPUTS];
                f[0] = self.class_intensity[class] + noise.sample(rng);
                f[1] = 2.0 * y / (hf - 1.0) - 1.0;
                f[2] = 2.0 * x / (wf - 1.0) - 1.0;
            }
        }
        Image {
            features,
            labels: LabelVolume::new(self.shape(), self.classes, labels)
                .expect("labels below class count"),
        }
    }

    /// Draws the labeled, unlabeled and test sets in that order.
    pub fn generate(&self, rng: &mut Xoshiro256StarStar) -> Dataset {
        let mut draw = |n: usize| (0..n).map(|_| self.sample_image(rng)).collect::<Vec<_>>();
        let labeled = draw(self.n_labeled);
        let unlabeled = draw(self.n_unlabeled);
        let test = draw(self.n_test);
        Dataset {
            labeled,
            unlabeled,
            test,
        }
    }
}
