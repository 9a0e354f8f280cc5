//! Desk-scale mean-teacher semi-supervised trainer on synthetic images.

pub mod loss;
pub mod model;
pub mod task;
pub mod train;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use thiserror::Error;

use crate::volume::{ProbVolume, SampleStack, VolumeError};

pub use loss::{consistency_loss, supervised_loss};
pub use model::{PassNoise, Perturbation, PixelModel};
pub use task::{Dataset, Image, SyntheticTask};
pub use train::{train, train_full, GateEstimator, RunReport, TrainConfig, TrainOutcome};

/// Identity of the generator behind every random draw in a run.
pub const PRNG_NAME: &str = "xoshiro256** (rand_xoshiro), seeded via SplitMix64; sub-streams by jump()";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("shapes or class counts disagree")]
    ShapeMismatch,
    #[error("parameter vectors differ in length ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("EMA decay must lie in [0, 1), got {0}")]
    BadDecay(f64),
    #[error("need at least 2 passes, got {0}")]
    TooFewPasses(usize),
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error("loss became non-finite ({value}) at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize, value: f64 },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// `θT' = decay·θT + (1 − decay)·θS`, elementwise.
pub fn ema_update(teacher: &[f64], student: &[f64], decay: f64) -> Result<Vec<f64>, SimError> {
    if teacher.len() != student.len() {
        return Err(SimError::DimensionMismatch(teacher.len(), student.len()));
    }
    if !(0.0..1.0).contains(&decay) {
        return Err(SimError::BadDecay(decay));
    }
    Ok(teacher
        .iter()
        .zip(student)
        .map(|(&t, &s)| decay * t + (1.0 - decay) * s)
        .collect())
}

pub(crate) fn ema_in_place(teacher: &mut [f64], student: &[f64], decay: f64) {
    for (t, &s) in teacher.iter_mut().zip(student) {
        *t = decay * *t + (1.0 - decay) * s;
    }
}

/// `passes` stochastic forward passes of `model` on `image`, each with fresh
/// input noise and dropout drawn from a generator seeded by `seed`.
pub fn mc_inference(
    model: &PixelModel,
    image: &Image,
    passes: usize,
    perturbation: &Perturbation,
    seed: u64,
) -> Result<SampleStack, SimError> {
    if passes < 2 {
        return Err(SimError::TooFewPasses(passes));
    }
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let shape = image.labels.shape().clone();
    let pixels = image.pixels();
    let volumes = (0..passes)
        .map(|_| {
            let noise = PassNoise::draw(perturbation, pixels, model.hidden(), &mut rng);
            let probs = model.forward(&image.features, &noise).probs;
            ProbVolume::new(shape.clone(), model.classes(), probs)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SampleStack::new(volumes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_examples() {
        let s = vec![1.0; 5];
        assert_eq!(ema_update(&[3.0; 5], &s, 0.0).unwrap(), s);
        assert_eq!(ema_update(&s, &s, 0.99).unwrap(), s);
        for x in ema_update(&[0.0; 5], &s, 0.99).unwrap() {
            assert!((x - 0.01).abs() <= 1e-15);
        }
        assert!(matches!(ema_update(&[0.0], &s, 0.5), Err(SimError::DimensionMismatch(1, 5))));
        assert!(matches!(ema_update(&s, &s, 1.0), Err(SimError::BadDecay(_))));
    }

    #[test]
    fn mc_inference_contract() {
        let task = SyntheticTask::default();
        let mut rng = Xoshiro256StarStar::seed_from_u64(0);
        let img = task.sample_image(&mut rng);
        let model = PixelModel::init(16, 4, &mut rng);
        let off = mc_inference(&model, &img, 4, &Perturbation::NONE, 5).unwrap();
        for p in &off.passes()[1..] {
            assert_eq!(p, &off.passes()[0]);
        }
        let pert = Perturbation {
            noise_std: 0.05,
            dropout: 0.3,
        };
        let a = mc_inference(&model, &img, 8, &pert, 11).unwrap();
        let b = mc_inference(&model, &img, 8, &pert, 11).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            mc_inference(&model, &img, 1, &pert, 0),
            Err(SimError::TooFewPasses(1))
        ));
    }
}
