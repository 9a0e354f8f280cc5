mod common;

use common::*;
use rand::Rng;
use uncmap::sim::model::{softmax, PassNoise, Perturbation, PixelModel};
use uncmap::sim::{consistency_loss, ema_update, supervised_loss};
use uncmap::volume::{LabelVolume, ProbVolume, ScalarVolume, Shape};

fn probs(shape: &Shape, classes: usize, logits: &[f64]) -> ProbVolume {
    ProbVolume::new(shape.clone(), classes, softmax(logits, classes)).unwrap()
}

fn assert_grad(analytic: &[f64], numeric: &[f64]) {
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        assert!(rel_close(*a, *n, GRAD_TOL, 1e-6), "component {i}: analytic {a}, numeric {n}");
    }
}

#[test]
fn supervised_gradient_matches_finite_differences() {
    let mut rng = rng(201);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(1..=4), rng.random_range(2..=4));
        let classes = rng.random_range(2..=4);
        let shape = Shape::new(&[h, w]).unwrap();
        let n = h * w;
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..classes as u32)).collect();
        let gt = LabelVolume::new(shape.clone(), classes, labels).unwrap();
        let logits = normals(&mut rng, n * classes, 1.5);
        let (_, analytic) = supervised_loss(&probs(&shape, classes, &logits), &gt).unwrap();
        let numeric = numeric_grad(&logits, |z| supervised_loss(&probs(&shape, classes, z), &gt).unwrap().0);
        assert_grad(&analytic, &numeric);
    }
}

#[test]
fn consistency_gradient_matches_finite_differences() {
    let mut rng = rng(202);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(1..=4), rng.random_range(2..=4));
        let classes = rng.random_range(2..=4);
        let shape = Shape::new(&[h, w]).unwrap();
        let n = h * w;
        let teacher = probs(&shape, classes, &normals(&mut rng, n * classes, 1.0));
        let mut m: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
        m[0] = 1.0;
        let mask = ScalarVolume::new(shape.clone(), m).unwrap();
        let logits = normals(&mut rng, n * classes, 1.0);
        let (_, analytic) =
            consistency_loss(&teacher, &probs(&shape, classes, &logits), &mask).unwrap();
        let numeric = numeric_grad(&logits, |z| {
            consistency_loss(&teacher, &probs(&shape, classes, z), &mask).unwrap().0
        });
        assert_grad(&analytic, &numeric);
    }
}

#[test]
fn model_backward_matches_finite_differences() {
    let mut rng = rng(203);
    for _ in 0..50 {
        let hidden = rng.random_range(2..=6);
        let classes = rng.random_range(2..=4);
        let pixels = rng.random_range(1..=5);
        let model = PixelModel::init(hidden, classes, &mut rng);
        let features = normals(&mut rng, pixels * 3, 1.0);
        let noise = PassNoise::draw(
            &Perturbation {
                noise_std: 0.1,
                dropout: 0.3,
            },
            pixels,
            hidden,
            &mut rng,
        );
        // Scalar objective: a fixed random projection of the logits.
        let weights = normals(&mut rng, pixels * classes, 1.0);
        let objective = |params: &[f64]| {
            let m = PixelModel::from_params(hidden, classes, params.to_vec()).unwrap();
            let f = m.forward(&features, &noise);
            f.logits.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let fwd = model.forward(&features, &noise);
        let mut analytic = vec![0.0; model.params().len()];
        model.backward(&fwd, &weights, &mut analytic);
        let numeric = numeric_grad(model.params(), objective);
        assert_grad(&analytic, &numeric);
    }
}

#[test]
fn ema_three_step_trace_matches_closed_form() {
    let mut rng = rng(204);
    let decay = 0.99;
    let dim = 7;
    let theta0 = normals(&mut rng, dim, 1.0);
    let students: Vec<Vec<f64>> = (0..3).map(|_| normals(&mut rng, dim, 1.0)).collect();
    let mut teacher = theta0.clone();
    for s in &students {
        teacher = ema_update(&teacher, s, decay).unwrap();
    }
    for i in 0..dim {
        // decay^3 θ(0) + (1 − decay) Σ_j decay^(2 − j) θS(j)
        let want = decay.powi(3) * theta0[i]
            + (1.0 - decay)
                * (decay.powi(2) * students[0][i] + decay * students[1][i] + students[2][i]);
        assert!((teacher[i] - want).abs() <= 1e-12, "{} vs {want}", teacher[i]);
    }
}
