//! Mean-teacher training loop.
//!
//! Each step draws a labeled batch and an unlabeled batch. The student is
//! updated by SGD on the supervised loss over the labeled batch plus `λ`
//! times the gated consistency loss over both batches; the teacher then
//! follows by EMA. The consistency target is the mean of the teacher's
//! Monte Carlo passes, and the same passes feed the uncertainty estimator
//! that builds the mask.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::divergence::{DivergenceSpec, DEFAULT_EPSILON};
use crate::histogram::HistogramSpec;
use crate::metrics;
use crate::uncertainty::{mask_values, Estimator, MaskPolicy, Reduction};
use crate::volume::LabelVolume;

use super::loss::{consistency_terms, supervised_terms};
use super::model::{PassNoise, Perturbation, PixelModel};
use super::task::{Image, SyntheticTask};
use super::{ema_in_place, mc_inference, SimError, PRNG_NAME};

/// Uncertainty estimator gating the consistency loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GateEstimator {
    /// Every voxel counts.
    None,
    Entropy,
    Bhattacharyya,
    /// α-divergence with α = 0.5.
    Alpha05,
    /// α-divergence with α = 2.
    Alpha20,
}

impl GateEstimator {
    pub fn estimator(&self, bins: usize, epsilon: f64) -> Result<Option<Estimator>, SimError> {
        let cfg = |e: &dyn std::fmt::Display| SimError::Config(e.to_string());
        let div = match self {
            GateEstimator::None => return Ok(None),
            GateEstimator::Entropy => return Ok(Some(Estimator::Entropy { epsilon })),
            GateEstimator::Bhattacharyya => {
                DivergenceSpec::new(crate::divergence::DivergenceKind::Bhattacharyya, epsilon)
            }
            GateEstimator::Alpha05 => {
                DivergenceSpec::new(crate::divergence::DivergenceKind::Alpha(0.5), epsilon)
            }
            GateEstimator::Alpha20 => {
                DivergenceSpec::new(crate::divergence::DivergenceKind::Alpha(2.0), epsilon)
            }
        }
        .map_err(|e| cfg(&e))?;
        Ok(Some(Estimator::Divergence {
            hist: HistogramSpec::new(bins).map_err(|e| cfg(&e))?,
            div,
            reduction: Reduction::Top2,
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: SyntheticTask,
    pub estimator: GateEstimator,
    /// Consistency weight, constant from the first step.
    pub lambda: f64,
    pub ema_decay: f64,
    /// Initial SGD step. A from-scratch 16-unit pixel network barely moves
    /// at 1e-3 within the epoch budget, so the default is larger.
    pub learning_rate: f64,
    /// The learning rate halves every this many epochs.
    pub lr_halving_epochs: usize,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Labeled images in each batch; the rest are unlabeled.
    pub labeled_per_batch: usize,
    pub mc_passes: usize,
    /// Hidden-unit dropout rate, shared by the student and the MC teacher.
    pub dropout: f64,
    pub input_noise: f64,
    /// Quantile mask keep fraction; ignored when `threshold` is set.
    pub keep_fraction: f64,
    /// Absolute mask `u < threshold` instead of the quantile mask.
    pub threshold: Option<f64>,
    pub bins: usize,
    pub epsilon: f64,
    pub hidden: usize,
    /// Treat the unlabeled pool as labeled as well (upper-bound baseline).
    pub label_all: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: SyntheticTask::default(),
            estimator: GateEstimator::Entropy,
            lambda: 15.0,
            ema_decay: 0.99,
            learning_rate: 0.2,
            lr_halving_epochs: 15,
            momentum: 0.9,
            epochs: 100,
            batch_size: 6,
            labeled_per_batch: 3,
            mc_passes: 8,
            dropout: 0.05,
            input_noise: 0.05,
            keep_fraction: 0.75,
            threshold: None,
            bins: 10,
            epsilon: DEFAULT_EPSILON,
            hidden: super::model::DEFAULT_HIDDEN,
            label_all: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.task.validate()?;
        let bad = |m: String| Err(SimError::Config(m));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.lr_halving_epochs == 0 {
            return bad("lr_halving_epochs must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.labeled_per_batch == 0 || self.labeled_per_batch >= self.batch_size {
            return bad(format!(
                "labeled_per_batch must lie in 1..batch_size, got {} of {}",
                self.labeled_per_batch, self.batch_size
            ));
        }
        if self.mc_passes < 2 {
            return bad(format!("mc_passes must be >= 2, got {}", self.mc_passes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.input_noise.is_finite() && self.input_noise >= 0.0) {
            return bad(format!("input_noise must be >= 0, got {}", self.input_noise));
        }
        if self.hidden == 0 {
            return bad("hidden must be positive".into());
        }
        self.mask_policy()
            .map_err(|e| SimError::Config(e.to_string()))?;
        self.estimator.estimator(self.bins, self.epsilon)?;
        Ok(())
    }

    pub fn mask_policy(&self) -> Result<MaskPolicy, crate::uncertainty::UncertaintyError> {
        match self.threshold {
            Some(t) => MaskPolicy::absolute(t),
            None => MaskPolicy::quantile(self.keep_fraction),
        }
    }

    pub fn perturbation(&self) -> Perturbation {
        Perturbation {
            noise_std: self.input_noise,
            dropout: self.dropout,
        }
    }

    /// Steps per epoch: one pass over the unlabeled pool of the task.
    pub fn steps_per_epoch(&self) -> usize {
        let per = self.batch_size - self.labeled_per_batch;
        self.task.n_unlabeled.div_ceil(per).max(1)
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * 0.5f64.powi((epoch / self.lr_halving_epochs) as i32)
    }
}

/// Student and teacher parameters with the SGD momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: PixelModel,
    pub teacher: PixelModel,
    pub velocity: Vec<f64>,
}

impl TrainState {
    /// Teacher starts as a copy of the student.
    pub fn new(student: PixelModel) -> TrainState {
        let velocity = vec![0.0; student.params().len()];
        TrainState {
            teacher: student.clone(),
            student,
            velocity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub supervised_loss: f64,
    pub consistency_loss: f64,
    /// Fraction of voxels kept by the mask, averaged over the epoch.
    pub retained_fraction: f64,
    /// Test Dice of foreground classes `1..C`.
    pub test_dice: Vec<f64>,
    pub test_mean_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: usize,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

/// Test-set metrics of the final student, averaged over images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub mean_dice: f64,
    pub mean_jaccard: f64,
    pub mean_hd95: Option<f64>,
    pub mean_asd: Option<f64>,
    pub per_class: Vec<ClassScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub prng: String,
    pub config: TrainConfig,
    pub steps_per_epoch: usize,
    pub epochs: Vec<EpochRecord>,
    pub retained_fraction_trace: Vec<f64>,
    pub final_metrics: FinalMetrics,
}

impl RunReport {
    /// Per-epoch curve as CSV.
    pub fn curve_csv(&self) -> String {
        let fg = self.config.task.classes - 1;
        let mut out = String::from("epoch,learning_rate,supervised_loss,consistency_loss,retained_fraction,mean_dice");
        for c in 1..=fg {
            out.push_str(&format!(",dice_c{c}"));
        }
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}",
                e.epoch,
                e.learning_rate,
                e.supervised_loss,
                e.consistency_loss,
                e.retained_fraction,
                e.test_mean_dice
            ));
            for d in &e.test_dice {
                out.push_str(&format!(",{d}"));
            }
            out.push('\n');
        }
        out
    }
}

pub struct TrainOutcome {
    pub report: RunReport,
    pub state: TrainState,
}

pub fn train(config: &TrainConfig, seed: u64) -> Result<RunReport, SimError> {
    train_full(config, seed).map(|o| o.report)
}

/// Cycles through a pool in reshuffled rounds.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(len: usize) -> Sampler {
        Sampler {
            order: (0..len).collect(),
            pos: len,
        }
    }

    fn next(&mut self, rng: &mut Xoshiro256StarStar) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Runs training and returns the report with the final parameters.
pub fn train_full(config: &TrainConfig, seed: u64) -> Result<TrainOutcome, SimError> {
    config.validate()?;
    let mut root = Xoshiro256StarStar::seed_from_u64(seed);
    let mut data_rng = root.clone();
    root.jump();
    let mut init_rng = root.clone();
    root.jump();
    let mut rng = root;

    let task = &config.task;
    let data = task.generate(&mut data_rng);
    let (labeled, unlabeled): (Vec<Image>, Vec<Image>) = if config.label_all {
        (data.labeled.iter().chain(&data.unlabeled).cloned().collect(), Vec::new())
    } else {
        (data.labeled, data.unlabeled)
    };
    let classes = task.classes;
    let estimator = config.estimator.estimator(config.bins, config.epsilon)?;
    let policy = config.mask_policy().map_err(|e| SimError::Config(e.to_string()))?;
    let perturb = config.perturbation();
    let use_consistency = config.lambda > 0.0;

    let mut state = TrainState::new(PixelModel::init(config.hidden, classes, &mut init_rng));
    let n_params = state.velocity.len();
    let steps = config.steps_per_epoch();
    let n_unl = config.batch_size - config.labeled_per_batch;
    let mut lab_sampler = Sampler::new(labeled.len());
    let mut unl_sampler = Sampler::new(unlabeled.len());

    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        let (mut sup_sum, mut cons_sum, mut kept_sum) = (0.0, 0.0, 0.0);
        for step in 0..steps {
            let mut grad = vec![0.0; n_params];
            let lab: Vec<&Image> = (0..config.labeled_per_batch)
                .map(|_| &labeled[lab_sampler.next(&mut rng)])
                .collect();
            let unl: Vec<&Image> = if unlabeled.is_empty() {
                Vec::new()
            } else {
                (0..n_unl).map(|_| &unlabeled[unl_sampler.next(&mut rng)]).collect()
            };

            let mut sup = 0.0;
            let mut cons = 0.0;
            let mut kept = 0.0;
            let n_mixed = lab.len() + unl.len();
            for (i, img) in lab.iter().chain(&unl).enumerate() {
                let is_labeled = i < lab.len();
                if !is_labeled && !use_consistency {
                    continue;
                }
                let pixels = img.pixels();
                let noise = PassNoise::draw(&perturb, pixels, config.hidden, &mut rng);
                let fwd = state.student.forward(&img.features, &noise);
                let mut dlogits = vec![0.0; fwd.logits.len()];
                if is_labeled {
                    let (l, g) = supervised_terms(&fwd.probs, img.labels.labels(), classes);
                    sup += l / lab.len() as f64;
                    for (d, x) in dlogits.iter_mut().zip(g) {
                        *d += x / lab.len() as f64;
                    }
                }
                if use_consistency {
                    let stack = mc_inference(
                        &state.teacher,
                        img,
                        config.mc_passes,
                        &perturb,
                        rng.next_u64(),
                    )?;
                    let target = stack.mean_prediction();
                    let mask = match &estimator {
                        None => vec![1.0; pixels],
                        Some(est) => mask_values(est.map(&stack).values(), &policy)
                            .map_err(|e| SimError::Config(e.to_string()))?,
                    };
                    kept += mask.iter().sum::<f64>() / (pixels * n_mixed) as f64;
                    let (l, g) = consistency_terms(target.values(), &fwd.probs, &mask, classes);
                    let w = config.lambda / n_mixed as f64;
                    cons += l / n_mixed as f64;
                    for (d, x) in dlogits.iter_mut().zip(g) {
                        *d += w * x;
                    }
                }
                state.student.backward(&fwd, &dlogits, &mut grad);
            }
            let total = sup + config.lambda * cons;
            if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(SimError::Diverged {
                    epoch,
                    step,
                    value: total,
                });
            }
            for ((p, v), g) in state
                .student
                .params_mut()
                .iter_mut()
                .zip(&mut state.velocity)
                .zip(&grad)
            {
                *v = config.momentum * *v + g;
                *p -= lr * *v;
            }
            ema_in_place(
                state.teacher.params_mut(),
                state.student.params(),
                config.ema_decay,
            );
            sup_sum += sup;
            cons_sum += cons;
            kept_sum += if use_consistency { kept } else { 0.0 };
        }
        let test_dice = test_dice(&state.student, &data.test)?;
        let test_mean_dice = test_dice.iter().sum::<f64>() / test_dice.len() as f64;
        log::debug!("epoch {epoch}: lr {lr:.2e}, test dice {test_mean_dice:.4}");
        epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            supervised_loss: sup_sum / steps as f64,
            consistency_loss: cons_sum / steps as f64,
            retained_fraction: kept_sum / steps as f64,
            test_dice,
            test_mean_dice,
        });
    }

    let final_metrics = final_metrics(&state.student, &data.test)?;
    let report = RunReport {
        seed,
        prng: PRNG_NAME.into(),
        config: config.clone(),
        steps_per_epoch: steps,
        retained_fraction_trace: epochs.iter().map(|e| e.retained_fraction).collect(),
        epochs,
        final_metrics,
    };
    Ok(TrainOutcome { report, state })
}

fn segment(model: &PixelModel, img: &Image) -> Result<LabelVolume, SimError> {
    let c = model.classes();
    let probs = model.predict(&img.features);
    let labels = probs
        .chunks_exact(c)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if p[k] > p[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect();
    Ok(LabelVolume::new(img.labels.shape().clone(), c, labels)?)
}

fn metrics_err(e: metrics::MetricsError) -> SimError {
    SimError::Config(e.to_string())
}

/// Foreground Dice per class, averaged over the test images.
fn test_dice(model: &PixelModel, test: &[Image]) -> Result<Vec<f64>, SimError> {
    let c = model.classes();
    let mut dice = vec![0.0; c - 1];
    for img in test {
        let pred = segment(model, img)?;
        for k in 1..c {
            dice[k - 1] += metrics::dice_jaccard(&pred, &img.labels, k).map_err(metrics_err)?.0;
        }
    }
    dice.iter_mut().for_each(|d| *d /= test.len() as f64);
    Ok(dice)
}

fn final_metrics(model: &PixelModel, test: &[Image]) -> Result<FinalMetrics, SimError> {
    let c = model.classes();
    let mut sums = vec![(0.0, 0.0, 0.0, 0usize, 0.0); c - 1];
    for img in test {
        let pred = segment(model, img)?;
        for (k, s) in (1..c).zip(sums.iter_mut()) {
            let (dice, jaccard) = metrics::dice_jaccard(&pred, &img.labels, k).map_err(metrics_err)?;
            s.0 += dice;
            s.1 += jaccard;
            if let Some(d) = metrics::surface_distances(&pred, &img.labels, k).map_err(metrics_err)? {
                s.2 += d.hd95;
                s.4 += d.asd;
                s.3 += 1;
            }
        }
    }
    let n = test.len() as f64;
    let per_class: Vec<ClassScore> = sums
        .iter()
        .enumerate()
        .map(|(i, s)| ClassScore {
            class: i + 1,
            dice: s.0 / n,
            jaccard: s.1 / n,
            hd95: (s.3 > 0).then(|| s.2 / s.3 as f64),
            asd: (s.3 > 0).then(|| s.4 / s.3 as f64),
        })
        .collect();
    let k = per_class.len() as f64;
    let mean_opt = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    Ok(FinalMetrics {
        mean_dice: per_class.iter().map(|s| s.dice).sum::<f64>() / k,
        mean_jaccard: per_class.iter().map(|s| s.jaccard).sum::<f64>() / k,
        mean_hd95: mean_opt(per_class.iter().filter_map(|s| s.hd95).collect()),
        mean_asd: mean_opt(per_class.iter().filter_map(|s| s.asd).collect()),
        per_class,
    })
}
