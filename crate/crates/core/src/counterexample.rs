//! Three constructed single-voxel scenarios in which predictive entropy
//! misranks uncertainty, while histogram divergences between the two leading
//! classes rank it correctly.
//!
//! * LEFT: the winning class is well separated from the rest, but the losing
//!   mass is spread over the other three classes, so entropy is high.
//! * MIDDLE: the two leading classes overlap heavily; entropy is lower than
//!   LEFT even though the winner cannot be called.
//! * RIGHT: MIDDLE's means with a fifth of the spread. The mean prediction,
//!   and with it the entropy, is unchanged; the overlap is gone.
//!
//! Per-class samples are drawn from Gaussians truncated to `[0, 1]` and each
//! pass is projected to the simplex by dividing by its sum.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::divergence::DivergenceSpec;
use crate::histogram::{histograms_at, HistogramSpec};
use crate::uncertainty::{divergence_map_top2, entropy_map};
use crate::volume::{ProbVolume, SampleStack, Shape};

pub const SCENARIO_CLASSES: usize = 4;
pub const MIN_PASSES: usize = 100;
pub const DEFAULT_PASSES: usize = 1000;
pub const DEFAULT_SEED: u64 = 7;

/// Entropy equality tolerance for V3, as a fraction of `ln C`.
pub const ENTROPY_TOL_FRACTION: f64 = 0.02;
/// Minimum MIDDLE/RIGHT divergence-uncertainty gap for V3, as a fraction of `M`.
pub const DIVERGENCE_GAP_FRACTION: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CounterexampleError {
    #[error("need at least {MIN_PASSES} passes for stable verdicts, got {0}")]
    TooFewPasses(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassDist {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub per_class: Vec<ClassDist>,
}

impl Scenario {
    pub fn new(name: &str, params: [(f64, f64); SCENARIO_CLASSES]) -> Self {
        Scenario {
            name: name.into(),
            per_class: params
                .iter()
                .map(|&(mean, std)| ClassDist { mean, std })
                .collect(),
        }
    }

    pub fn classes(&self) -> usize {
        self.per_class.len()
    }

    /// Same means, every std multiplied by `factor`.
    pub fn with_std_scale(&self, factor: f64) -> Scenario {
        Scenario {
            name: self.name.clone(),
            per_class: self
                .per_class
                .iter()
                .map(|d| ClassDist {
                    mean: d.mean,
                    std: d.std * factor,
                })
                .collect(),
        }
    }

    /// One simplex-projected class vector per pass.
    pub fn sample(&self, passes: usize, rng: &mut Xoshiro256StarStar) -> Vec<Vec<f64>> {
        let samplers: Vec<Option<Normal<f64>>> = self
            .per_class
            .iter()
            .map(|d| (d.std > 0.0).then(|| Normal::new(d.mean, d.std).unwrap()))
            .collect();
        (0..passes)
            .map(|_| {
                let mut x: Vec<f64> = self
                    .per_class
                    .iter()
                    .zip(&samplers)
                    .map(|(d, s)| match s {
                        Some(normal) => truncated(normal, rng),
                        None => d.mean.clamp(0.0, 1.0),
                    })
                    .collect();
                let sum: f64 = x.iter().sum();
                if sum > 0.0 {
                    x.iter_mut().for_each(|v| *v /= sum);
                } else {
                    let n = x.len() as f64;
                    x.fill(1.0 / n);
                }
                x
            })
            .collect()
    }
}

fn truncated(normal: &Normal<f64>, rng: &mut Xoshiro256StarStar) -> f64 {
    loop {
        let x = normal.sample(rng);
        if (0.0..=1.0).contains(&x) {
            return x;
        }
    }
}

/// The LEFT, MIDDLE and RIGHT scenarios; class 4 (index 3) wins in each.
pub fn build_scenarios() -> (Scenario, Scenario, Scenario) {
    let left = Scenario::new(
        "left",
        [(0.10, 0.04), (0.15, 0.04), (0.20, 0.04), (0.55, 0.04)],
    );
    let middle = Scenario::new(
        "middle",
        [(0.05, 0.02), (0.10, 0.02), (0.38, 0.05), (0.47, 0.05)],
    );
    let right = middle.with_std_scale(0.2);
    let right = Scenario {
        name: "right".into(),
        ..right
    };
    (left, middle, right)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: usize,
    pub mean: f64,
    pub std: f64,
    pub sample_mean: f64,
    pub histogram: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub name: String,
    pub classes: Vec<ClassSummary>,
    pub entropy: f64,
    pub divergence_raw: f64,
    pub divergence_uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictReport {
    pub passes: usize,
    pub seed: u64,
    pub bins: usize,
    pub divergence: String,
    pub epsilon: f64,
    pub scenarios: Vec<ScenarioResult>,
    /// `M`, the largest raw divergence over the three scenarios.
    pub reference_max: f64,
    pub ln_classes: f64,
    /// Entropy ranks MIDDLE as less uncertain than LEFT.
    pub v1_entropy_prefers_middle: bool,
    /// Divergence uncertainty ranks MIDDLE as more uncertain than LEFT.
    pub v2_divergence_flags_middle: bool,
    /// Entropy cannot tell MIDDLE from RIGHT; divergence uncertainty can.
    pub v3_variance_blindness: bool,
    pub all_hold: bool,
}

impl VerdictReport {
    pub fn scenario(&self, name: &str) -> Option<&ScenarioResult> {
        self.scenarios.iter().find(|s| s.name == name)
    }
}

/// Samples one stack whose voxels are the given scenarios, in order.
pub fn scenario_stack(scenarios: &[&Scenario], passes: usize, seed: u64) -> SampleStack {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let classes = scenarios[0].classes();
    let samples: Vec<Vec<Vec<f64>>> = scenarios
        .iter()
        .map(|s| s.sample(passes, &mut rng))
        .collect();
    let shape = Shape::new(&[1, scenarios.len()]).expect("non-empty scenario list");
    let volumes = (0..passes)
        .map(|t| {
            let values = samples.iter().flat_map(|s| s[t].iter().copied()).collect();
            ProbVolume::new(shape.clone(), classes, values).expect("projected samples are simplex")
        })
        .collect();
    SampleStack::new(volumes).expect("passes >= 2")
}

pub fn evaluate_scenarios(
    passes: usize,
    hspec: &HistogramSpec,
    dspec: &DivergenceSpec,
    seed: u64,
) -> Result<VerdictReport, CounterexampleError> {
    let (left, middle, right) = build_scenarios();
    evaluate(&[&left, &middle, &right], passes, hspec, dspec, seed)
}

/// Evaluates any three scenarios as LEFT, MIDDLE, RIGHT.
pub fn evaluate(
    scenarios: &[&Scenario; 3],
    passes: usize,
    hspec: &HistogramSpec,
    dspec: &DivergenceSpec,
    seed: u64,
) -> Result<VerdictReport, CounterexampleError> {
    if passes < MIN_PASSES {
        return Err(CounterexampleError::TooFewPasses(passes));
    }
    let stack = scenario_stack(scenarios, passes, seed);
    let entropy = entropy_map(&stack);
    let divergence = divergence_map_top2(&stack, hspec, dspec);
    let raw = divergence.raw().expect("divergence maps carry raw values");
    let reference_max = divergence.estimator().reference_max.unwrap_or(0.0);

    let results: Vec<ScenarioResult> = scenarios
        .iter()
        .enumerate()
        .map(|(v, s)| {
            let set = histograms_at(&stack, hspec, v);
            let classes = s
                .per_class
                .iter()
                .enumerate()
                .map(|(c, d)| ClassSummary {
                    class: c,
                    mean: d.mean,
                    std: d.std,
                    sample_mean: set.means[c],
                    histogram: set.row(c).to_vec(),
                })
                .collect();
            ScenarioResult {
                name: s.name.clone(),
                classes,
                entropy: entropy.values()[v],
                divergence_raw: raw.values()[v],
                divergence_uncertainty: divergence.values()[v],
            }
        })
        .collect();

    let ln_classes = (stack.classes() as f64).ln();
    let (l, m, r) = (&results[0], &results[1], &results[2]);
    let v1 = m.entropy < l.entropy;
    let v2 = m.divergence_uncertainty > l.divergence_uncertainty;
    let v3 = (m.entropy - r.entropy).abs() <= ENTROPY_TOL_FRACTION * ln_classes
        && (m.divergence_uncertainty - r.divergence_uncertainty).abs()
            > DIVERGENCE_GAP_FRACTION * reference_max;
    Ok(VerdictReport {
        passes,
        seed,
        bins: hspec.bins(),
        divergence: dspec.name(),
        epsilon: dspec.epsilon(),
        scenarios: results,
        reference_max,
        ln_classes,
        v1_entropy_prefers_middle: v1,
        v2_divergence_flags_middle: v2,
        v3_variance_blindness: v3,
        all_hold: v1 && v2 && v3,
    })
}

/// `scenario,class,mean,std,sample_mean,h0..h{K-1}` rows.
pub fn scenarios_csv(report: &VerdictReport) -> String {
    let mut out = String::from("scenario,class,mean,std,sample_mean");
    for k in 0..report.bins {
        out.push_str(&format!(",h{k}"));
    }
    out.push('\n');
    for s in &report.scenarios {
        for c in &s.classes {
            out.push_str(&format!(
                "{},{},{},{},{}",
                s.name, c.class, c.mean, c.std, c.sample_mean
            ));
            for h in &c.histogram {
                out.push_str(&format!(",{h}"));
            }
            out.push('\n');
        }
    }
    out
}
