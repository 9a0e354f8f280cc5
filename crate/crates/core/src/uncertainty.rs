//! Voxel-wise uncertainty maps and the certainty masks that gate the
//! consistency loss.
//!
//! Entropy is already an uncertainty. Histogram divergences measure how far
//! the two leading classes are apart, i.e. *separation*: a high value means
//! a confident voxel. Divergence maps are therefore reoriented as
//! `u_v = M − D_v`, with `M` the largest raw divergence in the map, so that
//! every estimator feeds the same "keep voxels with `u_v < H`" gate. The raw
//! divergences stay available on the map.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::divergence::{entropy_unchecked, DivergenceKind, DivergenceSpec, DEFAULT_EPSILON};
use crate::histogram::{histograms_at, HistogramSpec};
use crate::volume::{SampleStack, ScalarVolume, Shape, VolumeError};

pub const DEFAULT_KEEP_FRACTION: f64 = 0.75;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UncertaintyError {
    #[error("keep fraction must lie in (0, 1], got {0}")]
    BadKeepFraction(f64),
    #[error("threshold must be finite and >= 0, got {0}")]
    BadThreshold(f64),
    #[error("uncertainty map has a negative value at voxel {0}")]
    Negative(usize),
    #[error("maps have different shapes: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Which pair(s) of class histograms feed the divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// The two highest-mean classes.
    Top2,
    /// Max over `D(h_1, h_c)` for every `c > 1` in ascending-mean order.
    MaxAll,
}

/// Recorded alongside every map so files are self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorDescriptor {
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction: Option<Reduction>,
    /// `M` in `u = M − D`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_max: Option<f64>,
}

/// An uncertainty estimator over a sample stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimator {
    Entropy { epsilon: f64 },
    Divergence {
        hist: HistogramSpec,
        div: DivergenceSpec,
        reduction: Reduction,
    },
}

impl Estimator {
    pub fn entropy() -> Self {
        Estimator::Entropy {
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn top2(div: DivergenceSpec) -> Self {
        Estimator::Divergence {
            hist: HistogramSpec::default(),
            div,
            reduction: Reduction::Top2,
        }
    }

    pub fn map(&self, stack: &SampleStack) -> UncertaintyMap {
        match *self {
            Estimator::Entropy { epsilon } => entropy_map_with(stack, epsilon),
            Estimator::Divergence {
                hist,
                div,
                reduction,
            } => divergence_map(stack, &hist, &div, reduction),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    u: ScalarVolume,
    raw: Option<ScalarVolume>,
    estimator: EstimatorDescriptor,
}

impl UncertaintyMap {
    /// Wraps an existing map, e.g. one read back from disk.
    pub fn from_values(
        u: ScalarVolume,
        estimator: EstimatorDescriptor,
    ) -> Result<Self, UncertaintyError> {
        if let Some(i) = u.values().iter().position(|&x| x < 0.0) {
            return Err(UncertaintyError::Negative(i));
        }
        Ok(UncertaintyMap {
            u,
            raw: None,
            estimator,
        })
    }

    pub fn shape(&self) -> &Shape {
        self.u.shape()
    }

    pub fn values(&self) -> &[f64] {
        self.u.values()
    }

    pub fn volume(&self) -> &ScalarVolume {
        &self.u
    }

    /// Raw divergences before reorientation (divergence maps only).
    pub fn raw(&self) -> Option<&ScalarVolume> {
        self.raw.as_ref()
    }

    pub fn estimator(&self) -> &EstimatorDescriptor {
        &self.estimator
    }
}

/// Predictive entropy of the mean prediction at every voxel.
pub fn entropy_map(stack: &SampleStack) -> UncertaintyMap {
    entropy_map_with(stack, DEFAULT_EPSILON)
}

fn entropy_map_with(stack: &SampleStack, eps: f64) -> UncertaintyMap {
    let mean = stack.mean_prediction();
    let values: Vec<f64> = (0..mean.voxel_count())
        .into_par_iter()
        .map(|v| entropy_unchecked(mean.voxel(v), eps).max(0.0) + 0.0)
        .collect();
    UncertaintyMap {
        u: ScalarVolume::new(stack.shape().clone(), values)
            .expect("entropy of a valid stack is finite"),
        raw: None,
        estimator: EstimatorDescriptor {
            method: "entropy".into(),
            alpha: None,
            epsilon: eps,
            bins: None,
            reduction: None,
            reference_max: None,
        },
    }
}

/// `u_v = M − D(h_{C−1}, h_C)` over the two highest-mean classes.
pub fn divergence_map_top2(
    stack: &SampleStack,
    hspec: &HistogramSpec,
    dspec: &DivergenceSpec,
) -> UncertaintyMap {
    divergence_map(stack, hspec, dspec, Reduction::Top2)
}

/// `u_v = M − max_{c>1} D(h_1, h_c)` in ascending-mean order.
pub fn divergence_map_maxall(
    stack: &SampleStack,
    hspec: &HistogramSpec,
    dspec: &DivergenceSpec,
) -> UncertaintyMap {
    divergence_map(stack, hspec, dspec, Reduction::MaxAll)
}

fn divergence_map(
    stack: &SampleStack,
    hspec: &HistogramSpec,
    dspec: &DivergenceSpec,
    reduction: Reduction,
) -> UncertaintyMap {
    let raw: Vec<f64> = (0..stack.voxel_count())
        .into_par_iter()
        .map(|v| {
            let set = histograms_at(stack, hspec, v);
            match reduction {
                Reduction::Top2 => {
                    let (lo, hi) = set.top2();
                    dspec.evaluate_unchecked(lo, hi)
                }
                Reduction::MaxAll => {
                    let first = set.sorted_row(0);
                    (1..set.classes())
                        .map(|r| dspec.evaluate_unchecked(first, set.sorted_row(r)))
                        .fold(f64::NEG_INFINITY, f64::max)
                }
            }
        })
        .collect();
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let u: Vec<f64> = raw.iter().map(|&d| (max - d).max(0.0) + 0.0).collect();
    let shape = stack.shape().clone();
    let (method, alpha) = match dspec.kind() {
        DivergenceKind::Bhattacharyya => ("bhattacharyya", None),
        DivergenceKind::Alpha(a) => ("alpha", Some(a)),
    };
    UncertaintyMap {
        u: ScalarVolume::new(shape.clone(), u).expect("floored divergences are finite"),
        raw: Some(ScalarVolume::new(shape, raw).expect("floored divergences are finite")),
        estimator: EstimatorDescriptor {
            method: method.into(),
            alpha,
            epsilon: dspec.epsilon(),
            bins: Some(hspec.bins()),
            reduction: Some(reduction),
            reference_max: Some(max),
        },
    }
}

/// Selects the voxels treated as certain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskPolicy {
    /// Keep exactly `floor(keep_fraction · |Ω|)` lowest-uncertainty voxels.
    Quantile { keep_fraction: f64 },
    /// Keep voxels with `u_v < threshold`.
    Absolute { threshold: f64 },
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy::Quantile {
            keep_fraction: DEFAULT_KEEP_FRACTION,
        }
    }
}

impl MaskPolicy {
    pub fn quantile(keep_fraction: f64) -> Result<Self, UncertaintyError> {
        let p = MaskPolicy::Quantile { keep_fraction };
        p.validate()?;
        Ok(p)
    }

    pub fn absolute(threshold: f64) -> Result<Self, UncertaintyError> {
        let p = MaskPolicy::Absolute { threshold };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), UncertaintyError> {
        match *self {
            MaskPolicy::Quantile { keep_fraction } => {
                if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
                    return Err(UncertaintyError::BadKeepFraction(keep_fraction));
                }
            }
            MaskPolicy::Absolute { threshold } => {
                if !(threshold.is_finite() && threshold >= 0.0) {
                    return Err(UncertaintyError::BadThreshold(threshold));
                }
            }
        }
        Ok(())
    }
}

/// 0/1 mask of certain voxels.
pub fn certainty_mask(
    u: &UncertaintyMap,
    policy: &MaskPolicy,
) -> Result<ScalarVolume, UncertaintyError> {
    Ok(ScalarVolume::new(
        u.shape().clone(),
        mask_values(u.values(), policy)?,
    )?)
}

pub fn mask_values(u: &[f64], policy: &MaskPolicy) -> Result<Vec<f64>, UncertaintyError> {
    policy.validate()?;
    let n = u.len();
    let mut mask = vec![0.0; n];
    match *policy {
        MaskPolicy::Absolute { threshold } => {
            for (m, &x) in mask.iter_mut().zip(u) {
                if x < threshold {
                    *m = 1.0;
                }
            }
        }
        MaskPolicy::Quantile { keep_fraction } => {
            let keep = ((keep_fraction * n as f64).floor() as usize).min(n);
            if keep == 0 {
                return Ok(mask);
            }
            let mut order: Vec<usize> = (0..n).collect();
            // (u, index) is a strict total order, so the kept set is unique.
            order.select_nth_unstable_by(keep - 1, |&a, &b| {
                u[a].total_cmp(&u[b]).then(a.cmp(&b))
            });
            for &i in &order[..keep] {
                mask[i] = 1.0;
            }
        }
    }
    Ok(mask)
}

/// Spearman rank correlation between two maps, average ranks for ties.
/// Returns 0 when either map is constant.
pub fn rank_correlation(a: &UncertaintyMap, b: &UncertaintyMap) -> Result<f64, UncertaintyError> {
    if a.shape() != b.shape() {
        return Err(UncertaintyError::ShapeMismatch(
            a.shape().dims().to_vec(),
            b.shape().dims().to_vec(),
        ));
    }
    Ok(spearman(a.values(), b.values()))
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{LabelVolume, ProbVolume};

    fn map_of(values: Vec<f64>, dims: &[usize]) -> UncertaintyMap {
        let u = ScalarVolume::new(Shape::new(dims).unwrap(), values).unwrap();
        UncertaintyMap::from_values(u, EstimatorDescriptor {
            method: "test".into(),
            alpha: None,
            epsilon: DEFAULT_EPSILON,
            bins: None,
            reduction: None,
            reference_max: None,
        })
        .unwrap()
    }

    fn one_hot_stack(labels: &[u32], classes: usize, passes: usize) -> SampleStack {
        let l = LabelVolume::new(Shape::new(&[1, labels.len()]).unwrap(), classes, labels.to_vec())
            .unwrap();
        SampleStack::new(vec![ProbVolume::one_hot(&l); passes]).unwrap()
    }

    #[test]
    fn entropy_map_of_constant_one_hot_is_zero() {
        let s = one_hot_stack(&[0, 1, 2, 1], 3, 4);
        let m = entropy_map(&s);
        assert!(m.values().iter().all(|&x| x == 0.0 && x.is_sign_positive()));
    }

    #[test]
    fn entropy_map_of_opposite_passes_is_ln2() {
        let shape = Shape::new(&[2, 2]).unwrap();
        let a = ProbVolume::new(shape.clone(), 2, [1.0, 0.0].repeat(4)).unwrap();
        let b = ProbVolume::new(shape, 2, [0.0, 1.0].repeat(4)).unwrap();
        let m = entropy_map(&SampleStack::new(vec![a, b]).unwrap());
        for &x in m.values() {
            assert!((x - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn disjoint_top2_is_most_certain_identical_is_most_uncertain() {
        // Voxel 0: class 1 always 0.95, class 0 always 0.05 -> disjoint bins.
        // Voxel 1: both classes 0.5 -> identical histograms.
        let shape = Shape::new(&[1, 2]).unwrap();
        let p = ProbVolume::new(shape, 2, vec![0.05, 0.95, 0.5, 0.5]).unwrap();
        let s = SampleStack::new(vec![p.clone(), p]).unwrap();
        let m = divergence_map_top2(&s, &HistogramSpec::default(), &DivergenceSpec::bhattacharyya());
        let raw = m.raw().unwrap().values();
        assert!((raw[0] + DEFAULT_EPSILON.ln()).abs() < 1e-12);
        assert!(raw[1].abs() < 1e-12);
        assert_eq!(m.values()[0], 0.0);
        assert!((m.values()[1] - raw[0]).abs() < 1e-12);
        assert_eq!(m.estimator().reference_max, Some(raw[0]));
    }

    #[test]
    fn maxall_equals_top2_for_two_classes() {
        let shape = Shape::new(&[2, 2]).unwrap();
        let a = ProbVolume::new(shape.clone(), 2, vec![0.3, 0.7, 0.6, 0.4, 0.5, 0.5, 0.1, 0.9]).unwrap();
        let b = ProbVolume::new(shape, 2, vec![0.45, 0.55, 0.2, 0.8, 0.9, 0.1, 0.15, 0.85]).unwrap();
        let s = SampleStack::new(vec![a, b]).unwrap();
        let h = HistogramSpec::default();
        let d = DivergenceSpec::bhattacharyya();
        let t = divergence_map_top2(&s, &h, &d);
        let m = divergence_map_maxall(&s, &h, &d);
        assert_eq!(t.raw(), m.raw());
    }

    #[test]
    fn maxall_of_identical_rows_is_zero() {
        let shape = Shape::new(&[1, 1]).unwrap();
        let p = ProbVolume::uniform(shape, 3).unwrap();
        let uniform = SampleStack::new(vec![p.clone(), p]).unwrap();
        let m = divergence_map_maxall(&uniform, &HistogramSpec::default(), &DivergenceSpec::bhattacharyya());
        assert!(m.raw().unwrap().values()[0].abs() < 1e-12);
    }

    #[test]
    fn mask_full_keep_is_all_ones() {
        let m = map_of(vec![3.0, 1.0, 2.0, 0.5], &[2, 2]);
        let mask = certainty_mask(&m, &MaskPolicy::quantile(1.0).unwrap()).unwrap();
        assert_eq!(mask.values(), &[1.0; 4]);
    }

    #[test]
    fn absolute_mask_is_strict() {
        let m = map_of(vec![0.4; 4], &[2, 2]);
        let above = certainty_mask(&m, &MaskPolicy::absolute(0.5).unwrap()).unwrap();
        assert_eq!(above.values(), &[1.0; 4]);
        let equal = certainty_mask(&m, &MaskPolicy::absolute(0.4).unwrap()).unwrap();
        assert_eq!(equal.values(), &[0.0; 4]);
    }

    #[test]
    fn quantile_ties_prefer_low_index() {
        let m = map_of(vec![1.0, 0.0, 1.0, 1.0], &[2, 2]);
        let mask = certainty_mask(&m, &MaskPolicy::quantile(0.5).unwrap()).unwrap();
        assert_eq!(mask.values(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn bad_keep_fraction() {
        assert_eq!(
            MaskPolicy::quantile(0.0),
            Err(UncertaintyError::BadKeepFraction(0.0))
        );
        assert!(MaskPolicy::quantile(1.5).is_err());
        assert!(MaskPolicy::absolute(-1.0).is_err());
        let m = map_of(vec![0.0; 4], &[2, 2]);
        assert!(certainty_mask(&m, &MaskPolicy::Quantile { keep_fraction: 2.0 }).is_err());
    }

    #[test]
    fn spearman_cases() {
        let a = map_of(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = map_of(vec![1.0, 3.0, 2.0, 4.0], &[2, 2]);
        let rev = map_of(vec![3.0, 2.0, 1.0, 0.0], &[2, 2]);
        assert!((rank_correlation(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((rank_correlation(&a, &rev).unwrap() + 1.0).abs() < 1e-15);
        assert!((rank_correlation(&a, &b).unwrap() - 0.8).abs() < 1e-12);
        let other = map_of(vec![0.0; 6], &[2, 3]);
        assert!(matches!(
            rank_correlation(&a, &other),
            Err(UncertaintyError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[2.0, 1.0, 2.0, 3.0]), vec![2.5, 1.0, 2.5, 4.0]);
    }
}
