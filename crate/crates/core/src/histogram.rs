//! Per-voxel class histograms over the `T` stochastic samples.

use thiserror::Error;

use crate::volume::SampleStack;

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HistogramError {
    #[error("histograms need at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("voxel {voxel} out of range (volume has {count})")]
    VoxelOutOfRange { voxel: usize, count: usize },
}

/// `K` equal-width bins over `[0, 1]`. Bin `k` covers `[k/K, (k+1)/K)`; the
/// last bin is closed at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistogramSpec {
    bins: usize,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        HistogramSpec { bins: DEFAULT_BINS }
    }
}

impl HistogramSpec {
    pub fn new(bins: usize) -> Result<Self, HistogramError> {
        if bins < 2 {
            return Err(HistogramError::TooFewBins(bins));
        }
        Ok(HistogramSpec { bins })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Bin index of a sample. Values outside `[0, 1]` (simplex rounding)
    /// are clamped to the edge bins.
    pub fn bin_of(&self, x: f64) -> usize {
        let k = self.bins as f64;
        if x <= 0.0 {
            return 0;
        }
        if x >= 1.0 {
            return self.bins - 1;
        }
        // `x * K` can round across an edge; settle against the edges `j / K`.
        let mut j = ((x * k) as usize).min(self.bins - 1);
        if x < j as f64 / k {
            j -= 1;
        } else if j + 1 < self.bins && x >= (j + 1) as f64 / k {
            j += 1;
        }
        j
    }
}

/// Binned sample distributions of every class at one voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHistogramSet {
    /// Class indices sorted by ascending sample mean, ties by class index.
    pub class_order: Vec<usize>,
    /// Sample mean of each class, indexed by original class.
    pub means: Vec<f64>,
    bins: usize,
    hist: Vec<f64>,
}

impl ClassHistogramSet {
    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Normalized mass function of `class` (original index).
    pub fn row(&self, class: usize) -> &[f64] {
        &self.hist[class * self.bins..(class + 1) * self.bins]
    }

    /// Row at position `rank` of the ascending-mean order.
    pub fn sorted_row(&self, rank: usize) -> &[f64] {
        self.row(self.class_order[rank])
    }

    /// Rows of the two highest-mean classes as `(second, top)`.
    pub fn top2(&self) -> (&[f64], &[f64]) {
        let c = self.classes();
        (self.sorted_row(c - 2), self.sorted_row(c - 1))
    }
}

/// Builds the histogram set of one voxel.
pub fn build_histograms(
    stack: &SampleStack,
    spec: &HistogramSpec,
    voxel: usize,
) -> Result<ClassHistogramSet, HistogramError> {
    let count = stack.voxel_count();
    if voxel >= count {
        return Err(HistogramError::VoxelOutOfRange { voxel, count });
    }
    Ok(histograms_at(stack, spec, voxel))
}

pub(crate) fn histograms_at(
    stack: &SampleStack,
    spec: &HistogramSpec,
    voxel: usize,
) -> ClassHistogramSet {
    let classes = stack.classes();
    let bins = spec.bins;
    let t = stack.pass_count() as f64;
    let mut hist = vec![0.0; classes * bins];
    let mut means = vec![0.0; classes];
    for pass in stack.passes() {
        for (c, &x) in pass.voxel(voxel).iter().enumerate() {
            hist[c * bins + spec.bin_of(x)] += 1.0;
            means[c] += x;
        }
    }
    for h in &mut hist {
        *h /= t;
    }
    for m in &mut means {
        *m /= t;
    }
    ClassHistogramSet {
        class_order: ascending_order(&means),
        means,
        bins,
        hist,
    }
}

/// Stable ascending sort of class indices by value.
pub(crate) fn ascending_order(means: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b)));
    order
}

/// Free-function form of [`ClassHistogramSet::top2`].
pub fn top2(set: &ClassHistogramSet) -> (&[f64], &[f64]) {
    set.top2()
}
