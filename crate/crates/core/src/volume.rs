//! Dense volumetric carriers shared by every estimator.
//!
//! All arrays are flat, row-major over the spatial extents. Probability
//! volumes are voxel-major: the `C` class probabilities of one voxel are
//! contiguous, because every estimator consumes a voxel's class vector as a
//! unit.

use thiserror::Error;

/// Tolerance used when a [`ProbVolume`] is constructed.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("spatial rank must be 2 or 3, got {0}")]
    BadRank(usize),
    #[error("extent {axis} is zero; every extent must be >= 1")]
    ZeroExtent { axis: usize },
    #[error("expected {expected} values for this shape, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("voxel {voxel} is not on the probability simplex (sum {sum})")]
    NotSimplex { voxel: usize, sum: f64 },
    #[error("label {label} at voxel {voxel} is outside [0, {classes})")]
    LabelOutOfRange { voxel: usize, label: i64, classes: usize },
    #[error("a sample stack needs at least 2 passes, got {0}")]
    TooFewPasses(usize),
    #[error("pass {0} does not match the shape/classes of pass 0")]
    InconsistentPass(usize),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
}

/// Spatial domain of a volume: 2 or 3 positive extents.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self, VolumeError> {
        if !(2..=3).contains(&dims.len()) {
            return Err(VolumeError::BadRank(dims.len()));
        }
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(VolumeError::ZeroExtent { axis });
        }
        Ok(Shape {
            dims: dims.to_vec(),
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Row-major strides, last axis fastest.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for i in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.dims[i + 1];
        }
        strides
    }

    /// Multi-index of a flat voxel index.
    pub fn unravel(&self, mut index: usize) -> Vec<usize> {
        let mut coords = vec![0; self.dims.len()];
        for (axis, &d) in self.dims.iter().enumerate().rev() {
            coords[axis] = index % d;
            index /= d;
        }
        coords
    }

    pub fn ravel(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&c, &d)| acc * d + c)
    }
}

fn check_finite(values: &[f64]) -> Result<(), VolumeError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(VolumeError::NonFinite(i)),
        None => Ok(()),
    }
}

fn check_len(expected: usize, actual: usize) -> Result<(), VolumeError> {
    if expected != actual {
        return Err(VolumeError::LengthMismatch { expected, actual });
    }
    Ok(())
}

/// One finite real per voxel. Carries uncertainty maps and 0/1 masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    shape: Shape,
    values: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self, VolumeError> {
        check_len(shape.voxel_count(), values.len())?;
        check_finite(&values)?;
        Ok(ScalarVolume { shape, values })
    }

    pub fn filled(shape: Shape, value: f64) -> Result<Self, VolumeError> {
        let n = shape.voxel_count();
        ScalarVolume::new(shape, vec![value; n])
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Per-voxel class probabilities, voxel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    shape: Shape,
    classes: usize,
    values: Vec<f64>,
}

impl ProbVolume {
    /// Builds a volume, rejecting any voxel that is off the simplex by more
    /// than [`SIMPLEX_TOL`].
    pub fn new(shape: Shape, classes: usize, values: Vec<f64>) -> Result<Self, VolumeError> {
        if classes < 2 {
            return Err(VolumeError::TooFewClasses(classes));
        }
        check_len(shape.voxel_count() * classes, values.len())?;
        check_finite(&values)?;
        let volume = ProbVolume {
            shape,
            classes,
            values,
        };
        if let Some(voxel) = volume.first_off_simplex(SIMPLEX_TOL) {
            let sum = volume.voxel(voxel).iter().sum();
            return Err(VolumeError::NotSimplex { voxel, sum });
        }
        Ok(volume)
    }

    /// Every voxel set to `1/C`.
    pub fn uniform(shape: Shape, classes: usize) -> Result<Self, VolumeError> {
        let n = shape.voxel_count() * classes;
        ProbVolume::new(shape, classes, vec![1.0 / classes as f64; n])
    }

    /// One-hot encoding of a label volume.
    pub fn one_hot(labels: &LabelVolume) -> Self {
        let c = labels.classes();
        let mut values = vec![0.0; labels.labels().len() * c];
        for (v, &l) in labels.labels().iter().enumerate() {
            values[v * c + l as usize] = 1.0;
        }
        ProbVolume {
            shape: labels.shape().clone(),
            classes: c,
            values,
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn voxel_count(&self) -> usize {
        self.shape.voxel_count()
    }

    /// Class vector of one voxel.
    pub fn voxel(&self, v: usize) -> &[f64] {
        &self.values[v * self.classes..(v + 1) * self.classes]
    }

    pub fn validate_simplex(&self, tol: f64) -> bool {
        self.first_off_simplex(tol).is_none()
    }

    fn first_off_simplex(&self, tol: f64) -> Option<usize> {
        self.values
            .chunks_exact(self.classes)
            .position(|p| !is_simplex(p, tol))
    }

    /// Per-voxel argmax, lowest class index on ties.
    pub fn argmax(&self) -> LabelVolume {
        let labels = self
            .values
            .chunks_exact(self.classes)
            .map(|p| {
                let mut best = 0;
                for (c, &x) in p.iter().enumerate() {
                    if x > p[best] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect();
        LabelVolume {
            shape: self.shape.clone(),
            classes: self.classes,
            labels,
        }
    }
}

/// `true` iff `p` sums to 1 within `tol` and every entry lies in `[-tol, 1+tol]`.
pub fn is_simplex(p: &[f64], tol: f64) -> bool {
    let sum: f64 = p.iter().sum();
    (sum - 1.0).abs() <= tol && p.iter().all(|&x| x >= -tol && x <= 1.0 + tol)
}

/// Free-function form of [`ProbVolume::validate_simplex`].
pub fn validate_simplex(volume: &ProbVolume, tol: f64) -> bool {
    volume.validate_simplex(tol)
}

/// Ground-truth or predicted labels in index form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    shape: Shape,
    classes: usize,
    labels: Vec<u32>,
}

impl LabelVolume {
    pub fn new(shape: Shape, classes: usize, labels: Vec<u32>) -> Result<Self, VolumeError> {
        if classes < 2 {
            return Err(VolumeError::TooFewClasses(classes));
        }
        check_len(shape.voxel_count(), labels.len())?;
        if let Some(voxel) = labels.iter().position(|&l| l as usize >= classes) {
            return Err(VolumeError::LabelOutOfRange {
                voxel,
                label: labels[voxel] as i64,
                classes,
            });
        }
        Ok(LabelVolume {
            shape,
            classes,
            labels,
        })
    }

    /// Accepts signed labels as stored on disk.
    pub fn from_i32(shape: Shape, classes: usize, raw: &[i32]) -> Result<Self, VolumeError> {
        if let Some(voxel) = raw.iter().position(|&l| l < 0) {
            return Err(VolumeError::LabelOutOfRange {
                voxel,
                label: raw[voxel] as i64,
                classes,
            });
        }
        LabelVolume::new(shape, classes, raw.iter().map(|&l| l as u32).collect())
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Binary mask of voxels labelled `class`.
    pub fn mask(&self, class: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l as usize == class).collect()
    }
}

/// `T` stochastic softmax volumes of the same image.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStack {
    passes: Vec<ProbVolume>,
}

impl SampleStack {
    pub fn new(passes: Vec<ProbVolume>) -> Result<Self, VolumeError> {
        if passes.len() < 2 {
            return Err(VolumeError::TooFewPasses(passes.len()));
        }
        let (shape, classes) = (passes[0].shape(), passes[0].classes());
        if let Some(t) = passes
            .iter()
            .position(|p| p.shape() != shape || p.classes() != classes)
        {
            return Err(VolumeError::InconsistentPass(t));
        }
        Ok(SampleStack { passes })
    }

    pub fn passes(&self) -> &[ProbVolume] {
        &self.passes
    }

    pub fn pass_count(&self) -> usize {
        self.passes.len()
    }

    pub fn shape(&self) -> &Shape {
        self.passes[0].shape()
    }

    pub fn classes(&self) -> usize {
        self.passes[0].classes()
    }

    pub fn voxel_count(&self) -> usize {
        self.shape().voxel_count()
    }

    /// The `T` samples of `class` at `voxel`, in pass order.
    pub fn samples(&self, voxel: usize, class: usize) -> impl Iterator<Item = f64> + '_ {
        self.passes.iter().map(move |p| p.voxel(voxel)[class])
    }

    /// Per-voxel, per-class mean over passes.
    pub fn mean_prediction(&self) -> ProbVolume {
        let n = self.passes[0].values.len();
        let t = self.passes.len() as f64;
        let mut acc = vec![0.0; n];
        for pass in &self.passes {
            for (a, &x) in acc.iter_mut().zip(&pass.values) {
                *a += x;
            }
        }
        for a in &mut acc {
            *a /= t;
        }
        ProbVolume {
            shape: self.shape().clone(),
            classes: self.classes(),
            values: acc,
        }
    }
}

pub fn mean_prediction(stack: &SampleStack) -> ProbVolume {
    stack.mean_prediction()
}
