//! Per-class segmentation metrics: Dice, Jaccard, 95th-percentile Hausdorff
//! distance and average symmetric surface distance.
//!
//! Distances are in voxel units (isotropic spacing). HD95 is the 95th
//! percentile, with linear interpolation, of the *pooled* set of directed
//! surface distances in both directions; ASD is the mean of that same set.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{LabelVolume, Shape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("label volumes differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("class {class} is outside [0, {classes})")]
    BadClass { class: usize, classes: usize },
}

fn check(pred: &LabelVolume, gt: &LabelVolume) -> Result<(), MetricsError> {
    if pred.shape() != gt.shape() {
        return Err(MetricsError::ShapeMismatch(
            pred.shape().dims().to_vec(),
            gt.shape().dims().to_vec(),
        ));
    }
    Ok(())
}

/// Dice and Jaccard of class `c`. Both masks empty gives `(1, 1)`; exactly
/// one empty gives `(0, 0)`.
pub fn dice_jaccard(
    pred: &LabelVolume,
    gt: &LabelVolume,
    c: usize,
) -> Result<(f64, f64), MetricsError> {
    check(pred, gt)?;
    let c = c as u32;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let (in_a, in_b) = (p == c, g == c);
        a += in_a as usize;
        b += in_b as usize;
        both += (in_a && in_b) as usize;
    }
    Ok(overlap_scores(a, b, both))
}

fn overlap_scores(a: usize, b: usize, both: usize) -> (f64, f64) {
    match (a, b) {
        (0, 0) => (1.0, 1.0),
        (0, _) | (_, 0) => (0.0, 0.0),
        _ => {
            let dice = 2.0 * both as f64 / (a + b) as f64;
            let jaccard = both as f64 / (a + b - both) as f64;
            (dice, jaccard)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub hd95: f64,
    pub asd: f64,
}

/// HD95 and ASD of class `c`, or `None` when either mask is empty.
pub fn surface_distances(
    pred: &LabelVolume,
    gt: &LabelVolume,
    c: usize,
) -> Result<Option<SurfaceDistances>, MetricsError> {
    check(pred, gt)?;
    let shape = pred.shape();
    let a = pred.mask(c);
    let b = gt.mask(c);
    if !a.iter().any(|&x| x) || !b.iter().any(|&x| x) {
        return Ok(None);
    }
    let sa = surface(shape, &a);
    let sb = surface(shape, &b);
    let da = squared_edt(shape, &sa);
    let db = squared_edt(shape, &sb);
    let mut pooled: Vec<f64> = Vec::new();
    for (v, &on) in sa.iter().enumerate() {
        if on {
            pooled.push(db[v].sqrt());
        }
    }
    for (v, &on) in sb.iter().enumerate() {
        if on {
            pooled.push(da[v].sqrt());
        }
    }
    pooled.sort_by(f64::total_cmp);
    let asd = pooled.iter().sum::<f64>() / pooled.len() as f64;
    Ok(Some(SurfaceDistances {
        hd95: percentile_sorted(&pooled, 95.0),
        asd,
    }))
}

/// Linear-interpolation percentile of an ascending slice.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Mask voxels with at least one face neighbour outside the mask or the
/// volume.
pub fn surface(shape: &Shape, mask: &[bool]) -> Vec<bool> {
    let dims = shape.dims();
    let strides = shape.strides();
    let mut out = vec![false; mask.len()];
    for (v, &on) in mask.iter().enumerate() {
        if !on {
            continue;
        }
        let coords = shape.unravel(v);
        out[v] = (0..dims.len()).any(|axis| {
            let c = coords[axis];
            c == 0
                || c + 1 == dims[axis]
                || !mask[v - strides[axis]]
                || !mask[v + strides[axis]]
        });
    }
    out
}

/// Exact squared Euclidean distance to the nearest `true` voxel, by
/// separable lower-envelope passes along each axis.
pub fn squared_edt(shape: &Shape, sites: &[bool]) -> Vec<f64> {
    let dims = shape.dims();
    let strides = shape.strides();
    let mut d: Vec<f64> = sites
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let n = d.len();
    for axis in 0..dims.len() {
        let len = dims[axis];
        let stride = strides[axis];
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        for start in 0..n {
            // A line starts wherever this axis' coordinate is zero.
            if !(start / stride).is_multiple_of(len) {
                continue;
            }
            for (i, x) in line.iter_mut().enumerate() {
                *x = d[start + i * stride];
            }
            envelope_1d(&line, &mut out);
            for (i, &x) in out.iter().enumerate() {
                d[start + i * stride] = x;
            }
        }
    }
    d
}

/// 1-D squared distance transform of a sampled function (lower envelope of
/// parabolas).
fn envelope_1d(f: &[f64], out: &mut [f64]) {
    let finite: Vec<usize> = (0..f.len()).filter(|&q| f[q].is_finite()).collect();
    let Some((&first, rest)) = finite.split_first() else {
        out.fill(f64::INFINITY);
        return;
    };
    let key = |q: usize| f[q] + (q * q) as f64;
    let mut v = vec![first];
    let mut z = vec![f64::NEG_INFINITY, f64::INFINITY];
    for &q in rest {
        let mut s;
        loop {
            let p = *v.last().unwrap();
            s = (key(q) - key(p)) / (2.0 * (q - p) as f64);
            // z[0] is -inf, so this never pops the first parabola.
            if s <= z[v.len() - 1] {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        *z.last_mut().unwrap() = s;
        v.push(q);
        z.push(f64::INFINITY);
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *o = dq * dq + f[v[k]];
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    /// `"ok"` or `"empty-mask"`.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub dice: f64,
    pub jaccard: f64,
    /// Mean over classes with both masks non-empty; `None` if there are none.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetrics>,
    pub mean: MeanMetrics,
}

/// Evaluates the listed classes and their mean.
pub fn evaluate(
    pred: &LabelVolume,
    gt: &LabelVolume,
    classes: &[usize],
) -> Result<MetricReport, MetricsError> {
    check(pred, gt)?;
    let total = pred.classes().max(gt.classes());
    let mut per_class = Vec::with_capacity(classes.len());
    for &c in classes {
        if c >= total {
            return Err(MetricsError::BadClass { class: c, classes: total });
        }
        let (dice, jaccard) = dice_jaccard(pred, gt, c)?;
        let surf = surface_distances(pred, gt, c)?;
        if surf.is_none() {
            log::warn!("class {c}: empty mask, excluded from the HD95/ASD mean");
        }
        per_class.push(ClassMetrics {
            class: c,
            dice,
            jaccard,
            hd95: surf.map(|s| s.hd95),
            asd: surf.map(|s| s.asd),
            status: if surf.is_some() { "ok" } else { "empty-mask" }.into(),
        });
    }
    let n = per_class.len().max(1) as f64;
    let mean_of = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let mean = MeanMetrics {
        dice: per_class.iter().map(|m| m.dice).sum::<f64>() / n,
        jaccard: per_class.iter().map(|m| m.jaccard).sum::<f64>() / n,
        hd95: mean_of(per_class.iter().filter_map(|m| m.hd95).collect()),
        asd: mean_of(per_class.iter().filter_map(|m| m.asd).collect()),
    };
    Ok(MetricReport { per_class, mean })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(dims: &[usize], values: Vec<u32>) -> LabelVolume {
        LabelVolume::new(Shape::new(dims).unwrap(), 2, values).unwrap()
    }

    #[test]
    fn identical_volumes() {
        let a = labels(&[3, 3], vec![0, 1, 1, 0, 1, 1, 0, 0, 0]);
        assert_eq!(dice_jaccard(&a, &a, 1).unwrap(), (1.0, 1.0));
        let s = surface_distances(&a, &a, 1).unwrap().unwrap();
        assert_eq!((s.hd95, s.asd), (0.0, 0.0));
    }

    #[test]
    fn half_overlap() {
        // |A| = |B| = 4, |A ∩ B| = 2.
        let a = labels(&[2, 4], vec![1, 1, 1, 1, 0, 0, 0, 0]);
        let b = labels(&[2, 4], vec![0, 0, 1, 1, 1, 1, 0, 0]);
        let (d, j) = dice_jaccard(&a, &b, 1).unwrap();
        assert_eq!(d, 0.5);
        assert!((j - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_conventions() {
        let a = labels(&[2, 2], vec![0; 4]);
        let b = labels(&[2, 2], vec![0, 1, 0, 0]);
        assert_eq!(dice_jaccard(&a, &a, 1).unwrap(), (1.0, 1.0));
        assert_eq!(dice_jaccard(&a, &b, 1).unwrap(), (0.0, 0.0));
        assert_eq!(surface_distances(&a, &b, 1).unwrap(), None);
        let r = evaluate(&a, &b, &[0, 1]).unwrap();
        assert_eq!(r.per_class[1].status, "empty-mask");
        assert_eq!(r.mean.hd95, r.per_class[0].hd95);
    }

    #[test]
    fn single_voxels_three_apart() {
        let mut pa = vec![0; 10];
        let mut pb = vec![0; 10];
        pa[2] = 1;
        pb[5] = 1;
        let a = labels(&[1, 10], pa);
        let b = labels(&[1, 10], pb);
        let s = surface_distances(&a, &b, 1).unwrap().unwrap();
        assert_eq!((s.hd95, s.asd), (3.0, 3.0));
    }

    #[test]
    fn shape_mismatch() {
        let a = labels(&[2, 2], vec![0; 4]);
        let b = labels(&[1, 4], vec![0; 4]);
        assert!(matches!(
            dice_jaccard(&a, &b, 1),
            Err(MetricsError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn edt_matches_hand_values() {
        let shape = Shape::new(&[1, 5]).unwrap();
        let d = squared_edt(&shape, &[false, true, false, false, true]);
        assert_eq!(d, vec![1.0, 0.0, 1.0, 1.0, 0.0]);
        let shape = Shape::new(&[3, 3]).unwrap();
        let mut sites = vec![false; 9];
        sites[0] = true;
        assert_eq!(
            squared_edt(&shape, &sites),
            vec![0.0, 1.0, 4.0, 1.0, 2.0, 5.0, 4.0, 5.0, 8.0]
        );
    }

    #[test]
    fn percentile_interpolates() {
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile_sorted(&xs, 50.0), 2.0);
        assert!((percentile_sorted(&xs, 95.0) - 3.8).abs() < 1e-12);
    }

    #[test]
    fn surface_of_solid_block_excludes_interior() {
        let shape = Shape::new(&[3, 3]).unwrap();
        let s = surface(&shape, &[true; 9]);
        assert_eq!(s.iter().filter(|&&x| x).count(), 8);
        assert!(!s[4]);
    }
}
