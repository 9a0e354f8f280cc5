//! Training objectives and their gradients with respect to the logits.

use crate::volume::{LabelVolume, ProbVolume, ScalarVolume};

use super::model::softmax_backward;
use super::SimError;

pub const DICE_EPSILON: f64 = 1e-6;

/// Probabilities below this are floored inside the cross-entropy log.
const CE_FLOOR: f64 = 1e-300;

/// `CE + (1 − mean soft Dice)` with equal weights, and `∂L/∂logits`.
///
/// Soft Dice of class `c` is `2 Σ p g / (Σ p + Σ g + ε)`, averaged over all
/// classes.
pub fn supervised_loss(pred: &ProbVolume, gt: &LabelVolume) -> Result<(f64, Vec<f64>), SimError> {
    if pred.shape() != gt.shape() || pred.classes() != gt.classes() {
        return Err(SimError::ShapeMismatch);
    }
    Ok(supervised_terms(pred.values(), gt.labels(), pred.classes()))
}

pub(crate) fn supervised_terms(probs: &[f64], labels: &[u32], classes: usize) -> (f64, Vec<f64>) {
    let n = labels.len();
    let nf = n as f64;
    let mut inter = vec![0.0; classes];
    let mut sum_p = vec![0.0; classes];
    let mut sum_g = vec![0.0; classes];
    let mut ce = 0.0;
    for (v, &y) in labels.iter().enumerate() {
        let p = &probs[v * classes..(v + 1) * classes];
        let y = y as usize;
        ce -= p[y].max(CE_FLOOR).ln();
        inter[y] += p[y];
        sum_g[y] += 1.0;
        for c in 0..classes {
            sum_p[c] += p[c];
        }
    }
    ce /= nf;
    let mut mean_dice = 0.0;
    let mut den = vec![0.0; classes];
    for c in 0..classes {
        den[c] = sum_p[c] + sum_g[c] + DICE_EPSILON;
        mean_dice += 2.0 * inter[c] / den[c];
    }
    mean_dice /= classes as f64;

    // Dice term: ∂/∂p_vc of −(1/C) Σ_c 2 I_c / S_c.
    let cf = classes as f64;
    let mut dprobs = vec![0.0; probs.len()];
    for (v, &y) in labels.iter().enumerate() {
        let g = &mut dprobs[v * classes..(v + 1) * classes];
        for c in 0..classes {
            let gvc = if y as usize == c { 1.0 } else { 0.0 };
            g[c] = -(2.0 * gvc / den[c] - 2.0 * inter[c] / (den[c] * den[c])) / cf;
        }
    }
    let mut dlogits = softmax_backward(probs, &dprobs, classes);
    // Cross-entropy term pulls back to (p − y) / N directly.
    for (v, &y) in labels.iter().enumerate() {
        let p = &probs[v * classes..(v + 1) * classes];
        let g = &mut dlogits[v * classes..(v + 1) * classes];
        for c in 0..classes {
            let yc = if y as usize == c { 1.0 } else { 0.0 };
            g[c] += (p[c] - yc) / nf;
        }
    }
    (ce + 1.0 - mean_dice, dlogits)
}

/// Masked mean `Σ m_v ‖pT_v − pS_v‖² / Σ m_v`, and its gradient with respect
/// to the student logits. An all-zero mask gives 0 with zero gradient.
pub fn consistency_loss(
    p_teacher: &ProbVolume,
    p_student: &ProbVolume,
    mask: &ScalarVolume,
) -> Result<(f64, Vec<f64>), SimError> {
    if p_teacher.shape() != p_student.shape()
        || p_teacher.classes() != p_student.classes()
        || mask.shape() != p_student.shape()
    {
        return Err(SimError::ShapeMismatch);
    }
    Ok(consistency_terms(
        p_teacher.values(),
        p_student.values(),
        mask.values(),
        p_student.classes(),
    ))
}

pub(crate) fn consistency_terms(
    pt: &[f64],
    ps: &[f64],
    mask: &[f64],
    classes: usize,
) -> (f64, Vec<f64>) {
    let kept: f64 = mask.iter().sum();
    if kept == 0.0 {
        return (0.0, vec![0.0; ps.len()]);
    }
    let mut value = 0.0;
    let mut dprobs = vec![0.0; ps.len()];
    for (v, &m) in mask.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for c in v * classes..(v + 1) * classes {
            let d = ps[c] - pt[c];
            value += m * d * d;
            dprobs[c] = 2.0 * m * d / kept;
        }
    }
    (value / kept, softmax_backward(ps, &dprobs, classes))
}
