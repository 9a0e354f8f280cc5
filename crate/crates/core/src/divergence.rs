//! Discrete divergences between binned mass functions, and the Shannon
//! entropy of a mean prediction.
//!
//! All logarithms are natural. An `eps` floor keeps every result finite:
//! empty histogram bins are the norm with a handful of samples spread over
//! ten bins, and the α-divergence with α > 1 divides by them.

use thiserror::Error;

use crate::volume::is_simplex;

pub const DEFAULT_EPSILON: f64 = 1e-12;

/// `|α − 1|` at or below this dispatches to the KL limit.
pub const KL_WINDOW: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DivergenceError {
    #[error("mass vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("negative mass {value} at index {index}")]
    NegativeEntry { index: usize, value: f64 },
    #[error("entropy input is not on the simplex")]
    NotSimplex,
    #[error("epsilon floor must lie in (0, 1e-6], got {0}")]
    BadEpsilon(f64),
    #[error("alpha must be finite, got {0}")]
    BadAlpha(f64),
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<(), DivergenceError> {
    if p.len() != q.len() {
        return Err(DivergenceError::LengthMismatch(p.len(), q.len()));
    }
    for (index, &value) in p.iter().chain(q).enumerate() {
        if value < 0.0 {
            return Err(DivergenceError::NegativeEntry {
                index: index % p.len(),
                value,
            });
        }
    }
    Ok(())
}

/// Bhattacharyya divergence `−ln Σ √(p_k q_k)`, with the coefficient floored
/// at `eps`.
pub fn bhattacharyya(p: &[f64], q: &[f64], eps: f64) -> Result<f64, DivergenceError> {
    check_pair(p, q)?;
    Ok(bhattacharyya_unchecked(p, q, eps))
}

pub(crate) fn bhattacharyya_unchecked(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let bc: f64 = p.iter().zip(q).map(|(&a, &b)| (a * b).sqrt()).sum();
    -bc.max(eps).ln()
}

/// Tsallis α-divergence `(1 − Σ p_k^α q_k^(1−α)) / (1 − α)`.
///
/// Any base raised to a negative power is floored at `eps`. Within
/// [`KL_WINDOW`] of α = 1 the analytic KL limit is returned instead.
pub fn alpha_divergence(p: &[f64], q: &[f64], alpha: f64, eps: f64) -> Result<f64, DivergenceError> {
    if !alpha.is_finite() {
        return Err(DivergenceError::BadAlpha(alpha));
    }
    check_pair(p, q)?;
    Ok(alpha_unchecked(p, q, alpha, eps))
}

pub(crate) fn alpha_unchecked(p: &[f64], q: &[f64], alpha: f64, eps: f64) -> f64 {
    if (alpha - 1.0).abs() <= KL_WINDOW {
        return kl_unchecked(p, q, eps);
    }
    let beta = 1.0 - alpha;
    let s: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let a = if alpha < 0.0 { a.max(eps) } else { a };
            let b = if beta < 0.0 { b.max(eps) } else { b };
            a.powf(alpha) * b.powf(beta)
        })
        .sum();
    (1.0 - s) / beta
}

/// `KL(p‖q) = Σ p_k ln(p_k / max(q_k, eps))`, zero-mass terms dropped.
pub fn kl_divergence(p: &[f64], q: &[f64], eps: f64) -> Result<f64, DivergenceError> {
    check_pair(p, q)?;
    Ok(kl_unchecked(p, q, eps))
}

fn kl_unchecked(p: &[f64], q: &[f64], eps: f64) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b.max(eps)).ln())
        .sum()
}

/// Shannon entropy `−Σ μ_c ln max(μ_c, eps)` of a class vector.
pub fn entropy_of(mu: &[f64], eps: f64) -> Result<f64, DivergenceError> {
    if !is_simplex(mu, 1e-6) {
        return Err(DivergenceError::NotSimplex);
    }
    Ok(entropy_unchecked(mu, eps))
}

pub(crate) fn entropy_unchecked(mu: &[f64], eps: f64) -> f64 {
    -mu.iter().map(|&m| m * m.max(eps).ln()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DivergenceKind {
    Bhattacharyya,
    Alpha(f64),
}

/// Which divergence to evaluate between histogram rows, and its floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceSpec {
    kind: DivergenceKind,
    epsilon: f64,
}

impl DivergenceSpec {
    pub fn new(kind: DivergenceKind, epsilon: f64) -> Result<Self, DivergenceError> {
        if !(epsilon > 0.0 && epsilon <= 1e-6) {
            return Err(DivergenceError::BadEpsilon(epsilon));
        }
        if let DivergenceKind::Alpha(a) = kind {
            if !a.is_finite() {
                return Err(DivergenceError::BadAlpha(a));
            }
        }
        Ok(DivergenceSpec { kind, epsilon })
    }

    pub fn bhattacharyya() -> Self {
        DivergenceSpec {
            kind: DivergenceKind::Bhattacharyya,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn alpha(alpha: f64) -> Result<Self, DivergenceError> {
        DivergenceSpec::new(DivergenceKind::Alpha(alpha), DEFAULT_EPSILON)
    }

    pub fn kind(&self) -> DivergenceKind {
        self.kind
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn evaluate(&self, p: &[f64], q: &[f64]) -> Result<f64, DivergenceError> {
        check_pair(p, q)?;
        Ok(self.evaluate_unchecked(p, q))
    }

    pub(crate) fn evaluate_unchecked(&self, p: &[f64], q: &[f64]) -> f64 {
        match self.kind {
            DivergenceKind::Bhattacharyya => bhattacharyya_unchecked(p, q, self.epsilon),
            DivergenceKind::Alpha(a) => alpha_unchecked(p, q, a, self.epsilon),
        }
    }

    pub fn name(&self) -> String {
        match self.kind {
            DivergenceKind::Bhattacharyya => "bhattacharyya".into(),
            DivergenceKind::Alpha(a) => format!("alpha({a})"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = DEFAULT_EPSILON;

    #[test]
    fn bhattacharyya_identity_and_disjoint() {
        let p = [0.1, 0.2, 0.3, 0.4];
        assert!(bhattacharyya(&p, &p, EPS).unwrap().abs() <= 1e-12);
        let d = bhattacharyya(&[1.0, 0.0], &[0.0, 1.0], EPS).unwrap();
        assert!((d - 27.631_021_115_928_547).abs() < 1e-9);
        assert!((d + EPS.ln()).abs() < 1e-12);
    }

    #[test]
    fn alpha_two_hand_value() {
        let d = alpha_divergence(&[0.5, 0.5], &[0.25, 0.75], 2.0, EPS).unwrap();
        assert!((d - 1.0 / 3.0).abs() <= 1e-12, "{d}");
    }

    #[test]
    fn alpha_identity() {
        let p = [0.0, 0.25, 0.25, 0.5];
        for a in [0.25, 0.5, 2.0, 4.0] {
            assert!(alpha_divergence(&p, &p, a, EPS).unwrap().abs() <= 1e-12);
        }
    }

    #[test]
    fn alpha_one_is_kl() {
        let p = [0.2, 0.3, 0.5];
        let q = [0.3, 0.3, 0.4];
        let kl = 0.2 * (0.2f64 / 0.3).ln() + 0.5 * (0.5f64 / 0.4).ln();
        assert!((alpha_divergence(&p, &q, 1.0, EPS).unwrap() - kl).abs() < 1e-15);
        assert!((alpha_divergence(&p, &q, 1.0 + 5e-7, EPS).unwrap() - kl).abs() < 1e-15);
    }

    #[test]
    fn alpha_two_with_empty_bin_is_finite() {
        let d = alpha_divergence(&[0.5, 0.5], &[1.0, 0.0], 2.0, EPS).unwrap();
        assert!(d.is_finite());
        assert!(d > 1e10);
    }

    #[test]
    fn errors() {
        assert_eq!(
            bhattacharyya(&[1.0], &[0.5, 0.5], EPS),
            Err(DivergenceError::LengthMismatch(1, 2))
        );
        assert!(matches!(
            alpha_divergence(&[1.5, -0.5], &[0.5, 0.5], 2.0, EPS),
            Err(DivergenceError::NegativeEntry { index: 1, .. })
        ));
        assert_eq!(
            entropy_of(&[0.5, 0.6], EPS),
            Err(DivergenceError::NotSimplex)
        );
        assert!(DivergenceSpec::new(DivergenceKind::Bhattacharyya, 1e-3).is_err());
        assert!(DivergenceSpec::new(DivergenceKind::Alpha(f64::NAN), EPS).is_err());
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy_of(&[0.0, 1.0, 0.0], EPS).unwrap(), 0.0);
        let u = [1.0 / 9.0; 9];
        assert!((entropy_of(&u, EPS).unwrap() - 9f64.ln()).abs() <= 1e-9);
        assert!((entropy_of(&[0.7, 0.3], EPS).unwrap() - 0.610_864).abs() <= 1e-6);
    }
}
