//! Pointwise forecast quality: RMSE, Parkes error grid zones and the
//! blood glucose risk index cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ── RMSE ──────────────────────────────────────────────────────────────

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch { expected: truth.len(), got: pred.len() });
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("rmse of an empty series".into()));
    }
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

// ── Parkes error grid (type 1) ────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PegZone {
    A,
    B,
    C,
    D,
    E,
}

impl PegZone {
    pub fn is_unsafe(self) -> bool {
        matches!(self, PegZone::C | PegZone::D | PegZone::E)
    }
}

/// Upper edge of the published grid's domain, mg/dL.
pub const PEG_MAX: f64 = 550.0;

/// Type 1 consensus grid boundaries as (reference, prediction) vertices.
/// Upper curves bound a zone from above and are functions of the reference
/// value; lower curves bound it from the right and are functions of the
/// prediction.
pub mod peg_type1 {
    pub const UPPER_A: &[(f64, f64)] = &[(0.0, 50.0), (30.0, 50.0), (140.0, 170.0), (280.0, 380.0), (430.0, 550.0)];
    pub const LOWER_A: &[(f64, f64)] = &[(50.0, 0.0), (50.0, 30.0), (170.0, 145.0), (385.0, 300.0), (550.0, 450.0)];
    pub const UPPER_B: &[(f64, f64)] = &[(0.0, 60.0), (30.0, 60.0), (50.0, 80.0), (70.0, 110.0), (260.0, 550.0)];
    pub const LOWER_B: &[(f64, f64)] = &[(120.0, 0.0), (120.0, 30.0), (260.0, 130.0), (550.0, 250.0)];
    pub const UPPER_C: &[(f64, f64)] = &[(0.0, 100.0), (25.0, 100.0), (50.0, 125.0), (80.0, 215.0), (125.0, 550.0)];
    pub const LOWER_C: &[(f64, f64)] = &[(250.0, 0.0), (250.0, 40.0), (550.0, 150.0)];
    pub const UPPER_D: &[(f64, f64)] = &[(0.0, 150.0), (35.0, 155.0), (50.0, 550.0)];
}

/// Piecewise-linear interpolation of `curve` (sorted by `key`) at `at`;
/// `None` beyond the last vertex.
fn interp(curve: &[(f64, f64)], at: f64, key: impl Fn(&(f64, f64)) -> f64, val: impl Fn(&(f64, f64)) -> f64) -> Option<f64> {
    for w in curve.windows(2) {
        let (k0, k1) = (key(&w[0]), key(&w[1]));
        if at <= k1 {
            if k1 == k0 {
                return Some(val(&w[1]));
            }
            let frac = ((at - k0) / (k1 - k0)).max(0.0);
            return Some(val(&w[0]) + frac * (val(&w[1]) - val(&w[0])));
        }
    }
    None
}

fn above(upper: &[(f64, f64)], reference: f64, prediction: f64) -> bool {
    interp(upper, reference, |p| p.0, |p| p.1).is_some_and(|y| prediction > y)
}

fn below(lower: &[(f64, f64)], reference: f64, prediction: f64) -> bool {
    interp(lower, prediction, |p| p.1, |p| p.0).is_some_and(|x| reference > x)
}

/// Parkes (consensus) error grid zone for type 1 diabetes.
///
/// Values above 550 mg/dL are clamped to 550. Points exactly on a
/// boundary belong to the inner (safer) zone.
pub fn peg_zone(reference: f64, prediction: f64) -> Result<PegZone> {
    if !(reference > 0.0 && prediction > 0.0) || !reference.is_finite() || !prediction.is_finite() {
        return Err(Error::InvalidInput(format!(
            "error grid needs positive finite values, got ({reference}, {prediction})"
        )));
    }
    use peg_type1::*;
    let (x, y) = (reference.min(PEG_MAX), prediction.min(PEG_MAX));
    let zone = if above(UPPER_D, x, y) {
        PegZone::E
    } else if above(UPPER_C, x, y) || below(LOWER_C, x, y) {
        PegZone::D
    } else if above(UPPER_B, x, y) || below(LOWER_B, x, y) {
        PegZone::C
    } else if above(UPPER_A, x, y) || below(LOWER_A, x, y) {
        PegZone::B
    } else {
        PegZone::A
    };
    Ok(zone)
}

/// Percentage of (reference, prediction) pairs in zones C–E; `None` for no pairs.
pub fn unsafe_fraction(pairs: &[(f64, f64)]) -> Result<Option<f64>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut bad = 0usize;
    for &(r, p) in pairs {
        if peg_zone(r, p)?.is_unsafe() {
            bad += 1;
        }
    }
    Ok(Some(100.0 * bad as f64 / pairs.len() as f64))
}

// ── BGRI ──────────────────────────────────────────────────────────────

/// Glucose floor applied before the risk transform, mg/dL.
pub const BGRI_CLIP: f64 = 20.0;

/// Symmetrizing risk transform; zero near 112.5 mg/dL, negative below.
#[inline]
pub fn bgri_f(g: f64) -> f64 {
    1.509 * (g.ln().powf(1.084) - 5.381)
}

/// Pointwise risk 10·f(g)² after clipping at [`BGRI_CLIP`].
#[inline]
pub fn bgri_risk(g: f64) -> f64 {
    let f = bgri_f(g.max(BGRI_CLIP));
    10.0 * f * f
}

/// Mean risk over a trajectory.
pub fn bgri_cost(trajectory: &[f64]) -> Result<f64> {
    if trajectory.is_empty() {
        return Err(Error::InvalidInput("risk cost of an empty trajectory".into()));
    }
    Ok(trajectory.iter().map(|g| bgri_risk(*g)).sum::<f64>() / trajectory.len() as f64)
}

/// Risk transform value together with its cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskValue {
    pub f_value: f64,
    pub cost: f64,
}

impl RiskValue {
    pub fn of(g: f64) -> Self {
        let f_value = bgri_f(g.max(BGRI_CLIP));
        RiskValue { f_value, cost: 10.0 * f_value * f_value }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[103.0, 93.0], &[100.0, 90.0]).unwrap() - 3.0).abs() < 1e-12);
        assert!((rmse(&[100.0, 110.0], &[100.0, 100.0]).unwrap() - 50f64.sqrt()).abs() < 1e-12);
        assert!(matches!(rmse(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch { .. })));
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn peg_diagonal_and_known_points() {
        for g in [1.0, 20.0, 70.0, 100.0, 180.0, 400.0, 550.0, 700.0] {
            assert_eq!(peg_zone(g, g).unwrap(), PegZone::A);
        }
        assert_eq!(peg_zone(100.0, 105.0).unwrap(), PegZone::A);
        assert_eq!(peg_zone(100.0, 95.0).unwrap(), PegZone::A);
        // upper-left corner is zone E, bottom right zone D
        assert_eq!(peg_zone(20.0, 400.0).unwrap(), PegZone::E);
        assert_eq!(peg_zone(500.0, 20.0).unwrap(), PegZone::D);
        assert_eq!(peg_zone(100.0, 400.0).unwrap(), PegZone::D);
        assert_eq!(peg_zone(100.0, 300.0).unwrap(), PegZone::C);
        assert_eq!(peg_zone(300.0, 150.0).unwrap(), PegZone::B);
        assert_eq!(peg_zone(400.0, 150.0).unwrap(), PegZone::C);
        assert!(peg_zone(0.0, 100.0).is_err());
        assert!(peg_zone(100.0, -1.0).is_err());
    }

    #[test]
    fn peg_boundaries_belong_to_inner_zone() {
        // on the upper A/B edge at the vertex (140, 170)
        assert_eq!(peg_zone(140.0, 170.0).unwrap(), PegZone::A);
        assert_eq!(peg_zone(140.0, 170.5).unwrap(), PegZone::B);
        // vertical lower A edge at reference 50
        assert_eq!(peg_zone(50.0, 10.0).unwrap(), PegZone::A);
        assert_eq!(peg_zone(50.5, 10.0).unwrap(), PegZone::B);
    }

    #[test]
    fn unsafe_fraction_counts() {
        assert_eq!(unsafe_fraction(&[]).unwrap(), None);
        let diag = [(100.0, 100.0), (200.0, 200.0)];
        assert_eq!(unsafe_fraction(&diag).unwrap(), Some(0.0));
        let pairs = [(100.0, 100.0), (150.0, 150.0), (200.0, 200.0), (400.0, 150.0)];
        assert_eq!(peg_zone(400.0, 150.0).unwrap(), PegZone::C);
        assert_eq!(unsafe_fraction(&pairs).unwrap(), Some(25.0));
    }

    #[test]
    fn bgri_fixed_points() {
        assert!(bgri_f(112.5).abs() < 0.01);
        assert!((bgri_risk(20.0) - 100.0).abs() < 0.1);
        assert!((bgri_risk(600.0) - 100.0).abs() < 0.1);
        assert!(bgri_cost(&[112.5; 12]).unwrap() < 1e-3);
        assert!(bgri_cost(&[0.0, -5.0]).unwrap().is_finite());
        assert!(bgri_cost(&[]).is_err());
        let r = RiskValue::of(60.0);
        assert!(r.f_value < 0.0 && (r.cost - 10.0 * r.f_value.powi(2)).abs() < 1e-12);
    }

    #[test]
    fn hypoglycemia_costs_more_than_equal_hyperglycemia() {
        assert!(bgri_risk(112.5 - 40.0) > bgri_risk(112.5 + 40.0));
    }
}
