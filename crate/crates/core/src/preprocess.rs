//! Log + min-max scaling of QoS values into `[0, 1]`.

use crate::error::{Error, Result};
use crate::sparse_tensor::DataSplit;

/// Statistics of `ln(1 + v)` over the training entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationParams {
    pub log_applied: bool,
    pub z_min: f64,
    pub z_max: f64,
}

impl NormalizationParams {
    /// Fits on the training part of a split. Validation and test entries are
    /// never read.
    pub fn fit(split: &DataSplit, log_applied: bool) -> Result<Self> {
        Self::fit_values(split.train.values(), log_applied)
    }

    fn fit_values(values: impl Iterator<Item = f64>, log_applied: bool) -> Result<Self> {
        let mut z_min = f64::INFINITY;
        let mut z_max = f64::NEG_INFINITY;
        for v in values {
            let z = lift(v, log_applied);
            z_min = z_min.min(z);
            z_max = z_max.max(z);
        }
        if z_min > z_max {
            return Err(Error::Fit("cannot fit normalization on an empty training set".into()));
        }
        Ok(Self {
            log_applied,
            z_min,
            z_max,
        })
    }

    /// True when all training values coincide; `transform` then returns 0.5.
    pub fn is_degenerate(&self) -> bool {
        self.z_max <= self.z_min
    }

    /// Maps a raw value to `[0, 1]`, clamping values outside the training range.
    pub fn transform(&self, v: f64) -> Result<f64> {
        if v.is_nan() || v < 0.0 {
            return Err(Error::Domain(format!("cannot normalize negative value {v}")));
        }
        if self.is_degenerate() {
            return Ok(0.5);
        }
        let u = (lift(v, self.log_applied) - self.z_min) / (self.z_max - self.z_min);
        Ok(u.clamp(0.0, 1.0))
    }

    pub fn inverse_transform(&self, u: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&u) {
            return Err(Error::Domain(format!("normalized value {u} outside [0, 1]")));
        }
        let z = u * (self.z_max - self.z_min) + self.z_min;
        Ok(if self.log_applied { z.exp_m1() } else { z })
    }
}

fn lift(v: f64, log_applied: bool) -> f64 {
    if log_applied {
        v.ln_1p()
    } else {
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::E;

    fn params(values: &[f64]) -> Result<NormalizationParams> {
        NormalizationParams::fit_values(values.iter().copied(), true)
    }

    #[test]
    fn fit_extremes_of_log_values() {
        let p = params(&[0.0, E - 1.0, E * E - 1.0]).unwrap();
        assert_eq!(p.z_min, 0.0);
        assert!((p.z_max - 2.0).abs() < 1e-15);

        let p = params(&[1.5, 2.0]).unwrap();
        assert!((p.z_min - 2.5f64.ln()).abs() < 1e-15);
        assert!((p.z_max - 3.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn empty_training_set_is_a_fit_error() {
        assert!(matches!(params(&[]), Err(Error::Fit(_))));
    }

    #[test]
    fn degenerate_range_maps_to_half() {
        let p = params(&[3.0, 3.0, 3.0]).unwrap();
        assert!(p.is_degenerate());
        assert_eq!(p.transform(3.0).unwrap(), 0.5);
        assert_eq!(p.transform(100.0).unwrap(), 0.5);
        assert!((p.inverse_transform(0.5).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn boundaries_and_midpoint() {
        let p = NormalizationParams {
            log_applied: true,
            z_min: 0.5,
            z_max: 2.5,
        };
        let raw = |z: f64| z.exp_m1();
        assert!(p.transform(raw(0.5)).unwrap().abs() < 1e-12);
        assert!((p.transform(raw(2.5)).unwrap() - 1.0).abs() < 1e-12);
        assert!((p.transform(raw(1.5)).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(p.inverse_transform(0.0).unwrap(), 0.5f64.exp() - 1.0);
        assert_eq!(p.inverse_transform(1.0).unwrap(), 2.5f64.exp() - 1.0);
    }

    #[test]
    fn out_of_range_inputs() {
        let p = params(&[1.0, 5.0]).unwrap();
        assert_eq!(p.transform(0.0).unwrap(), 0.0);
        assert_eq!(p.transform(1000.0).unwrap(), 1.0);
        assert!(matches!(p.transform(-0.1), Err(Error::Domain(_))));
        assert!(matches!(p.inverse_transform(1.5), Err(Error::Domain(_))));
        assert!(matches!(p.inverse_transform(-1e-9), Err(Error::Domain(_))));
    }

    #[test]
    fn round_trip_on_reference_values() {
        let p = params(&[0.005, 20.0]).unwrap();
        for v in [0.01, 1.0, 19.9] {
            let back = p.inverse_transform(p.transform(v).unwrap()).unwrap();
            assert!(((back - v) / v).abs() < 1e-9, "{v} -> {back}");
        }
    }

    #[test]
    fn identity_lift_when_log_disabled() {
        let p = NormalizationParams::fit_values([2.0, 4.0].into_iter(), false).unwrap();
        assert_eq!(p.transform(3.0).unwrap(), 0.5);
        assert_eq!(p.inverse_transform(0.25).unwrap(), 2.5);
    }

    proptest! {
        #[test]
        fn transform_is_monotone(lo in 0.0f64..10.0, span in 0.1f64..100.0, a in 0.0f64..200.0, b in 0.0f64..200.0) {
            let p = params(&[lo, lo + span]).unwrap();
            let (x, y) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(p.transform(x).unwrap() <= p.transform(y).unwrap());
        }

        #[test]
        fn round_trip_inside_range(lo in 0.0f64..10.0, span in 0.1f64..100.0, t in 0.0f64..=1.0) {
            let p = params(&[lo, lo + span]).unwrap();
            let v = lo + t * span;
            let back = p.inverse_transform(p.transform(v).unwrap()).unwrap();
            prop_assert!((back - v).abs() <= 1e-9 * v.max(1.0));
        }
    }
}
