//! Error metrics on the original value scale.
//!
//! Inputs are `(truth, prediction)` pairs. MRE divides by the truth and skips
//! pairs whose truth is at most [`MRE_ZERO_THRESHOLD`]; the number skipped is
//! reported alongside.

use crate::error::{Error, Result};
use crate::kv::KvDoc;

pub const MRE_ZERO_THRESHOLD: f64 = 1e-12;

fn nonempty(pairs: &[(f64, f64)], what: &str) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Usage(format!("{what} of an empty set")));
    }
    Ok(())
}

pub fn mae(pairs: &[(f64, f64)]) -> Result<f64> {
    nonempty(pairs, "MAE")?;
    Ok(pairs.iter().map(|(y, p)| (y - p).abs()).sum::<f64>() / pairs.len() as f64)
}

/// Mean relative error and the number of pairs excluded for a zero truth.
pub fn mre(pairs: &[(f64, f64)]) -> Result<(f64, usize)> {
    nonempty(pairs, "MRE")?;
    let (sum, used) = pairs
        .iter()
        .filter(|(y, _)| *y > MRE_ZERO_THRESHOLD)
        .fold((0.0, 0usize), |(s, n), (y, p)| (s + (y - p).abs() / y, n + 1));
    if used == 0 {
        return Err(Error::MetricUndefined("every truth value is zero; MRE is undefined".into()));
    }
    Ok((sum / used as f64, pairs.len() - used))
}

pub fn rmse(pairs: &[(f64, f64)]) -> Result<f64> {
    nonempty(pairs, "RMSE")?;
    let mse = pairs.iter().map(|(y, p)| (y - p) * (y - p)).sum::<f64>() / pairs.len() as f64;
    Ok(mse.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub mae: f64,
    pub mre: f64,
    pub rmse: f64,
    pub n_entries: usize,
    pub n_mre_excluded: usize,
}

impl MetricsReport {
    pub fn compute(pairs: &[(f64, f64)]) -> Result<Self> {
        let (mre, n_mre_excluded) = mre(pairs)?;
        Ok(Self {
            mae: mae(pairs)?,
            mre,
            rmse: rmse(pairs)?,
            n_entries: pairs.len(),
            n_mre_excluded,
        })
    }

    pub fn to_kv(&self, prefix: &str, doc: &mut KvDoc) {
        doc.set(&format!("{prefix}.mae"), self.mae);
        doc.set(&format!("{prefix}.mre"), self.mre);
        doc.set(&format!("{prefix}.rmse"), self.rmse);
        doc.set(&format!("{prefix}.n_entries"), self.n_entries);
        doc.set(&format!("{prefix}.n_mre_excluded"), self.n_mre_excluded);
    }

    pub fn from_kv(prefix: &str, doc: &KvDoc) -> Result<Self> {
        let get = |k: &str| -> Result<f64> {
            doc.parsed(&format!("{prefix}.{k}"))?
                .ok_or_else(|| Error::Config(format!("missing {prefix}.{k}")))
        };
        let count = |k: &str| -> Result<usize> {
            doc.parsed(&format!("{prefix}.{k}"))?
                .ok_or_else(|| Error::Config(format!("missing {prefix}.{k}")))
        };
        Ok(Self {
            mae: get("mae")?,
            mre: get("mre")?,
            rmse: get("rmse")?,
            n_entries: count("n_entries")?,
            n_mre_excluded: count("n_mre_excluded")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn hand_computed_values() {
        assert_eq!(mae(&[(2.0, 1.0), (4.0, 6.0)]).unwrap(), 1.5);
        assert_eq!(mre(&[(1.0, 0.5), (2.0, 3.0)]).unwrap(), (0.5, 0));
        assert_eq!(rmse(&[(0.0, 3.0), (0.0, 4.0)]).unwrap(), 12.5f64.sqrt());
        let doubled: Vec<(f64, f64)> = [0.3, 1.7, 9.0].iter().map(|&y| (y, 2.0 * y)).collect();
        assert!((mre(&doubled).unwrap().0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions() {
        let pairs = [(1.0, 1.0), (0.2, 0.2), (7.5, 7.5)];
        let r = MetricsReport::compute(&pairs).unwrap();
        assert_eq!((r.mae, r.mre, r.rmse), (0.0, 0.0, 0.0));
        assert_eq!(r.n_entries, 3);
    }

    #[test]
    fn empty_and_all_zero_truths() {
        assert!(matches!(mae(&[]), Err(Error::Usage(_))));
        assert!(matches!(rmse(&[]), Err(Error::Usage(_))));
        assert!(matches!(mre(&[]), Err(Error::Usage(_))));
        assert!(matches!(mre(&[(0.0, 1.0)]), Err(Error::MetricUndefined(_))));
        assert_eq!(mre(&[(0.0, 1.0), (2.0, 1.0)]).unwrap(), (0.5, 1));
    }

    #[test]
    fn matches_independent_summation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pairs: Vec<(f64, f64)> = (0..1000)
            .map(|_| (rng.random_range(0.1..20.0), rng.random_range(0.0..20.0)))
            .collect();
        let mut abs = 0.0;
        let mut sq = 0.0;
        for &(y, p) in &pairs {
            let d = if y > p { y - p } else { p - y };
            abs += d;
            sq += d * d;
        }
        assert!((mae(&pairs).unwrap() - abs / 1000.0).abs() < 1e-12);
        assert!((rmse(&pairs).unwrap() - (sq / 1000.0).sqrt()).abs() < 1e-12);
    }

    fn arb_pairs() -> impl Strategy<Value = Vec<(f64, f64)>> {
        proptest::collection::vec((0.01f64..100.0, 0.0f64..100.0), 1..50)
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(pairs in arb_pairs()) {
            let r = MetricsReport::compute(&pairs).unwrap();
            prop_assert!(r.rmse + 1e-12 >= r.mae);
            prop_assert!(r.n_mre_excluded <= r.n_entries);
        }

        #[test]
        fn permutation_invariance(pairs in arb_pairs(), seed in any::<u64>()) {
            let mut shuffled = pairs.clone();
            crate::rng::SplitMix64::new(seed).shuffle(&mut shuffled);
            let a = MetricsReport::compute(&pairs).unwrap();
            let b = MetricsReport::compute(&shuffled).unwrap();
            prop_assert!((a.mae - b.mae).abs() <= 1e-9 * a.mae.max(1.0));
            prop_assert!((a.mre - b.mre).abs() <= 1e-9 * a.mre.max(1.0));
            prop_assert!((a.rmse - b.rmse).abs() <= 1e-9 * a.rmse.max(1.0));
        }

        #[test]
        fn scale_equivariance(pairs in arb_pairs(), c in 0.01f64..100.0) {
            let scaled: Vec<_> = pairs.iter().map(|(y, p)| (c * y, c * p)).collect();
            let a = MetricsReport::compute(&pairs).unwrap();
            let b = MetricsReport::compute(&scaled).unwrap();
            prop_assert!((b.mae - c * a.mae).abs() <= 1e-9 * (c * a.mae).max(1e-9));
            prop_assert!((b.rmse - c * a.rmse).abs() <= 1e-9 * (c * a.rmse).max(1e-9));
            prop_assert!((b.mre - a.mre).abs() <= 1e-9 * a.mre.max(1e-9));
        }
    }
}
