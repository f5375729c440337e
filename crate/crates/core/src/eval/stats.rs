use std::collections::HashMap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

/// Pearson product-moment correlation. Constant inputs have no defined
/// correlation and are reported as an error.
pub fn pearson(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::Data(format!("pearson: {} vs {} values", y.len(), yhat.len())));
    }
    if y.len() < 2 {
        return Err(Error::InvalidArgument("pearson needs at least two values".into()));
    }
    let n = y.len() as f64;
    let my = y.iter().sum::<f64>() / n;
    let mh = yhat.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(yhat) {
        let (da, db) = (a - my, b - mh);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::Numeric("pearson correlation of a constant vector is undefined".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn pearson_at(y: &[f64], yhat: &[f64], idx: &[usize]) -> Option<f64> {
    let n = idx.len() as f64;
    let my = idx.iter().map(|&i| y[i]).sum::<f64>() / n;
    let mh = idx.iter().map(|&i| yhat[i]).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &i in idx {
        let (da, db) = (y[i] - my, yhat[i] - mh);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx > 0.0 && syy > 0.0 {
        Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
    } else {
        None
    }
}

/// Out-of-fold predictions, one per subject.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub ids: Vec<String>,
    pub truth: Vec<f64>,
    pub predicted: Vec<f64>,
    pub fold: Vec<usize>,
}

impl PredictionRecord {
    pub fn new(ids: Vec<String>, truth: Vec<f64>, predicted: Vec<f64>, fold: Vec<usize>) -> Result<Self> {
        let n = ids.len();
        if truth.len() != n || predicted.len() != n || fold.len() != n {
            return Err(Error::Data("prediction record columns differ in length".into()));
        }
        Ok(Self {
            ids,
            truth,
            predicted,
            fold,
        })
    }

    /// A record with generated ids and a single fold.
    pub fn from_pairs(truth: Vec<f64>, predicted: Vec<f64>) -> Result<Self> {
        let n = truth.len();
        Self::new((0..n).map(|i| i.to_string()).collect(), truth, predicted, vec![0; n])
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn r(&self) -> Result<f64> {
        pearson(&self.truth, &self.predicted)
    }
}

/// Point estimate with a bootstrap interval and optional test p-values.
#[derive(Debug, Clone, PartialEq)]
pub struct StatResult {
    pub r: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Half-width `(high - low) / 2`.
    pub delta: f64,
    pub p_paired: Option<f64>,
    pub p_perm: Option<f64>,
    /// Bootstrap replicates skipped because a resample was constant.
    pub skipped: usize,
}

/// Type-7 quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn resample(n: usize, rng: &mut rng::Rng) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

/// Percentile bootstrap interval for Pearson r over subjects.
///
/// Replicate `b` resamples with the stream `(seed, BOOTSTRAP, b)`. Constant
/// resamples are skipped; more than 10% skips is an error. The interval is
/// widened if needed so that it contains the point estimate.
pub fn bootstrap_ci(record: &PredictionRecord, replicates: usize, level: f64, seed: u64) -> Result<StatResult> {
    let n = record.len();
    if n < 10 {
        return Err(Error::InvalidArgument(format!("bootstrap needs at least 10 subjects, got {n}")));
    }
    if replicates == 0 {
        return Err(Error::InvalidArgument("bootstrap needs at least one replicate".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence level {level} is not in (0, 1)")));
    }
    let r = record.r()?;
    let mut rs = Vec::with_capacity(replicates);
    let mut skipped = 0;
    for b in 0..replicates {
        let mut rng = rng::stream(seed, rng::domain::BOOTSTRAP, b as u64);
        let idx = resample(n, &mut rng);
        match pearson_at(&record.truth, &record.predicted, &idx) {
            Some(v) => rs.push(v),
            None => skipped += 1,
        }
    }
    if skipped * 10 > replicates {
        return Err(Error::Numeric(format!(
            "{skipped} of {replicates} bootstrap replicates were constant"
        )));
    }
    rs.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    let low = quantile(&rs, alpha / 2.0).min(r);
    let high = quantile(&rs, 1.0 - alpha / 2.0).max(r);
    Ok(StatResult {
        r,
        ci_low: low,
        ci_high: high,
        delta: (high - low) / 2.0,
        p_paired: None,
        p_perm: None,
        skipped,
    })
}

/// Reorders `b` to the subject order of `a`; errors unless the id sets match.
fn align(a: &PredictionRecord, b: &PredictionRecord) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::Data(format!("records cover {} and {} subjects", a.len(), b.len())));
    }
    let pos: HashMap<&str, usize> = b.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    if pos.len() != b.len() {
        return Err(Error::Data("duplicate subject id in record".into()));
    }
    a.ids
        .iter()
        .map(|id| {
            pos.get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Data(format!("subject {id} missing from the second record")))
        })
        .collect()
}

/// Two-sided paired bootstrap test of `r_A - r_B`, clamped to `[1/B, 1]`.
pub fn paired_bootstrap_test(a: &PredictionRecord, b: &PredictionRecord, replicates: usize, seed: u64) -> Result<f64> {
    let order = align(a, b)?;
    if replicates == 0 {
        return Err(Error::InvalidArgument("paired test needs at least one replicate".into()));
    }
    let bt: Vec<f64> = order.iter().map(|&i| b.truth[i]).collect();
    let bp: Vec<f64> = order.iter().map(|&i| b.predicted[i]).collect();
    let n = a.len();
    let (mut le, mut ge, mut valid) = (0usize, 0usize, 0usize);
    for rep in 0..replicates {
        let mut rng = rng::stream(seed, rng::domain::PAIRED, rep as u64);
        let idx = resample(n, &mut rng);
        let (Some(ra), Some(rb)) = (pearson_at(&a.truth, &a.predicted, &idx), pearson_at(&bt, &bp, &idx)) else {
            continue;
        };
        let d = ra - rb;
        valid += 1;
        if d <= 0.0 {
            le += 1;
        }
        if d >= 0.0 {
            ge += 1;
        }
    }
    if valid * 10 < replicates * 9 {
        return Err(Error::Numeric(format!(
            "{} of {replicates} paired replicates were constant",
            replicates - valid
        )));
    }
    let p = 2.0 * (le.min(ge) as f64) / valid as f64;
    Ok(p.clamp(1.0 / replicates as f64, 1.0))
}

/// One-sided permutation p-value `(1 + #{null >= observed}) / (1 + P)`.
pub fn permutation_p(observed: f64, nulls: &[f64]) -> Result<f64> {
    if nulls.is_empty() {
        return Err(Error::InvalidArgument("permutation test needs at least one null value".into()));
    }
    let exceed = nulls.iter().filter(|&&v| v >= observed).count();
    Ok((1 + exceed) as f64 / (1 + nulls.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn noisy(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = rng::seeded(seed);
        let y: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        (y, z)
    }

    #[test]
    fn pearson_examples() {
        let y = [1.0, 2.0, 3.0];
        assert!((pearson(&y, &y).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&y, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
        // Centered: (-1, 0, 1) and (-4/3, -1/3, 5/3): sxy = 3, sxx = 2, syy = 14/3.
        let expect = 3.0 / (2.0f64.sqrt() * (14.0f64 / 3.0).sqrt());
        assert!((pearson(&y, &[1.0, 2.0, 4.0]).unwrap() - expect).abs() < 1e-15);
        assert!(matches!(pearson(&y, &[2.0; 3]), Err(Error::Numeric(_))));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn pearson_affine_invariance() {
        let (y, z) = noisy(50, 1);
        let r = pearson(&y, &z).unwrap();
        let scaled: Vec<f64> = y.iter().map(|v| 3.0 * v + 7.0).collect();
        let flipped: Vec<f64> = y.iter().map(|v| -0.5 * v + 1.0).collect();
        assert!((pearson(&scaled, &z).unwrap() - r).abs() < 1e-12);
        assert!((pearson(&flipped, &z).unwrap() + r).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_perfect_and_deterministic() {
        let (y, z) = noisy(40, 2);
        let perfect = PredictionRecord::from_pairs(y.clone(), y.clone()).unwrap();
        let s = bootstrap_ci(&perfect, 200, 0.95, 1).unwrap();
        assert_eq!((s.r, s.ci_low, s.ci_high, s.delta), (1.0, 1.0, 1.0, 0.0));
        let rec = PredictionRecord::from_pairs(y, z).unwrap();
        let a = bootstrap_ci(&rec, 300, 0.95, 5).unwrap();
        assert_eq!(a, bootstrap_ci(&rec, 300, 0.95, 5).unwrap());
        assert!(a.ci_low <= a.r && a.r <= a.ci_high);
        let short = PredictionRecord::from_pairs(vec![1.0; 5], vec![1.0; 5]).unwrap();
        assert!(bootstrap_ci(&short, 10, 0.95, 0).is_err());
    }

    #[test]
    fn mostly_constant_resamples_fail() {
        let mut y = vec![0.0; 30];
        y[0] = 1.0;
        let rec = PredictionRecord::from_pairs(y.clone(), y).unwrap();
        assert!(matches!(bootstrap_ci(&rec, 200, 0.95, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn paired_test_properties() {
        let (y, z) = noisy(200, 3);
        let a = PredictionRecord::from_pairs(y.clone(), y.iter().zip(&z).map(|(u, v)| u + 0.5 * v).collect()).unwrap();
        let b = PredictionRecord::from_pairs(y.clone(), z.clone()).unwrap();
        assert_eq!(paired_bootstrap_test(&a, &a, 500, 1).unwrap(), 1.0);
        let ab = paired_bootstrap_test(&a, &b, 500, 1).unwrap();
        let ba = paired_bootstrap_test(&b, &a, 500, 1).unwrap();
        assert_eq!(ab, ba);
        assert!(ab <= 2.0 / 500.0);
        let mut other = b.clone();
        other.ids[0] = "x".into();
        assert!(paired_bootstrap_test(&a, &other, 10, 0).is_err());
    }

    #[test]
    fn paired_test_aligns_by_id() {
        let (y, z) = noisy(50, 4);
        let a = PredictionRecord::from_pairs(y.clone(), z.clone()).unwrap();
        let mut rev = a.clone();
        rev.ids.reverse();
        rev.truth.reverse();
        rev.predicted.reverse();
        assert_eq!(paired_bootstrap_test(&a, &rev, 200, 2).unwrap(), 1.0);
    }

    #[test]
    fn permutation_p_examples() {
        let nulls: Vec<f64> = (0..100).map(|i| i as f64 / 1000.0).collect();
        assert_eq!(permutation_p(1.0, &nulls).unwrap(), 1.0 / 101.0);
        assert_eq!(permutation_p(-1.0, &nulls).unwrap(), 1.0);
        assert_eq!(permutation_p(0.3, &[0.3]).unwrap(), 1.0);
        assert!(permutation_p(0.3, &[]).is_err());
    }
}
