use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

/// Assignment of subjects to `k` folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CvPlan {
    k: usize,
    bins: usize,
    seed: u64,
    assignment: Vec<usize>,
    bin_of: Vec<usize>,
}

impl CvPlan {
    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of target bins actually used (1 for constant targets).
    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn fold_of(&self, subject: usize) -> usize {
        self.assignment[subject]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn bin_of(&self, subject: usize) -> usize {
        self.bin_of[subject]
    }

    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.assignment[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Stratified k-fold split for a continuous target.
///
/// Subjects are ranked by target and cut into `bins` equal-count quantile
/// bins. Each bin is shuffled and dealt round-robin into folds, the dealing
/// position carrying over from one bin to the next, so fold sizes differ by
/// at most one and every bin is spread evenly.
pub fn stratified_kfold(targets: &[f64], k: usize, bins: usize, seed: u64) -> Result<CvPlan> {
    let n = targets.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!("{n} subjects cannot fill {k} folds")));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one stratification bin".into()));
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::Data("targets contain non-finite values".into()));
    }
    let constant = targets.iter().all(|&t| t == targets[0]);
    let bins = if constant { 1 } else { bins.min(n) };

    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| targets[a].total_cmp(&targets[b]).then(a.cmp(&b)));
    let mut bin_of = vec![0; n];
    let mut members = vec![Vec::new(); bins];
    for (rank, &i) in ranked.iter().enumerate() {
        let b = rank * bins / n;
        bin_of[i] = b;
        members[b].push(i);
    }

    let mut rng = rng::stream(seed, rng::domain::FOLDS, 0);
    let mut assignment = vec![0; n];
    let mut next = 0;
    for bin in &mut members {
        bin.shuffle(&mut rng);
        for &i in bin.iter() {
            assignment[i] = next % k;
            next += 1;
        }
    }
    Ok(CvPlan {
        k,
        bins,
        seed,
        assignment,
        bin_of,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn equal_folds_for_divisible_sizes() {
        let t: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let plan = stratified_kfold(&t, 10, 5, 1).unwrap();
        assert_eq!(plan.fold_sizes(), vec![10; 10]);
        for f in 0..10 {
            let test = plan.test_indices(f);
            let train = plan.train_indices(f);
            assert_eq!(test.len() + train.len(), 100);
            assert!(test.iter().all(|i| !train.contains(i)));
        }
    }

    #[test]
    fn constant_targets_use_one_bin() {
        let plan = stratified_kfold(&[2.0; 23], 5, 5, 3).unwrap();
        assert_eq!(plan.bins(), 1);
        let sizes = plan.fold_sizes();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn bin_histograms_are_proportional() {
        let mut rng = rng::seeded(5);
        let t: Vec<f64> = (0..237).map(|_| rng.gen::<f64>()).collect();
        let plan = stratified_kfold(&t, 7, 5, 9).unwrap();
        let sizes = plan.fold_sizes();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for b in 0..5 {
            let in_bin: Vec<usize> = (0..237).filter(|&i| plan.bin_of(i) == b).collect();
            let expect = in_bin.len() as f64 / 7.0;
            for f in 0..7 {
                let count = in_bin.iter().filter(|&&i| plan.fold_of(i) == f).count() as f64;
                assert!((count - expect).abs() <= 1.0, "bin {b} fold {f}: {count} vs {expect}");
            }
        }
    }

    #[test]
    fn errors_and_determinism() {
        assert!(stratified_kfold(&[1.0, 2.0], 3, 2, 0).is_err());
        assert!(stratified_kfold(&[1.0, 2.0, 3.0], 1, 2, 0).is_err());
        assert!(stratified_kfold(&[1.0, 2.0, 3.0], 2, 0, 0).is_err());
        assert!(stratified_kfold(&[1.0, f64::NAN, 3.0], 2, 1, 0).is_err());
        let t: Vec<f64> = (0..50).map(|i| i as f64).collect();
        assert_eq!(stratified_kfold(&t, 5, 5, 4).unwrap(), stratified_kfold(&t, 5, 5, 4).unwrap());
        assert_ne!(stratified_kfold(&t, 5, 5, 4).unwrap(), stratified_kfold(&t, 5, 5, 5).unwrap());
    }
}
