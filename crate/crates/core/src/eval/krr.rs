use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::cv::stratified_kfold;
use super::stats::pearson;
use crate::error::{Error, Result};

/// Relative pivot size below which a kernel system counts as singular.
const PIVOT_TOLERANCE: f64 = 1e-12;

/// Kernel family used by [`KrrModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    #[default]
    Linear,
    /// Gaussian kernel with the median pairwise distance as bandwidth.
    Rbf,
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(KernelKind::Linear),
            "rbf" => Ok(KernelKind::Rbf),
            other => Err(Error::Config(format!("unknown kernel '{other}' (expected linear or rbf)"))),
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::Linear => "linear",
            KernelKind::Rbf => "rbf",
        })
    }
}

/// A kernel with its bandwidth resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    Linear,
    /// `exp(-gamma * |x - y|^2)`.
    Rbf { gamma: f64 },
}

impl Kernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            Kernel::Rbf { gamma } => (-gamma * sq_dist(a, b)).exp(),
        }
    }

    /// Resolves `kind` on training rows; the RBF bandwidth `s` is the median
    /// pairwise distance and `gamma = 1 / (2 s^2)`.
    pub fn resolve(kind: KernelKind, rows: &[Vec<f64>]) -> Kernel {
        match kind {
            KernelKind::Linear => Kernel::Linear,
            KernelKind::Rbf => {
                let mut d: Vec<f64> = Vec::new();
                for i in 0..rows.len() {
                    for j in i + 1..rows.len() {
                        d.push(sq_dist(&rows[i], &rows[j]));
                    }
                }
                let med = median(&mut d);
                let gamma = if med > 0.0 { 0.5 / med } else { 1.0 };
                Kernel::Rbf { gamma }
            }
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-feature z-scoring fitted on training rows. Constant features map to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let p = check_rows(rows)?;
        let n = rows.len() as f64;
        let mut mean = vec![0.0; p];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; p];
        for r in rows {
            for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        std.iter_mut().for_each(|s| *s = s.sqrt());
        Ok(Self { mean, std })
    }

    /// No-op scaling for `p` features.
    pub fn identity(p: usize) -> Self {
        Self {
            mean: vec![0.0; p],
            std: vec![1.0; p],
        }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| if *s > 0.0 { (v - m) / s } else { 0.0 })
            .collect()
    }
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let p = rows.first().map(Vec::len).ok_or_else(|| Error::Data("no feature rows".into()))?;
    if rows.iter().any(|r| r.len() != p) {
        return Err(Error::Data("feature rows have different lengths".into()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data("features contain non-finite values".into()));
    }
    Ok(p)
}

/// Fitting options for kernel ridge regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrrSettings {
    pub kernel: KernelKind,
    pub lambda: f64,
    /// z-score features with training statistics before building the kernel.
    pub standardize: bool,
}

/// Dual-form ridge regression: `alpha = (K + lambda n I)^-1 y`.
#[derive(Debug, Clone)]
pub struct KrrModel {
    pub kernel: Kernel,
    pub lambda: f64,
    pub alpha: Vec<f64>,
    pub scaler: Standardizer,
    train: Vec<Vec<f64>>,
}

fn gram(kernel: Kernel, rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = kernel.eval(&rows[i], &rows[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Solves `(K + lambda n I) alpha = y` by Cholesky; tiny pivots are reported
/// as a numeric failure rather than returned as a huge solution.
fn solve_dual(k: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let n = y.len();
    let mut a = k.clone();
    for i in 0..n {
        a[(i, i)] += lambda * n as f64;
    }
    let ch = a
        .cholesky()
        .ok_or_else(|| Error::Numeric(format!("kernel system is singular at lambda = {lambda}")))?;
    let l = ch.l_dirty();
    let diag: Vec<f64> = (0..n).map(|i| l[(i, i)] * l[(i, i)]).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > PIVOT_TOLERANCE * max) {
        return Err(Error::Numeric(format!("kernel system is singular at lambda = {lambda}")));
    }
    Ok(ch.solve(&DVector::from_column_slice(y)).iter().copied().collect())
}

impl KrrModel {
    pub fn fit(features: &[Vec<f64>], targets: &[f64], settings: KrrSettings) -> Result<Self> {
        Ok(Self::fit_path(features, targets, settings.kernel, &[settings.lambda], settings.standardize)?
            .remove(0))
    }

    /// Fits one model per `lambda`, sharing the kernel matrix.
    pub fn fit_path(
        features: &[Vec<f64>],
        targets: &[f64],
        kind: KernelKind,
        lambdas: &[f64],
        standardize: bool,
    ) -> Result<Vec<Self>> {
        Self::fit_each(features, targets, kind, lambdas, standardize)?
            .into_iter()
            .collect()
    }

    /// Like [`KrrModel::fit_path`] but keeps per-`lambda` solver failures
    /// separate from input errors.
    fn fit_each(
        features: &[Vec<f64>],
        targets: &[f64],
        kind: KernelKind,
        lambdas: &[f64],
        standardize: bool,
    ) -> Result<Vec<Result<Self>>> {
        let p = check_rows(features)?;
        if features.len() != targets.len() {
            return Err(Error::Data(format!(
                "{} feature rows but {} targets",
                features.len(),
                targets.len()
            )));
        }
        if let Some(l) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::InvalidArgument(format!("ridge strength {l} must be >= 0")));
        }
        let scaler = if standardize {
            Standardizer::fit(features)?
        } else {
            Standardizer::identity(p)
        };
        let train: Vec<Vec<f64>> = features.iter().map(|r| scaler.apply(r)).collect();
        let kernel = Kernel::resolve(kind, &train);
        let k = gram(kernel, &train);
        Ok(lambdas
            .iter()
            .map(|&lambda| {
                Ok(Self {
                    kernel,
                    lambda,
                    alpha: solve_dual(&k, targets, lambda)?,
                    scaler: scaler.clone(),
                    train: train.clone(),
                })
            })
            .collect())
    }

    pub fn predict_one(&self, row: &[f64]) -> f64 {
        let x = self.scaler.apply(row);
        self.train
            .iter()
            .zip(&self.alpha)
            .map(|(t, a)| a * self.kernel.eval(&x, t))
            .sum()
    }

    pub fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let p = self.scaler.mean.len();
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::Data(format!("prediction rows must have {p} features")));
        }
        Ok(rows.iter().map(|r| self.predict_one(r)).collect())
    }
}

/// [`KrrModel::fit`] with standardized features.
pub fn krr_fit(features: &[Vec<f64>], targets: &[f64], kernel: KernelKind, lambda: f64) -> Result<KrrModel> {
    KrrModel::fit(
        features,
        targets,
        KrrSettings {
            kernel,
            lambda,
            standardize: true,
        },
    )
}

pub fn krr_predict(model: &KrrModel, features: &[Vec<f64>]) -> Result<Vec<f64>> {
    model.predict(features)
}

/// Picks the ridge strength with the best inner cross-validated Pearson r.
///
/// Ties go to the smallest value; a grid value whose out-of-fold predictions
/// have no defined correlation (or whose system is singular) is never
/// preferred over one that does.
pub fn select_lambda(
    features: &[Vec<f64>],
    targets: &[f64],
    grid: &[f64],
    inner_k: usize,
    kernel: KernelKind,
    seed: u64,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty ridge grid".into()));
    }
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let plan = stratified_kfold(targets, inner_k, 5, seed)?;
    let mut preds = vec![vec![f64::NAN; targets.len()]; sorted.len()];
    let mut failed = vec![false; sorted.len()];
    for f in 0..inner_k {
        let train = plan.train_indices(f);
        let test = plan.test_indices(f);
        let x: Vec<Vec<f64>> = train.iter().map(|&i| features[i].clone()).collect();
        let y: Vec<f64> = train.iter().map(|&i| targets[i]).collect();
        let fits = KrrModel::fit_each(&x, &y, kernel, &sorted, true)?;
        for (g, fit) in fits.into_iter().enumerate() {
            match fit {
                Ok(model) => {
                    for &i in &test {
                        preds[g][i] = model.predict_one(&features[i]);
                    }
                }
                Err(Error::Numeric(_)) => failed[g] = true,
                Err(e) => return Err(e),
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, sorted[0]);
    for (g, &lambda) in sorted.iter().enumerate() {
        if failed[g] {
            continue;
        }
        let r = pearson(targets, &preds[g]).unwrap_or(f64::NEG_INFINITY);
        if r > best.0 {
            best = (r, lambda);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(n: usize, p: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng::seeded(seed);
        (0..n)
            .map(|_| (0..p).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    #[test]
    fn identity_kernel_at_zero_ridge_interpolates() {
        let x: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let y = vec![1.0, -2.0, 0.5, 3.0];
        let m = KrrModel::fit(
            &x,
            &y,
            KrrSettings {
                kernel: KernelKind::Linear,
                lambda: 0.0,
                standardize: false,
            },
        )
        .unwrap();
        assert_eq!(m.alpha, y);
        assert_eq!(m.predict(&x).unwrap(), y);
    }

    #[test]
    fn three_point_oracle() {
        let x = vec![vec![1.0, 0.5], vec![-0.3, 2.0], vec![0.7, -1.1]];
        let y = vec![0.2, -1.0, 0.9];
        let m = KrrModel::fit(
            &x,
            &y,
            KrrSettings {
                kernel: KernelKind::Linear,
                lambda: 1.0,
                standardize: false,
            },
        )
        .unwrap();
        let k = DMatrix::from_fn(3, 3, |i, j| x[i][0] * x[j][0] + x[i][1] * x[j][1]);
        let inv = (k + DMatrix::identity(3, 3) * 3.0).try_inverse().unwrap();
        let alpha = inv * DVector::from_column_slice(&y);
        for (a, b) in m.alpha.iter().zip(alpha.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn heavy_ridge_shrinks_to_zero() {
        let x = randn(100, 5, 1);
        let mut y: Vec<f64> = x.iter().map(|r| r[0] + 0.5 * r[1]).collect();
        let mean = y.iter().sum::<f64>() / 100.0;
        y.iter_mut().for_each(|v| *v -= mean);
        let sd = (y.iter().map(|v| v * v).sum::<f64>() / 100.0).sqrt();
        let m = krr_fit(&x, &y, KernelKind::Linear, 1e6).unwrap();
        let p = m.predict(&x).unwrap();
        assert!(p.iter().all(|v| v.abs() < 1e-3 * sd));
    }

    #[test]
    fn duplicate_rows_at_zero_ridge_fail_numerically() {
        let x = vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![0.0, 1.0]];
        let r = KrrModel::fit(
            &x,
            &[1.0, 2.0, 3.0],
            KrrSettings {
                kernel: KernelKind::Linear,
                lambda: 0.0,
                standardize: false,
            },
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn rbf_uses_median_bandwidth() {
        let x = vec![vec![0.0], vec![1.0], vec![3.0]];
        // Squared distances 1, 9, 4: median 4, gamma 1/8.
        assert_eq!(Kernel::resolve(KernelKind::Rbf, &x), Kernel::Rbf { gamma: 0.125 });
        let y = vec![0.0, 1.0, 0.5];
        let m = KrrModel::fit(
            &x,
            &y,
            KrrSettings {
                kernel: KernelKind::Rbf,
                lambda: 1e-3,
                standardize: false,
            },
        )
        .unwrap();
        assert_eq!(m.alpha.len(), 3);
        assert!("poly".parse::<KernelKind>().is_err());
    }

    #[test]
    fn select_lambda_basics() {
        let x = randn(60, 4, 2);
        let y: Vec<f64> = x.iter().map(|r| r[0]).collect();
        assert_eq!(select_lambda(&x, &y, &[0.1], 5, KernelKind::Linear, 0).unwrap(), 0.1);
        let grid = [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0];
        let a = select_lambda(&x, &y, &grid, 5, KernelKind::Linear, 3).unwrap();
        assert_eq!(a, select_lambda(&x, &y, &grid, 5, KernelKind::Linear, 3).unwrap());
        assert!(grid.contains(&a));
        assert!(select_lambda(&x, &y, &[], 5, KernelKind::Linear, 0).is_err());
    }
}
