use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fc::Confounds;

/// Targets with linear confound effects removed.
#[derive(Debug, Clone, PartialEq)]
pub struct Residualized {
    /// Residuals for every subject.
    pub values: Vec<f64>,
    /// Fitted `[intercept, age, sex]`; dropped columns are 0.
    pub coefficients: [f64; 3],
    pub warnings: Vec<String>,
}

/// Fits `target ~ 1 + age + sex` by ordinary least squares on `train_idx`
/// only and returns residuals for all subjects.
///
/// A confound that is constant over the training rows is dropped from the
/// design (with a warning) instead of making the system singular.
pub fn residualize_confounds(targets: &[f64], confounds: &[Confounds], train_idx: &[usize]) -> Result<Residualized> {
    if targets.len() != confounds.len() {
        return Err(Error::Data(format!(
            "{} targets but {} confound rows",
            targets.len(),
            confounds.len()
        )));
    }
    if train_idx.is_empty() {
        return Err(Error::InvalidArgument("no training subjects to fit confounds on".into()));
    }
    if let Some(&bad) = train_idx.iter().find(|&&i| i >= targets.len()) {
        return Err(Error::InvalidArgument(format!("training index {bad} out of range")));
    }
    let column = |c: &Confounds, j: usize| match j {
        0 => 1.0,
        1 => c.age,
        _ => f64::from(c.sex),
    };
    let mut warnings = Vec::new();
    let mut cols = vec![0usize];
    for (j, name) in [(1, "age"), (2, "sex")] {
        let first = column(&confounds[train_idx[0]], j);
        if train_idx.iter().all(|&i| column(&confounds[i], j) == first) {
            warnings.push(format!("{name} is constant in the training subjects; dropped from the confound model"));
        } else {
            cols.push(j);
        }
    }

    let solve = |cols: &[usize]| -> Option<DVector<f64>> {
        let x = DMatrix::from_fn(train_idx.len(), cols.len(), |r, c| column(&confounds[train_idx[r]], cols[c]));
        let y = DVector::from_iterator(train_idx.len(), train_idx.iter().map(|&i| targets[i]));
        let xtx = x.transpose() * &x;
        let xty = x.transpose() * y;
        xtx.cholesky().map(|ch| ch.solve(&xty))
    };
    let beta = match solve(&cols) {
        Some(b) => b,
        None => {
            // Age and sex collinear on the training rows: keep age only.
            warnings.push("age and sex are collinear in the training subjects; sex dropped".into());
            cols.retain(|&c| c != 2);
            solve(&cols).ok_or_else(|| Error::Numeric("confound design is singular".into()))?
        }
    };
    let mut coefficients = [0.0; 3];
    for (c, &j) in cols.iter().enumerate() {
        coefficients[j] = beta[c];
    }
    let values = targets
        .iter()
        .zip(confounds)
        .map(|(&t, c)| t - (0..3).map(|j| coefficients[j] * column(c, j)).sum::<f64>())
        .collect();
    Ok(Residualized {
        values,
        coefficients,
        warnings,
    })
}
