//! Synthetic cohorts with planted network structure and a planted target.
//!
//! For each subject, every network pair `(l, m)` gets a coupling
//! `c = base + N(0, jitter^2)` (base is the within-network strength on the
//! diagonal pairs, the between-network strength elsewhere). The block-constant
//! matrix plus symmetric entrywise noise is projected to a valid correlation
//! matrix. The target is `effect * sum of signal-block means` plus age and sex
//! effects plus Gaussian noise.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fc::{build_layout, extract_patches, Cohort, Confounds, FcMatrix, Parcellation, Subject};
use crate::rng;

/// Eigenvalue floor used while projecting; keeps the result strictly inside
/// the cone so resetting the diagonal cannot push it back out.
const EIGEN_FLOOR: f64 = 1e-6;
const MAX_ITERATIONS: usize = 100;
const TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub regions: usize,
    pub network_sizes: Vec<usize>,
    pub within_coupling: f64,
    pub between_coupling: f64,
    pub coupling_jitter: f64,
    /// Share of the jitter variance carried by per-network subject factors
    /// (pair `(l, m)` loads on the factors of `l` and `m`); the rest is
    /// independent per pair.
    pub network_factor: f64,
    pub observation_noise: f64,
    /// Network pairs whose block means drive the target.
    pub signal_blocks: Vec<[usize; 2]>,
    pub effect_size: f64,
    pub age_slope: f64,
    pub sex_offset: f64,
    pub target_noise: f64,
    pub n_subjects: usize,
    pub seed: u64,
    pub target_name: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            regions: 40,
            network_sizes: vec![4; 10],
            within_coupling: 0.5,
            between_coupling: 0.1,
            coupling_jitter: 0.1,
            network_factor: 0.8,
            observation_noise: 0.05,
            signal_blocks: vec![[0, 2], [3, 3], [1, 4]],
            effect_size: 10.0,
            age_slope: 0.1,
            sex_offset: 0.5,
            target_noise: 0.5,
            n_subjects: 120,
            seed: 0,
            target_name: "score".into(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: String| Err(Error::Config(format!("synth.{field}: {why}")));
        if self.network_sizes.is_empty() || self.network_sizes.contains(&0) {
            return fail("network_sizes", "every network needs at least one region".into());
        }
        let total: usize = self.network_sizes.iter().sum();
        if total != self.regions {
            return fail("regions", format!("{} != sum of network_sizes ({total})", self.regions));
        }
        if !(self.within_coupling > 0.0 && self.within_coupling < 1.0) {
            return fail("within_coupling", format!("{} is not in (0, 1)", self.within_coupling));
        }
        if !(self.between_coupling > -0.3 && self.between_coupling < 0.3) {
            return fail("between_coupling", format!("{} is not in (-0.3, 0.3)", self.between_coupling));
        }
        for (field, v) in [
            ("coupling_jitter", self.coupling_jitter),
            ("observation_noise", self.observation_noise),
            ("target_noise", self.target_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(field, format!("{v} is not a non-negative number"));
            }
        }
        if !(0.0..=1.0).contains(&self.network_factor) {
            return fail("network_factor", format!("{} is not in [0, 1]", self.network_factor));
        }
        for (field, v) in [
            ("effect_size", self.effect_size),
            ("age_slope", self.age_slope),
            ("sex_offset", self.sex_offset),
        ] {
            if !v.is_finite() {
                return fail(field, format!("{v} is not finite"));
            }
        }
        let nn = self.network_sizes.len();
        for &[l, m] in &self.signal_blocks {
            if l > m || m >= nn {
                return fail("signal_blocks", format!("[{l}, {m}] is not a pair l <= m < {nn}"));
            }
        }
        if self.n_subjects == 0 {
            return fail("n_subjects", "must be at least 1".into());
        }
        if self.target_name.is_empty() || self.target_name.contains(',') {
            return fail("target_name", format!("'{}' is not a valid column name", self.target_name));
        }
        Ok(())
    }

    pub fn parcellation(&self) -> Result<Parcellation> {
        Parcellation::contiguous(&self.network_sizes)
    }
}

/// Projects a symmetric matrix with unit diagonal onto valid correlation
/// matrices by alternating eigenvalue clipping and diagonal resets.
///
/// Returns the projected matrix (row-major) and the number of iterations;
/// an input that is already valid comes back unchanged after 0 iterations.
pub fn nearest_correlation(values: &[f64], n: usize) -> Result<(Vec<f64>, usize)> {
    if values.len() != n * n {
        return Err(Error::InvalidArgument(format!("{} values for a {n}x{n} matrix", values.len())));
    }
    let mut y = DMatrix::from_row_slice(n, n, values);
    y = (&y + y.transpose()) * 0.5;
    for i in 0..n {
        y[(i, i)] = 1.0;
    }
    for it in 0..=MAX_ITERATIONS {
        let eig = SymmetricEigen::new(y.clone());
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if min >= -TOLERANCE {
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] = if i == j {
                        1.0
                    } else {
                        (0.5 * (y[(i, j)] + y[(j, i)])).clamp(-1.0, 1.0)
                    };
                }
            }
            return Ok((out, it));
        }
        if it == MAX_ITERATIONS {
            break;
        }
        let clipped = eig.eigenvalues.map(|v| v.max(EIGEN_FLOOR));
        let q = &eig.eigenvectors;
        y = q * DMatrix::from_diagonal(&clipped) * q.transpose();
        for i in 0..n {
            y[(i, i)] = 1.0;
        }
    }
    Err(Error::Numeric(format!(
        "nearest-correlation projection did not converge in {MAX_ITERATIONS} iterations"
    )))
}

/// Smallest eigenvalue of a symmetric matrix given row-major.
pub fn min_eigenvalue(values: &[f64], n: usize) -> f64 {
    let m = DMatrix::from_row_slice(n, n, values);
    SymmetricEigen::new(m).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// One subject's FC matrix and target, drawn from `(seed, SUBJECT, index)`.
fn gen_subject(spec: &SynthSpec, parc: &Parcellation, index: usize) -> Result<Subject> {
    let mut rng = rng::stream(spec.seed, rng::domain::SUBJECT, index as u64);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let nn = spec.network_sizes.len();
    let r = spec.regions;

    let factors: Vec<f64> = (0..nn).map(|_| unit.sample(&mut rng)).collect();
    let shared = spec.network_factor.sqrt();
    let own = (1.0 - spec.network_factor).sqrt();
    let mut coupling = vec![0.0; nn * nn];
    for l in 0..nn {
        for m in l..nn {
            let base = if l == m { spec.within_coupling } else { spec.between_coupling };
            let common = if l == m {
                factors[l]
            } else {
                (factors[l] + factors[m]) / std::f64::consts::SQRT_2
            };
            let jitter = shared * common + own * unit.sample(&mut rng);
            let c = base + spec.coupling_jitter * jitter;
            coupling[l * nn + m] = c;
            coupling[m * nn + l] = c;
        }
    }
    let mut latent = vec![0.0; r * r];
    for i in 0..r {
        latent[i * r + i] = 1.0;
        for j in i + 1..r {
            let c = coupling[parc.network_of(i) * nn + parc.network_of(j)];
            let v = c + spec.observation_noise * unit.sample(&mut rng);
            latent[i * r + j] = v;
            latent[j * r + i] = v;
        }
    }
    let (values, _) = nearest_correlation(&latent, r)?;
    let fc = FcMatrix::new(r, values)?;

    let age = rng.gen_range(8.0..18.0);
    let sex: u8 = rng.gen_bool(0.5).into();
    let layout = build_layout(parc);
    let patches = extract_patches(&fc, parc, &layout)?;
    let signal: f64 = spec
        .signal_blocks
        .iter()
        .map(|&[l, m]| patches[layout.index_of(l, m).expect("validated pair")].mean())
        .sum();
    let target = spec.effect_size * signal
        + spec.age_slope * (age - 13.0)
        + spec.sex_offset * f64::from(sex)
        + spec.target_noise * unit.sample(&mut rng);
    Ok(Subject {
        id: format!("sub-{:04}", index + 1),
        fc,
        confounds: Confounds { age, sex },
        targets: vec![target],
    })
}

/// Generates the whole cohort. Subjects are independent streams, so the
/// result does not depend on generation order.
pub fn gen_cohort(spec: &SynthSpec) -> Result<Cohort> {
    spec.validate()?;
    let parc = spec.parcellation()?;
    let subjects = (0..spec.n_subjects)
        .map(|i| gen_subject(spec, &parc, i))
        .collect::<Result<Vec<_>>>()?;
    Cohort::new(vec![spec.target_name.clone()], subjects)
}

/// Sum of the signal-block means of one FC matrix (the noiseless predictor).
pub fn signal_of(spec: &SynthSpec, fc: &FcMatrix) -> Result<f64> {
    let parc = spec.parcellation()?;
    let layout = build_layout(&parc);
    let patches = extract_patches(fc, &parc, &layout)?;
    Ok(spec
        .signal_blocks
        .iter()
        .map(|&[l, m]| patches[layout.index_of(l, m).unwrap_or(0)].mean())
        .sum())
}
