use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cv::stratified_kfold;
use super::krr::{select_lambda, KernelKind, KrrModel, KrrSettings};
use super::residualize::residualize_confounds;
use super::stats::{bootstrap_ci, PredictionRecord, StatResult};
use crate::error::{Error, Result};
use crate::fc::{Cohort, Confounds};
use crate::rng;

/// Downstream protocol settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub folds: usize,
    pub bins: usize,
    pub inner_folds: usize,
    pub lambda_grid: Vec<f64>,
    pub kernel: KernelKind,
    pub bootstrap: usize,
    pub level: f64,
    pub seed: u64,
    /// Also regress age and sex out of every embedding dimension.
    pub residualize_features: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            folds: 10,
            bins: 5,
            inner_folds: 5,
            lambda_grid: vec![1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0],
            kernel: KernelKind::Linear,
            bootstrap: 1000,
            level: 0.95,
            seed: 0,
            residualize_features: false,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("eval.{field}: {msg}")));
        if self.folds < 2 {
            return bad("folds", format!("{} is below 2", self.folds));
        }
        if self.bins == 0 {
            return bad("bins", "must be at least 1".into());
        }
        if self.inner_folds < 2 {
            return bad("inner_folds", format!("{} is below 2", self.inner_folds));
        }
        if self.lambda_grid.is_empty() {
            return bad("lambda_grid", "must not be empty".into());
        }
        if let Some(l) = self.lambda_grid.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return bad("lambda_grid", format!("{l} is not a finite value >= 0"));
        }
        if self.bootstrap == 0 {
            return bad("bootstrap", "must be at least 1".into());
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad("level", format!("{} is not in (0, 1)", self.level));
        }
        if self.seed > i64::MAX as u64 {
            return bad("seed", "must fit in a signed 64-bit integer".into());
        }
        Ok(())
    }
}

/// One embedding row per subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Embeddings {
    pub fn new(ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::Data(format!("{} ids but {} embedding rows", ids.len(), rows.len())));
        }
        if let Some(first) = rows.first() {
            if first.is_empty() || rows.iter().any(|r| r.len() != first.len()) {
                return Err(Error::Data("embedding rows must share a nonzero width".into()));
            }
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("embeddings contain non-finite values".into()));
        }
        Ok(Self { ids, rows })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Rows reordered to follow `ids`; every id must be present exactly once.
    pub fn aligned_to(&self, ids: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut pos: HashMap<&str, usize> = HashMap::with_capacity(self.len());
        for (i, id) in self.ids.iter().enumerate() {
            if pos.insert(id, i).is_some() {
                return Err(Error::Data(format!("duplicate subject {id} in embeddings")));
            }
        }
        if ids.len() != self.len() {
            return Err(Error::Data(format!(
                "embeddings cover {} subjects, cohort has {}",
                self.len(),
                ids.len()
            )));
        }
        ids.iter()
            .map(|id| {
                pos.get(id.as_str())
                    .map(|&i| self.rows[i].clone())
                    .ok_or_else(|| Error::Data(format!("subject {id} has no embedding")))
            })
            .collect()
    }
}

pub fn format_embeddings(emb: &Embeddings) -> String {
    let mut out = String::from("subject_id");
    for j in 0..emb.dim() {
        let _ = write!(out, ",e_{j}");
    }
    out.push('\n');
    for (id, row) in emb.ids.iter().zip(&emb.rows) {
        out.push_str(id);
        for v in row {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_embeddings(text: &str) -> Result<Embeddings> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.get(0) != Some("subject_id") {
        return Err(Error::Data("embeddings header must start with subject_id".into()));
    }
    for (j, h) in header.iter().skip(1).enumerate() {
        if h != format!("e_{j}") {
            return Err(Error::Data(format!("embeddings column {} is `{h}`, expected e_{j}", j + 1)));
        }
    }
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        ids.push(rec[0].to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("embeddings row {}: bad value `{v}`", line + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Embeddings::new(ids, rows)
}

pub fn read_embeddings(path: &Path) -> Result<Embeddings> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text)
}

pub fn write_embeddings(path: &Path, emb: &Embeddings) -> Result<()> {
    std::fs::write(path, format_embeddings(emb)).map_err(|e| Error::io(path, e))
}

/// Outcome for one target.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetReport {
    pub target: String,
    /// Confound-adjusted targets and their out-of-fold predictions.
    pub record: PredictionRecord,
    pub stat: StatResult,
    /// Ridge strength chosen in each outer fold.
    pub lambdas: Vec<f64>,
    pub warnings: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub targets: Vec<TargetReport>,
}

impl EvaluationReport {
    pub fn target(&self, name: &str) -> Option<&TargetReport> {
        self.targets.iter().find(|t| t.target == name)
    }
}

fn residualize_columns(features: &[Vec<f64>], confounds: &[Confounds], train: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut out = features.to_vec();
    for j in 0..features.first().map_or(0, Vec::len) {
        let col: Vec<f64> = features.iter().map(|r| r[j]).collect();
        let res = residualize_confounds(&col, confounds, train)?;
        for (row, v) in out.iter_mut().zip(res.values) {
            row[j] = v;
        }
    }
    Ok(out)
}

/// Out-of-fold KRR prediction of one target from frozen embeddings.
///
/// Folds are stratified on the raw target. Inside each outer fold the
/// confound model, feature scaling and ridge strength all come from the
/// training subjects only.
pub fn predict_target(
    ids: &[String],
    features: &[Vec<f64>],
    targets: &[f64],
    confounds: &[Confounds],
    settings: &EvalSettings,
) -> Result<(PredictionRecord, Vec<f64>, Vec<String>)> {
    settings.validate()?;
    let n = ids.len();
    if features.len() != n || targets.len() != n || confounds.len() != n {
        return Err(Error::Data("ids, features, targets and confounds differ in length".into()));
    }
    let plan = stratified_kfold(targets, settings.folds, settings.bins, settings.seed)?;
    let mut truth = vec![f64::NAN; n];
    let mut predicted = vec![f64::NAN; n];
    let mut lambdas = Vec::with_capacity(settings.folds);
    let mut warnings = Vec::new();
    for f in 0..settings.folds {
        let train = plan.train_indices(f);
        let test = plan.test_indices(f);
        let adjusted = residualize_confounds(targets, confounds, &train)?;
        for w in adjusted.warnings {
            warnings.push(format!("fold {f}: {w}"));
        }
        let owned;
        let feats = if settings.residualize_features {
            owned = residualize_columns(features, confounds, &train)?;
            &owned
        } else {
            features
        };
        let x: Vec<Vec<f64>> = train.iter().map(|&i| feats[i].clone()).collect();
        let y: Vec<f64> = train.iter().map(|&i| adjusted.values[i]).collect();
        let inner_seed = rng::derive_seed(settings.seed, rng::domain::FOLDS, f as u64 + 1);
        let lambda = select_lambda(&x, &y, &settings.lambda_grid, settings.inner_folds, settings.kernel, inner_seed)?;
        let model = KrrModel::fit(
            &x,
            &y,
            KrrSettings {
                kernel: settings.kernel,
                lambda,
                standardize: true,
            },
        )?;
        for &i in &test {
            truth[i] = adjusted.values[i];
            predicted[i] = model.predict_one(&feats[i]);
        }
        lambdas.push(lambda);
    }
    let record = PredictionRecord::new(ids.to_vec(), truth, predicted, plan.assignment().to_vec())?;
    Ok((record, lambdas, warnings))
}

/// Runs the full protocol for every target of `cohort`.
pub fn run_downstream(embeddings: &Embeddings, cohort: &Cohort, settings: &EvalSettings) -> Result<EvaluationReport> {
    settings.validate()?;
    let ids: Vec<String> = cohort.subjects().iter().map(|s| s.id.clone()).collect();
    let features = embeddings.aligned_to(&ids)?;
    let confounds = cohort.confounds();
    let mut targets = Vec::new();
    for (t, name) in cohort.target_names().iter().enumerate() {
        let y = cohort.target_column(t);
        let (record, lambdas, warnings) = predict_target(&ids, &features, &y, &confounds, settings)?;
        let stat = bootstrap_ci(&record, settings.bootstrap, settings.level, settings.seed)?;
        targets.push(TargetReport {
            target: name.clone(),
            record,
            stat,
            lambdas,
            warnings,
            seed: settings.seed,
        });
    }
    Ok(EvaluationReport { targets })
}

fn opt(v: Option<f64>) -> String {
    v.map(|p| format!("{p:?}")).unwrap_or_default()
}

pub const REPORT_HEADER: &str = "target,r,ci_low,ci_high,delta,p_paired,p_perm,n,seed";

pub fn format_report(report: &EvaluationReport) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for t in &report.targets {
        let s = &t.stat;
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{},{},{},{}",
            t.target,
            s.r,
            s.ci_low,
            s.ci_high,
            s.delta,
            opt(s.p_paired),
            opt(s.p_perm),
            t.record.len(),
            t.seed
        );
    }
    out
}

/// `perm_index,r` lines for a null distribution.
pub fn format_null_dump(nulls: &[f64]) -> String {
    let mut out = String::from("perm_index,r\n");
    for (i, r) in nulls.iter().enumerate() {
        let _ = writeln!(out, "{i},{r:?}");
    }
    out
}

/// `subject_id,fold,y_true,y_pred` lines.
pub fn format_predictions(record: &PredictionRecord) -> String {
    let mut out = String::from("subject_id,fold,y_true,y_pred\n");
    for i in 0..record.len() {
        let _ = writeln!(
            out,
            "{},{},{:?},{:?}",
            record.ids[i], record.fold[i], record.truth[i], record.predicted[i]
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn toy(n: usize, seed: u64) -> (Vec<String>, Vec<Vec<f64>>, Vec<f64>, Vec<Confounds>) {
        let mut rng = rng::seeded(seed);
        let ids = (0..n).map(|i| format!("s{i}")).collect();
        let feats: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..6).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let conf: Vec<Confounds> = (0..n)
            .map(|_| Confounds {
                age: rng.gen_range(8.0..18.0),
                sex: rng.gen_bool(0.5).into(),
            })
            .collect();
        let y = feats
            .iter()
            .zip(&conf)
            .map(|(f, c)| f[0] - 0.5 * f[1] + 0.3 * c.age + 0.2 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        (ids, feats, y, conf)
    }

    fn quick() -> EvalSettings {
        EvalSettings {
            folds: 5,
            bootstrap: 200,
            ..EvalSettings::default()
        }
    }

    #[test]
    fn recovers_linear_signal_out_of_fold() {
        let (ids, x, y, c) = toy(120, 1);
        let (rec, lambdas, _) = predict_target(&ids, &x, &y, &c, &quick()).unwrap();
        assert_eq!(lambdas.len(), 5);
        assert!(rec.predicted.iter().all(|v| v.is_finite()));
        assert!(rec.r().unwrap() > 0.9);
    }

    #[test]
    fn shuffled_rows_lose_the_signal() {
        let (ids, mut x, y, c) = toy(120, 2);
        x.rotate_left(37);
        let (rec, _, _) = predict_target(&ids, &x, &y, &c, &quick()).unwrap();
        assert!(rec.r().unwrap().abs() < 0.3);
    }

    #[test]
    fn deterministic_and_feature_residualization_runs() {
        let (ids, x, y, c) = toy(60, 3);
        let a = predict_target(&ids, &x, &y, &c, &quick()).unwrap();
        assert_eq!(a, predict_target(&ids, &x, &y, &c, &quick()).unwrap());
        let s = EvalSettings {
            residualize_features: true,
            ..quick()
        };
        assert!(predict_target(&ids, &x, &y, &c, &s).unwrap().0.r().unwrap() > 0.8);
    }

    #[test]
    fn embeddings_csv_round_trip_and_alignment() {
        let emb = Embeddings::new(
            vec!["a".into(), "b".into()],
            vec![vec![0.1, -2.5e-7], vec![1.0 / 3.0, 4.0]],
        )
        .unwrap();
        let text = format_embeddings(&emb);
        assert!(text.starts_with("subject_id,e_0,e_1\n"));
        assert_eq!(parse_embeddings(&text).unwrap(), emb);
        let rows = emb.aligned_to(&["b".into(), "a".into()]).unwrap();
        assert_eq!(rows[0], emb.rows[1]);
        assert!(emb.aligned_to(&["a".into(), "c".into()]).is_err());
        assert!(emb.aligned_to(&["a".into()]).is_err());
        assert!(parse_embeddings("id,e_0\nx,1\n").is_err());
    }

    #[test]
    fn settings_validation_names_fields() {
        let s = EvalSettings {
            folds: 1,
            ..EvalSettings::default()
        };
        assert!(s.validate().unwrap_err().to_string().contains("eval.folds"));
        let s = EvalSettings {
            lambda_grid: vec![],
            ..EvalSettings::default()
        };
        assert!(s.validate().unwrap_err().to_string().contains("eval.lambda_grid"));
    }

    #[test]
    fn csv_formats() {
        assert_eq!(format_null_dump(&[0.5, -0.25]), "perm_index,r\n0,0.5\n1,-0.25\n");
        let rec = PredictionRecord::from_pairs(vec![1.0, 2.0], vec![1.5, 2.5]).unwrap();
        assert_eq!(format_predictions(&rec), "subject_id,fold,y_true,y_pred\n0,0,1.0,1.5\n1,0,2.0,2.5\n");
    }
}
