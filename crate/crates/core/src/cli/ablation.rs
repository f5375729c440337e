//! The tokenization / parcellation ablation matrix.
//!
//! Arms: every tokenizer on the network layout and on the square layout, a
//! coarse and a fine network granularity (bilinear), and `perms`
//! region-permutation baselines (bilinear on a shuffled region-to-network
//! assignment). Each arm is pretrained, embedded and evaluated on the same
//! cohort; a failing arm becomes a `failed` row and the run continues.

use std::collections::{BTreeMap, HashMap};

use super::config::RunConfig;
use super::embed_cohort;
use crate::error::{Error, Result};
use crate::eval::{paired_bootstrap_test, permutation_p, run_downstream, EvaluationReport};
use crate::fc::{permute_regions, square_layout, Cohort, Parcellation};
use crate::mae::{train, MaeConfig, MaeModel};
use crate::rng;
use crate::tokenizers::TokenizerKind;

/// Arm compared against in the paired tests.
pub const REFERENCE_ARM: &str = "tok_bilinear_network";

pub const ABLATION_HEADER: [&str; 16] = [
    "arm",
    "group",
    "tokenizer",
    "layout",
    "networks",
    "target",
    "status",
    "r",
    "ci_low",
    "ci_high",
    "delta",
    "p_paired",
    "p_perm",
    "n",
    "seed",
    "message",
];

#[derive(Debug, Clone)]
pub struct Arm {
    pub name: String,
    pub group: &'static str,
    pub tokenizer: TokenizerKind,
    pub layout: &'static str,
    /// The error text when the layout cannot be built for this cohort.
    pub parcellation: std::result::Result<Parcellation, String>,
}

impl Arm {
    fn networks(&self) -> String {
        self.parcellation
            .as_ref()
            .map(|p| p.network_count().to_string())
            .unwrap_or_default()
    }
}

/// Builds the arm list for a base parcellation.
pub fn arm_matrix(base: &Parcellation, config: &RunConfig) -> Vec<Arm> {
    let settings = &config.ablation;
    let square = square_layout(base.region_count(), settings.square_side)
        .map(|(p, _)| p)
        .map_err(|e| e.to_string());
    let mut arms = Vec::new();
    for kind in TokenizerKind::ALL {
        arms.push(Arm {
            name: format!("tok_{kind}_network"),
            group: "tokenization",
            tokenizer: kind,
            layout: "network",
            parcellation: Ok(base.clone()),
        });
    }
    for kind in TokenizerKind::ALL {
        arms.push(Arm {
            name: format!("tok_{kind}_square"),
            group: "tokenization",
            tokenizer: kind,
            layout: "square",
            parcellation: square.clone(),
        });
    }
    arms.push(Arm {
        name: "granularity_coarse".into(),
        group: "granularity",
        tokenizer: TokenizerKind::Bilinear,
        layout: "network",
        parcellation: base.coarsen(settings.coarsen_factor).map_err(|e| e.to_string()),
    });
    arms.push(Arm {
        name: "granularity_fine".into(),
        group: "granularity",
        tokenizer: TokenizerKind::Bilinear,
        layout: "network",
        parcellation: Ok(base.clone()),
    });
    let seed = config.effective_seed();
    for i in 0..settings.perms {
        arms.push(Arm {
            name: format!("perm_{i:03}"),
            group: "permutation",
            tokenizer: TokenizerKind::Bilinear,
            layout: "permuted",
            parcellation: Ok(permute_regions(base, rng::derive_seed(seed, rng::domain::ABLATION, i as u64))),
        });
    }
    arms
}

/// MAE settings of one arm: the `[mae]` section with the ablation's epoch
/// budget and the arm's tokenizer.
pub fn arm_config(config: &RunConfig, tokenizer: TokenizerKind) -> MaeConfig {
    MaeConfig {
        tokenizer,
        epochs: config.ablation.epochs,
        warmup_epochs: config.ablation.warmup_epochs,
        ..config.mae.clone()
    }
}

/// Pretrains, embeds and evaluates one arm.
pub fn run_arm(cohort: &Cohort, parcellation: &Parcellation, mae: MaeConfig, config: &RunConfig) -> Result<EvaluationReport> {
    let mut model = MaeModel::new(mae, parcellation.clone())?;
    train(&mut model, cohort)?;
    let emb = embed_cohort(&model, cohort, config.ablation.pooling)?;
    run_downstream(&emb, cohort, &config.eval)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub arm: String,
    pub group: String,
    pub tokenizer: String,
    pub layout: String,
    pub networks: String,
    pub target: String,
    pub status: String,
    pub r: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub delta: Option<f64>,
    pub p_paired: Option<f64>,
    pub p_perm: Option<f64>,
    pub n: Option<usize>,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Per target, r of every successful permutation arm in arm order.
    pub nulls: BTreeMap<String, Vec<f64>>,
}

fn type7(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Runs every arm and assembles the table. `progress` is called with each
/// arm name before it starts.
pub fn run_ablation(
    cohort: &Cohort,
    base: &Parcellation,
    config: &RunConfig,
    mut progress: impl FnMut(&str),
) -> Result<AblationTable> {
    config.ablation.validate()?;
    config.eval.validate()?;
    if cohort.region_count() != Some(base.region_count()) {
        return Err(Error::Data(format!(
            "parcellation has {} regions but the cohort has {:?}",
            base.region_count(),
            cohort.region_count()
        )));
    }
    let arms = arm_matrix(base, config);
    let mut cache: HashMap<(TokenizerKind, Vec<usize>), std::result::Result<EvaluationReport, String>> = HashMap::new();
    let mut outcomes = Vec::with_capacity(arms.len());
    for arm in &arms {
        progress(&arm.name);
        let outcome = match &arm.parcellation {
            Err(msg) => Err(msg.clone()),
            Ok(parc) => cache
                .entry((arm.tokenizer, parc.assignment().to_vec()))
                .or_insert_with(|| {
                    run_arm(cohort, parc, arm_config(config, arm.tokenizer), config).map_err(|e| e.to_string())
                })
                .clone(),
        };
        if let Err(msg) = &outcome {
            log::warn!("arm {} failed: {msg}", arm.name);
        }
        outcomes.push(outcome);
    }

    let seed = config.effective_seed();
    let reference = arms.iter().position(|a| a.name == REFERENCE_ARM);
    let mut rows = Vec::new();
    let mut nulls = BTreeMap::new();
    for name in cohort.target_names() {
        let null: Vec<f64> = arms
            .iter()
            .zip(&outcomes)
            .filter(|(a, _)| a.group == "permutation")
            .filter_map(|(_, o)| o.as_ref().ok().and_then(|rep| rep.target(name)).map(|t| t.stat.r))
            .collect();
        let reference = reference
            .and_then(|i| outcomes[i].as_ref().ok())
            .and_then(|rep| rep.target(name));
        for (arm, outcome) in arms.iter().zip(&outcomes) {
            let mut row = AblationRow {
                arm: arm.name.clone(),
                group: arm.group.into(),
                tokenizer: arm.tokenizer.to_string(),
                layout: arm.layout.into(),
                networks: arm.networks(),
                target: name.clone(),
                status: "ok".into(),
                r: None,
                ci_low: None,
                ci_high: None,
                delta: None,
                p_paired: None,
                p_perm: None,
                n: None,
                seed,
                message: String::new(),
            };
            match outcome.as_ref().map(|rep| rep.target(name)) {
                Ok(Some(t)) => {
                    row.r = Some(t.stat.r);
                    row.ci_low = Some(t.stat.ci_low);
                    row.ci_high = Some(t.stat.ci_high);
                    row.delta = Some(t.stat.delta);
                    row.n = Some(t.record.len());
                    if arm.group != "permutation" {
                        if !null.is_empty() {
                            row.p_perm = Some(permutation_p(t.stat.r, &null)?);
                        }
                        if let Some(reference) = reference.filter(|_| arm.name != REFERENCE_ARM) {
                            match paired_bootstrap_test(&t.record, &reference.record, config.eval.bootstrap, seed) {
                                Ok(p) => row.p_paired = Some(p),
                                Err(e) => row.message = format!("paired test: {e}"),
                            }
                        }
                    }
                }
                Ok(None) => {
                    row.status = "failed".into();
                    row.message = format!("target {name} missing from the arm report");
                }
                Err(msg) => {
                    row.status = "failed".into();
                    row.message = msg.clone();
                }
            }
            rows.push(row);
        }
        let mut summary = AblationRow {
            arm: "permutation_null".into(),
            group: "permutation".into(),
            tokenizer: TokenizerKind::Bilinear.to_string(),
            layout: "permuted".into(),
            networks: base.network_count().to_string(),
            target: name.clone(),
            status: "ok".into(),
            r: None,
            ci_low: None,
            ci_high: None,
            delta: None,
            p_paired: None,
            p_perm: None,
            n: Some(null.len()),
            seed,
            message: "mean and central 95% range of the permutation baselines".into(),
        };
        if null.is_empty() {
            summary.status = "failed".into();
            summary.message = "no successful permutation baselines".into();
        } else {
            let mut sorted = null.clone();
            sorted.sort_by(f64::total_cmp);
            let (lo, hi) = (type7(&sorted, 0.025), type7(&sorted, 0.975));
            summary.r = Some(null.iter().sum::<f64>() / null.len() as f64);
            summary.ci_low = Some(lo);
            summary.ci_high = Some(hi);
            summary.delta = Some((hi - lo) / 2.0);
        }
        rows.push(summary);
        nulls.insert(name.clone(), null);
    }
    Ok(AblationTable { rows, nulls })
}

fn num<T: std::fmt::Debug>(v: Option<T>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn format_ablation(table: &AblationTable) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ABLATION_HEADER)?;
    for r in &table.rows {
        w.write_record([
            r.arm.clone(),
            r.group.clone(),
            r.tokenizer.clone(),
            r.layout.clone(),
            r.networks.clone(),
            r.target.clone(),
            r.status.clone(),
            num(r.r),
            num(r.ci_low),
            num(r.ci_high),
            num(r.delta),
            num(r.p_paired),
            num(r.p_perm),
            r.n.map(|n| n.to_string()).unwrap_or_default(),
            r.seed.to_string(),
            r.message.clone(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("ablation table: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
