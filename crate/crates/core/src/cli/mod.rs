//! The `fcmae` command line.
//!
//! Every command reads an optional TOML config (`--config`) with the sections
//! `[synth]`, `[mae]`, `[eval]` and `[ablation]` plus a top-level `seed`,
//! writes its outputs into `--out` (refusing to replace files without
//! `--force`) and records a `run_manifest.toml` with the resolved config.

pub mod ablation;
pub mod config;
pub mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::{
    format_null_dump, format_predictions, format_report, paired_bootstrap_test, permutation_p, read_embeddings,
    run_downstream, Embeddings,
};
use crate::fc::io::{read_cohort, read_parcellation, write_cohort, write_parcellation, FcFormat};
use crate::fc::{Cohort, Parcellation};
use crate::mae::{format_loss_curve, load_checkpoint, save_checkpoint, train_until, MaeModel, Pooling};
use crate::synth::gen_cohort;
use crate::tokenizers::TokenizerKind;

pub use ablation::{format_ablation, run_ablation, AblationTable, ABLATION_HEADER};
pub use config::{AblationSettings, RunConfig};
pub use manifest::{write_manifest, OutputDir, MANIFEST_NAME};

const AFTER_HELP: &str = "\
Outputs (plain CSV, fixed column order):
  synth      cohort.csv          subject_id,fc_path,age,sex,<targets...>
             parcellation.csv    region_index,network_id
  pretrain   loss_curve.csv      epoch,loss,lr
             model.ckpt          binary checkpoint
  embed      embeddings.csv      subject_id,e_0,...,e_{d-1}
  eval       report.csv          target,r,ci_low,ci_high,delta,p_paired,p_perm,n,seed
             predictions_<target>.csv  subject_id,fold,y_true,y_pred
  ablate     ablation.csv        arm,group,tokenizer,layout,networks,target,status,r,ci_low,ci_high,
                                 delta,p_paired,p_perm,n,seed,message
             nulls_<target>.csv  perm_index,r
Every command also writes run_manifest.toml.

Exit codes: 0 success, 1 config error, 2 data error, 3 numeric failure.";

#[derive(Debug, Parser)]
#[command(name = "fcmae", version, about = "Network-aware MAE pretraining and evaluation for FC matrices", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Seed applied to every config section.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML config with [synth], [mae], [eval] and [ablation] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with planted network structure.
    Synth {
        /// FC file format: binary or csv.
        #[arg(long, default_value = "binary")]
        format: String,
    },
    /// Pretrain the masked autoencoder on a cohort.
    Pretrain(PretrainArgs),
    /// Write frozen subject embeddings from a checkpoint.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, default_value = "cls")]
        pooling: Pooling,
    },
    /// Cross-validated KRR evaluation of embeddings.
    Eval {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        /// Embeddings of a comparison arm for the paired bootstrap test.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Null distribution (`perm_index,r`) for the permutation test, as
        /// PATH or TARGET=PATH; repeatable.
        #[arg(long)]
        nulls: Vec<String>,
    },
    /// Run the ablation matrix on a cohort.
    Ablate {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        parcellation: Option<PathBuf>,
        /// Number of region-permutation baselines (overrides ablation.perms).
        #[arg(long)]
        perms: Option<usize>,
    },
    /// Synthesize a cohort and run the full ablation matrix on it.
    ReproduceAblations {
        #[arg(long)]
        perms: Option<usize>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    /// Defaults to parcellation.csv next to the cohort manifest.
    #[arg(long)]
    pub parcellation: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<TokenizerKind>,
    /// Total number of epochs (overrides mae.epochs).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this epoch; the checkpoint can be resumed later.
    #[arg(long)]
    pub stop_at: Option<usize>,
    /// Continue training from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

pub fn load_config(global: &GlobalArgs) -> Result<RunConfig> {
    let cfg = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.resolve(global.seed)
}

fn default_parcellation(cohort: &Path, explicit: Option<&PathBuf>) -> PathBuf {
    explicit
        .cloned()
        .unwrap_or_else(|| cohort.parent().unwrap_or(Path::new(".")).join("parcellation.csv"))
}

fn load_inputs(cohort: &Path, parcellation: &Path) -> Result<(Cohort, Parcellation)> {
    let cohort_data = read_cohort(cohort)?;
    let parc = read_parcellation(parcellation)?;
    if cohort_data.region_count().is_some_and(|r| r != parc.region_count()) {
        return Err(Error::Data(format!(
            "{} has {} regions but the cohort matrices have {}",
            parcellation.display(),
            parc.region_count(),
            cohort_data.region_count().unwrap_or(0)
        )));
    }
    Ok((cohort_data, parc))
}

fn path_string(p: &Path) -> String {
    p.display().to_string()
}

/// Embeds every subject of `cohort` with a frozen model.
pub fn embed_cohort(model: &MaeModel, cohort: &Cohort, pooling: Pooling) -> Result<Embeddings> {
    if cohort.region_count().is_some_and(|r| r != model.region_count()) {
        return Err(Error::Data(format!(
            "checkpoint expects {} regions but the cohort has {}",
            model.region_count(),
            cohort.region_count().unwrap_or(0)
        )));
    }
    let rows = cohort
        .subjects()
        .iter()
        .map(|s| model.encode_fc(&s.fc, pooling))
        .collect::<Result<Vec<_>>>()?;
    Embeddings::new(cohort.subjects().iter().map(|s| s.id.clone()).collect(), rows)
}

fn read_null_dump(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if reader.headers()?.iter().ne(["perm_index", "r"]) {
        return Err(Error::Data(format!("{}: header must be perm_index,r", path.display())));
    }
    reader
        .records()
        .map(|rec| {
            let rec = rec?;
            rec[1]
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("{}: bad r value `{}`", path.display(), &rec[1])))
        })
        .collect()
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn cmd_synth(global: &GlobalArgs, cfg: &RunConfig, format: &str) -> Result<()> {
    let format: FcFormat = format.parse()?;
    cfg.synth.validate()?;
    let mut out = OutputDir::create(&global.out, global.force)?;
    out.claim("cohort.csv")?;
    out.claim("fc")?;
    let parc_path = out.claim("parcellation.csv")?;
    let cohort = gen_cohort(&cfg.synth)?;
    write_cohort(out.dir(), &cohort, format)?;
    write_parcellation(&parc_path, &cfg.synth.parcellation()?)?;
    write_manifest(&mut out, "synth", cfg, &BTreeMap::new())?;
    log::info!("wrote {} subjects to {}", cohort.len(), out.dir().display());
    Ok(())
}

fn cmd_pretrain(global: &GlobalArgs, mut cfg: RunConfig, args: &PretrainArgs) -> Result<()> {
    let cohort_path = args.cohort.as_path();
    if let Some(kind) = args.tokenizer {
        cfg.mae.tokenizer = kind;
    }
    if let Some(e) = args.epochs {
        cfg.mae.epochs = e;
    }
    cfg.mae.validate()?;
    let parc_path = default_parcellation(cohort_path, args.parcellation.as_ref());
    let (cohort, parc) = load_inputs(cohort_path, &parc_path)?;
    let mut inputs = BTreeMap::from([
        ("cohort".to_string(), path_string(cohort_path)),
        ("parcellation".to_string(), path_string(&parc_path)),
    ]);
    let mut model = match &args.resume {
        Some(ckpt) => {
            inputs.insert("resume".into(), path_string(ckpt));
            let model = crate::mae::load_checkpoint_with(ckpt, &cfg.mae)?;
            if model.parcellation() != &parc {
                return Err(Error::ConfigMismatch("checkpoint was trained on a different parcellation".into()));
            }
            if args.epochs.is_some_and(|e| e != model.config().epochs) {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint schedule has {} epochs; --epochs cannot change it on resume",
                    model.config().epochs
                )));
            }
            model
        }
        None => MaeModel::new(cfg.mae.clone(), parc)?,
    };
    let total = model.config().epochs;
    if model.epochs_done() >= total {
        return Err(Error::Config(format!("checkpoint has already completed its {total}-epoch schedule")));
    }
    let until = args.stop_at.unwrap_or(total);
    if until > total || until <= model.epochs_done() {
        return Err(Error::Config(format!(
            "--stop-at {until} must lie in {}..={total}",
            model.epochs_done() + 1
        )));
    }
    let mut out = OutputDir::create(&global.out, global.force)?;
    let ckpt_path = out.claim("model.ckpt")?;
    let curve_path = out.claim("loss_curve.csv")?;
    let data = cohort
        .subjects()
        .iter()
        .map(|s| model.patches(&s.fc))
        .collect::<Result<Vec<_>>>()?;
    let report = train_until(&mut model, &data, until, |e| {
        log::info!("epoch {} loss {:.6} lr {:.3e}", e.epoch, e.loss, e.lr)
    })?;
    std::fs::write(&curve_path, format_loss_curve(&report.curve)).map_err(|e| Error::io(&curve_path, e))?;
    save_checkpoint(&model, &ckpt_path)?;
    cfg.mae = model.config().clone();
    write_manifest(&mut out, "pretrain", &cfg, &inputs)?;
    Ok(())
}

fn cmd_embed(global: &GlobalArgs, cfg: &RunConfig, checkpoint: &Path, cohort_path: &Path, pooling: Pooling) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let cohort = read_cohort(cohort_path)?;
    let emb = embed_cohort(&model, &cohort, pooling)?;
    let mut out = OutputDir::create(&global.out, global.force)?;
    out.write("embeddings.csv", crate::eval::format_embeddings(&emb))?;
    let inputs = BTreeMap::from([
        ("checkpoint".to_string(), path_string(checkpoint)),
        ("cohort".to_string(), path_string(cohort_path)),
        ("pooling".to_string(), pooling.to_string()),
    ]);
    let mut cfg = cfg.clone();
    cfg.mae = model.config().clone();
    write_manifest(&mut out, "embed", &cfg, &inputs)?;
    Ok(())
}

fn cmd_eval(
    global: &GlobalArgs,
    cfg: &RunConfig,
    embeddings: &Path,
    cohort_path: &Path,
    baseline: Option<&PathBuf>,
    nulls: &[String],
) -> Result<()> {
    cfg.eval.validate()?;
    let cohort = read_cohort(cohort_path)?;
    let emb = read_embeddings(embeddings)?;
    let mut report = run_downstream(&emb, &cohort, &cfg.eval)?;
    let mut inputs = BTreeMap::from([
        ("embeddings".to_string(), path_string(embeddings)),
        ("cohort".to_string(), path_string(cohort_path)),
    ]);
    if let Some(base) = baseline {
        inputs.insert("baseline".into(), path_string(base));
        let other = run_downstream(&read_embeddings(base)?, &cohort, &cfg.eval)?;
        for (t, o) in report.targets.iter_mut().zip(&other.targets) {
            t.stat.p_paired = Some(paired_bootstrap_test(&t.record, &o.record, cfg.eval.bootstrap, cfg.eval.seed)?);
        }
    }
    for spec in nulls {
        let (target, path) = match spec.split_once('=') {
            Some((t, p)) => (Some(t), Path::new(p)),
            None => (None, Path::new(spec.as_str())),
        };
        if let Some(t) = target {
            if report.target(t).is_none() {
                return Err(Error::Config(format!("--nulls names unknown target `{t}`")));
            }
        }
        let null = read_null_dump(path)?;
        inputs.insert(format!("nulls.{}", target.unwrap_or("*")), path_string(path));
        for t in report.targets.iter_mut().filter(|t| target.is_none_or(|n| n == t.target)) {
            t.stat.p_perm = Some(permutation_p(t.stat.r, &null)?);
        }
    }
    let mut out = OutputDir::create(&global.out, global.force)?;
    out.write("report.csv", format_report(&report))?;
    for t in &report.targets {
        out.write(&format!("predictions_{}.csv", file_safe(&t.target)), format_predictions(&t.record))?;
        for w in &t.warnings {
            log::warn!("{}: {w}", t.target);
        }
    }
    write_manifest(&mut out, "eval", cfg, &inputs)?;
    Ok(())
}

/// Claims the ablation outputs before the (long) run starts.
fn claim_ablation(out: &mut OutputDir, cohort: &Cohort) -> Result<()> {
    out.claim("ablation.csv")?;
    for t in cohort.target_names() {
        out.claim(&format!("nulls_{}.csv", file_safe(t)))?;
    }
    Ok(())
}

fn write_ablation(dir: &Path, table: &AblationTable) -> Result<()> {
    let write = |name: String, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write("ablation.csv".into(), format_ablation(table)?)?;
    for (target, null) in &table.nulls {
        write(format!("nulls_{}.csv", file_safe(target)), format_null_dump(null))?;
    }
    Ok(())
}

fn cmd_ablate(
    global: &GlobalArgs,
    mut cfg: RunConfig,
    cohort_path: &Path,
    parcellation: Option<&PathBuf>,
    perms: Option<usize>,
) -> Result<()> {
    if let Some(p) = perms {
        cfg.ablation.perms = p;
    }
    cfg.validate()?;
    let parc_path = default_parcellation(cohort_path, parcellation);
    let (cohort, parc) = load_inputs(cohort_path, &parc_path)?;
    let mut out = OutputDir::create(&global.out, global.force)?;
    claim_ablation(&mut out, &cohort)?;
    let table = run_ablation(&cohort, &parc, &cfg, |arm| log::info!("arm {arm}"))?;
    write_ablation(out.dir(), &table)?;
    let inputs = BTreeMap::from([
        ("cohort".to_string(), path_string(cohort_path)),
        ("parcellation".to_string(), path_string(&parc_path)),
    ]);
    write_manifest(&mut out, "ablate", &cfg, &inputs)?;
    Ok(())
}

fn cmd_reproduce(global: &GlobalArgs, mut cfg: RunConfig, perms: Option<usize>) -> Result<()> {
    if let Some(p) = perms {
        cfg.ablation.perms = p;
    }
    cfg.validate()?;
    let cohort = gen_cohort(&cfg.synth)?;
    let mut out = OutputDir::create(&global.out, global.force)?;
    out.claim("cohort")?;
    claim_ablation(&mut out, &cohort)?;
    let cohort_dir = global.out.join("cohort");
    write_cohort(&cohort_dir, &cohort, FcFormat::Binary)?;
    let parc = cfg.synth.parcellation()?;
    write_parcellation(&cohort_dir.join("parcellation.csv"), &parc)?;
    let table = run_ablation(&cohort, &parc, &cfg, |arm| log::info!("arm {arm}"))?;
    write_ablation(out.dir(), &table)?;
    write_manifest(&mut out, "reproduce-ablations", &cfg, &BTreeMap::new())?;
    Ok(())
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let g = &cli.global;
    match cli.command {
        Command::Synth { format } => cmd_synth(g, &cfg, &format),
        Command::Pretrain(args) => cmd_pretrain(g, cfg, &args),
        Command::Embed {
            checkpoint,
            cohort,
            pooling,
        } => cmd_embed(g, &cfg, &checkpoint, &cohort, pooling),
        Command::Eval {
            embeddings,
            cohort,
            baseline,
            nulls,
        } => cmd_eval(g, &cfg, &embeddings, &cohort, baseline.as_ref(), &nulls),
        Command::Ablate {
            cohort,
            parcellation,
            perms,
        } => cmd_ablate(g, cfg, &cohort, parcellation.as_ref(), perms),
        Command::ReproduceAblations { perms } => cmd_reproduce(g, cfg, perms),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn global_flags_parse_after_subcommand() {
        let cli = Cli::try_parse_from(["fcmae", "synth", "--seed", "3", "--out", "x", "--force"]).unwrap();
        assert_eq!(cli.global.seed, Some(3));
        assert!(cli.global.force);
        assert_eq!(cli.global.out, PathBuf::from("x"));
    }

    #[test]
    fn bad_usage_is_a_config_exit() {
        assert_eq!(main_with_args(["fcmae", "pretrain"]), 1);
        assert_eq!(main_with_args(["fcmae", "embed", "--checkpoint", "a", "--cohort", "b", "--pooling", "max"]), 1);
    }

    #[test]
    fn file_names_are_sanitized() {
        assert_eq!(file_safe("a b/c"), "a_b_c");
    }
}
