use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalSettings;
use crate::mae::{MaeConfig, Pooling};
use crate::synth::SynthSpec;

/// Settings of the ablation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    /// Number of region-permutation baselines.
    pub perms: usize,
    /// Pretraining epochs per arm (overrides `mae.epochs`).
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub pooling: Pooling,
    /// Side of the square tiles for the square-layout arms.
    pub square_side: usize,
    /// Consecutive networks merged into one for the coarse-granularity arm.
    pub coarsen_factor: usize,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            perms: 20,
            epochs: 30,
            warmup_epochs: 3,
            pooling: Pooling::Cls,
            square_side: 5,
            coarsen_factor: 2,
        }
    }
}

impl AblationSettings {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: &str| Err(Error::Config(format!("ablation.{field}: {why}")));
        if self.epochs == 0 {
            return fail("epochs", "must be at least 1");
        }
        if self.warmup_epochs >= self.epochs {
            return fail("warmup_epochs", "must be below ablation.epochs");
        }
        if self.square_side == 0 {
            return fail("square_side", "must be at least 1");
        }
        if self.coarsen_factor < 2 {
            return fail("coarsen_factor", "must be at least 2");
        }
        Ok(())
    }
}

/// Fully resolved configuration of one run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; when set it replaces the seed of every section.
    pub seed: Option<u64>,
    pub synth: SynthSpec,
    pub mae: MaeConfig,
    pub eval: EvalSettings,
    pub ablation: AblationSettings,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Applies a command-line seed (which wins over the file) and pushes the
    /// global seed into every section.
    pub fn resolve(mut self, cli_seed: Option<u64>) -> Result<Self> {
        if cli_seed.is_some() {
            self.seed = cli_seed;
        }
        if let Some(seed) = self.seed {
            if seed > i64::MAX as u64 {
                return Err(Error::Config("seed: must fit in a signed 64-bit integer".into()));
            }
            self.synth.seed = seed;
            self.mae.seed = seed;
            self.eval.seed = seed;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.mae.validate()?;
        self.eval.validate()?;
        self.ablation.validate()
    }

    /// The seed recorded in manifests.
    pub fn effective_seed(&self) -> u64 {
        self.seed.unwrap_or(self.mae.seed)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_and_seed_override() {
        let cfg = RunConfig::parse("seed = 4\n[mae]\nepochs = 7\nwarmup_epochs = 1\n[synth]\nn_subjects = 9\n")
            .unwrap()
            .resolve(Some(11))
            .unwrap();
        assert_eq!(cfg.mae.epochs, 7);
        assert_eq!(cfg.synth.n_subjects, 9);
        assert_eq!((cfg.synth.seed, cfg.mae.seed, cfg.eval.seed), (11, 11, 11));
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_and_invalid_fields_are_named() {
        let err = RunConfig::parse("[mae]\nepochz = 3\n").unwrap_err().to_string();
        assert!(err.contains("epochz"), "{err}");
        let cfg = RunConfig::parse("[synth]\nwithin_coupling = 2.0\n").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("synth.within_coupling"));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default().resolve(Some(3)).unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }
}
