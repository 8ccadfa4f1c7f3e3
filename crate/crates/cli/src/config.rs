//! Pipeline configuration: one TOML file with a section per stage.

use std::path::Path;

use cohort::aligner::AlignerConfig;
use cohort::grm::GrmConfig;
use cohort::grouping::GroupingConfig;
use cohort::prefnet::PrefConfig;
use cohort::simworld::WorldConfig;
use serde::{Deserialize, Serialize};

use crate::StageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodePolicy {
    Argmax,
    Sample,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// How the evaluation stage decodes one prompt per group.
    pub policy_decode: DecodePolicy,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            policy_decode: DecodePolicy::Argmax,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub prefnet: PrefConfig,
    pub grouping: GroupingConfig,
    pub grm: GrmConfig,
    pub aligner: AlignerConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// Parse a TOML config file; unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self, StageError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            StageError::InvalidConfig(format!("cannot read {}: {e}", path.display()))
        })?;
        let config: Self = toml::from_str(&text)
            .map_err(|e| StageError::InvalidConfig(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), StageError> {
        let check = |r: cohort::Result<()>| r.map_err(|e| StageError::InvalidConfig(e.to_string()));
        check(self.world.validate())?;
        check(self.prefnet.validate())?;
        check(self.grouping.validate())?;
        check(self.grm.validate())?;
        check(self.aligner.validate())?;
        if self.aligner.vocab < self.world.n_styles {
            return Err(StageError::InvalidConfig(format!(
                "policy vocabulary {} cannot address {} styles",
                self.aligner.vocab, self.world.n_styles
            )));
        }
        Ok(())
    }

    /// The fully resolved configuration as TOML, written next to artifacts.
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
