//! Run configuration loaded from TOML, with command-line overrides applied on top.

use std::path::{Path, PathBuf};

use kbrefine_core::corrupt::CorruptionSpec;
use kbrefine_core::coverage::CoverageConfig;
use kbrefine_core::dsl::ApplyOptions;
use kbrefine_core::kb::ReplaceMode;
use kbrefine_core::pipeline::RefineConfig;
use kbrefine_core::retrieval::RetrievalConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    pub horizon: usize,
    pub max_actions: usize,
    pub strict_replace: bool,
    pub post_verify: bool,
    /// Record per-query wall time in stream reports. Off keeps reports
    /// byte-reproducible.
    pub record_timing: bool,
}

impl Default for RefineSection {
    fn default() -> Self {
        let d = RefineConfig::default();
        RefineSection {
            horizon: d.horizon,
            max_actions: d.apply.max_actions,
            strict_replace: false,
            post_verify: d.post_verify,
            record_timing: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageSection {
    /// `locomo` or `large`; individual fields below override the preset.
    pub preset: Option<String>,
    pub k: Option<usize>,
    pub m: Option<usize>,
    pub budget: Option<usize>,
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub dim: usize,
    /// JSONL vector cache loaded before and saved after a run.
    pub cache: Option<PathBuf>,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        EmbeddingSection { dim: kbrefine_core::embed::HashEmbedder::DEFAULT_DIM, cache: None }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReaderMode {
    /// Built-in extractive reader.
    #[default]
    Extractive,
    /// Route reader prompts to the configured model.
    Model,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    /// Built-in normalized exact-match judge.
    #[default]
    ExactMatch,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub mock_fixtures: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub retries: usize,
    pub reader: ReaderMode,
    pub answer_judge: JudgeMode,
}

impl Default for GatewaySection {
    fn default() -> Self {
        GatewaySection {
            mock_fixtures: None,
            endpoint: None,
            model: None,
            api_key_env: None,
            retries: 2,
            reader: ReaderMode::default(),
            answer_judge: JudgeMode::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub retrieval: RetrievalConfig,
    pub refine: RefineSection,
    pub coverage: CoverageSection,
    pub corruption: CorruptionSpec,
    pub embedding: EmbeddingSection,
    pub gateway: GatewaySection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            retrieval: self.retrieval,
            horizon: self.refine.horizon,
            apply: ApplyOptions {
                max_actions: self.refine.max_actions,
                replace_mode: if self.refine.strict_replace { ReplaceMode::Strict } else { ReplaceMode::Lenient },
            },
            post_verify: self.refine.post_verify,
        }
    }

    pub fn coverage_config(&self) -> Result<CoverageConfig, CliError> {
        let c = &self.coverage;
        let base = match c.preset.as_deref() {
            None => CoverageConfig::default(),
            Some(name) => CoverageConfig::preset(name)
                .ok_or_else(|| CliError::Usage(format!("unknown coverage preset `{name}`")))?,
        };
        Ok(CoverageConfig {
            k: c.k.unwrap_or(base.k),
            m: c.m.unwrap_or(base.m),
            budget: c.budget.unwrap_or(base.budget),
            rho: c.rho.unwrap_or(base.rho),
        })
    }

    pub fn corruption_spec(&self) -> CorruptionSpec {
        CorruptionSpec { seed: self.seed, ..self.corruption }
    }

    /// Rejects values outside module bounds before anything runs.
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: &dyn std::fmt::Display| CliError::Usage(format!("invalid config: {e}"));
        self.retrieval.validate().map_err(|e| usage(&e))?;
        self.coverage_config()?.validate().map_err(|e| usage(&e))?;
        self.corruption.validate().map_err(|e| usage(&e))?;
        if self.refine.horizon == 0 {
            return Err(usage(&"refine.horizon must be at least 1"));
        }
        if self.refine.max_actions == 0 {
            return Err(usage(&"refine.max_actions must be at least 1"));
        }
        if self.embedding.dim == 0 {
            return Err(usage(&"embedding.dim must be at least 1"));
        }
        if let Some(p) = &self.gateway.mock_fixtures {
            if !p.exists() {
                return Err(CliError::Usage(format!("mock fixture file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}
