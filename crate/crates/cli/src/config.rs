//! Run configuration, read from TOML. Every field is resolved before a
//! command runs and the resolved value is echoed into the stage manifest.

use std::path::Path;

use brainsbi_core::emulator::EmulatorParams;
use brainsbi_core::flow::{FlowConfig, Solver};
use brainsbi_core::model::{ModelConfig, SummaryKind};
use brainsbi_core::params::NUM_DIMS;
use brainsbi_core::rng::derive_seed;
use brainsbi_core::stimulus::ChatEndpoint;
use brainsbi_core::summary::SummaryConfig;
use brainsbi_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub prior: PriorConfig,
    pub generator: GeneratorConfig,
    pub emulator: EmulatorParams,
    pub summary: SummarySettings,
    pub flow: FlowSettings,
    pub train: TrainSettings,
    pub diagnostics: DiagnosticsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub per_topic_train: usize,
    pub per_topic_validation: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    None,
    Mock,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    /// Upper bound on concurrent external requests.
    pub max_concurrency: usize,
    pub external: Option<ChatEndpoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SummarySettings {
    pub components: usize,
    pub width: usize,
    pub embed_dim: usize,
    pub dropout: f64,
    pub t_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSettings {
    pub hidden: usize,
    pub time_dim: usize,
    pub dropout: f64,
    pub solver: Solver,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lr_patience: usize,
    pub lr_factor: f64,
    pub lr_min: f64,
    /// Share of the training dataset held out for validation, per topic.
    pub val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Posterior draws per validation observation.
    pub samples: usize,
    pub alpha: f64,
    pub replications: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            prior: PriorConfig::default(),
            generator: GeneratorConfig::default(),
            emulator: EmulatorParams::default(),
            summary: SummarySettings::default(),
            flow: FlowSettings::default(),
            train: TrainSettings::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            per_topic_train: 200,
            per_topic_validation: 20,
        }
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            kind: GeneratorKind::Mock,
            max_concurrency: 4,
            external: None,
        }
    }
}

impl Default for SummarySettings {
    fn default() -> Self {
        let s = SummaryConfig::new(32);
        SummarySettings {
            components: s.input_dim,
            width: s.width,
            embed_dim: s.embed_dim,
            dropout: s.dropout,
            t_max: brainsbi_core::emulator::T_MAX,
        }
    }
}

impl Default for FlowSettings {
    fn default() -> Self {
        let f = FlowConfig::default();
        FlowSettings {
            hidden: f.hidden,
            time_dim: f.time_dim,
            dropout: f.dropout,
            solver: Solver::default(),
        }
    }
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSettings {
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            early_stop_patience: t.early_stop_patience,
            lr_patience: t.lr_patience,
            lr_factor: t.lr_factor,
            lr_min: t.lr_min,
            val_fraction: 0.1,
        }
    }
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            samples: 500,
            alpha: 0.05,
            replications: 1000,
        }
    }
}

/// Per-stage seeds, all derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub train_assignment: u64,
    pub train_simulation: u64,
    pub validation_assignment: u64,
    pub validation_simulation: u64,
    pub split: u64,
    pub training: u64,
    pub sampling: u64,
    pub calibration: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable")
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.emulator.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.prior.per_topic_train == 0 || self.prior.per_topic_validation == 0 {
            return bad("prior: per-topic counts must be positive".into());
        }
        if self.summary.t_max == 0 || self.summary.components == 0 {
            return bad("summary: t_max and components must be positive".into());
        }
        if self.flow.solver.steps == 0 {
            return bad("flow: solver needs at least one step".into());
        }
        if !(self.train.val_fraction > 0.0 && self.train.val_fraction < 1.0) {
            return bad("train: val_fraction must lie in (0, 1)".into());
        }
        self.train_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.diagnostics.samples == 0 || self.diagnostics.replications == 0 {
            return bad("diagnostics: samples and replications must be positive".into());
        }
        if !(self.diagnostics.alpha > 0.0 && self.diagnostics.alpha < 1.0) {
            return bad("diagnostics: alpha must lie in (0, 1)".into());
        }
        if self.generator.kind == GeneratorKind::External {
            if self.generator.external.is_none() {
                return bad("generator: kind = \"external\" requires a [generator.external] table".into());
            }
            if self.generator.max_concurrency == 0 {
                return bad("generator: max_concurrency must be positive".into());
            }
        }
        Ok(())
    }

    pub fn seeds(&self) -> StageSeeds {
        let d = |label| derive_seed(self.seed, label);
        StageSeeds {
            train_assignment: d("train-assignment"),
            train_simulation: d("train-simulation"),
            validation_assignment: d("validation-assignment"),
            validation_simulation: d("validation-simulation"),
            split: d("split"),
            training: d("training"),
            sampling: d("sampling"),
            calibration: d("calibration"),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            early_stop_patience: t.early_stop_patience,
            lr_patience: t.lr_patience,
            lr_factor: t.lr_factor,
            lr_min: t.lr_min,
            seed: self.seeds().training,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let s = &self.summary;
        let mut model = ModelConfig::standard(s.components);
        model.summary = SummaryKind::Network(SummaryConfig {
            input_dim: s.components,
            width: s.width,
            embed_dim: s.embed_dim,
            dropout: s.dropout,
        });
        model.flow = FlowConfig {
            param_dim: NUM_DIMS,
            cond_dim: s.embed_dim,
            time_dim: self.flow.time_dim,
            hidden: self.flow.hidden,
            dropout: self.flow.dropout,
        };
        model
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let c = RunConfig::default();
        let back = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_files_fill_defaults_and_unknown_keys_fail() {
        let c = RunConfig::parse("seed = 9\n[train]\nmax_epochs = 3\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.max_epochs, 3);
        assert_eq!(c.train.lr, 1e-4);
        assert!(matches!(RunConfig::parse("sed = 1\n"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse("[train]\nlearning_rate = 1.0\n"), Err(CliError::Config(_))));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(RunConfig::parse("[emulator]\nar_rho = 1.0\n").is_err());
        assert!(RunConfig::parse("[train]\nval_fraction = 0.0\n").is_err());
        assert!(RunConfig::parse("[generator]\nkind = \"external\"\n").is_err());
        assert!(RunConfig::parse("[diagnostics]\nalpha = 1.5\n").is_err());
    }

    #[test]
    fn stage_seeds_are_distinct_and_follow_the_master_seed() {
        let a = RunConfig::default().seeds();
        let b = RunConfig { seed: 1, ..Default::default() }.seeds();
        assert_ne!(a, b);
        let all = [
            a.train_assignment,
            a.train_simulation,
            a.validation_assignment,
            a.validation_simulation,
            a.split,
            a.training,
            a.sampling,
            a.calibration,
        ];
        let unique: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(unique.len(), all.len());
    }
}
