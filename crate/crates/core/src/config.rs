//! Run configuration: one TOML section per pipeline stage, every field
//! defaulted except input paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablation::{AblationConfig, AblationSchedule, DeclinePreset, DeclineThresholds};
use crate::classifier::TrainConfig;
use crate::cohort::{CohortSpec, FeatureSetMode, MatchingMode, Strata};
use crate::error::{Error, Result};
use crate::evaluation::CvMode;
use crate::event_model::EventFormat;
use crate::scoring::{ScoreMetric, ScoreScope};
use crate::seed::derive_seed;
use crate::simulation::{CategoryMix, PlantedConfig, SimMode, SimSpec};

pub const DEFAULT_SENSITIVE_CODES: [&str; 13] = [
    "042", "099", "300", "311", "304", "305", "306", "606", "607", "626", "628", "768", "770",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventModelSection {
    /// Raw event log.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log: Option<PathBuf>,
    /// Directory holding an encoded matrix and its cohorts.csv.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matrix_dir: Option<PathBuf>,
    pub sensitive_codes: Vec<String>,
    pub format: EventFormat,
}

impl Default for EventModelSection {
    fn default() -> Self {
        EventModelSection {
            log: None,
            matrix_dir: None,
            sensitive_codes: DEFAULT_SENSITIVE_CODES.iter().map(|s| s.to_string()).collect(),
            format: EventFormat::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSection {
    pub sensitive_code: String,
    pub case_cap: usize,
    pub control_pool_size: usize,
    pub matching_mode: MatchingMode,
    pub feature_set_mode: FeatureSetMode,
    pub strata: Strata,
}

impl Default for CohortSection {
    fn default() -> Self {
        CohortSection {
            sensitive_code: "300".into(),
            case_cap: 5000,
            control_pool_size: 30000,
            matching_mode: MatchingMode::default(),
            feature_set_mode: FeatureSetMode::default(),
            strata: Strata::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringSection {
    pub metric: ScoreMetric,
    pub scope: ScoreScope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub lambda: f64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub init_scale: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        ClassifierSection {
            lambda: t.lambda,
            max_iterations: t.max_iterations,
            gradient_tolerance: t.gradient_tolerance,
            init_scale: t.init_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub n_folds: usize,
    pub cv_mode: CvMode,
    /// Probability cut-off for precision/recall/F.
    pub threshold: f64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            n_folds: 10,
            cv_mode: CvMode::default(),
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub schedule: AblationSchedule,
    pub decline_preset: DeclinePreset,
    /// Overrides the preset when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decline_thresholds: Option<DeclineThresholds>,
    pub top_n: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            schedule: AblationSchedule::default(),
            decline_preset: DeclinePreset::default(),
            decline_thresholds: None,
            top_n: 10,
        }
    }
}

impl AblationSection {
    pub fn thresholds(&self) -> DeclineThresholds {
        self.decline_thresholds
            .unwrap_or_else(|| self.decline_preset.thresholds())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub n_case: usize,
    pub n_ctrl: usize,
    pub n_features: usize,
    pub mode: SimMode,
    pub planted: PlantedConfig,
    pub mix: CategoryMix,
    /// `simulate` also evaluates a planted cohort.
    pub include_planted: bool,
    /// `simulate` also writes each dataset as an event log.
    pub write_event_logs: bool,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let s = SimSpec::default();
        SimulationSection {
            n_case: s.n_case,
            n_ctrl: s.n_ctrl,
            n_features: s.n_features,
            mode: s.mode,
            planted: s.planted,
            mix: s.mix,
            include_planted: false,
            write_event_logs: false,
        }
    }
}

impl SimulationSection {
    pub fn spec(&self, mode: SimMode, seed: u64) -> SimSpec {
        SimSpec {
            n_case: self.n_case,
            n_ctrl: self.n_ctrl,
            n_features: self.n_features,
            mode,
            planted: self.planted.clone(),
            mix: self.mix,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditSource {
    #[default]
    Log,
    Matrix,
    Simulation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportingSection {
    pub seed: u64,
    pub audit_source: AuditSource,
    /// Row label in the grid; defaults to the sensitive code.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Decimal places in the grid file.
    pub grid_precision: usize,
}

impl Default for ReportingSection {
    fn default() -> Self {
        ReportingSection {
            seed: 0,
            audit_source: AuditSource::default(),
            label: None,
            grid_precision: 3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub event_model: EventModelSection,
    pub cohort_builder: CohortSection,
    pub feature_scoring: ScoringSection,
    pub classifier: ClassifierSection,
    pub evaluation: EvaluationSection,
    pub ablation_engine: AblationSection,
    pub simulation: SimulationSection,
    pub cli_reporting: ReportingSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Report(message) => Error::Report(format!("{}: {message}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Report(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.event_model.format.delimiter.len_utf8() != 1 {
            return Err(Error::Report(
                "event_model.format.delimiter must be a single byte".into(),
            ));
        }
        self.cohort_spec(0).validate()?;
        self.cohort_builder.strata.validate()?;
        self.train_config(0).validate()?;
        if self.evaluation.n_folds < 2 {
            return Err(Error::Report("evaluation.n_folds must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.evaluation.threshold) {
            return Err(Error::Report("evaluation.threshold must lie in [0, 1]".into()));
        }
        self.ablation_engine.schedule.validate()?;
        self.simulation.spec(self.simulation.mode, 0).validate()?;
        Ok(())
    }

    /// Canonical TOML text; the config hash is taken over it.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn master_seed(&self) -> u64 {
        self.cli_reporting.seed
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.master_seed(), stage)
    }

    /// Sensitive prefixes to scrub, always including the audited code.
    pub fn sensitive_codes(&self) -> Vec<String> {
        let mut codes = self.event_model.sensitive_codes.clone();
        if !codes.iter().any(|c| c == &self.cohort_builder.sensitive_code) {
            codes.push(self.cohort_builder.sensitive_code.clone());
        }
        codes
    }

    pub fn label(&self) -> String {
        self.cli_reporting
            .label
            .clone()
            .unwrap_or_else(|| self.cohort_builder.sensitive_code.clone())
    }

    pub fn cohort_spec(&self, seed: u64) -> CohortSpec {
        let c = &self.cohort_builder;
        CohortSpec {
            sensitive_code: c.sensitive_code.clone(),
            case_cap: c.case_cap,
            control_pool_size: c.control_pool_size,
            matching_mode: c.matching_mode,
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let c = &self.classifier;
        TrainConfig {
            lambda: c.lambda,
            max_iterations: c.max_iterations,
            gradient_tolerance: c.gradient_tolerance,
            seed,
            init_scale: c.init_scale,
        }
    }

    pub fn ablation_config(&self) -> AblationConfig {
        AblationConfig {
            train: self.train_config(self.stage_seed("classifier")),
            metric: self.feature_scoring.metric,
            scope: self.feature_scoring.scope,
            threshold: self.evaluation.threshold,
            decline: self.ablation_engine.thresholds(),
            top_n: self.ablation_engine.top_n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.cli_reporting.seed = 42;
        cfg.event_model.log = Some("events.csv".into());
        cfg.ablation_engine.decline_preset = DeclinePreset::Narrow;
        let text = cfg.to_toml();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::parse("[classifier]\nlamda = 2.0\n").is_err());
        assert!(RunConfig::parse("[evaluation]\nn_folds = 1\n").is_err());
        assert!(RunConfig::parse("[ablation_engine]\nschedule = [10, 20]\n").is_err());
    }

    #[test]
    fn target_code_is_always_scrubbed() {
        let mut cfg = RunConfig::default();
        cfg.event_model.sensitive_codes = vec!["042".into()];
        cfg.cohort_builder.sensitive_code = "V61".into();
        assert_eq!(cfg.sensitive_codes(), vec!["042".to_string(), "V61".to_string()]);
    }

    #[test]
    fn stage_seeds_differ() {
        let cfg = RunConfig::default();
        assert_ne!(cfg.stage_seed("a"), cfg.stage_seed("b"));
    }
}
