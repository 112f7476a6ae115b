//! Experiment configuration file and run manifest.
//!
//! The config is TOML. Every section is optional and every key inside a
//! section falls back to its default; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ChannelReduction, LabelRule, WindowConfig};
use crate::distillation::DistillConfig;
use crate::error::{KdisError, Result};
use crate::network::{Activation, ArchitectureSpec, ConvLayerSpec, DenseLayerSpec};
use crate::numerics::fnv1a64;
use crate::orchestrator::{ExperimentSettings, TrainConfig};
use crate::parallel::Execution;
use crate::synthesizer::{ScenarioConfig, TrialLayout, UnitProfile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSection {
    pub n: usize,
    pub v: usize,
    pub reduction: ChannelReduction,
    pub label_rule: LabelRule,
}

impl Default for WindowSection {
    fn default() -> Self {
        let w = WindowConfig::default();
        Self {
            n: w.n,
            v: w.v,
            reduction: ChannelReduction::default(),
            label_rule: LabelRule::default(),
        }
    }
}

impl WindowSection {
    pub fn window(&self) -> Result<WindowConfig> {
        WindowConfig::new(self.n, self.v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub alpha: f64,
    pub temperature: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self {
            alpha: d.alpha,
            temperature: d.temperature,
        }
    }
}

/// Architecture overrides; missing keys keep the default network.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSection {
    pub input_channels: Option<usize>,
    pub input_length: Option<usize>,
    pub conv_layers: Option<Vec<ConvLayerSpec>>,
    pub dense_layers: Option<Vec<DenseLayerSpec>>,
    pub hidden_activation: Option<Activation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs_teacher: usize,
    /// Student epochs for case 1 and case 2.
    pub epochs_student: [usize; 2],
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Seed for initialization and data order; `--seed` overrides it.
    pub seed: u64,
    /// Train folds and students on the thread pool.
    pub parallel: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs_teacher: 5,
            epochs_student: [50, 70],
            batch_size: 32,
            learning_rate: 0.01,
            seed: 0,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    /// Sensor CSV to read instead of generating the scenario.
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub window: WindowSection,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub net: NetSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default = "default_scenario")]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub io: IoSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            window: WindowSection::default(),
            distill: DistillSection::default(),
            net: NetSection::default(),
            train: TrainSection::default(),
            scenario: default_scenario(),
            io: IoSection::default(),
        }
    }
}

fn unit(id: &str, base_frequency: f64) -> UnitProfile {
    UnitProfile {
        unit_id: id.to_string(),
        base_frequency,
        base_amplitude: 1.0,
        noise_std: 0.3,
        anomaly_amp_gain: 2.25,
        anomaly_freq_shift: 0.02,
        trial_count: 5,
        trial_length: 200,
        trial_amp_jitter: 0.55,
        trial_freq_jitter: 0.0,
    }
}

/// Two units with five trials each; the second runs 15% faster. Same as
/// `fixtures/shifted_two_unit.toml`.
pub fn default_scenario() -> ScenarioConfig {
    ScenarioConfig {
        units: vec![unit("printer-1", 0.05), unit("printer-2", 0.0575)],
        rich_unit_id: "printer-1".to_string(),
        layout: TrialLayout::PerClassTrials,
        anomaly_onset_fraction: 0.425,
        seed: 7,
    }
}

impl ExperimentConfig {
    /// Parses and validates; relative `io` paths are resolved against
    /// `base_dir`.
    pub fn from_toml(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| KdisError::Config(e.to_string()))?;
        if let Some(base) = base_dir {
            for p in [&mut cfg.io.data, &mut cfg.io.out_dir]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KdisError::io(path, e))?;
        Self::from_toml(&text, path.parent())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every downstream invariant; violations become config errors.
    pub fn validate(&self) -> Result<()> {
        let as_config = |e: KdisError| match e {
            KdisError::Config(m) => KdisError::Config(m),
            other => KdisError::Config(other.to_string()),
        };
        let window = self.window.window().map_err(as_config)?;
        self.distill_config().map_err(as_config)?;
        let spec = self.architecture().map_err(as_config)?;
        if spec.input_length != window.n {
            return Err(KdisError::Config(format!(
                "network input length {} differs from window size {}",
                spec.input_length, window.n
            )));
        }
        self.train_config(0, None).map_err(as_config)?;
        if self.train.epochs_teacher == 0 || self.train.epochs_student.contains(&0) {
            return Err(KdisError::Config("epoch counts must be positive".into()));
        }
        self.scenario.validate(window.n).map_err(as_config)?;
        Ok(())
    }

    pub fn distill_config(&self) -> Result<DistillConfig> {
        DistillConfig::new(self.distill.temperature, self.distill.alpha)
    }

    pub fn architecture(&self) -> Result<ArchitectureSpec> {
        let d = ArchitectureSpec::default();
        let n = &self.net;
        ArchitectureSpec::new(
            n.input_channels.unwrap_or(d.input_channels),
            n.input_length.unwrap_or(d.input_length),
            n.conv_layers.clone().unwrap_or(d.conv_layers),
            n.dense_layers.clone().unwrap_or(d.dense_layers),
            n.hidden_activation.unwrap_or(d.hidden_activation),
        )
    }

    /// Shared batch size, learning rate and seed with the given epoch
    /// budget and optional distillation.
    pub fn train_config(
        &self,
        epochs: usize,
        distill: Option<DistillConfig>,
    ) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            shuffle_seed: self.train.seed,
            distill,
            early_stop: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Settings for case `case` (0 or 1), which picks the student epoch
    /// budget.
    pub fn experiment_settings(
        &self,
        case: usize,
        seed: u64,
        execution: Execution,
    ) -> Result<ExperimentSettings> {
        let epochs = *self
            .train
            .epochs_student
            .get(case)
            .ok_or_else(|| KdisError::invalid(format!("case index {case} out of range")))?;
        Ok(ExperimentSettings {
            window: self.window.window()?,
            reduction: self.window.reduction,
            label_rule: self.window.label_rule,
            spec: self.architecture()?,
            teacher: self.train_config(self.train.epochs_teacher, None)?,
            student: self.train_config(epochs, Some(self.distill_config()?))?,
            seed,
            execution,
        })
    }

    /// FNV-1a over the canonical JSON form of the resolved config.
    pub fn digest(&self) -> u64 {
        fnv1a64(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

/// Written next to the outputs of every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub config_digest: String,
    pub seed: u64,
    /// Fully resolved config, defaults included.
    pub config: ExperimentConfig,
    /// Output files relative to the output directory.
    pub outputs: Vec<String>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest: format!("{:016x}", config.digest()),
            seed,
            config: config.clone(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("", None).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.window.n, 30);
        assert_eq!(cfg.window.v, 28);
        assert_eq!(cfg.distill.alpha, 0.7);
        assert_eq!(cfg.distill.temperature, 15.0);
        assert_eq!(cfg.train.epochs_teacher, 5);
        assert_eq!(cfg.train.epochs_student, [50, 70]);
        assert_eq!(cfg.architecture().unwrap(), ArchitectureSpec::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml("[window]\nsize = 30\n", None),
            Err(KdisError::Config(_))
        ));
        assert!(ExperimentConfig::from_toml("bogus = 1\n", None).is_err());
        assert!(ExperimentConfig::from_toml("[train]\nepoch = 3\n", None).is_err());
    }

    #[test]
    fn overlap_not_below_window_rejected() {
        let err = ExperimentConfig::from_toml("[window]\nn = 30\nv = 30\n", None).unwrap_err();
        assert!(matches!(err, KdisError::Config(_)));
    }

    #[test]
    fn window_and_network_must_agree() {
        assert!(ExperimentConfig::from_toml("[window]\nn = 20\nv = 18\n", None).is_err());
    }

    #[test]
    fn round_trip_is_idempotent() {
        let text = "[distill]\nalpha = 0.5\n[train]\nseed = 9\nepochs_student = [3, 4]\n";
        let a = ExperimentConfig::from_toml(text, None).unwrap();
        let b = ExperimentConfig::from_toml(&a.to_toml(), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_toml(), b.to_toml());
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn default_scenario_matches_fixture() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/shifted_two_unit.toml");
        let fixture = ExperimentConfig::load(&path).unwrap();
        assert_eq!(fixture, ExperimentConfig::default());
    }

    #[test]
    fn relative_io_paths_resolve_against_base() {
        let cfg = ExperimentConfig::from_toml("[io]\ndata = \"d.csv\"\n", Some(Path::new("/x/y")))
            .unwrap();
        assert_eq!(cfg.io.data.unwrap(), PathBuf::from("/x/y/d.csv"));
    }
}
