//! Run configuration: a TOML file with nested sections, every field
//! defaulted so minimal configs work. The full config is embedded in every
//! checkpoint for exact reproduction.

use serde::{Deserialize, Serialize};

use crate::autodiff::{SpikeFunctionConfig, SpikeMode};
use crate::error::{Error, Result};
use crate::networks::{CnnConfig, RuleKind};
use crate::neuron::NeuronParams;
use crate::plasticity::TraceForm;
use crate::tasks::{CharacterEpisodeSpec, CueEpisodeSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Cue,
    Character,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optional evaluation-driven early stop inside the update budget.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct StoppingConfig {
    /// Evaluate every this many updates (0 = never).
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Stop once eval accuracy reaches this (0 = run the full budget).
    pub stop_accuracy: f64,
}

impl Default for StoppingConfig {
    fn default() -> Self {
        StoppingConfig { eval_every: 0, eval_episodes: 200, stop_accuracy: 0.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DpConfig {
    pub n_hidden: usize,
    pub rule: Option<RuleKind>,
    pub density: f64,
    pub inhib_frac: f64,
    pub w_init_scale: f64,
    pub w_max: f64,
    pub mu: f64,
    pub trace_form: TraceForm,
    pub trace_x_max: f64,
    pub neuron: NeuronParams,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            n_hidden: 48,
            rule: None, // per-task default: pair for cue, triplet for character
            density: 0.5,
            inhib_frac: 0.2,
            w_init_scale: 0.5,
            w_max: 2.0,
            mu: 0.0,
            trace_form: TraceForm::Linear,
            trace_x_max: 2.0,
            neuron: NeuronParams::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NmConfig {
    pub n_l1: usize,
    pub n_l2: usize,
    pub w_init_scale: f64,
    pub readout_init_scale: f64,
    pub neuron: NeuronParams,
}

impl Default for NmConfig {
    fn default() -> Self {
        NmConfig {
            n_l1: 64,
            n_l2: 64,
            w_init_scale: 0.4,
            readout_init_scale: 0.01,
            neuron: NeuronParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub mode: SpikeMode,
    /// Exponential surrogate width; also the logistic temperature in smooth mode.
    pub scale: f64,
    pub magnitude: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig { mode: SpikeMode::Hard, scale: 0.25, magnitude: 0.3 }
    }
}

impl SurrogateConfig {
    pub fn spike(&self) -> SpikeFunctionConfig {
        SpikeFunctionConfig {
            mode: self.mode,
            surrogate_scale: self.scale,
            surrogate_magnitude: self.magnitude,
        }
    }
}

/// Initial values of the learnable plasticity constants.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct PlasticityInit {
    pub eta_plus: f64,
    pub eta_minus: f64,
    pub alpha_x: f64,
    pub beta: f64,
    pub alpha_slow: f64,
    pub beta_slow: f64,
    /// Per-synapse rate arrays when true, single scalars when false.
    pub per_synapse_eta: bool,
}

impl Default for PlasticityInit {
    fn default() -> Self {
        PlasticityInit {
            eta_plus: 0.05,
            eta_minus: 0.05,
            alpha_x: 0.85,
            beta: 0.8,
            alpha_slow: 0.97,
            beta_slow: 0.8,
            per_synapse_eta: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct EligibilityInit {
    pub gamma: f64,
    pub alpha_e: f64,
}

impl Default for EligibilityInit {
    fn default() -> Self {
        EligibilityInit { gamma: 0.98, alpha_e: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CharacterTaskConfig {
    pub episode: CharacterEpisodeSpec,
    /// Manifest path; empty means a synthetic corpus is generated under out_dir.
    pub manifest: String,
    pub augment: bool,
    pub test_frac: f64,
    /// Classes in the generated synthetic corpus (pre-augmentation) when no
    /// manifest is given.
    pub synthetic_classes: usize,
    pub synthetic_samples: usize,
}

impl Default for CharacterTaskConfig {
    fn default() -> Self {
        CharacterTaskConfig {
            episode: CharacterEpisodeSpec::default(),
            manifest: String::new(),
            augment: true,
            test_frac: 0.2,
            synthetic_classes: 130,
            synthetic_samples: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// Run with the modulation forcibly zeroed: the plastic pathway is dead
    /// and only the remaining parameters train.
    pub zero_modulation: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { zero_modulation: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub seed: u64,
    pub updates: u64,
    pub batch_episodes: usize,
    /// Worker threads for episode parallelism (0 = library default).
    /// Results are identical for every value by construction.
    pub threads: usize,
    pub checkpoint_every: u64,
    pub out_dir: String,
    pub readout_init: f64,
    pub w_out_init_scale: f64,
    pub optimizer: OptimizerConfig,
    pub stopping: StoppingConfig,
    pub cue: CueEpisodeSpec,
    pub character: CharacterTaskConfig,
    pub dp: DpConfig,
    pub nm: NmConfig,
    pub surrogate: SurrogateConfig,
    pub plasticity: PlasticityInit,
    pub eligibility: EligibilityInit,
    pub cnn: CnnConfig,
    pub ablation: AblationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: TaskKind::Cue,
            seed: 42,
            updates: 1000,
            batch_episodes: 64,
            threads: 0,
            checkpoint_every: 200,
            out_dir: String::new(),
            readout_init: 0.1,
            w_out_init_scale: 0.3,
            optimizer: OptimizerConfig::default(),
            stopping: StoppingConfig::default(),
            cue: CueEpisodeSpec::default(),
            character: CharacterTaskConfig::default(),
            dp: DpConfig::default(),
            nm: NmConfig::default(),
            surrogate: SurrogateConfig::default(),
            plasticity: PlasticityInit::default(),
            eligibility: EligibilityInit::default(),
            cnn: CnnConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Effective STDP rule: the per-task default unless overridden.
    pub fn rule(&self) -> RuleKind {
        self.dp.rule.unwrap_or(match self.task {
            TaskKind::Cue => RuleKind::Pair,
            TaskKind::Character => RuleKind::Triplet,
        })
    }

    /// Output layer width: two action neurons for the cue task, one match
    /// neuron for characters.
    pub fn n_output(&self) -> usize {
        match self.task {
            TaskKind::Cue => 2,
            TaskKind::Character => 1,
        }
    }

    /// DP-SNN input layer width.
    pub fn n_input(&self) -> usize {
        match self.task {
            TaskKind::Cue => self.cue.n_sensory,
            TaskKind::Character => self.cnn.flatten_dim(),
        }
    }

    /// NM-SNN input width: sensory ⊕ DP hidden ⊕ feedback (cue only).
    pub fn n_nm_input(&self) -> usize {
        let fb = match self.task {
            TaskKind::Cue => 2,
            TaskKind::Character => 0,
        };
        self.n_input() + self.dp.n_hidden + fb
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_episodes == 0 {
            return Err(Error::Config("batch_episodes must be at least 1".into()));
        }
        if self.optimizer.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.dp.neuron.validate()?;
        self.nm.neuron.validate()?;
        self.surrogate.spike().validate()?;
        self.cue.validate()?;
        if self.task == TaskKind::Character && self.cnn.flatten_dim() == 0 {
            return Err(Error::Config("cnn flatten dimension is zero".into()));
        }
        if !(0.0..1.0).contains(&self.character.test_frac) || self.character.test_frac == 0.0 {
            return Err(Error::Config("character test_frac must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = TrainConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = TrainConfig::from_toml(&text).unwrap();
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = TrainConfig::from_toml("task = \"character\"\nseed = 7\n").unwrap();
        assert_eq!(cfg.task, TaskKind::Character);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.n_output(), 1);
        assert_eq!(cfg.n_input(), 196);
        assert!(matches!(cfg.rule(), RuleKind::Triplet));
    }

    #[test]
    fn cue_widths() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.n_input(), 20);
        assert_eq!(cfg.n_output(), 2);
        assert_eq!(cfg.n_nm_input(), 20 + 48 + 2);
    }

    #[test]
    fn bad_config_rejected() {
        assert!(TrainConfig::from_toml("batch_episodes = 0\n").is_err());
        assert!(TrainConfig::from_toml("task = \"juggling\"\n").is_err());
    }
}
