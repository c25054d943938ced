//! Experiment configuration: a sectioned TOML file where every key has a
//! default, so an empty file describes the standard experiment grid.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use treeres::bench::Protocol;
use treeres::genie::GenieParams;
use treeres::model::ModelConfig;
use treeres::rtdp::RtdpParams;
use treeres::sim::{FinishMode, FramePlan, SlotAccounting};

#[derive(Debug, Error)]
#[error("configuration error: {0}")]
pub struct ConfigError(pub String);

impl ConfigError {
    pub fn new(msg: impl Into<String>) -> Self {
        ConfigError(msg.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub solver: SolverSection,
    pub traffic: TrafficSection,
    pub accounting: AccountingSection,
    pub run: RunSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_max: usize,
    pub m_cap: usize,
    /// Maximum transmitting clusters per slot; 0 lifts the limit.
    pub support_limit: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { n_max: 5, m_cap: 15, support_limit: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Genie,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub d: u32,
    pub q: u32,
    pub epsilon: f64,
    pub max_sweeps: usize,
    pub trials: usize,
    pub init: InitKind,
    /// Distribution of the number of contenders (1, 2, ...) used for training.
    pub prior: Vec<f64>,
    pub max_slots: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            d: 10,
            q: 10,
            epsilon: 1e-6,
            max_sweeps: 10_000,
            trials: 4_000,
            init: InitKind::Genie,
            prior: vec![0.1, 0.1, 0.3, 0.3, 0.2],
            max_slots: treeres::rtdp::DEFAULT_SLOT_CAP,
        }
    }
}

/// A frame strategy written as `"dynamic"` or `"fixed:<slots>"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FrameSpec(pub FramePlan);

impl TryFrom<String> for FrameSpec {
    type Error = ConfigError;

    fn try_from(s: String) -> Result<Self, ConfigError> {
        s.parse()
    }
}

impl std::str::FromStr for FrameSpec {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        let s = s.trim();
        if s == "dynamic" {
            return Ok(FrameSpec(FramePlan::Dynamic));
        }
        let t = s
            .strip_prefix("fixed:")
            .and_then(|t| t.parse::<u64>().ok())
            .filter(|&t| t > 0)
            .ok_or_else(|| ConfigError::new(format!("frame mode must be \"dynamic\" or \"fixed:<T>\" with T > 0, got {s:?}")))?;
        Ok(FrameSpec(FramePlan::Fixed(t)))
    }
}

impl fmt::Display for FrameSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            FramePlan::Dynamic => f.write_str("dynamic"),
            FramePlan::Fixed(t) => write!(f, "fixed:{t}"),
        }
    }
}

impl From<FrameSpec> for String {
    fn from(f: FrameSpec) -> String {
        f.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficSection {
    pub lambdas: Vec<f64>,
    pub frames: Vec<FrameSpec>,
    pub n_terminals: usize,
    pub span_slots: u64,
}

impl Default for TrafficSection {
    fn default() -> Self {
        TrafficSection {
            lambdas: (1..=13).map(|i| i as f64 * 0.025).collect(),
            frames: vec![FrameSpec(FramePlan::Dynamic)],
            n_terminals: 5,
            span_slots: 20_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishKind {
    Piggyback,
    Dedicated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccountingSection {
    pub rho: Vec<u64>,
    pub finish_mode: FinishKind,
    pub w_max: u64,
    /// Failed benchmark attempts last one slot instead of a data slot.
    pub unit_failures: bool,
}

impl Default for AccountingSection {
    fn default() -> Self {
        AccountingSection { rho: vec![3], finish_mode: FinishKind::Piggyback, w_max: 1024, unit_failures: false }
    }
}

/// Protocols a sweep can run: the reservation protocol or a baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Proposed,
    Aloha,
    Stack,
    CsmaCa,
}

impl ProtocolKind {
    pub fn baseline(self) -> Option<Protocol> {
        match self {
            ProtocolKind::Proposed => None,
            ProtocolKind::Aloha => Some(Protocol::Aloha),
            ProtocolKind::Stack => Some(Protocol::Stack),
            ProtocolKind::CsmaCa => Some(Protocol::CsmaCa),
        }
    }

    pub fn name(self) -> &'static str {
        match self.baseline() {
            None => "proposed",
            Some(p) => p.name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub protocols: Vec<ProtocolKind>,
    /// Accept offered loads λρ above one.
    pub allow_unstable: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seeds: (0..5).collect(),
            protocols: vec![ProtocolKind::Proposed, ProtocolKind::Aloha, ProtocolKind::Stack, ProtocolKind::CsmaCa],
            allow_unstable: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("out") }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::new(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn render(&self) -> String {
        toml::to_string(self).expect("configuration is always representable")
    }

    /// SHA-256 of the rendered configuration, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        if m.n_max == 0 || m.n_max > u8::MAX as usize {
            return Err(ConfigError::new(format!("model.n_max must be in 1..=255, got {}", m.n_max)));
        }
        if m.m_cap == 0 {
            return Err(ConfigError::new("model.m_cap must be positive"));
        }
        let s = &self.solver;
        if s.d == 0 || s.q == 0 {
            return Err(ConfigError::new("solver.d and solver.q must be positive"));
        }
        if !(s.epsilon > 0.0) {
            return Err(ConfigError::new(format!("solver.epsilon must be positive, got {}", s.epsilon)));
        }
        Ok(())
    }

    /// Checks used by the simulation commands: traffic, accounting and load.
    pub fn validate_traffic(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        let t = &self.traffic;
        if t.lambdas.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(ConfigError::new("traffic.lambdas must be positive"));
        }
        if t.n_terminals == 0 || t.n_terminals > m.n_max {
            return Err(ConfigError::new(format!(
                "traffic.n_terminals must be in 1..=model.n_max ({}), got {}",
                m.n_max, t.n_terminals
            )));
        }
        if t.span_slots == 0 {
            return Err(ConfigError::new("traffic.span_slots must be positive"));
        }
        let a = &self.accounting;
        if a.rho.contains(&0) || a.w_max == 0 {
            return Err(ConfigError::new("accounting.rho and accounting.w_max must be positive"));
        }
        if !self.run.allow_unstable {
            for &lambda in &t.lambdas {
                for &rho in &a.rho {
                    if lambda * rho as f64 > 1.0 {
                        return Err(ConfigError::new(format!(
                            "offered load lambda*rho = {lambda}*{rho} exceeds 1; pass --allow-unstable to run it anyway"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// The training prior is only needed by `train`.
    pub fn validate_prior(&self) -> Result<(), ConfigError> {
        let p = &self.solver.prior;
        if p.is_empty() || p.len() > self.model.n_max || p.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(ConfigError::new("solver.prior needs 1..=n_max probabilities in [0, 1]"));
        }
        if (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(ConfigError::new("solver.prior must sum to one"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { n_max: self.model.n_max, m_cap: self.model.m_cap, cap_in_place: true }
    }

    pub fn support_limit(&self) -> Option<usize> {
        (self.model.support_limit > 0).then_some(self.model.support_limit)
    }

    pub fn genie_params(&self) -> GenieParams {
        GenieParams {
            d: self.solver.d,
            support_limit: self.support_limit(),
            epsilon: self.solver.epsilon,
            max_sweeps: self.solver.max_sweeps,
        }
    }

    pub fn rtdp_params(&self) -> RtdpParams {
        RtdpParams { d: self.solver.d, support_limit: self.support_limit(), max_slots: self.solver.max_slots }
    }

    pub fn accounting_for(&self, rho: u64) -> SlotAccounting {
        let finish_mode = match self.accounting.finish_mode {
            FinishKind::Piggyback => FinishMode::Piggyback,
            FinishKind::Dedicated => FinishMode::DedicatedSlot,
        };
        SlotAccounting { rho, finish_mode }
    }
}
