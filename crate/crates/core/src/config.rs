//! TOML run configuration and the bundled presets.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chunk::StallPolicy;
use crate::cloud::{CloudModelConfig, DEFAULT_TIMEOUT_MS};
use crate::error::{RapidError, Result};
use crate::scenario::{Scenario, Segment, Task};
use crate::sim::{EpisodeConfig, LatencyProfile, DEFAULT_ENTROPY_THRESHOLD_BITS};
use crate::trigger::TriggerConfig;

const PRESETS: [(&str, &str); 3] = [
    ("sim", include_str!("../presets/sim.toml")),
    ("real", include_str!("../presets/real.toml")),
    ("noise", include_str!("../presets/noise.toml")),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

/// Scenario either generated from a task profile or spelled out segment
/// by segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub task: Option<Task>,
    #[serde(default)]
    pub segments: Option<Vec<Segment>>,
    pub n_joints: usize,
    pub duration_s: f64,
    #[serde(default = "default_sensor_hz")]
    pub sensor_hz: u32,
    #[serde(default = "default_control_hz")]
    pub control_hz: u32,
    #[serde(default)]
    pub noise_level: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_sensor_hz() -> u32 {
    500
}

fn default_control_hz() -> u32 {
    20
}

impl ScenarioSpec {
    pub fn build(&self) -> Result<Scenario> {
        let mut sc = match (&self.task, &self.segments) {
            (Some(task), None) => {
                let mut sc = Scenario::for_task(*task, self.n_joints, self.duration_s, self.seed)?;
                sc.sensor_hz = self.sensor_hz;
                sc.control_hz = self.control_hz;
                sc
            }
            (None, Some(segments)) => Scenario {
                id: String::new(),
                n_joints: self.n_joints,
                duration_s: self.duration_s,
                sensor_hz: self.sensor_hz,
                control_hz: self.control_hz,
                segments: segments.clone(),
                noise_level: 0.0,
                seed: self.seed,
            },
            _ => {
                return Err(RapidError::Config(
                    "scenario needs exactly one of `task` or `segments`".into(),
                ))
            }
        };
        sc.noise_level = self.noise_level;
        if let Some(id) = &self.id {
            sc.id = id.clone();
        } else if sc.id.is_empty() {
            sc.id = format!("custom-n{}-s{}", self.n_joints, self.seed);
        }
        sc.validate()?;
        Ok(sc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseReference {
    pub noise_level: f64,
    pub vision_entropy: f64,
}

/// Published mean total latencies (ms) the preset was fit to, keyed by
/// policy name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct References {
    #[serde(default)]
    pub noise: Vec<NoiseReference>,
    #[serde(flatten)]
    pub totals: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub addr: String,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            addr: "127.0.0.1:7878".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub trigger: TriggerConfig,
    #[serde(default)]
    pub cloud: CloudModelConfig,
    pub latency: LatencyProfile,
    #[serde(default = "default_threshold")]
    pub vision_threshold_bits: f64,
    #[serde(default)]
    pub stall_policy: StallPolicy,
    #[serde(default = "default_timeout")]
    pub timeout_ms: f64,
    #[serde(default)]
    pub server: ServerConfig,
    #[serde(default)]
    pub reference: References,
}

fn default_threshold() -> f64 {
    DEFAULT_ENTROPY_THRESHOLD_BITS
}

fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT_MS
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| RapidError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RapidError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| RapidError::Config(format!("unknown preset {name:?}")))?;
        Self::parse(text)
    }

    /// A preset name or a path to a TOML file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if preset_names().any(|n| n == name_or_path) {
            Self::preset(name_or_path)
        } else {
            Self::load(Path::new(name_or_path))
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.trigger.validate()?;
        self.latency.validate()?;
        let mut cloud = self.cloud.clone();
        cloud.n_joints = self.scenario.n_joints;
        cloud.validate()?;
        if !(self.timeout_ms > 0.0) {
            return Err(RapidError::Config("timeout_ms must be > 0".into()));
        }
        if !(self.vision_threshold_bits >= 0.0) {
            return Err(RapidError::Config("vision_threshold_bits must be >= 0".into()));
        }
        self.scenario.build().map(|_| ())
    }

    /// Episode settings; the cloud model's joint count follows the scenario.
    pub fn episode_config(&self) -> EpisodeConfig {
        let mut cloud = self.cloud.clone();
        cloud.n_joints = self.scenario.n_joints;
        EpisodeConfig {
            stall_policy: self.stall_policy,
            timeout_ms: self.timeout_ms,
            ..EpisodeConfig::new(self.trigger.clone(), self.latency, cloud)
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| RapidError::Parse(e.to_string()))
    }
}
