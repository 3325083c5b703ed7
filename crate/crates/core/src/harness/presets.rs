//! Scenario presets shipped with the crate.

use super::config::ExperimentConfig;
use super::run::SweepParam;
use crate::error::{Error, Result};

/// What running a preset does.
#[derive(Clone, Debug, PartialEq)]
pub enum PresetAction {
    Single,
    Sweep { param: SweepParam, values: Vec<f64> },
    PerClient,
}

pub struct Preset {
    pub name: &'static str,
    pub text: &'static str,
    pub action: fn() -> PresetAction,
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "homogeneous",
        text: include_str!("../../presets/homogeneous.toml"),
        action: || PresetAction::Single,
    },
    Preset {
        name: "two-group",
        text: include_str!("../../presets/two-group.toml"),
        action: || PresetAction::Single,
    },
    Preset {
        name: "fig1-sweep",
        text: include_str!("../../presets/fig1-sweep.toml"),
        action: || PresetAction::PerClient,
    },
    Preset {
        name: "table3-dirichlet",
        text: include_str!("../../presets/table3-dirichlet.toml"),
        action: || PresetAction::Sweep {
            param: SweepParam::Alpha,
            values: vec![0.1, 0.4, 0.7],
        },
    },
    Preset {
        name: "fairness-demo",
        text: include_str!("../../presets/fairness-demo.toml"),
        action: || PresetAction::Single,
    },
];

pub fn names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.name).collect()
}

pub fn find(name: &str) -> Result<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name).ok_or_else(|| {
        Error::config(format!(
            "unknown preset '{name}' (available: {})",
            names().join(", ")
        ))
    })
}

/// Parsed configuration of a preset.
pub fn config(name: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml(find(name)?.text)
}

/// Parsed configuration and action of a preset.
pub fn load(name: &str) -> Result<(ExperimentConfig, PresetAction)> {
    let p = find(name)?;
    Ok((ExperimentConfig::from_toml(p.text)?, (p.action)()))
}
