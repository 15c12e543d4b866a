use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Closed set of interaction classes for functional interactive elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Affordance {
    #[serde(rename = "Rotate")]
    Rotate,
    #[serde(rename = "Hook Pull")]
    HookPull,
    #[serde(rename = "Hook Turn")]
    HookTurn,
    #[serde(rename = "Key Press")]
    KeyPress,
    #[serde(rename = "Tip Push")]
    TipPush,
    #[serde(rename = "Pinch Pull")]
    PinchPull,
    #[serde(rename = "Foot Push")]
    FootPush,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AffordanceError {
    /// Labels that exist in source datasets but are deliberately not modeled.
    #[error("affordance label {0:?} is excluded")]
    Excluded(String),
    #[error("unknown affordance label {0:?}")]
    Unknown(String),
}

impl Affordance {
    pub const ALL: [Affordance; 7] = [
        Affordance::Rotate,
        Affordance::HookPull,
        Affordance::HookTurn,
        Affordance::KeyPress,
        Affordance::TipPush,
        Affordance::PinchPull,
        Affordance::FootPush,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Affordance::Rotate => "Rotate",
            Affordance::HookPull => "Hook Pull",
            Affordance::HookTurn => "Hook Turn",
            Affordance::KeyPress => "Key Press",
            Affordance::TipPush => "Tip Push",
            Affordance::PinchPull => "Pinch Pull",
            Affordance::FootPush => "Foot Push",
        }
    }

    /// Position in [`Affordance::ALL`], used as the class index of label exports.
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&a| a == self).unwrap()
    }
}

impl fmt::Display for Affordance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Affordance {
    type Err = AffordanceError;

    /// Accepts display names and snake/kebab spellings, case-insensitively.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match norm.as_str() {
            "rotate" => Ok(Affordance::Rotate),
            "hookpull" => Ok(Affordance::HookPull),
            "hookturn" => Ok(Affordance::HookTurn),
            "keypress" => Ok(Affordance::KeyPress),
            "tippush" => Ok(Affordance::TipPush),
            "pinchpull" => Ok(Affordance::PinchPull),
            "footpush" => Ok(Affordance::FootPush),
            "unplug" | "plugin" => Err(AffordanceError::Excluded(s.to_string())),
            _ => Err(AffordanceError::Unknown(s.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_names_and_variants() {
        for a in Affordance::ALL {
            assert_eq!(a.name().parse::<Affordance>().unwrap(), a);
        }
        assert_eq!(
            "hook_pull".parse::<Affordance>().unwrap(),
            Affordance::HookPull
        );
        assert_eq!(
            "FOOT-PUSH".parse::<Affordance>().unwrap(),
            Affordance::FootPush
        );
        assert!(matches!(
            "plug_in".parse::<Affordance>(),
            Err(AffordanceError::Excluded(_))
        ));
        assert!(matches!(
            "unplug".parse::<Affordance>(),
            Err(AffordanceError::Excluded(_))
        ));
        assert!(matches!(
            "knob".parse::<Affordance>(),
            Err(AffordanceError::Unknown(_))
        ));
    }

    #[test]
    fn serde_uses_display_names() {
        assert_eq!(
            serde_json::to_string(&Affordance::TipPush).unwrap(),
            "\"Tip Push\""
        );
    }
}
